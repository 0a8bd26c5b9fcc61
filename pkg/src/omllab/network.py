"""Fully connected RLN/PLN networks and their checkpoint format.

A network is a stack of affine layers with rectifiers between them. The first
``rln_depth`` layers form the representation network (parameters ``theta``),
the rest form the prediction network (parameters ``w``). The representation is
taken after the rectifier of layer ``rln_depth``; the final layer is linear.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Value, add, matmul, mse, relu, softmax_cross_entropy
from .errors import ConfigError, DimensionError

MANIFEST_NAME = "manifest.txt"
PARAMS_NAME = "params.bin"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    widths: tuple[int, ...]
    rln_depth: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.widths):
            raise ConfigError("layer widths must be positive", field="widths")
        if not 1 <= self.rln_depth < self.n_layers:
            raise ConfigError(
                f"rln_depth must be in [1, {self.n_layers - 1}], got {self.rln_depth}",
                field="rln_depth",
            )
        if self.activation != "relu":
            raise ConfigError("only relu is supported", field="activation")

    @property
    def n_layers(self) -> int:
        return len(self.widths) + 1

    @property
    def rep_dim(self) -> int:
        return self.widths[self.rln_depth - 1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def with_rln_depth(self, depth: int) -> "NetworkSpec":
        return NetworkSpec(self.input_dim, self.output_dim, self.widths, depth, self.activation)


@dataclass
class ParameterSet:
    """RLN parameters ``theta`` and PLN parameters ``w``, each as
    ``[weight_1, bias_1, weight_2, bias_2, ...]``."""

    spec: NetworkSpec
    theta: list[Value]
    w: list[Value]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def all(self) -> list[Value]:
        return [*self.theta, *self.w]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.all()])

    def with_w(self, w: list[Value]) -> "ParameterSet":
        return ParameterSet(self.spec, self.theta, list(w), self.seed, dict(self.meta))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def init_layers(shapes, rng: np.random.Generator) -> list[Value]:
    """He-uniform weights, zero biases."""
    params = []
    for fan_in, fan_out in shapes:
        bound = np.sqrt(6.0 / fan_in)
        params.append(Value(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        params.append(Value(np.zeros(fan_out), requires_grad=True))
    return params


def build(spec: NetworkSpec, seed) -> ParameterSet:
    rng = _rng(seed)
    params = init_layers(spec.layer_shapes(), rng)
    cut = 2 * spec.rln_depth
    return ParameterSet(spec, params[:cut], params[cut:], seed if isinstance(seed, int) else None)


def init_pln(spec: NetworkSpec, rng) -> list[Value]:
    """Fresh random PLN parameters for ``spec``."""
    return init_layers(spec.layer_shapes()[spec.rln_depth:], _rng(rng))


def _stack(x: Value, params, final_linear: bool) -> Value:
    h = x
    n = len(params) // 2
    for i in range(n):
        h = add(matmul(h, params[2 * i]), params[2 * i + 1])
        if not (final_linear and i == n - 1):
            h = relu(h)
    return h


def representation(x, theta: list[Value]) -> Value:
    """Post-rectifier output of the last RLN layer."""
    x = x if isinstance(x, Value) else Value(x)
    if x.data.ndim != 2 or x.shape[1] != theta[0].shape[0]:
        raise DimensionError(f"input shape {x.shape} does not match RLN input width {theta[0].shape[0]}")
    return _stack(x, theta, final_linear=False)


def pln_forward(h, w: list[Value]) -> Value:
    h = h if isinstance(h, Value) else Value(h)
    if h.data.ndim != 2 or h.shape[1] != w[0].shape[0]:
        raise DimensionError(f"representation shape {h.shape} does not match PLN input {w[0].shape[0]}")
    return _stack(h, w, final_linear=True)


def predict(x, theta: list[Value], w: list[Value]) -> Value:
    return pln_forward(representation(x, theta), w)


def detached(params: list[Value]) -> list[Value]:
    """Fresh leaves with the same data; cuts any history."""
    return [Value(p.data, requires_grad=True) for p in params]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParameterSet, extra: dict | None = None) -> Path:
    """Write ``manifest.txt`` and ``params.bin`` (little-endian float64) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    spec = params.spec
    flat = params.flat()
    entries = {
        "format": "omllab-checkpoint-v1",
        "created_by": f"omllab {__version__}",
        "input_dim": spec.input_dim,
        "output_dim": spec.output_dim,
        "widths": ",".join(str(w) for w in spec.widths),
        "rln_depth": spec.rln_depth,
        "activation": spec.activation,
        "seed": "" if params.seed is None else params.seed,
        "n_params": flat.size,
    }
    for key, value in {**params.meta, **(extra or {})}.items():
        entries[key] = value
    lines = [f"{k}={v}" for k, v in entries.items()]
    tmp = path / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / MANIFEST_NAME)
    flat.astype("<f8").tofile(path / PARAMS_NAME)
    return path


def read_manifest(path) -> dict[str, str]:
    manifest = Path(path) / MANIFEST_NAME
    out = {}
    for line in manifest.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


_SPEC_KEYS = {"format", "created_by", "input_dim", "output_dim", "widths", "rln_depth", "activation", "seed", "n_params"}


def load_checkpoint(path) -> ParameterSet:
    path = Path(path)
    if not (path / MANIFEST_NAME).is_file() or not (path / PARAMS_NAME).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    m = read_manifest(path)
    spec = NetworkSpec(
        input_dim=int(m["input_dim"]),
        output_dim=int(m["output_dim"]),
        widths=tuple(int(w) for w in m["widths"].split(",")),
        rln_depth=int(m["rln_depth"]),
        activation=m.get("activation", "relu"),
    )
    flat = np.fromfile(path / PARAMS_NAME, dtype="<f8")
    if flat.size != spec.n_params() or int(m["n_params"]) != flat.size:
        raise ConfigError(f"checkpoint holds {flat.size} values, spec needs {spec.n_params()}", field="n_params")
    params, pos = [], 0
    for fan_in, fan_out in spec.layer_shapes():
        params.append(Value(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out), requires_grad=True))
        pos += fan_in * fan_out
        params.append(Value(flat[pos:pos + fan_out].copy(), requires_grad=True))
        pos += fan_out
    cut = 2 * spec.rln_depth
    seed = int(m["seed"]) if m.get("seed") else None
    meta = {k: v for k, v in m.items() if k not in _SPEC_KEYS}
    return ParameterSet(spec, params[:cut], params[cut:], seed, meta)


def task_loss(pred: Value, target, kind: str) -> Value:
    """Mean squared error for regression, softmax cross-entropy for classification."""
    if kind == "regression":
        return mse(pred, Value(np.reshape(target, pred.shape)))
    if kind == "classification":
        return softmax_cross_entropy(pred, np.asarray(target, dtype=np.int64))
    raise ConfigError(f"unknown task kind {kind!r}", field="kind")
