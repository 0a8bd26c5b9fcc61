"""Representation diagnostics: instance sparsity, dead units, activation dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Value
from .errors import ConfigError, ContractError
from .network import representation


@dataclass
class SparsityReport:
    instance_sparsity: float
    dead_fraction: float
    n_inputs: int
    d: int
    threshold: float = 0.0

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["instance_sparsity", "dead_fraction", "n_inputs", "d", "threshold"],
    "properties": {
        "instance_sparsity": {"type": "number", "minimum": 0, "maximum": 1},
        "dead_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "n_inputs": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "threshold": {"type": "number"},
    },
}


def activations(theta, inputs, chunk: int = 1024) -> np.ndarray:
    if len(inputs) == 0:
        raise ContractError("empty input set")
    frozen = [p.detach() for p in theta]
    return np.concatenate([representation(Value(inputs[s:s + chunk]), frozen).data
                           for s in range(0, len(inputs), chunk)])


def instance_sparsity_of(reps: np.ndarray, threshold: float = 0.0) -> float:
    """Mean fraction of units above ``threshold`` per input."""
    if len(reps) == 0:
        raise ContractError("empty representation set")
    return float(np.mean(np.sum(reps > threshold, axis=1) / reps.shape[1]))


def dead_fraction_of(reps: np.ndarray, threshold: float = 0.0) -> float:
    """Fraction of units never above ``threshold`` for any input."""
    if len(reps) == 0:
        raise ContractError("empty representation set")
    return float(np.mean(~np.any(reps > threshold, axis=0)))


def instance_sparsity(theta, inputs, threshold: float = 0.0) -> float:
    return instance_sparsity_of(activations(theta, inputs), threshold)


def dead_neurons(theta, inputs, threshold: float = 0.0) -> float:
    return dead_fraction_of(activations(theta, inputs), threshold)


def sparsity_report(theta, inputs, threshold: float = 0.0) -> SparsityReport:
    reps = activations(theta, inputs)
    return SparsityReport(
        instance_sparsity=instance_sparsity_of(reps, threshold),
        dead_fraction=dead_fraction_of(reps, threshold),
        n_inputs=len(reps),
        d=reps.shape[1],
        threshold=threshold,
    )


def _normalized(v: np.ndarray) -> np.ndarray:
    m = v.max()
    return v / m if m > 0 else np.zeros_like(v)


def _write_matrix(path: Path, mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([repr(float(v)) for v in row])


def load_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def dump_representation(theta, inputs, reshape_rows: int, out_dir, n_instances: int = 4) -> dict:
    """Write max-normalized representations as ``reshape_rows``-row CSV matrices.

    Writes ``mean.csv`` (corpus mean) and ``instance_<i>.csv`` for the first
    ``n_instances`` inputs, plus ``manifest.json`` listing them.
    """
    reps = activations(theta, inputs)
    d = reps.shape[1]
    if reshape_rows < 1 or d % reshape_rows:
        raise ConfigError(f"representation width {d} is not divisible by {reshape_rows}", field="reshape_rows")
    shape = (reshape_rows, d // reshape_rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"mean": "mean.csv"}
    _write_matrix(out / "mean.csv", _normalized(reps.mean(axis=0)).reshape(shape))
    for i in range(min(n_instances, len(reps))):
        name = f"instance_{i}.csv"
        _write_matrix(out / name, _normalized(reps[i]).reshape(shape))
        files[f"instance_{i}"] = name
    manifest = {"shape": list(shape), "d": d, "n_inputs": len(reps), "files": files}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def write_summary(path, rows: list[dict]) -> None:
    """Table with columns method, instance_sparsity, dead_fraction."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "instance_sparsity", "dead_fraction"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in writer.fieldnames})
