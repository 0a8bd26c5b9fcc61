"""Continual-learning prediction problems and their correlated trajectories.

Two benchmark families:

* incremental sine waves: ``y = A_n * sin(z + b_n)`` with input ``[z, one_hot(n)]``;
* split classification: an ordered list of classes, shown one class at a time.

A trajectory is block ordered: every batch of block ``i`` precedes every batch
of block ``i + 1``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, IngestionError

log = logging.getLogger(__name__)

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
Z_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SineProblem:
    amplitudes: np.ndarray
    phases: np.ndarray
    seed: int | None = None

    @property
    def n_blocks(self) -> int:
        return len(self.amplitudes)

    @property
    def input_dim(self) -> int:
        return 1 + self.n_blocks

    output_dim = 1
    kind = "regression"

    def target(self, z, n):
        """Target for raw ``z`` and 1-based function index ``n``."""
        n = np.asarray(n)
        return self.amplitudes[n - 1] * np.sin(np.asarray(z) + self.phases[n - 1])


@dataclass(frozen=True)
class SplitProblem:
    dataset: "Dataset"
    classes: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise ContractError("class list has duplicates")

    @property
    def n_blocks(self) -> int:
        return len(self.classes)

    @property
    def input_dim(self) -> int:
        return self.dataset.dim

    @property
    def output_dim(self) -> int:
        return len(self.classes)

    kind = "classification"


@dataclass
class Trajectory:
    """Ordered mini-batches; ``blocks[t]`` is the block index of batch ``t``."""

    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    blocks: list[int]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.inputs)

    def __iter__(self):
        return iter(zip(self.inputs, self.targets))

    @property
    def k(self) -> int:
        return len(self.inputs)

    def flatten(self):
        """All samples stacked in trajectory order, with their block index."""
        if not self.inputs:
            return np.zeros((0, 0)), np.zeros(0), np.zeros(0, dtype=int)
        x = np.concatenate(self.inputs)
        y = np.concatenate(self.targets)
        b = np.concatenate([np.full(len(xi), bi) for xi, bi in zip(self.inputs, self.blocks)])
        return x, y, b

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            width = self.inputs[0].shape[1] if self.inputs else 0
            writer.writerow(["block_index", "step", *[f"input_{i}" for i in range(width)], "target"])
            for step, (x, y, b) in enumerate(zip(self.inputs, self.targets, self.blocks)):
                for xi, yi in zip(x, np.reshape(y, (len(x), -1))):
                    writer.writerow([b, step, *[repr(float(v)) for v in xi], *[repr(float(v)) for v in yi]])


# ---------------------------------------------------------------------------
# sine waves


def sample_sine_functions(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    amps = rng.uniform(*AMPLITUDE_RANGE, size=n)
    phases = rng.uniform(*PHASE_RANGE, size=n)
    return amps, phases


def sample_sine_problem(rng: np.random.Generator, n_functions: int = 10, pool=None) -> SineProblem:
    """Draw ``n_functions`` sine functions, fresh or without replacement from ``pool``.

    ``pool`` is an ``(amplitudes, phases)`` pair, e.g. a fixed meta-training set.
    """
    if n_functions < 1:
        raise ContractError("n_functions must be >= 1")
    if pool is None:
        amps, phases = sample_sine_functions(rng, n_functions)
    else:
        pa, pp = pool
        if len(pa) < n_functions:
            raise DataError(f"function pool holds {len(pa)} functions, need {n_functions}")
        pick = rng.choice(len(pa), size=n_functions, replace=False)
        amps, phases = np.asarray(pa)[pick], np.asarray(pp)[pick]
    return SineProblem(np.asarray(amps, dtype=float), np.asarray(phases, dtype=float))


def sine_input_encode(z, n, n_functions: int) -> np.ndarray:
    """``[z, one_hot(n)]`` for scalar or array ``z``; ``n`` is 1-based."""
    n_arr = np.atleast_1d(np.asarray(n))
    if np.any(n_arr < 1) or np.any(n_arr > n_functions):
        raise IndexError(f"function index {n} outside 1..{n_functions}")
    z_arr = np.atleast_1d(np.asarray(z, dtype=float))
    n_arr = np.broadcast_to(n_arr, z_arr.shape)
    out = np.zeros((z_arr.size, 1 + n_functions))
    out[:, 0] = z_arr
    out[np.arange(z_arr.size), n_arr] = 1.0
    return out[0] if np.ndim(z) == 0 and np.ndim(n) == 0 else out


def sine_input_decode(x: np.ndarray):
    """Inverse of :func:`sine_input_encode`: ``(z, n)``."""
    x = np.asarray(x)
    if x.ndim == 1:
        return float(x[0]), int(np.argmax(x[1:])) + 1
    return x[:, 0], np.argmax(x[:, 1:], axis=1) + 1


def sine_targets_from_inputs(problem: SineProblem, x: np.ndarray) -> np.ndarray:
    z, n = sine_input_decode(np.atleast_2d(x))
    return problem.target(z, n).reshape(-1, 1)


def sine_eval_grid(problem: SineProblem, points: int = 50):
    """Uniform z grid per function; returns (inputs, targets, block) stacked."""
    z = np.linspace(*Z_RANGE, points)
    xs, ys, bs = [], [], []
    for n in range(1, problem.n_blocks + 1):
        x = sine_input_encode(z, n, problem.n_blocks)
        xs.append(x)
        ys.append(problem.target(z, n).reshape(-1, 1))
        bs.append(np.full(points, n - 1))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(bs)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Per-class fixed train/test split.

    ``train[c]`` and ``test[c]`` are ``(n, dim)`` arrays. Classes below
    ``n_meta_train`` form the meta-training pool, the rest the meta-test pool.
    """

    names: list[str]
    train: np.ndarray
    test: np.ndarray
    n_meta_train: int
    centers: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.n_meta_train <= len(self.names):
            raise ContractError("n_meta_train outside [0, n_classes]")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.train.shape[2]

    def pool(self, which: str) -> np.ndarray:
        if which == "meta_train":
            return np.arange(self.n_meta_train)
        if which == "meta_test":
            return np.arange(self.n_meta_train, self.n_classes)
        if which == "all":
            return np.arange(self.n_classes)
        raise ContractError(f"unknown class pool {which!r}")


def _default_meta_train(n_classes: int) -> int:
    # Omniglot convention: 963 of 1623 classes for meta-training
    return int(round(n_classes * 963 / 1623))


def synthetic_class_dataset(
    n_classes: int,
    dim: int,
    rng: np.random.Generator,
    sigma: float = 0.3,
    per_class: int = 20,
    n_train: int = 15,
    n_meta_train: int | None = None,
) -> Dataset:
    """Isotropic Gaussian clusters around random unit-norm centres.

    ``sigma`` is the RMS radius of the noise, i.e. per-coordinate standard
    deviation ``sigma / sqrt(dim)``.
    """
    if n_classes < 1 or dim < 1:
        raise ContractError("n_classes and dim must be >= 1")
    centers = rng.normal(size=(n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    samples = centers[:, None, :] + (sigma / np.sqrt(dim)) * rng.normal(size=(n_classes, per_class, dim))
    return Dataset(
        names=[f"class_{i:04d}" for i in range(n_classes)],
        train=samples[:, :n_train],
        test=samples[:, n_train:],
        n_meta_train=_default_meta_train(n_classes) if n_meta_train is None else n_meta_train,
        centers=centers,
    )


def load_image_dataset(
    path,
    resolution: int = 28,
    n_train: int = 15,
    n_test: int = 5,
    n_meta_train: int | None = None,
) -> Dataset:
    """Read ``<root>/<class>/<image>.png`` grayscale images.

    Images are resized to ``resolution`` x ``resolution``, scaled to [0, 1]
    and flattened. The first ``n_train`` files of each class (by name) train,
    the next ``n_test`` test. Classes with too few images are skipped.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise IngestionError(root, "not a directory")
    needed = n_train + n_test
    names, train, test = [], [], []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() == ".png")
        if len(files) < needed:
            log.warning("skipping class %s: %d images, need %d", class_dir.name, len(files), needed)
            continue
        images = []
        for f in files[:needed]:
            try:
                with Image.open(f) as img:
                    img = img.convert("L").resize((resolution, resolution), Image.BILINEAR)
                    images.append(np.asarray(img, dtype=np.float64).reshape(-1) / 255.0)
            except (OSError, ValueError) as exc:
                raise IngestionError(f, exc) from exc
        names.append(class_dir.name)
        train.append(images[:n_train])
        test.append(images[n_train:])
    if not names:
        raise IngestionError(root, "no usable classes")
    return Dataset(
        names=names,
        train=np.asarray(train),
        test=np.asarray(test),
        n_meta_train=_default_meta_train(len(names)) if n_meta_train is None else n_meta_train,
    )


def sample_split_problem(dataset: Dataset, n_classes: int, rng: np.random.Generator, pool: str = "meta_train") -> SplitProblem:
    candidates = dataset.pool(pool)
    if len(candidates) < n_classes:
        raise DataError(f"{pool} pool holds {len(candidates)} classes, need {n_classes}")
    order = rng.choice(candidates, size=n_classes, replace=False)
    return SplitProblem(dataset, tuple(int(c) for c in order))


def split_eval_set(problem: SplitProblem, seen_blocks: int | None = None, split: str = "test"):
    """Held-out images of the first ``seen_blocks`` classes with their order labels."""
    seen = problem.n_blocks if seen_blocks is None else seen_blocks
    store = problem.dataset.test if split == "test" else problem.dataset.train
    xs = [store[c] for c in problem.classes[:seen]]
    ys = [np.full(len(x), i) for i, x in enumerate(xs)]
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ys)


# ---------------------------------------------------------------------------
# trajectories


def sample_trajectory(problem, k: int, batch_size: int, rng: np.random.Generator) -> Trajectory:
    """Block-ordered trajectory of ``k`` mini-batches, ``k / n_blocks`` per block."""
    prov = {"problem": type(problem).__name__, "k": k, "batch_size": batch_size}
    if k == 0:
        return Trajectory([], [], [], prov)
    if k < 0 or k % problem.n_blocks:
        raise ContractError(f"k={k} is not divisible by {problem.n_blocks} blocks")
    per_block = k // problem.n_blocks
    inputs, targets, blocks = [], [], []
    if isinstance(problem, SineProblem):
        for b in range(problem.n_blocks):
            for _ in range(per_block):
                z = rng.uniform(*Z_RANGE, size=batch_size)
                inputs.append(sine_input_encode(z, np.full(batch_size, b + 1), problem.n_blocks))
                targets.append(problem.target(z, b + 1).reshape(-1, 1))
                blocks.append(b)
    elif isinstance(problem, SplitProblem):
        need = per_block * batch_size
        for b, c in enumerate(problem.classes):
            pool = problem.dataset.train[c]
            if need > len(pool):
                raise DataError(f"class {problem.dataset.names[c]} has {len(pool)} train images, need {need}")
            pick = rng.choice(len(pool), size=need, replace=False)
            for s in range(per_block):
                idx = pick[s * batch_size:(s + 1) * batch_size]
                inputs.append(pool[idx])
                targets.append(np.full(batch_size, b, dtype=np.int64))
                blocks.append(b)
    else:
        raise ContractError(f"unsupported problem type {type(problem).__name__}")
    return Trajectory(inputs, targets, blocks, prov)


def trajectory_from_samples(x, y, batch_size: int, blocks=None) -> Trajectory:
    """Chunk flat samples into consecutive mini-batches."""
    inputs, targets, bl = [], [], []
    for s in range(0, len(x), batch_size):
        inputs.append(x[s:s + batch_size])
        targets.append(y[s:s + batch_size])
        bl.append(int(blocks[s]) if blocks is not None else 0)
    return Trajectory(inputs, targets, bl, {"problem": "samples"})


# ---------------------------------------------------------------------------
# meta-training sources


class SineSource:
    """Episodes of ``n_functions`` sine waves drawn from a fixed function pool."""

    kind = "regression"

    def __init__(self, pool, n_functions: int = 10, batch_size: int = 8):
        self.pool = pool
        self.n_functions = n_functions
        self.batch_size = batch_size

    def sample_problem(self, rng):
        return sample_sine_problem(rng, self.n_functions, self.pool)

    def sample_episode(self, rng, k: int):
        from .metatrain import Episode

        problem = self.sample_problem(rng)
        train = sample_trajectory(problem, k, self.batch_size, rng)
        test = sample_trajectory(problem, k, self.batch_size, rng)
        return Episode(problem, train, test, self.kind)


class SplitSource:
    """Episodes of ``n_classes`` ordered classes from one pool of a Dataset."""

    kind = "classification"

    def __init__(self, dataset: Dataset, n_classes: int, batch_size: int = 1, pool: str = "meta_train"):
        self.dataset = dataset
        self.n_classes = n_classes
        self.batch_size = batch_size
        self.pool = pool

    def sample_problem(self, rng):
        return sample_split_problem(self.dataset, self.n_classes, rng, self.pool)

    def sample_episode(self, rng, k: int):
        from .metatrain import Episode

        problem = self.sample_problem(rng)
        train = sample_trajectory(problem, k, self.batch_size, rng)
        test = sample_trajectory(problem, k, self.batch_size, rng)
        return Episode(problem, train, test, self.kind)
