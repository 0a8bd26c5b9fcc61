"""Meta-test protocol: frozen representation, PLN learned fully online.

A representation is scored by learning a fresh PLN on a single correlated
trajectory, one SGD step per mini-batch and a single pass, then measuring the
prediction error over every block seen.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Value, backward
from .errors import ContractError, NumericError, SweepError
from .network import NetworkSpec, ParameterSet, build, detached, init_pln, init_layers, pln_forward, predict, representation, task_loss
from .problems import (
    SineProblem,
    SplitProblem,
    Trajectory,
    sample_trajectory,
    sine_eval_grid,
    split_eval_set,
    trajectory_from_samples,
)

log = logging.getLogger(__name__)

LR_GRID = (0.3, 0.1, 0.03, 0.01, 0.003, 0.001, 3e-4, 1e-4, 3e-5, 1e-5)


@dataclass
class EvalRun:
    """A meta-test problem: the online trajectory plus its held-out evaluation set."""

    problem: object
    trajectory: Trajectory
    eval_x: np.ndarray
    eval_y: np.ndarray
    eval_blocks: np.ndarray
    kind: str


@dataclass
class RunResult:
    losses: list[float]
    per_block: list[float]
    aggregate: float
    w: list = field(repr=False, default_factory=list)


@dataclass
class EvalReport:
    kind: str
    lr: float
    seed: int
    checkpoint: str
    n_trajectories: int
    online_loss: list[float]
    per_block: list[float]
    aggregate: float
    aggregate_std: float
    flags: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    iid: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def make_eval_runs(source, n: int, k: int, rng: np.random.Generator, grid_points: int = 50) -> list[EvalRun]:
    """``n`` meta-test problems from ``source`` with trajectories of ``k`` batches."""
    runs = []
    for _ in range(n):
        problem = source.sample_problem(rng)
        traj = sample_trajectory(problem, k, source.batch_size, rng)
        if isinstance(problem, SineProblem):
            x, y, b = sine_eval_grid(problem, grid_points)
        else:
            x, y, b = split_eval_set(problem)
        runs.append(EvalRun(problem, traj, x, y, b, source.kind))
    return runs


def _metric(pred: np.ndarray, y: np.ndarray, kind: str) -> float:
    if kind == "regression":
        return float(np.mean((pred.reshape(-1) - np.reshape(y, -1)) ** 2))
    return float(np.mean(np.argmax(pred, axis=1) == np.asarray(y)))


def evaluate(theta, w, x, y, kind: str) -> float:
    """Mean squared error (regression) or top-1 accuracy (classification)."""
    if len(x) == 0:
        raise ContractError("empty evaluation set")
    return _metric(predict(Value(x), theta, w).data, y, kind)


def per_block_metric(theta, w, run: EvalRun) -> list[float]:
    pred = predict(Value(run.eval_x), theta, w).data
    n_blocks = run.problem.n_blocks
    return [_metric(pred[run.eval_blocks == b], run.eval_y[run.eval_blocks == b], run.kind) for b in range(n_blocks)]


def online_train(theta, w0, trajectory: Trajectory, lr: float, kind: str, update_theta: bool = False):
    """Single pass of SGD over ``trajectory``, one step per mini-batch.

    Returns ``(theta, w, losses)`` where ``losses[t]`` is the loss on batch
    ``t`` just before its update. ``theta`` is returned unchanged unless
    ``update_theta``.
    """
    if len(trajectory) == 0:
        raise ContractError("empty trajectory")
    w = list(w0)
    losses = []
    if not update_theta:
        x_all, _, _ = trajectory.flatten()
        h_all = representation(Value(x_all), [p.detach() for p in theta]).data
        pos = 0
        for step, (x, y) in enumerate(trajectory):
            h = Value(h_all[pos:pos + len(x)])
            pos += len(x)
            w, loss = _sgd_step(w, h, y, lr, kind, step)
            losses.append(loss)
        return theta, w, losses
    th = list(theta)
    for step, (x, y) in enumerate(trajectory):
        params = [*th, *w]
        loss = task_loss(predict(Value(x), th, w), y, kind)
        _check(loss, step)
        gm = backward(loss, params)
        new = [Value(p.data - lr * gm[p].data, requires_grad=True) for p in params]
        th, w = new[: len(th)], new[len(th):]
        losses.append(loss.item())
    return th, w, losses


def _check(loss: Value, step: int) -> None:
    if not np.isfinite(loss.data):
        raise NumericError("non-finite online loss", step=step)


def _sgd_step(w, h: Value, y, lr: float, kind: str, step: int, penalty=None):
    loss = task_loss(pln_forward(h, w), y, kind)
    total = loss if penalty is None else loss + penalty(w)
    _check(total, step)
    gm = backward(total, w)
    new = []
    for p in w:
        data = p.data - lr * gm[p].data
        if not np.isfinite(data).all():
            raise NumericError("online update diverged", step=step)
        new.append(Value(data, requires_grad=True))
    return new, loss.item()


def run_online(theta, spec: NetworkSpec, run: EvalRun, lr: float, rng, w0=None) -> RunResult:
    """Fresh PLN, online pass over ``run.trajectory``, metrics on ``run``'s eval set."""
    w0 = init_pln(spec, rng) if w0 is None else w0
    _, w, losses = online_train(theta, w0, run.trajectory, lr, run.kind)
    per_block = per_block_metric(theta, w, run)
    return RunResult(losses, per_block, evaluate(theta, w, run.eval_x, run.eval_y, run.kind), w)


def _error(result_metric: float, kind: str) -> float:
    return result_metric if kind == "regression" else 1.0 - result_metric


def lr_sweep(theta, spec: NetworkSpec, validation: list[EvalRun], grid=LR_GRID, seed: int = 0, runner=None):
    """Learning rate with the lowest mean validation error; ties go to the smaller rate.

    ``runner(lr, run, rng)`` returns the run's aggregate metric; the default
    is plain online training. Returns ``(best_lr, {lr: mean_error})``.
    """
    if not grid:
        raise ContractError("empty learning-rate grid")
    if runner is None:
        def runner(lr, run, rng):
            return run_online(theta, spec, run, lr, rng).aggregate
    scores = {}
    for lr in grid:
        rng = np.random.default_rng(seed)
        try:
            # large rates are expected to blow up; the finite checks turn that into a score of inf
            with np.errstate(over="ignore", invalid="ignore"):
                errs = [_error(runner(lr, run, rng), run.kind) for run in validation]
            score = float(np.mean(errs))
            scores[lr] = score if np.isfinite(score) else float("inf")
        except NumericError:
            scores[lr] = float("inf")
    finite = [lr for lr in grid if np.isfinite(scores[lr])]
    if not finite:
        raise SweepError("every learning rate diverged")
    best = min(finite, key=lambda lr: (scores[lr], lr))
    return best, scores


def evaluate_representation(theta, spec, validation, reporting, grid=LR_GRID, seed: int = 0, checkpoint: str = ""):
    """Sweep the learning rate on ``validation`` then report on ``reporting`` runs."""
    lr, scores = lr_sweep(theta, spec, validation, grid, seed)
    rng = np.random.default_rng(seed + 1)
    results = [run_online(theta, spec, run, lr, rng) for run in reporting]
    kind = reporting[0].kind
    aggs = np.array([r.aggregate for r in results])
    report = EvalReport(
        kind=kind,
        lr=lr,
        seed=seed,
        checkpoint=checkpoint,
        n_trajectories=len(reporting),
        online_loss=np.mean([r.losses for r in results], axis=0).tolist(),
        per_block=np.mean([r.per_block for r in results], axis=0).tolist(),
        aggregate=float(aggs.mean()),
        aggregate_std=float(aggs.std()),
        flags={"w0": "fresh-random"},
        sweep={repr(k): v for k, v in scores.items()},
    )
    return report, results


def write_curves(path, results: list[RunResult], runs: list[EvalRun]) -> int:
    """CSV ``trajectory, step, block, loss``; one row per step per trajectory."""
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "step", "block", "loss"])
        for t, (res, run) in enumerate(zip(results, runs)):
            for step, (loss, block) in enumerate(zip(res.losses, run.trajectory.blocks)):
                writer.writerow([t, step, block, repr(loss)])
                n += 1
    return n


# ---------------------------------------------------------------------------
# baselines


def iid_sanity_train(theta, w0, trajectory: Trajectory, epochs: int, lr: float, kind: str, rng, batch_size: int | None = None):
    """Train the PLN on the trajectory's samples shuffled afresh each epoch.

    Returns ``(w, orders)`` where ``orders`` lists the permutation used per epoch.
    """
    x, y, b = trajectory.flatten()
    bs = batch_size or len(trajectory.inputs[0])
    h_all = representation(Value(x), [p.detach() for p in theta]).data
    w = list(w0)
    orders = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(x))
        orders.append(order)
        for s in range(0, len(x), bs):
            idx = order[s:s + bs]
            w, _ = _sgd_step(w, Value(h_all[idx]), y[idx], lr, kind, step)
            step += 1
    return w, orders


def pretrain_network(source, spec: NetworkSpec, rng, steps: int = 2000, lr: float = 1e-3, batch_size: int = 32,
                     steps_per_problem: int = 20, labels: str = "problem"):
    """Ordinary supervised training of the whole network on meta-training data.

    ``labels="problem"`` draws a problem every ``steps_per_problem`` updates and
    trains on i.i.d. mini-batches of its samples (sine waves).
    ``labels="global"`` trains a classifier over the whole meta-training class
    pool of ``source.dataset`` with i.i.d. mini-batches.
    Returns ``(ParameterSet, losses)``.
    """
    from .metatrain import Adam

    params = build(spec, rng)
    leaves = params.all()
    adam = Adam(lr)
    opt = adam.init(leaves)
    losses = []
    if labels == "global":
        ds = source.dataset
        pool = ds.pool("meta_train")
        x_all = ds.train[pool].reshape(-1, ds.dim)
        y_all = np.repeat(np.arange(len(pool)), ds.train.shape[1])
    for step in range(steps):
        if labels == "global":
            idx = rng.integers(0, len(x_all), size=batch_size)
            x, y = x_all[idx], y_all[idx]
        else:
            if step % steps_per_problem == 0:
                episode = source.sample_episode(rng, _episode_k(source))
                x_ep, y_ep, _ = episode.train.flatten()
            idx = rng.integers(0, len(x_ep), size=batch_size)
            x, y = x_ep[idx], y_ep[idx]
        theta, w = leaves[: len(params.theta)], leaves[len(params.theta):]
        loss = task_loss(predict(Value(x), theta, w), y, source.kind)
        gm = backward(loss, leaves)
        leaves, opt = adam.step(leaves, [gm[p].data for p in leaves], opt)
        losses.append(loss.item())
    cut = len(params.theta)
    return ParameterSet(spec, leaves[:cut], leaves[cut:], params.seed, {"objective": "pretraining"}), losses


def _episode_k(source) -> int:
    n = getattr(source, "n_functions", None) or source.n_classes
    return n * max(1, 40 // max(1, source.batch_size) if source.kind == "regression" else 5)


def pretrain_baseline(source, spec: NetworkSpec, rng, validation: list[EvalRun], candidate_depths, eval_spec_output: int,
                      grid=LR_GRID, seed: int = 0, **train_kwargs):
    """Pre-train, then keep the leading-layer split that does best online on ``validation``.

    Returns ``(theta, eval_spec, info)`` where ``eval_spec`` carries the chosen
    ``rln_depth`` and the meta-test output width.
    """
    params, losses = pretrain_network(source, spec, rng, **train_kwargs)
    flat = params.all()
    best = None
    scores = {}
    for depth in candidate_depths:
        theta = flat[: 2 * depth]
        espec = NetworkSpec(spec.input_dim, eval_spec_output, spec.widths, depth)
        lr, sweep = lr_sweep(theta, espec, validation, grid, seed)
        scores[depth] = (sweep[lr], lr)
        if best is None or sweep[lr] < scores[best][0]:
            best = depth
    theta = [Value(p.data, requires_grad=True) for p in flat[: 2 * best]]
    espec = NetworkSpec(spec.input_dim, eval_spec_output, spec.widths, best)
    return theta, espec, {"losses": losses, "split_scores": scores, "rln_depth": best, "pretrained": params}


def iid_evaluate(theta, spec: NetworkSpec, validation, reporting, epochs: int, grid=LR_GRID, seed: int = 0) -> dict:
    """Multi-epoch shuffled training of a fresh PLN, with its own learning-rate sweep."""
    def runner(lr, run, rng):
        w, _ = iid_sanity_train(theta, init_pln(spec, rng), run.trajectory, epochs, lr, run.kind, rng)
        return evaluate(theta, w, run.eval_x, run.eval_y, run.kind)

    lr, scores = lr_sweep(theta, spec, validation, grid, seed, runner=runner)
    rng = np.random.default_rng(seed + 1)
    aggs = np.array([runner(lr, run, rng) for run in reporting])
    return {"lr": lr, "epochs": epochs, "aggregate": float(aggs.mean()), "aggregate_std": float(aggs.std()),
            "sweep": {repr(k): v for k, v in scores.items()}}
