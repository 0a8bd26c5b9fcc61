"""Meta-training of representation networks.

Four objectives share one inner-loop primitive:

``oml``
    k sequential SGD steps on the PLN, one trajectory batch per step, then a
    meta-loss differentiated back through every step into the RLN.
``maml-rep``
    ``inner_steps`` SGD steps on the PLN, each using the whole training
    trajectory as one batch.
``oml-truncated``
    the trajectory is processed ``truncation`` steps at a time; gradients are
    accumulated per window and the carried PLN state is cut between windows.
``oml-no-rln``
    like ``oml`` but the inner loop updates every layer, so what is learned is
    an initialization rather than an encoder.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .autodiff import Value, ancestors, backward, concat_rows, take_rows
from .errors import ConfigError, DivergenceError, NumericError
from .network import (
    NetworkSpec,
    ParameterSet,
    build,
    detached,
    init_pln,
    pln_forward,
    representation,
    save_checkpoint,
    task_loss,
)
from .problems import Trajectory

log = logging.getLogger(__name__)

OBJECTIVES = ("oml", "maml-rep", "oml-truncated", "oml-no-rln")
SCOPES = ("train+test", "test")


@dataclass
class MetaTrainConfig:
    objective: str = "oml"
    inner_lr: float = 0.003
    meta_lr: float = 1e-4
    k: int = 400
    inner_steps: int = 5
    truncation: int = 5
    meta_steps: int = 1000
    meta_loss_scope: str = "train+test"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    divergence_norm: float = 1e6
    learn_w_init: bool = False
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"must be one of {OBJECTIVES}", field="objective")
        if self.meta_loss_scope not in SCOPES:
            raise ConfigError(f"must be one of {SCOPES}", field="meta_loss_scope")
        if not self.inner_lr >= 0:
            raise ConfigError("must be >= 0", field="inner_lr")
        if not self.meta_lr > 0:
            raise ConfigError("must be > 0", field="meta_lr")
        if self.k < 1:
            raise ConfigError("must be >= 1", field="k")
        if self.meta_steps < 1:
            raise ConfigError("must be >= 1", field="meta_steps")
        if self.inner_steps < 1:
            raise ConfigError("must be >= 1", field="inner_steps")
        if not 1 <= self.truncation <= self.k:
            raise ConfigError(f"must be in [1, k={self.k}]", field="truncation")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Episode:
    """One sampled CLP problem with its inner (train) and meta (test) trajectories."""

    problem: object
    train: Trajectory
    test: Trajectory
    kind: str


class ProblemSource(Protocol):
    kind: str

    def sample_episode(self, rng: np.random.Generator, k: int) -> Episode: ...


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def init(self, params: list[Value]) -> AdamState:
        return AdamState([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])

    def step(self, params: list[Value], grads: list[np.ndarray], state: AdamState):
        """New parameter leaves and state; inputs are left untouched."""
        t = state.t + 1
        b1, b2 = self.beta1, self.beta2
        new_m, new_v, new_p = [], [], []
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            new_p.append(Value(p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps), requires_grad=True))
            new_m.append(m)
            new_v.append(v)
        return new_p, AdamState(new_m, new_v, t)


def _clip(grads: list[np.ndarray], max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# inner loop


def inner_update(w, theta, batch, alpha, kind="regression", create_graph=True, h=None, step=None, update_theta=False):
    """One SGD step on the PLN parameters ``w`` (and ``theta`` if ``update_theta``).

    ``h`` may carry a precomputed representation of ``batch``'s inputs. With
    ``create_graph`` the step is recorded so a later meta-gradient flows through
    it. Returns the new ``w`` (or ``(theta, w)`` when ``update_theta``).
    """
    x, y = batch
    if h is None:
        h = representation(x, theta)
    loss = task_loss(pln_forward(h, w), y, kind)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite inner loss", step=step)
    targets = [*theta, *w] if update_theta else list(w)
    gm = backward(loss, targets, create_graph=create_graph)
    if alpha == 0:
        new = list(targets)
    else:
        new = [p - gm[p] * alpha for p in targets]
        for p in new:
            p.name = f"inner_step:{step}"
    if update_theta:
        return new[: len(theta)], new[len(theta):]
    return new


def unrolled_depth(output: Value) -> int:
    """Number of distinct inner steps recorded in ``output``'s graph."""
    return len({n.name for n in ancestors(output) if n.name and n.name.startswith("inner_step:")})


def _stack_batches(traj: Trajectory):
    x, y, _ = traj.flatten()
    return x, y


def _rows(traj: Trajectory):
    bounds = np.cumsum([0] + [len(x) for x in traj.inputs])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _meta_set(episode: Episode, scope: str):
    xt, yt = _stack_batches(episode.test)
    if scope == "test":
        return xt, yt
    xs, ys = _stack_batches(episode.train)
    return np.concatenate([xs, xt]), np.concatenate([ys, yt])


def oml_meta_gradient(theta, w0, episode: Episode, cfg: MetaTrainConfig, with_w0: bool = False):
    """Meta-loss after k online PLN steps, and its gradient w.r.t. ``theta`` (and ``w0``).

    Returns ``(meta_loss, [grads aligned with theta (+ w0)])``.
    """
    kind = episode.kind
    x_train, _ = _stack_batches(episode.train)
    w = list(w0)
    if cfg.objective == "oml-no-rln":
        th = list(theta)
        for j, batch in enumerate(episode.train):
            th, w = inner_update(w, th, batch, cfg.inner_lr, kind, step=j, update_theta=True)
        x_meta, y_meta = _meta_set(episode, cfg.meta_loss_scope)
        meta_loss = task_loss(pln_forward(representation(x_meta, th), w), y_meta, kind)
    else:
        h_train = representation(x_train, theta)
        for j, (rows, batch) in enumerate(zip(_rows(episode.train), episode.train)):
            w = inner_update(w, theta, batch, cfg.inner_lr, kind, h=take_rows(h_train, rows), step=j)
        xt, yt = _stack_batches(episode.test)
        h_test = representation(xt, theta)
        if cfg.meta_loss_scope == "test":
            h_meta, y_meta = h_test, yt
        else:
            _, ys = _stack_batches(episode.train)
            h_meta, y_meta = concat_rows([h_train, h_test]), np.concatenate([ys, yt])
        meta_loss = task_loss(pln_forward(h_meta, w), y_meta, kind)
    leaves = [*theta, *w0] if with_w0 else list(theta)
    gm = backward(meta_loss, leaves)
    return meta_loss.item(), [gm[p].data for p in leaves]


def maml_rep_meta_gradient(theta, w0, episode: Episode, cfg: MetaTrainConfig, with_w0: bool = False):
    """Meta-loss on S_test after ``inner_steps`` whole-batch PLN steps on S_train."""
    kind = episode.kind
    x_train, y_train = _stack_batches(episode.train)
    h_train = representation(x_train, theta)
    w = list(w0)
    for j in range(cfg.inner_steps):
        w = inner_update(w, theta, (x_train, y_train), cfg.inner_lr, kind, h=h_train, step=j)
    xt, yt = _stack_batches(episode.test)
    meta_loss = task_loss(pln_forward(representation(xt, theta), w), yt, kind)
    leaves = [*theta, *w0] if with_w0 else list(theta)
    gm = backward(meta_loss, leaves)
    return meta_loss.item(), [gm[p].data for p in leaves]


@dataclass
class MetaState:
    """Everything a meta-training run carries between steps."""

    params: ParameterSet
    opt: AdamState
    step: int = 0
    info: dict = field(default_factory=dict)


def _apply(state: MetaState, grads, cfg: MetaTrainConfig, with_w: bool, meta_loss: float) -> MetaState:
    grads, norm = _clip(grads, cfg.clip_norm)
    if not np.isfinite(norm) or norm > cfg.divergence_norm:
        raise DivergenceError(f"meta-gradient norm {norm:.3g} exceeds {cfg.divergence_norm:g}", step=state.step)
    adam = Adam(cfg.meta_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    p = state.params
    leaves = [*p.theta, *p.w] if with_w else list(p.theta)
    new, opt = adam.step(leaves, grads, state.opt)
    theta = new[: len(p.theta)]
    w = new[len(p.theta):] if with_w else p.w
    params = ParameterSet(p.spec, theta, w, p.seed, dict(p.meta))
    return MetaState(params, opt, state.step + 1, {"meta_loss": meta_loss, "grad_norm": norm})


def init_state(params: ParameterSet, cfg: MetaTrainConfig) -> MetaState:
    adam = Adam(cfg.meta_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    with_w = cfg.learn_w_init or cfg.objective == "oml-no-rln"
    return MetaState(params, adam.init(params.all() if with_w else params.theta))


def _episode_start(state: MetaState, source, cfg, rng, persist_w: bool):
    # PLN init is drawn before the episode so every objective consumes the
    # stream in the same order
    spec = state.params.spec
    fresh = init_pln(spec, rng)
    w0 = detached(state.params.w) if persist_w else fresh
    episode = source.sample_episode(rng, cfg.k)
    return w0, episode


def oml_meta_step(state: MetaState, source, cfg: MetaTrainConfig, rng) -> MetaState:
    """One OML meta-update. The PLN is re-randomized unless ``learn_w_init``."""
    with_w = cfg.learn_w_init or cfg.objective == "oml-no-rln"
    w0, episode = _episode_start(state, source, cfg, rng, persist_w=with_w)
    loss, grads = oml_meta_gradient(state.params.theta, w0, episode, cfg, with_w0=with_w)
    if with_w:
        state = MetaState(state.params.with_w(w0), state.opt, state.step)
    return _apply(state, grads, cfg, with_w, loss)


def maml_rep_meta_step(state: MetaState, source, cfg: MetaTrainConfig, rng) -> MetaState:
    with_w = cfg.learn_w_init
    w0, episode = _episode_start(state, source, cfg, rng, persist_w=with_w)
    loss, grads = maml_rep_meta_gradient(state.params.theta, w0, episode, cfg, with_w0=with_w)
    if with_w:
        state = MetaState(state.params.with_w(w0), state.opt, state.step)
    return _apply(state, grads, cfg, with_w, loss)


def truncated_oml_gradient(theta, w, episode: Episode, cfg: MetaTrainConfig, audit: bool = False):
    """Accumulated meta-gradient of the truncated objective.

    After every window of ``truncation`` inner steps the loss on the test
    prefix ``S_test[0:j]`` is differentiated w.r.t. ``theta`` and summed into
    an accumulator; the carried PLN is then cut from the graph.
    """
    kind = episode.kind
    x_train, _ = _stack_batches(episode.train)
    h_train = representation(x_train, theta)
    rows = _rows(episode.train)
    accum = [np.zeros(p.shape) for p in theta]
    w_cur = detached(w)
    j, n_acc, depths, total = 0, 0, [], 0.0
    k = len(episode.train)
    while j < k:
        stop = min(j + cfg.truncation, k)
        for i in range(j, stop):
            batch = (episode.train.inputs[i], episode.train.targets[i])
            w_cur = inner_update(w_cur, theta, batch, cfg.inner_lr, kind, h=take_rows(h_train, rows[i]), step=i)
        j = stop
        xt = np.concatenate(episode.test.inputs[:j])
        yt = np.concatenate(episode.test.targets[:j])
        loss = task_loss(pln_forward(representation(xt, theta), w_cur), yt, kind)
        if audit:
            depths.append(unrolled_depth(loss))
        gm = backward(loss, theta)
        for a, p in zip(accum, theta):
            a += gm[p].data
        total += loss.item()
        n_acc += 1
        w_cur = detached(w_cur)
    return total, accum, {"n_accumulations": n_acc, "window_depths": depths, "w_final": w_cur}


def truncated_oml_meta_step(state: MetaState, source, cfg: MetaTrainConfig, rng, audit: bool = False) -> MetaState:
    """One truncated-OML meta-update; the persistent PLN init ``state.params.w`` is kept."""
    _, episode = _episode_start(state, source, cfg, rng, persist_w=True)
    loss, grads, info = truncated_oml_gradient(state.params.theta, state.params.w, episode, cfg, audit=audit)
    new = _apply(state, grads, cfg, False, loss)
    new.info.update({k: v for k, v in info.items() if k != "w_final"})
    return new


STEPPERS = {
    "oml": oml_meta_step,
    "oml-no-rln": oml_meta_step,
    "maml-rep": maml_rep_meta_step,
    "oml-truncated": truncated_oml_meta_step,
}


def meta_train(cfg: MetaTrainConfig, source, spec: NetworkSpec, rng_init, rng_episodes, out_dir=None, params=None):
    """Run ``cfg.meta_steps`` meta-updates.

    Returns ``(params, log_rows)``. When ``out_dir`` is given, checkpoints are
    written to ``out_dir/checkpoint`` every ``checkpoint_every`` steps and at
    the end, and the log to ``out_dir/meta_train_log.csv``. On divergence the
    last good checkpoint is written before the error propagates.
    """
    if params is None:
        params = build(spec, rng_init)
    params.meta.update({"objective": cfg.objective, "meta_steps": cfg.meta_steps})
    state = init_state(params, cfg)
    stepper = STEPPERS[cfg.objective]
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    try:
        for _ in range(cfg.meta_steps):
            t0 = time.perf_counter()
            state = stepper(state, source, cfg, rng_episodes)
            rows.append({
                "meta_step": state.step,
                "meta_loss": state.info["meta_loss"],
                "grad_norm": state.info["grad_norm"],
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
            if state.step % 100 == 0:
                log.info("meta-step %d loss %.5f", state.step, state.info["meta_loss"])
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint", state.params, {"meta_step": state.step})
    except NumericError:
        if out is not None:
            save_checkpoint(out / "checkpoint", state.params, {"meta_step": state.step, "status": "diverged"})
            write_log(out / "meta_train_log.csv", rows)
        raise
    if out is not None:
        save_checkpoint(out / "checkpoint", state.params, {"meta_step": state.step})
        write_log(out / "meta_train_log.csv", rows)
    return state.params, rows


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["meta_step", "meta_loss", "grad_norm", "wall_ms"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
