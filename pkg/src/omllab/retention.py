"""Continual-learning strategies run on top of a representation.

Every method performs one pass over a trajectory. With a fixed representation
only the PLN is trained; in standard mode (``update_theta=True``) the whole
network learns online.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value, backward, mul, sub, sum as vsum
from .errors import ContractError, NumericError
from .network import pln_forward, predict, representation, task_loss
from .problems import Trajectory

METHODS = ("online", "approx-iid", "er-reservoir", "ewc")


@dataclass
class ReplayBuffer:
    capacity: int = 200
    items: list = field(default_factory=list)
    n_seen: int = 0

    def __len__(self):
        return len(self.items)

    def offer(self, item, rng: np.random.Generator) -> None:
        """Reservoir rule: keep each of the ``n_seen`` offered items with probability capacity / n_seen."""
        self.offer_many([item], rng)

    def offer_many(self, items, rng: np.random.Generator) -> None:
        """Offer ``items`` in order; consumes the same draws as repeated :meth:`offer`."""
        items = items if isinstance(items, np.ndarray) else list(items)
        free = min(max(self.capacity - len(self.items), 0), len(items))
        self.items.extend(items[:free].tolist() if isinstance(items, np.ndarray) else items[:free])
        self.n_seen += free
        rest = items[free:]
        if len(rest):
            slots = rng.integers(0, self.n_seen + np.arange(len(rest)) + 1)
            for j in np.flatnonzero(slots < self.capacity):
                self.items[slots[j]] = rest[j]
            self.n_seen += len(rest)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        if not self.items or n <= 0:
            return []
        pick = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[i] for i in pick]


def reservoir_offer(buffer: ReplayBuffer, item, rng) -> ReplayBuffer:
    buffer.offer(item, rng)
    return buffer


@dataclass
class FisherState:
    anchor: list[np.ndarray]
    fisher: list[np.ndarray]


class _Learner:
    """Samples of one trajectory, addressed by index, plus the parameters being trained."""

    def __init__(self, theta, w, trajectory: Trajectory, kind: str, update_theta: bool):
        if len(trajectory) == 0:
            raise ContractError("empty trajectory")
        self.x, self.y, self.blocks = trajectory.flatten()
        self.kind = kind
        self.update_theta = update_theta
        self.theta = list(theta)
        self.w = list(w)
        self.h = None if update_theta else representation(Value(self.x), [p.detach() for p in theta]).data
        bounds = np.cumsum([0] + [len(b) for b in trajectory.inputs])
        self.batches = [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def loss(self, idx, theta, w) -> Value:
        if self.update_theta:
            out = predict(Value(self.x[idx]), theta, w)
        else:
            out = pln_forward(Value(self.h[idx]), w)
        return task_loss(out, self.y[idx], self.kind)

    def step(self, idx, lr: float, step: int, penalty=None) -> float:
        params = [*self.theta, *self.w] if self.update_theta else list(self.w)
        loss = self.loss(idx, self.theta, self.w)
        total = loss if penalty is None else loss + penalty(self.w)
        if not np.isfinite(total.data):
            raise NumericError("non-finite training loss", step=step)
        gm = backward(total, params)
        new = []
        for p in params:
            data = p.data - lr * gm[p].data
            if not np.isfinite(data).all():
                raise NumericError("update diverged", step=step)
            new.append(Value(data, requires_grad=True))
        if self.update_theta:
            self.theta, self.w = new[: len(self.theta)], new[len(self.theta):]
        else:
            self.w = new
        return loss.item()


def online(theta, w0, trajectory, lr, kind, update_theta=False):
    """Plain single-pass SGD in trajectory order. Returns ``(theta, w, losses)``."""
    L = _Learner(theta, w0, trajectory, kind, update_theta)
    losses = [L.step(idx, lr, t) for t, idx in enumerate(L.batches)]
    return L.theta, L.w, losses


def approx_iid_train(theta, w0, trajectory, lr, kind, rng, update_theta=False):
    """Single-pass SGD over a uniform shuffle of the trajectory's samples.

    Returns ``(theta, w, losses, order)``; ``order`` is the visiting permutation.
    """
    L = _Learner(theta, w0, trajectory, kind, update_theta)
    order = rng.permutation(len(L.x))
    bs = len(L.batches[0])
    losses = [L.step(order[s:s + bs], lr, t) for t, s in enumerate(range(0, len(order), bs))]
    return L.theta, L.w, losses, order


def er_reservoir_train(theta, w0, trajectory, lr, kind, rng, capacity=200, replay_batch=8, update_theta=False):
    """Online SGD where each step also replays samples from a reservoir buffer.

    The loss is the mean over the new batch and the replayed samples; new
    samples are offered to the buffer after the step. Returns
    ``(theta, w, losses, buffer)``.
    """
    L = _Learner(theta, w0, trajectory, kind, update_theta)
    buf = ReplayBuffer(capacity)
    losses = []
    for t, idx in enumerate(L.batches):
        replay = buf.sample(replay_batch, rng)
        batch = np.concatenate([idx, np.asarray(replay, dtype=idx.dtype)]) if replay else idx
        losses.append(L.step(batch, lr, t))
        for i in idx:
            buf.offer(int(i), rng)
    return L.theta, L.w, losses, buf


def ewc_fisher(theta, w, x, y, kind: str) -> FisherState:
    """Diagonal empirical Fisher: mean over samples of squared per-sample gradients w.r.t. ``w``."""
    if len(x) == 0:
        raise ContractError("empty sample set")
    h = representation(Value(x), [p.detach() for p in theta]).data
    fisher = [np.zeros(p.shape) for p in w]
    for i in range(len(x)):
        loss = task_loss(pln_forward(Value(h[i:i + 1]), w), y[i:i + 1], kind)
        gm = backward(loss, w)
        for f, p in zip(fisher, w):
            f += gm[p].data ** 2
    return FisherState([p.data.copy() for p in w], [f / len(x) for f in fisher])


def ewc_penalty(states: list[FisherState], lam: float):
    """``w -> (lam / 2) * sum_t sum_i F_ti (w_i - w*_ti)^2`` as a graph Value."""
    def penalty(w):
        total = None
        for st in states:
            for p, a, f in zip(w, st.anchor, st.fisher):
                d = sub(p, Value(a))
                term = vsum(mul(Value(f), mul(d, d)))
                total = term if total is None else total + term
        return total * (0.5 * lam)
    return penalty


def ewc_train(theta, w0, trajectory, lr, kind, lam, update_theta=False):
    """Online SGD with an EWC penalty refreshed at every block boundary.

    At the end of each block the Fisher is estimated on that block's samples at
    the current PLN and its anchor is the current PLN; penalties of all past
    blocks are summed. Returns ``(theta, w, losses, states)``.
    """
    L = _Learner(theta, w0, trajectory, kind, update_theta)
    states: list[FisherState] = []
    losses = []
    batch_blocks = trajectory.blocks
    for t, idx in enumerate(L.batches):
        penalty = ewc_penalty(states, lam) if (lam and states) else None
        losses.append(L.step(idx, lr, t, penalty))
        last_of_block = t == len(L.batches) - 1 or batch_blocks[t + 1] != batch_blocks[t]
        if last_of_block and lam:
            sel = L.blocks == batch_blocks[t]
            states.append(ewc_fisher(L.theta, L.w, L.x[sel], L.y[sel], kind))
    return L.theta, L.w, losses, states


def run_method(method: str, theta, w0, trajectory, lr, kind, rng, update_theta=False, **kw):
    """Dispatch by method name; returns ``(theta, w, losses)``."""
    if method == "online":
        return online(theta, w0, trajectory, lr, kind, update_theta)
    if method == "approx-iid":
        return approx_iid_train(theta, w0, trajectory, lr, kind, rng, update_theta)[:3]
    if method == "er-reservoir":
        return er_reservoir_train(theta, w0, trajectory, lr, kind, rng, kw.get("capacity", 200),
                                  kw.get("replay_batch", 8), update_theta)[:3]
    if method == "ewc":
        return ewc_train(theta, w0, trajectory, lr, kind, kw.get("lam", 1.0), update_theta)[:3]
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


TABLE_FIELDS = ["method", "representation", "mode", "accuracy_mean", "accuracy_std", "seeds"]


def append_table_row(path, row: dict) -> None:
    """Append one result row to a CSV, writing the header for a new file."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)
