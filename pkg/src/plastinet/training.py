"""Minibatch training for the two-class detector.

The loop trains whatever the store marks trainable, which is how freezing
works everywhere in this package: frozen parameters are ordinary leaves that
request no gradient, so the tape never computes their weight gradients.
Optimizers keep per-parameter state in dicts keyed by parameter id and are
constructed fresh for each training stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .metrics import ScoreSet, compute_eer
from .params import ParamStore, save_checkpoint

__all__ = [
    "cross_entropy",
    "cross_entropy_graph",
    "Sgd",
    "Adam",
    "make_optimizer",
    "batch_for_model",
    "score_examples",
    "evaluate",
    "EpochStats",
    "TrainResult",
    "train_stage",
]


def cross_entropy(logits: Tensor, onehot: Tensor) -> Tensor:
    """Mean softmax cross entropy; onehot is a constant (N, 2) tensor."""
    n = logits.data.shape[0]
    picked = ad.mul(ad.log_softmax(logits), onehot)
    return ad.scale(ad.sum_all(picked), -1.0 / n, name="cross_entropy")


def cross_entropy_graph(model) -> Graph:
    """Graph from (batch, onehot labels) to the scalar training loss."""
    def build(ins, leaves):
        return cross_entropy(model.forward(leaves, ins[0]), ins[1])
    return Graph(build, name="loss")


class Sgd:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict) -> None:
        for pid in sorted(grads):
            g = grads[pid].data
            if self.momentum:
                v = self.velocity.get(pid)
                v = g if v is None else self.momentum * v + g
                self.velocity[pid] = v
                g = v
            params.entries[pid] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for pid in sorted(grads):
            g = grads[pid].data
            m = self.m.get(pid, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(pid, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[pid], self.v[pid] = m, v
            params.entries[pid] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r} (expected sgd or adam)")


def batch_for_model(model, x: np.ndarray) -> np.ndarray:
    """Reshape raw (N, freq, time) features for the model's input layout."""
    x = np.asarray(x, dtype=np.float64)
    if model.input_kind == "image":
        return x[:, None, :, :]
    if model.input_kind == "sequence":
        return np.transpose(x, (0, 2, 1))
    return x.reshape(x.shape[0], -1)


def score_examples(model, params: ParamStore, x: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Spoof score per example: logit(spoof) - logit(bona fide)."""
    from .layers import eval_leaves  # noqa: PLC0415 - cycle with layers

    xb = batch_for_model(model, x)
    leaves = eval_leaves(params)
    out = []
    for lo in range(0, xb.shape[0], batch_size):
        logits = model.forward(leaves, Tensor(xb[lo:lo + batch_size])).data
        out.append(logits[:, 1] - logits[:, 0])
    return np.concatenate(out)


def evaluate(model, params: ParamStore, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(mean cross entropy, EER) on a labelled split."""
    from .layers import eval_leaves  # noqa: PLC0415

    xb = batch_for_model(model, x)
    y = np.asarray(y, dtype=np.int64)
    leaves = eval_leaves(params)
    total, scores = 0.0, []
    for lo in range(0, xb.shape[0], 256):
        xs, ys = xb[lo:lo + 256], y[lo:lo + 256]
        logits = model.forward(leaves, Tensor(xs))
        loss = cross_entropy(logits, Tensor(np.eye(2)[ys]))
        total += float(loss.data) * len(ys)
        scores.append(logits.data[:, 1] - logits.data[:, 0])
    scores = np.concatenate(scores)
    return total / len(y), compute_eer(ScoreSet.from_labels(scores, y))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_eer: float

    def to_dict(self):
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "dev_loss": self.dev_loss, "dev_eer": self.dev_eer}


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_dev_eer: float | None = None   # None until an epoch has run
    best_epoch: int = -1
    best_values: dict | None = None     # ParamStore snapshot at the best epoch
    steps: int = 0


def train_stage(model, params: ParamStore, train_xy, dev_xy, *,
                epochs: int, batch_size: int, lr: float, optimizer: str = "adam",
                rng: np.random.Generator, checkpoint_dir=None, tag: str = "stage",
                log=None) -> TrainResult:
    """Train for a fixed number of epochs; track the best dev-EER snapshot.

    Leaves ``params`` at the last-epoch weights (stage transitions continue
    from there) and returns the best-epoch snapshot separately (final
    reporting uses it).  Raises ArithmeticError naming epoch and batch if the
    loss goes non-finite.
    """
    train_x, train_y = train_xy
    dev_x, dev_y = dev_xy
    xb = batch_for_model(model, train_x)
    yb = np.asarray(train_y, dtype=np.int64)
    graph = cross_entropy_graph(model)
    opt = make_optimizer(optimizer, lr)
    result = TrainResult()

    for epoch in range(epochs):
        order = rng.permutation(len(yb))
        running, seen = 0.0, 0
        for bi, lo in enumerate(range(0, len(order), batch_size)):
            idx = order[lo:lo + batch_size]
            onehot = np.eye(2)[yb[idx]]
            try:
                loss = ad.forward(graph, [xb[idx], onehot], params)
            except ArithmeticError as exc:
                raise ArithmeticError(
                    f"{tag}: non-finite loss at epoch {epoch} batch {bi}") from exc
            grads = ad.backward(graph, params)
            opt.step(params, grads)
            running += float(loss.data) * len(idx)
            seen += len(idx)
            result.steps += 1
        dev_loss, dev_eer = evaluate(model, params, dev_x, dev_y)
        stats = EpochStats(epoch, running / seen, dev_loss, dev_eer)
        result.history.append(stats)
        if log is not None:
            log(f"{tag} epoch {epoch}: train_loss={stats.train_loss:.4f} "
                f"dev_loss={dev_loss:.4f} dev_eer={100 * dev_eer:.2f}%")
        if result.best_dev_eer is None or dev_eer < result.best_dev_eer:
            result.best_dev_eer = dev_eer
            result.best_epoch = epoch
            result.best_values = params.snapshot()
            if checkpoint_dir is not None:
                save_checkpoint(params, Path(checkpoint_dir) / f"{tag}-best.npz")

    if checkpoint_dir is not None:
        save_checkpoint(params, Path(checkpoint_dir) / f"{tag}-last.npz")
    return result
