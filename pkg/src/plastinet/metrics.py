"""Evaluation metrics, backward-pass timing, and the results table.

The equal error rate here follows the spoof-detection convention: higher
score means "more likely spoofed".  ``compute_eer`` is the fast vectorized
path; ``eer_bruteforce`` recomputes the same quantity with plain Python
loops and shares no code with it, so the two can check each other.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ScoreSet",
    "compute_eer",
    "eer_bruteforce",
    "gradcam",
    "gradcam_bruteforce",
    "measure_backward_time",
    "RunReport",
    "CSV_HEADER",
    "emit_report",
    "parse_report_csv",
]


# ---------------------------------------------------------------------------
# equal error rate
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    """Detector scores split by ground truth; higher score = spoof."""
    bona: np.ndarray
    spoof: np.ndarray

    def __post_init__(self):
        self.bona = np.asarray(self.bona, dtype=np.float64).reshape(-1)
        self.spoof = np.asarray(self.spoof, dtype=np.float64).reshape(-1)
        if self.bona.size == 0 or self.spoof.size == 0:
            raise ValueError("ScoreSet needs at least one bona fide and one spoof score")

    @staticmethod
    def from_labels(scores, labels) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        if scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
        return ScoreSet(scores[labels == 0], scores[labels == 1])


def _thresholds(all_scores: np.ndarray) -> np.ndarray:
    """Midpoints between distinct scores plus sentinels outside the range."""
    u = np.unique(all_scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate(([u[0] - 1.0], mids, [u[-1] + 1.0]))


def compute_eer(scores: ScoreSet) -> float:
    """Equal error rate in [0, 1].

    With decision "call it spoof when score >= threshold":
    FAR(t) = fraction of spoof below t (spoof passed as bona fide),
    FRR(t) = fraction of bona fide at or above t.  FAR rises with t and FRR
    falls, so FAR - FRR crosses zero once; the EER is the value at that
    crossing, linearly interpolated between neighbouring thresholds.
    """
    bona = np.sort(scores.bona)
    spoof = np.sort(scores.spoof)
    thr = _thresholds(np.concatenate([bona, spoof]))
    far = np.searchsorted(spoof, thr, side="left") / spoof.size
    frr = 1.0 - np.searchsorted(bona, thr, side="left") / bona.size
    diff = far - frr
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0:
        return float(far[k])
    d0, d1 = diff[k - 1], diff[k]
    w = -d0 / (d1 - d0)
    return float(far[k - 1] + w * (far[k] - far[k - 1]))


def eer_bruteforce(scores: ScoreSet) -> float:
    """Loop-based EER used as an independent oracle for compute_eer."""
    bona = [float(v) for v in scores.bona]
    spoof = [float(v) for v in scores.spoof]
    distinct = sorted(set(bona + spoof))
    cands = [distinct[0] - 1.0]
    for a, b in zip(distinct[:-1], distinct[1:]):
        cands.append((a + b) / 2.0)
    cands.append(distinct[-1] + 1.0)

    pts = []
    for t in cands:
        far = sum(1 for s in spoof if s < t) / len(spoof)
        frr = sum(1 for s in bona if s >= t) / len(bona)
        pts.append((far, frr))
    prev = None
    for far, frr in pts:
        d = far - frr
        if d == 0.0:
            return far
        if d > 0.0:
            far0, frr0 = prev
            d0 = far0 - frr0
            w = -d0 / (d - d0)
            return far0 + w * (far - far0)
        prev = (far, frr)
    raise AssertionError("FAR - FRR never crossed zero")  # pragma: no cover


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def gradcam(model, params, batch: np.ndarray, layer_index: int,
            target_class: int = 1) -> np.ndarray:
    """Class-activation heatmaps (N, H', W') from a conv layer's output.

    cam[n] = relu( sum_c alpha[n, c] * A[n, c] ) with A the captured feature
    map and alpha[n, c] the spatial mean of d logit[target] / d A[n, c].
    Each example's map is then min-max normalized to [0, 1]; a flat map
    (in particular the all-zero map from zero gradients) stays all-zero.
    """
    from .layers import eval_leaves  # noqa: PLC0415 - cycle with layers

    layer = model.layers[layer_index]
    if layer.kind != "conv2d":
        raise ValueError(f"gradcam needs a conv2d layer, L{layer_index} is {layer.kind}")
    if target_class not in (0, 1):
        raise ValueError(f"target_class must be 0 or 1, got {target_class}")
    x = Tensor(batch, requires_grad=True, name="gradcam_input")
    logits, captured = model.forward_with_capture(eval_leaves(params), x, {layer_index})
    fmap = captured[layer_index]
    target = ad.sum_all(ad.slice_axis(logits, 1, target_class, target_class + 1))
    ad.backprop(target)
    acts = fmap.data
    grads = fmap.grad
    alpha = grads.mean(axis=(2, 3))
    cam = np.maximum(np.einsum("nc,nchw->nhw", alpha, acts), 0.0)
    lo = cam.min(axis=(1, 2), keepdims=True)
    hi = cam.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = (span == 0.0)
    out = np.where(flat, 0.0, (cam - lo) / np.where(flat, 1.0, span))
    return out


def gradcam_bruteforce(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Loop-based CAM from a feature map and its gradient (test oracle)."""
    n, c, h, w = acts.shape
    out = np.zeros((n, h, w))
    for i in range(n):
        for j in range(c):
            weight = 0.0
            for p in range(h):
                for q in range(w):
                    weight += grads[i, j, p, q]
            weight /= h * w
            for p in range(h):
                for q in range(w):
                    out[i, p, q] += weight * acts[i, j, p, q]
    for i in range(n):
        for p in range(h):
            for q in range(w):
                if out[i, p, q] < 0.0:
                    out[i, p, q] = 0.0
    for i in range(n):
        lo = out[i, 0, 0]
        hi = out[i, 0, 0]
        for p in range(h):
            for q in range(w):
                if out[i, p, q] < lo:
                    lo = out[i, p, q]
                if out[i, p, q] > hi:
                    hi = out[i, p, q]
        for p in range(h):
            for q in range(w):
                if hi == lo:
                    out[i, p, q] = 0.0
                else:
                    out[i, p, q] = (out[i, p, q] - lo) / (hi - lo)
    return out


# ---------------------------------------------------------------------------
# backward timing
# ---------------------------------------------------------------------------

def measure_backward_time(model, params, x: np.ndarray, y: np.ndarray,
                          lr: float = 1e-3, iters: int = 30, warmup: int = 5) -> float:
    """Mean milliseconds of backward pass + masked SGD step on one batch.

    The forward pass is excluded: the claim under test is about gradient
    work, which freezing removes, while forward cost is identical for frozen
    and unfrozen variants.  BLAS threads are pinned to 1 so wall time tracks
    arithmetic.  Parameters are restored afterwards, so measuring does not
    perturb training.
    """
    from .training import batch_for_model, cross_entropy_graph, Sgd  # noqa: PLC0415

    snap = params.snapshot()
    graph = cross_entropy_graph(model)
    xb = batch_for_model(model, x)
    onehot = np.eye(2)[np.asarray(y, dtype=np.int64)]
    opt = Sgd(lr)
    times = []
    with threadpool_limits(limits=1):
        for i in range(warmup + iters):
            ad.forward(graph, [xb, onehot], params)
            t0 = time.perf_counter()
            grads = ad.backward(graph, params)
            opt.step(params, grads)
            t1 = time.perf_counter()
            if i >= warmup:
                times.append((t1 - t0) * 1000.0)
    params.restore(snap)
    return float(np.mean(times))


# ---------------------------------------------------------------------------
# the results table
# ---------------------------------------------------------------------------

CSV_HEADER = ["dataset", "model", "strategy", "test_eer_percent",
              "backward_ms_per_step", "params_total", "params_trainable"]


@dataclass
class RunReport:
    """One row of the comparison table plus run metadata.

    ``backward_ms`` and ``params_trainable`` may be None, rendered as "/"
    in the CSV: per-step timing and a single trainable count are not
    meaningful for runs whose cost profile changes mid-run (plasticity),
    and timing is skipped for adapter runs whose step cost is not the
    quantity under study.
    """
    dataset: str
    model: str
    strategy: str
    test_eer: float                       # fraction in [0, 1]
    backward_ms: float | None             # None renders as "/"
    params_total: int
    params_trainable: int | None          # None renders as "/"
    seed: int = 42
    total_epochs: int = 0
    history: list[dict] = field(default_factory=list)

    def to_row(self) -> list[str]:
        ms = "/" if self.backward_ms is None else f"{self.backward_ms:.4f}"
        trainable = "/" if self.params_trainable is None else str(self.params_trainable)
        return [self.dataset, self.model, self.strategy,
                f"{100.0 * self.test_eer:.4f}", ms,
                str(self.params_total), trainable]

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "strategy": self.strategy,
                "test_eer": self.test_eer, "backward_ms": self.backward_ms,
                "params_total": self.params_total, "params_trainable": self.params_trainable,
                "seed": self.seed, "total_epochs": self.total_epochs, "history": self.history}

    @staticmethod
    def from_dict(d) -> "RunReport":
        return RunReport(**d)


def emit_report(report, csv_path, curves_path=None) -> None:
    """Append run rows to the comparison CSV (plus optional JSONL curves).

    ``report`` is one RunReport or a list of them.  The header is written
    only when the file is new or empty; repeated emits append rows in call
    order.  Formatting is fixed-precision, so identical runs produce
    byte-identical files.
    """
    reports = report if isinstance(report, (list, tuple)) else [report]
    path = Path(csv_path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_HEADER)
        for rep in reports:
            writer.writerow(rep.to_row())
    if curves_path is not None:
        with open(curves_path, "a") as fh:
            for rep in reports:
                fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")


def parse_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != CSV_HEADER:
        raise ValueError(f"unexpected report header: {list(rows[0].keys())}")
    return rows
