"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` is a node in a dynamically recorded computation tape.
Operations build the tape as they execute; :func:`backward` replays it in
reverse topological order.  Gradients are only materialized for nodes that
(transitively) depend on a leaf with ``requires_grad=True``, so freezing a
parameter genuinely removes its gradient work from the backward pass.

Everything is double precision.  There is no implicit broadcasting beyond
bias addition; shape mismatches raise immediately with the offending node
named.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphStateError",
    "forward",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "affine",
    "scale",
    "add_bias",
    "add_channel_bias",
    "linear",
    "matmul",
    "bmm",
    "transpose_last2",
    "reshape",
    "slice_axis",
    "scatter_axis",
    "concat",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log_softmax",
    "sum_all",
    "mean_all",
    "sum_axis",
    "mean_axes",
    "conv2d",
]


class GraphStateError(RuntimeError):
    """Raised when backward is requested before a forward pass exists."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient.

    Leaf tensors hold data (inputs, parameters); interior tensors are
    produced by the ops below and keep references to their parents plus a
    closure that propagates the output gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None],
          name: str | None = None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = name
    out._parents = tuple(parents)
    out._backward = backward if out.requires_grad else None
    return out


def _where(name: str | None) -> str:
    return f" at {name!r}" if name else ""


def _check_same_shape(a: Tensor, b: Tensor, op: str, name: str | None) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op} shape mismatch{_where(name)}: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and affine ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    _check_same_shape(a, b, "add", name)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _node(data, (a, b), bw, name)


def sub(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    _check_same_shape(a, b, "sub", name)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _node(data, (a, b), bw, name)


def mul(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    _check_same_shape(a, b, "mul", name)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _node(data, (a, b), bw, name)


def affine(a: Tensor, alpha: float, beta: float = 0.0, name: str | None = None) -> Tensor:
    """alpha * a + beta, elementwise with scalars."""
    data = alpha * a.data + beta

    def bw(g):
        if a.requires_grad:
            a.accumulate(alpha * g)

    return _node(data, (a,), bw, name)


def scale(a: Tensor, alpha: float, name: str | None = None) -> Tensor:
    return affine(a, alpha, 0.0, name)


def add_bias(x: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    """x + b where b has the shape of x's last axis (broadcast over the rest)."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(
            f"add_bias shape mismatch{_where(name)}: x {x.data.shape} vs bias {b.data.shape}")
    data = x.data + b.data

    def bw(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            axes = tuple(range(g.ndim - 1))
            b.accumulate(g.sum(axis=axes) if axes else g)

    return _node(data, (x, b), bw, name)


def add_channel_bias(x: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    """x + b along the channel axis of an (N, C, H, W) tensor."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"add_channel_bias shape mismatch{_where(name)}: x {x.data.shape} vs bias {b.data.shape}")
    data = x.data + b.data[None, :, None, None]

    def bw(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _node(data, (x, b), bw, name)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, name: str | None = None) -> Tensor:
    """x @ w.T for a weight stored as (out, in); x may have extra leading axes."""
    if w.data.ndim != 2 or x.data.ndim < 1 or x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(
            f"linear shape mismatch{_where(name)}: x {x.data.shape} vs w {w.data.shape}")
    data = x.data @ w.data.T

    def bw(g):
        if x.requires_grad:
            x.accumulate(g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            w.accumulate(g2.T @ x2)

    return _node(data, (x, w), bw, name)


def matmul(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    """Plain 2-D matrix product a @ b."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch{_where(name)}: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _node(data, (a, b), bw, name)


def bmm(a: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    """Batched matrix product for matching leading axes: (..., m, k) @ (..., k, n)."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2] \
            or a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"bmm shape mismatch{_where(name)}: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate(a.data.swapaxes(-1, -2) @ g)

    return _node(data, (a, b), bw, name)


def transpose_last2(a: Tensor, name: str | None = None) -> Tensor:
    if a.data.ndim < 2:
        raise ValueError(f"transpose_last2 needs ndim >= 2{_where(name)}: {a.data.shape}")
    data = np.ascontiguousarray(a.data.swapaxes(-1, -2))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.swapaxes(-1, -2))

    return _node(data, (a,), bw, name)


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...], name: str | None = None) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), bw, name)


def slice_axis(a: Tensor, axis: int, start: int, stop: int, name: str | None = None) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"slice [{start}:{stop}) out of bounds for axis {axis} of size {n}{_where(name)}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate(full)

    return _node(data, (a,), bw, name)


def scatter_axis(a: Tensor, axis: int, offset: int, total: int, name: str | None = None) -> Tensor:
    """Embed a into a zero tensor whose given axis has length ``total``."""
    k = a.data.shape[axis]
    if not (0 <= offset and offset + k <= total):
        raise ValueError(
            f"scatter [{offset}:{offset + k}) out of bounds for axis {axis} of size {total}{_where(name)}")
    shape = list(a.data.shape)
    shape[axis] = total
    data = np.zeros(shape, dtype=np.float64)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(offset, offset + k)
    idx = tuple(idx)
    data[idx] = a.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.ascontiguousarray(g[idx]))

    return _node(data, (a,), bw, name)


def concat(parts: Sequence[Tensor], axis: int, name: str | None = None) -> Tensor:
    if not parts:
        raise ValueError(f"concat of zero tensors{_where(name)}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _node(data, tuple(parts), bw, name)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor, name: str | None = None) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0.0))

    return _node(data, (a,), bw, name)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails: never exponentiates a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor, name: str | None = None) -> Tensor:
    data = _sigmoid(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * data * (1.0 - data))

    return _node(data, (a,), bw, name)


def tanh(a: Tensor, name: str | None = None) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - data * data))

    return _node(data, (a,), bw, name)


def softmax(a: Tensor, name: str | None = None) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate(data * (g - inner))

    return _node(data, (a,), bw, name)


def log_softmax(a: Tensor, name: str | None = None) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bw(g):
        if a.requires_grad:
            sm = np.exp(data)
            a.accumulate(g - sm * g.sum(axis=-1, keepdims=True))

    return _node(data, (a,), bw, name)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor, name: str | None = None) -> Tensor:
    data = np.asarray(a.data.sum())

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.data.shape).astype(np.float64))

    return _node(data, (a,), bw, name)


def mean_all(a: Tensor, name: str | None = None) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean())

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.full(a.data.shape, float(g) / n))

    return _node(data, (a,), bw, name)


def sum_axis(a: Tensor, axis: int, name: str | None = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis=axis))

    return _node(data, (a,), bw, name)


def mean_axes(a: Tensor, axes: tuple[int, ...], name: str | None = None) -> Tensor:
    """Mean over a set of axes (used for temporal and spatial pooling)."""
    axes = tuple(sorted(ax % a.data.ndim for ax in axes))
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = a.data.mean(axis=axes)

    def bw(g):
        if a.requires_grad:
            ge = g
            for ax in axes:
                ge = np.expand_dims(ge, ax)
            a.accumulate(np.broadcast_to(ge, a.data.shape) / count)

    return _node(data, (a,), bw, name)


# ---------------------------------------------------------------------------
# 2-D convolution (cross-correlation)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           name: str | None = None) -> Tensor:
    """Cross-correlate (N, C, H, W) input with (O, C, kh, kw) filters."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight{_where(name)}: "
                         f"{x.data.shape} vs {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv2d channel mismatch{_where(name)}: input has "
                         f"{x.data.shape[1]} channels, weight expects {w.data.shape[1]}")
    n, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output collapses to zero size{_where(name)}: "
                         f"input {x.data.shape}, kernel {(kh, kw)}, stride {s}, padding {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    data = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)

    def bw(g):
        if w.requires_grad:
            w.accumulate(np.einsum("nchwij,nohw->ocij", win, g, optimize=True))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    t = np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
                    dxp[:, :, i:i + oh * s:s, j:j + ow * s:s] += t
            x.accumulate(dxp[:, :, p:p + h, p:p + wd] if p else dxp)

    return _node(data, (x, w), bw, name)


# ---------------------------------------------------------------------------
# tape traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; GRU tapes routinely exceed the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Run reverse-mode accumulation from ``root`` into every reachable node.

    Grads are reset before seeding, so repeated calls on the same tape are
    idempotent.  Intermediate grads stay readable afterwards (Grad-CAM needs
    the gradient at a hidden feature map).
    """
    if not root.requires_grad:
        return
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data) if seed is None else _as_f64(seed).reshape(root.data.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# graph facade
# ---------------------------------------------------------------------------

class _LeafView(dict):
    """Parameter-leaf lookup that names the missing parameter on failure."""

    def __missing__(self, key):
        raise KeyError(f"unknown parameter {key!r} referenced by graph")


class Graph:
    """A reusable computation: a build function from (inputs, parameter leaves)
    to an output tensor, re-recorded on every forward pass.

    Re-evaluation with identical inputs and parameters is bit-identical since
    the tape is rebuilt from the same primitive calls in the same order.
    """

    def __init__(self, build: Callable[[list[Tensor], dict], Tensor],
                 input_shapes: Sequence[tuple[int, ...]] | None = None,
                 name: str | None = None):
        self.build = build
        self.input_shapes = list(input_shapes) if input_shapes is not None else None
        self.name = name
        self._last_output: Optional[Tensor] = None
        self._last_leaves: Optional[dict[str, Tensor]] = None


def forward(graph: Graph, inputs: Iterable, params) -> Tensor:
    """Evaluate the graph; caches activations for a subsequent backward."""
    in_tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    if graph.input_shapes is not None:
        if len(in_tensors) != len(graph.input_shapes):
            raise ValueError(f"graph{_where(graph.name)} expects {len(graph.input_shapes)} "
                             f"inputs, got {len(in_tensors)}")
        for i, (t, s) in enumerate(zip(in_tensors, graph.input_shapes)):
            if tuple(t.data.shape) != tuple(s):
                raise ValueError(f"input {i} shape mismatch{_where(graph.name)}: "
                                 f"declared {tuple(s)}, got {t.data.shape}")
    leaves = _LeafView()
    for pid in params.entries:
        leaves[pid] = Tensor(params.entries[pid], requires_grad=pid in params.trainable, name=pid)
    out = graph.build(in_tensors, leaves)
    if not np.isfinite(out.data).all():
        raise ArithmeticError(f"non-finite values in forward output{_where(graph.name)}")
    graph._last_output = out
    graph._last_leaves = dict(leaves)
    return out


def backward(graph: Graph, params) -> dict[str, Tensor]:
    """Gradients per trainable parameter for the most recent forward pass."""
    if graph._last_output is None or graph._last_leaves is None:
        raise GraphStateError("backward called before forward")
    backprop(graph._last_output)
    grads: dict[str, Tensor] = {}
    for pid in sorted(params.trainable):
        leaf = graph._last_leaves.get(pid)
        if leaf is None:
            continue
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        grads[pid] = Tensor(g)
    return grads


def finite_diff_check(graph: Graph, params, eps: float = 1e-5,
                      inputs: Iterable | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The graph must be scalar valued.  Relative error for one entry is
    |analytic - numeric| / max(1, |numeric|).
    """
    inputs = list(inputs) if inputs is not None else []
    out = forward(graph, inputs, params)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check requires a scalar-valued graph, got shape {out.data.shape}")
    grads = backward(graph, params)
    worst = 0.0
    for pid in sorted(params.trainable):
        base = params.entries[pid]
        analytic = grads[pid].data
        flat = base.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = float(forward(graph, inputs, params).data)
            flat[k] = orig - eps
            f_minus = float(forward(graph, inputs, params).data)
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    # Leave the cache in the unperturbed state.
    forward(graph, inputs, params)
    return worst
