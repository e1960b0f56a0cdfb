"""Expandable layer families and the sequential classification model.

A layer never owns arrays; it owns *logical weights* described by
:class:`BlockWeight` / :class:`BlockVector`, each assembled from one or more
rectangular bricks stored under their own ids in a ``ParamStore``.  A freshly
built layer has a single brick per weight.  Neuron growth appends further
bricks (new output rows, new input columns, recurrent corner blocks) without
touching the originals, which keeps freezing, pruning and parameter counting
exact; see the growth module.

Forward passes assemble each logical weight application from its bricks:
``y = sum_b scatter(x[cols_b] @ W_b.T, rows_b)``.  Row/column blocking of a
matrix product is exact, so an unexpanded layer and the same layer with only
zero-valued bricks added compute identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore

__all__ = [
    "Brick",
    "Seg",
    "BlockWeight",
    "BlockVector",
    "DenseLayer",
    "Conv2dLayer",
    "GruLayer",
    "AttentionBlock",
    "Flatten",
    "TimeMeanPool",
    "ModelGraph",
    "build_model",
    "eval_leaves",
    "dense_forward",
    "conv2d_forward",
    "gru_forward",
    "attention_forward",
    "model_forward",
]

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid")


# ---------------------------------------------------------------------------
# block-structured logical weights
# ---------------------------------------------------------------------------

@dataclass
class Brick:
    """One stored tensor and its placement inside a logical 2-axis weight."""
    param_id: str
    out_range: tuple[int, int]
    in_range: tuple[int, int]

    def to_list(self):
        return [self.param_id, *self.out_range, *self.in_range]

    @staticmethod
    def from_list(v):
        return Brick(v[0], (v[1], v[2]), (v[3], v[4]))


@dataclass
class Seg:
    """One stored vector segment of a logical 1-axis weight (a bias)."""
    param_id: str
    start: int
    stop: int


@dataclass
class BlockWeight:
    logical_id: str
    out_dim: int
    in_dim: int
    bricks: list[Brick] = field(default_factory=list)

    def param_ids(self):
        return [b.param_id for b in self.bricks]

    def next_brick_id(self):
        return f"{self.logical_id}.br{len(self.bricks)}"

    def materialize(self, store: ParamStore) -> np.ndarray:
        """Dense copy of the assembled weight (inspection and oracles only)."""
        first = store.get(self.bricks[0].param_id)
        out = np.zeros((self.out_dim, self.in_dim) + first.shape[2:], dtype=np.float64)
        for b in self.bricks:
            out[b.out_range[0]:b.out_range[1], b.in_range[0]:b.in_range[1]] = store.get(b.param_id)
        return out

    def to_dict(self):
        return {"logical_id": self.logical_id, "out_dim": self.out_dim,
                "in_dim": self.in_dim, "bricks": [b.to_list() for b in self.bricks]}

    @staticmethod
    def from_dict(d):
        return BlockWeight(d["logical_id"], d["out_dim"], d["in_dim"],
                           [Brick.from_list(v) for v in d["bricks"]])


@dataclass
class BlockVector:
    logical_id: str
    dim: int
    segs: list[Seg] = field(default_factory=list)

    def param_ids(self):
        return [s.param_id for s in self.segs]

    def next_seg_id(self):
        return f"{self.logical_id}.br{len(self.segs)}"

    def materialize(self, store: ParamStore) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        for s in self.segs:
            out[s.start:s.stop] = store.get(s.param_id)
        return out

    def to_dict(self):
        return {"logical_id": self.logical_id, "dim": self.dim,
                "segs": [[s.param_id, s.start, s.stop] for s in self.segs]}

    @staticmethod
    def from_dict(d):
        return BlockVector(d["logical_id"], d["dim"], [Seg(*v) for v in d["segs"]])


def eval_leaves(store: ParamStore) -> dict[str, Tensor]:
    """Non-trainable leaf per stored parameter (pure evaluation passes)."""
    return {pid: Tensor(arr, requires_grad=False, name=pid)
            for pid, arr in store.entries.items()}


def train_leaves(store: ParamStore) -> dict[str, Tensor]:
    """Leaf per stored parameter, trainable per the store's trainable set."""
    return {pid: Tensor(arr, requires_grad=pid in store.trainable, name=pid)
            for pid, arr in store.entries.items()}


def _brick_leaf(leaves, brick: Brick, adapters):
    w = leaves[brick.param_id]
    if adapters and brick.param_id in adapters:
        a = adapters[brick.param_id]
        delta = ad.matmul(leaves[a.b_id], leaves[a.a_id], name=f"{brick.param_id}.lora")
        w = ad.add(w, ad.scale(delta, a.alpha / a.rank))
    return w


def blocked_linear(leaves, bw: BlockWeight, x: Tensor, adapters=None) -> Tensor:
    """Apply a logical (out, in) weight to the last axis of x, brick by brick."""
    if x.data.shape[-1] != bw.in_dim:
        raise ValueError(f"{bw.logical_id}: input dim {x.data.shape[-1]} != declared {bw.in_dim}")
    acc = None
    for brick in bw.bricks:
        w = _brick_leaf(leaves, brick, adapters)
        (o0, o1), (i0, i1) = brick.out_range, brick.in_range
        xs = x if (i0, i1) == (0, bw.in_dim) else ad.slice_axis(x, -1, i0, i1, name=bw.logical_id)
        c = ad.linear(xs, w, name=bw.logical_id)
        if (o0, o1) != (0, bw.out_dim):
            c = ad.scatter_axis(c, -1, o0, bw.out_dim, name=bw.logical_id)
        acc = c if acc is None else ad.add(acc, c)
    return acc


def blocked_conv2d(leaves, bw: BlockWeight, x: Tensor, stride: int, padding: int) -> Tensor:
    """Apply a logical (out_ch, in_ch, kh, kw) filter bank, brick by brick."""
    if x.data.shape[1] != bw.in_dim:
        raise ValueError(f"{bw.logical_id}: input has {x.data.shape[1]} channels, "
                         f"declared {bw.in_dim}")
    acc = None
    for brick in bw.bricks:
        w = leaves[brick.param_id]
        (o0, o1), (i0, i1) = brick.out_range, brick.in_range
        xs = x if (i0, i1) == (0, bw.in_dim) else ad.slice_axis(x, 1, i0, i1, name=bw.logical_id)
        c = ad.conv2d(xs, w, stride=stride, padding=padding, name=bw.logical_id)
        if (o0, o1) != (0, bw.out_dim):
            c = ad.scatter_axis(c, 1, o0, bw.out_dim, name=bw.logical_id)
        acc = c if acc is None else ad.add(acc, c)
    return acc


def blocked_vector(leaves, bv: BlockVector) -> Tensor:
    if len(bv.segs) == 1 and (bv.segs[0].start, bv.segs[0].stop) == (0, bv.dim):
        return leaves[bv.segs[0].param_id]
    acc = None
    for s in bv.segs:
        t = ad.scatter_axis(leaves[s.param_id], 0, s.start, bv.dim, name=bv.logical_id)
        acc = t if acc is None else ad.add(acc, t)
    return acc


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return x
    if kind == "relu":
        return ad.relu(x)
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# layer families
# ---------------------------------------------------------------------------

class DenseLayer:
    kind = "dense"

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 activation: str = "linear", expandable: bool = True):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r} for layer {name}")
        self.name = name
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.activation = activation
        self.expandable = expandable
        self.weight = BlockWeight(f"{name}.w", self.out_dim, self.in_dim)
        self.bias = BlockVector(f"{name}.b", self.out_dim)

    @property
    def width(self) -> int:
        return self.out_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        sigma = self.in_dim ** -0.5
        wid = self.weight.next_brick_id()
        store.add(wid, rng.normal(0.0, sigma, (self.out_dim, self.in_dim)))
        self.weight.bricks = [Brick(wid, (0, self.out_dim), (0, self.in_dim))]
        bid = self.bias.next_seg_id()
        store.add(bid, np.zeros(self.out_dim))
        self.bias.segs = [Seg(bid, 0, self.out_dim)]

    def forward(self, leaves, x: Tensor, adapters=None) -> Tensor:
        y = blocked_linear(leaves, self.weight, x, adapters)
        y = ad.add_bias(y, blocked_vector(leaves, self.bias), name=self.bias.logical_id)
        return _activate(y, self.activation)

    def param_ids(self):
        return self.weight.param_ids() + self.bias.param_ids()

    expansion_param_ids = param_ids

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "in_dim": self.in_dim,
                "out_dim": self.out_dim, "activation": self.activation,
                "expandable": self.expandable, "weight": self.weight.to_dict(),
                "bias": self.bias.to_dict()}

    @staticmethod
    def from_dict(d):
        layer = DenseLayer(d["name"], d["in_dim"], d["out_dim"], d["activation"], d["expandable"])
        layer.weight = BlockWeight.from_dict(d["weight"])
        layer.bias = BlockVector.from_dict(d["bias"])
        return layer


class Conv2dLayer:
    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel_h: int, kernel_w: int, stride: int = 1, padding: int = 0,
                 activation: str = "relu", expandable: bool = True):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r} for layer {name}")
        self.name = name
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_h = int(kernel_h)
        self.kernel_w = int(kernel_w)
        self.stride = int(stride)
        self.padding = int(padding)
        self.activation = activation
        self.expandable = expandable
        self.weight = BlockWeight(f"{name}.w", self.out_channels, self.in_channels)
        self.bias = BlockVector(f"{name}.b", self.out_channels)

    @property
    def width(self) -> int:
        return self.out_channels

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        return oh, ow

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        fan_in = self.in_channels * self.kernel_h * self.kernel_w
        wid = self.weight.next_brick_id()
        store.add(wid, rng.normal(0.0, fan_in ** -0.5,
                                  (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)))
        self.weight.bricks = [Brick(wid, (0, self.out_channels), (0, self.in_channels))]
        bid = self.bias.next_seg_id()
        store.add(bid, np.zeros(self.out_channels))
        self.bias.segs = [Seg(bid, 0, self.out_channels)]

    def forward(self, leaves, x: Tensor, adapters=None) -> Tensor:
        y = blocked_conv2d(leaves, self.weight, x, self.stride, self.padding)
        y = ad.add_channel_bias(y, blocked_vector(leaves, self.bias), name=self.bias.logical_id)
        return _activate(y, self.activation)

    def param_ids(self):
        return self.weight.param_ids() + self.bias.param_ids()

    expansion_param_ids = param_ids

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_h": self.kernel_h,
                "kernel_w": self.kernel_w, "stride": self.stride, "padding": self.padding,
                "activation": self.activation, "expandable": self.expandable,
                "weight": self.weight.to_dict(), "bias": self.bias.to_dict()}

    @staticmethod
    def from_dict(d):
        layer = Conv2dLayer(d["name"], d["in_channels"], d["out_channels"], d["kernel_h"],
                            d["kernel_w"], d["stride"], d["padding"], d["activation"],
                            d["expandable"])
        layer.weight = BlockWeight.from_dict(d["weight"])
        layer.bias = BlockVector.from_dict(d["bias"])
        return layer


GRU_GATES = ("z", "r", "h")


class GruLayer:
    """Gated recurrent unit:  h_t = (1 - z_t) * h_{t-1} + z_t * cand_t with
    z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
    cand = tanh(Wh x + Uh (r * h) + bh).  Initial hidden state is zero.
    """

    kind = "gru"

    def __init__(self, name: str, input_dim: int, hidden_dim: int,
                 return_sequences: bool = False, expandable: bool = True):
        self.name = name
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.return_sequences = bool(return_sequences)
        self.expandable = expandable
        self.w = {g: BlockWeight(f"{name}.{g}.w", self.hidden_dim, self.input_dim) for g in GRU_GATES}
        self.u = {g: BlockWeight(f"{name}.{g}.u", self.hidden_dim, self.hidden_dim) for g in GRU_GATES}
        self.b = {g: BlockVector(f"{name}.{g}.b", self.hidden_dim) for g in GRU_GATES}

    @property
    def width(self) -> int:
        return self.hidden_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for g in GRU_GATES:
            wid = self.w[g].next_brick_id()
            store.add(wid, rng.normal(0.0, self.input_dim ** -0.5, (self.hidden_dim, self.input_dim)))
            self.w[g].bricks = [Brick(wid, (0, self.hidden_dim), (0, self.input_dim))]
            uid = self.u[g].next_brick_id()
            store.add(uid, rng.normal(0.0, self.hidden_dim ** -0.5, (self.hidden_dim, self.hidden_dim)))
            self.u[g].bricks = [Brick(uid, (0, self.hidden_dim), (0, self.hidden_dim))]
            bid = self.b[g].next_seg_id()
            store.add(bid, np.zeros(self.hidden_dim))
            self.b[g].segs = [Seg(bid, 0, self.hidden_dim)]

    def forward(self, leaves, x: Tensor, adapters=None) -> Tensor:
        if x.data.ndim != 3 or x.data.shape[-1] != self.input_dim:
            raise ValueError(f"{self.name}: expected sequence (N, T, {self.input_dim}), "
                             f"got {x.data.shape}")
        n, t_len, d = x.data.shape
        if t_len == 0:
            raise ValueError(f"{self.name}: empty sequence")
        bias = {g: blocked_vector(leaves, self.b[g]) for g in GRU_GATES}
        h = Tensor(np.zeros((n, self.hidden_dim)))
        steps = []
        for t in range(t_len):
            xt = ad.reshape(ad.slice_axis(x, 1, t, t + 1), (n, d))
            z = ad.sigmoid(ad.add_bias(ad.add(blocked_linear(leaves, self.w["z"], xt),
                                              blocked_linear(leaves, self.u["z"], h)), bias["z"]))
            r = ad.sigmoid(ad.add_bias(ad.add(blocked_linear(leaves, self.w["r"], xt),
                                              blocked_linear(leaves, self.u["r"], h)), bias["r"]))
            cand = ad.tanh(ad.add_bias(ad.add(blocked_linear(leaves, self.w["h"], xt),
                                              blocked_linear(leaves, self.u["h"], ad.mul(r, h))),
                                       bias["h"]))
            h = ad.add(ad.mul(ad.affine(z, -1.0, 1.0), h), ad.mul(z, cand))
            if self.return_sequences:
                steps.append(ad.reshape(h, (n, 1, self.hidden_dim)))
        return ad.concat(steps, 1) if self.return_sequences else h

    def param_ids(self):
        ids = []
        for g in GRU_GATES:
            ids += self.w[g].param_ids() + self.u[g].param_ids() + self.b[g].param_ids()
        return ids

    expansion_param_ids = param_ids

    def gate_param_count(self, store: ParamStore, gate: str) -> int:
        ids = self.w[gate].param_ids() + self.u[gate].param_ids() + self.b[gate].param_ids()
        return sum(store.get(p).size for p in ids)

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "input_dim": self.input_dim,
                "hidden_dim": self.hidden_dim, "return_sequences": self.return_sequences,
                "expandable": self.expandable,
                "w": {g: self.w[g].to_dict() for g in GRU_GATES},
                "u": {g: self.u[g].to_dict() for g in GRU_GATES},
                "b": {g: self.b[g].to_dict() for g in GRU_GATES}}

    @staticmethod
    def from_dict(d):
        layer = GruLayer(d["name"], d["input_dim"], d["hidden_dim"],
                         d["return_sequences"], d["expandable"])
        layer.w = {g: BlockWeight.from_dict(d["w"][g]) for g in GRU_GATES}
        layer.u = {g: BlockWeight.from_dict(d["u"][g]) for g in GRU_GATES}
        layer.b = {g: BlockVector.from_dict(d["b"][g]) for g in GRU_GATES}
        return layer


class AttentionBlock:
    """Single-head-group encoder block: per-head scaled dot-product attention
    with a residual, followed by a two-layer feed-forward sublayer with a
    residual.  Expansion grows head_dim uniformly; model_dim never changes.

    ``scale_mode`` controls the softmax temperature after expansion:
    "expanded" uses 1/sqrt(current head_dim), "original" keeps the head_dim
    recorded before the first expansion (required for exact zero-init
    function preservation).
    """

    kind = "attention"

    def __init__(self, name: str, model_dim: int, num_heads: int, head_dim: int,
                 ff_dim: int, scale_mode: str = "expanded", expandable: bool = True):
        if scale_mode not in ("expanded", "original"):
            raise ValueError(f"unknown scale_mode {scale_mode!r} for layer {name}")
        self.name = name
        self.model_dim = int(model_dim)
        self.num_heads = int(num_heads)
        self.head_dim = int(head_dim)
        self.ff_dim = int(ff_dim)
        self.scale_mode = scale_mode
        self.scale_dim = int(head_dim)  # pre-expansion head_dim, for scale_mode=original
        self.expandable = expandable
        self.wq = [BlockWeight(f"{name}.h{i}.wq", self.head_dim, self.model_dim)
                   for i in range(self.num_heads)]
        self.wk = [BlockWeight(f"{name}.h{i}.wk", self.head_dim, self.model_dim)
                   for i in range(self.num_heads)]
        self.wv = [BlockWeight(f"{name}.h{i}.wv", self.head_dim, self.model_dim)
                   for i in range(self.num_heads)]
        self.wo = [BlockWeight(f"{name}.h{i}.wo", self.model_dim, self.head_dim)
                   for i in range(self.num_heads)]
        self.ff1 = BlockWeight(f"{name}.ff1.w", self.ff_dim, self.model_dim)
        self.ff1_b = BlockVector(f"{name}.ff1.b", self.ff_dim)
        self.ff2 = BlockWeight(f"{name}.ff2.w", self.model_dim, self.ff_dim)
        self.ff2_b = BlockVector(f"{name}.ff2.b", self.model_dim)

    @property
    def width(self) -> int:
        return self.head_dim

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        def one(bw: BlockWeight, sigma: float):
            pid = bw.next_brick_id()
            store.add(pid, rng.normal(0.0, sigma, (bw.out_dim, bw.in_dim)))
            bw.bricks = [Brick(pid, (0, bw.out_dim), (0, bw.in_dim))]

        for i in range(self.num_heads):
            one(self.wq[i], self.model_dim ** -0.5)
            one(self.wk[i], self.model_dim ** -0.5)
            one(self.wv[i], self.model_dim ** -0.5)
            one(self.wo[i], self.head_dim ** -0.5)
        one(self.ff1, self.model_dim ** -0.5)
        one(self.ff2, self.ff_dim ** -0.5)
        for bv in (self.ff1_b, self.ff2_b):
            pid = bv.next_seg_id()
            store.add(pid, np.zeros(bv.dim))
            bv.segs = [Seg(pid, 0, bv.dim)]

    def attention(self, leaves, x: Tensor, return_weights: bool = False):
        """The attention sublayer only: heads, output projection, residual."""
        if x.data.ndim != 3 or x.data.shape[-1] != self.model_dim:
            raise ValueError(f"{self.name}: expected sequence (N, T, {self.model_dim}), "
                             f"got {x.data.shape}")
        d = self.head_dim if self.scale_mode == "expanded" else self.scale_dim
        inv_temp = 1.0 / np.sqrt(float(d))
        acc = None
        weights = []
        for i in range(self.num_heads):
            q = blocked_linear(leaves, self.wq[i], x)
            k = blocked_linear(leaves, self.wk[i], x)
            v = blocked_linear(leaves, self.wv[i], x)
            scores = ad.scale(ad.bmm(q, ad.transpose_last2(k)), inv_temp, name=f"{self.name}.h{i}")
            attn = ad.softmax(scores)
            head = ad.bmm(attn, v)
            out = blocked_linear(leaves, self.wo[i], head)
            acc = out if acc is None else ad.add(acc, out)
            if return_weights:
                weights.append(attn)
        y = ad.add(acc, x)
        return (y, weights) if return_weights else y

    def forward(self, leaves, x: Tensor, adapters=None) -> Tensor:
        y = self.attention(leaves, x)
        f = ad.add_bias(blocked_linear(leaves, self.ff1, y), blocked_vector(leaves, self.ff1_b))
        f = ad.add_bias(blocked_linear(leaves, self.ff2, ad.relu(f)),
                        blocked_vector(leaves, self.ff2_b))
        return ad.add(y, f)

    def head_weights(self):
        return self.wq + self.wk + self.wv + self.wo

    def param_ids(self):
        ids = []
        for bw in self.head_weights() + [self.ff1, self.ff2]:
            ids += bw.param_ids()
        return ids + self.ff1_b.param_ids() + self.ff2_b.param_ids()

    def expansion_param_ids(self):
        ids = []
        for bw in self.head_weights():
            ids += bw.param_ids()
        return ids

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "model_dim": self.model_dim,
                "num_heads": self.num_heads, "head_dim": self.head_dim, "ff_dim": self.ff_dim,
                "scale_mode": self.scale_mode, "scale_dim": self.scale_dim,
                "expandable": self.expandable,
                "wq": [w.to_dict() for w in self.wq], "wk": [w.to_dict() for w in self.wk],
                "wv": [w.to_dict() for w in self.wv], "wo": [w.to_dict() for w in self.wo],
                "ff1": self.ff1.to_dict(), "ff1_b": self.ff1_b.to_dict(),
                "ff2": self.ff2.to_dict(), "ff2_b": self.ff2_b.to_dict()}

    @staticmethod
    def from_dict(d):
        blk = AttentionBlock(d["name"], d["model_dim"], d["num_heads"], d["head_dim"],
                             d["ff_dim"], d["scale_mode"], d["expandable"])
        blk.head_dim = d["head_dim"]
        blk.scale_dim = d["scale_dim"]
        blk.wq = [BlockWeight.from_dict(v) for v in d["wq"]]
        blk.wk = [BlockWeight.from_dict(v) for v in d["wk"]]
        blk.wv = [BlockWeight.from_dict(v) for v in d["wv"]]
        blk.wo = [BlockWeight.from_dict(v) for v in d["wo"]]
        blk.ff1 = BlockWeight.from_dict(d["ff1"])
        blk.ff1_b = BlockVector.from_dict(d["ff1_b"])
        blk.ff2 = BlockWeight.from_dict(d["ff2"])
        blk.ff2_b = BlockVector.from_dict(d["ff2_b"])
        return blk


class Flatten:
    """(N, C, H, W) -> (N, C*H*W).  Channel-major, so appended channels map to
    a trailing block of flat features; in_shape is fixed at model build."""

    kind = "flatten"
    expandable = False

    def __init__(self, name: str, in_shape: tuple[int, int, int] | None = None):
        self.name = name
        self.in_shape = tuple(in_shape) if in_shape else None

    def init_params(self, store, rng):
        pass

    def forward(self, leaves, x: Tensor, adapters=None) -> Tensor:
        n = x.data.shape[0]
        return ad.reshape(x, (n, int(np.prod(x.data.shape[1:]))), name=self.name)

    def param_ids(self):
        return []

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "in_shape": list(self.in_shape or ())}

    @staticmethod
    def from_dict(d):
        return Flatten(d["name"], tuple(d["in_shape"]) or None)


class TimeMeanPool:
    """(N, T, D) -> (N, D) by averaging over time."""

    kind = "mean_pool_time"
    expandable = False

    def __init__(self, name: str):
        self.name = name

    def init_params(self, store, rng):
        pass

    def forward(self, leaves, x: Tensor, adapters=None) -> Tensor:
        if x.data.ndim != 3:
            raise ValueError(f"{self.name}: expected (N, T, D), got {x.data.shape}")
        return ad.mean_axes(x, (1,), name=self.name)

    def param_ids(self):
        return []

    def to_dict(self):
        return {"kind": self.kind, "name": self.name}

    @staticmethod
    def from_dict(d):
        return TimeMeanPool(d["name"])


_LAYER_KINDS = {c.kind: c for c in (DenseLayer, Conv2dLayer, GruLayer, AttentionBlock,
                                    Flatten, TimeMeanPool)}

EXPANDABLE_KINDS = ("dense", "conv2d", "gru", "attention")


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------

class ModelGraph:
    """Ordered layer list plus a dense classifier head producing 2 logits."""

    def __init__(self, layers: list, head: DenseLayer, input_kind: str,
                 input_shape: tuple[int, ...]):
        if not layers:
            raise ValueError("model needs at least one layer")
        self.layers = layers
        self.head = head
        self.input_kind = input_kind
        self.input_shape = tuple(input_shape)
        self.adapters: dict[str, object] = {}

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_params(store, rng)
        self.head.init_params(store, rng)

    def forward(self, leaves, x: Tensor) -> Tensor:
        return self.forward_with_capture(leaves, x, None)[0]

    def forward_with_capture(self, leaves, x: Tensor, capture: set | None):
        """Run the stack; optionally keep the output node of selected layers."""
        if x.data.shape[1:] != self.input_shape:
            raise ValueError(f"batch shape {x.data.shape} does not match model input "
                             f"(N, {', '.join(map(str, self.input_shape))})")
        captured: dict[int, Tensor] = {}
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(leaves, h, self.adapters)
            if capture is not None and i in capture:
                captured[i] = h
        logits = self.head.forward(leaves, h, self.adapters)
        return logits, captured

    def expandable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.expandable]

    def all_param_ids(self) -> list[str]:
        ids = []
        for layer in self.layers:
            ids += layer.param_ids()
        return ids + self.head.param_ids()

    def consumer_of(self, index: int):
        """First parametric layer (or the head) downstream of ``index``,
        together with the flat multiplier a flatten in between introduces."""
        mult = 1
        for j in range(index + 1, len(self.layers)):
            nxt = self.layers[j]
            if nxt.kind == "flatten":
                if nxt.in_shape is None:
                    raise ValueError(f"{nxt.name}: flatten input shape unknown; "
                                     "build the model through build_model")
                mult = int(np.prod(nxt.in_shape[1:]))
                continue
            if nxt.kind == "mean_pool_time":
                continue
            return nxt, mult
        return self.head, mult

    def to_dict(self):
        return {"input_kind": self.input_kind, "input_shape": list(self.input_shape),
                "layers": [l.to_dict() for l in self.layers], "head": self.head.to_dict()}

    @staticmethod
    def from_dict(d):
        layers = [_LAYER_KINDS[v["kind"]].from_dict(v) for v in d["layers"]]
        head = DenseLayer.from_dict(d["head"])
        return ModelGraph(layers, head, d["input_kind"], tuple(d["input_shape"]))


def build_model(layer_specs: list[dict], feature_shape: tuple[int, int],
                head_spec: dict | None = None) -> ModelGraph:
    """Construct a model from declarative layer specs, inferring chained dims.

    ``feature_shape`` is the (freq_bins, time_frames) shape of one example.
    The input layout is chosen from the first layer: conv2d sees a 1-channel
    image (1, F, T); gru/attention see the frame sequence (T, F); dense sees
    the flat vector (F*T,).
    """
    if not layer_specs:
        raise ValueError("model.layers must not be empty")
    fbins, frames = feature_shape
    first = layer_specs[0].get("type")
    kinds = {s.get("type") for s in layer_specs}
    if first == "conv2d":
        input_kind, shape = "image", (1, fbins, frames)
    elif kinds & {"gru", "attention", "mean_pool_time"}:
        # dense layers ahead of a sequence layer act tokenwise on each frame
        input_kind, shape = "sequence", (frames, fbins)
    elif first == "dense":
        input_kind, shape = "flat", (fbins * frames,)
    else:
        raise ValueError(f"model cannot start with layer type {first!r}")

    layers = []
    cur = shape
    for i, spec in enumerate(layer_specs):
        name = f"L{i}"
        kind = spec.get("type")
        if kind == "dense":
            if len(cur) not in (1, 2):
                raise ValueError(f"{name}: dense needs flat or sequence input, have {cur}")
            in_dim = cur[-1]
            declared = spec.get("in_dim")
            if declared is not None and int(declared) != in_dim:
                raise ValueError(f"{name}: declared in_dim {declared} != incoming {in_dim}")
            layer = DenseLayer(name, in_dim, spec["out_dim"],
                               spec.get("activation", "relu"), spec.get("expandable", True))
            cur = cur[:-1] + (layer.out_dim,)
        elif kind == "conv2d":
            if len(cur) != 3:
                raise ValueError(f"{name}: conv2d needs (C, H, W) input, have {cur}")
            declared = spec.get("in_channels")
            if declared is not None and int(declared) != cur[0]:
                raise ValueError(f"{name}: declared in_channels {declared} != incoming {cur[0]}")
            k = spec.get("kernel", 3)
            layer = Conv2dLayer(name, cur[0], spec["out_channels"],
                                spec.get("kernel_h", k), spec.get("kernel_w", k),
                                spec.get("stride", 1), spec.get("padding", 1),
                                spec.get("activation", "relu"), spec.get("expandable", True))
            oh, ow = layer.out_spatial(cur[1], cur[2])
            if oh < 1 or ow < 1:
                raise ValueError(f"{name}: spatial size collapses ({oh}x{ow})")
            cur = (layer.out_channels, oh, ow)
        elif kind == "gru":
            if len(cur) != 2:
                raise ValueError(f"{name}: gru needs (T, D) input, have {cur}")
            declared = spec.get("input_dim")
            if declared is not None and int(declared) != cur[1]:
                raise ValueError(f"{name}: declared input_dim {declared} != incoming {cur[1]}")
            layer = GruLayer(name, cur[1], spec["hidden_dim"],
                             spec.get("return_sequences", False), spec.get("expandable", True))
            cur = (cur[0], layer.hidden_dim) if layer.return_sequences else (layer.hidden_dim,)
        elif kind == "attention":
            if len(cur) != 2:
                raise ValueError(f"{name}: attention needs (T, D) input, have {cur}")
            md = spec.get("model_dim", cur[1])
            if int(md) != cur[1]:
                raise ValueError(f"{name}: model_dim {md} != incoming feature dim {cur[1]}")
            layer = AttentionBlock(name, cur[1], spec.get("num_heads", 2),
                                   spec.get("head_dim", max(1, cur[1] // spec.get("num_heads", 2))),
                                   spec.get("ff_dim", 2 * cur[1]),
                                   spec.get("scale_mode", "expanded"),
                                   spec.get("expandable", True))
            cur = (cur[0], layer.model_dim)
        elif kind == "flatten":
            if len(cur) != 3:
                raise ValueError(f"{name}: flatten needs (C, H, W) input, have {cur}")
            layer = Flatten(name, cur)
            cur = (int(np.prod(cur)),)
        elif kind == "mean_pool_time":
            if len(cur) != 2:
                raise ValueError(f"{name}: mean_pool_time needs (T, D) input, have {cur}")
            layer = TimeMeanPool(name)
            cur = (cur[1],)
        else:
            raise ValueError(f"{name}: unknown layer type {kind!r}")
        layers.append(layer)

    if len(cur) != 1:
        raise ValueError(f"final layer output {cur} is not a flat vector; "
                         "add flatten, mean_pool_time, or a non-sequence GRU before the head")
    head_spec = head_spec or {}
    head = DenseLayer("head", cur[0], int(head_spec.get("out_dim", 2)),
                      head_spec.get("activation", "linear"), expandable=False)

    # A layer feeding an attention block cannot grow: attention input width is
    # the residual dimension, which expansion must never change.
    for i, layer in enumerate(layers):
        nxt = None
        for j in range(i + 1, len(layers)):
            if layers[j].kind in ("flatten", "mean_pool_time"):
                continue
            nxt = layers[j]
            break
        if nxt is not None and nxt.kind == "attention" and layer.expandable:
            layer.expandable = False
    return ModelGraph(layers, head, input_kind, shape)


# ---------------------------------------------------------------------------
# spec-level forward entry points
# ---------------------------------------------------------------------------

def dense_forward(layer: DenseLayer, params: ParamStore, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return layer.forward(eval_leaves(params), x)


def conv2d_forward(layer: Conv2dLayer, params: ParamStore, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return layer.forward(eval_leaves(params), x)


def gru_forward(layer: GruLayer, params: ParamStore, sequence) -> Tensor:
    """Final hidden state for (N, T, input_dim), or the full state sequence
    when the layer was built with return_sequences=True."""
    x = sequence if isinstance(sequence, Tensor) else Tensor(sequence)
    return layer.forward(eval_leaves(params), x)


def attention_forward(block: AttentionBlock, params: ParamStore, sequence,
                      return_weights: bool = False):
    """The attention sublayer (scaled dot-product heads + projection + residual)."""
    x = sequence if isinstance(sequence, Tensor) else Tensor(sequence)
    return block.attention(eval_leaves(params), x, return_weights=return_weights)


def model_forward(model: ModelGraph, params: ParamStore, batch) -> Tensor:
    """2-class logits per sample for a batch laid out per model.input_kind."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    logits = model.forward(eval_leaves(params), x)
    if not np.isfinite(logits.data).all():
        raise ArithmeticError("non-finite logits in model_forward")
    return logits
