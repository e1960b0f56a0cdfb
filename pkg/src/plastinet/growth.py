"""Neuron-level model surgery: dropin growth, freezing, pruning, and LoRA.

A *dropin* widens selected layers by appending neurons.  Because layers store
block-structured weights (see the layers module), growth never rewrites an
existing array: each event adds fresh bricks for the new rows, the new input
columns of the downstream consumer, and (for GRUs) the recurrent cross
blocks.  The :class:`NeuronLedger` records exactly which parameter ids and
unit indices every event created, which makes three operations exact by
construction:

* ``apply_freeze`` marks precisely the event-created ids trainable;
* ``prune`` deletes those ids and restores the original widths, an identity
  when no training happened in between;
* added-parameter accounting is a sum of stored array sizes, never an
  estimate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    AttentionBlock,
    BlockVector,
    BlockWeight,
    Brick,
    Conv2dLayer,
    DenseLayer,
    GruLayer,
    GRU_GATES,
    ModelGraph,
    Seg,
)
from .params import ParamStore

__all__ = [
    "SliceRecord",
    "NeuronLedger",
    "DropinPlan",
    "LoraAdapter",
    "select_layers",
    "dropin",
    "apply_freeze",
    "unfreeze_all",
    "prune",
    "lora_wrap",
    "param_count",
]


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------

@dataclass
class SliceRecord:
    """Everything one dropin event did to one layer."""
    event: int
    layer_index: int
    added_units: list[int]
    param_ids: list[str]

    def to_dict(self):
        return {"event": self.event, "layer_index": self.layer_index,
                "added_units": list(self.added_units), "param_ids": list(self.param_ids)}

    @staticmethod
    def from_dict(d):
        return SliceRecord(d["event"], d["layer_index"],
                           list(d["added_units"]), list(d["param_ids"]))


@dataclass
class NeuronLedger:
    """Per-layer neuron bookkeeping for a model undergoing growth."""

    original_width: dict[int, int]
    added: dict[int, list[int]] = field(default_factory=dict)
    records: list[SliceRecord] = field(default_factory=list)
    n_events: int = 0

    def __post_init__(self):
        for i in self.original_width:
            self.added.setdefault(i, [])

    @staticmethod
    def fresh(model: ModelGraph) -> "NeuronLedger":
        widths = {i: model.layers[i].width for i in range(len(model.layers))
                  if model.layers[i].kind in ("dense", "conv2d", "gru", "attention")}
        return NeuronLedger(widths)

    def grown_layers(self) -> list[int]:
        return sorted(i for i, units in self.added.items() if units)

    def new_param_ids(self, layer_index: int | None = None) -> list[str]:
        ids = []
        for r in self.records:
            if layer_index is None or r.layer_index == layer_index:
                ids += r.param_ids
        return sorted(ids)

    def added_param_elements(self, store: ParamStore, layer_index: int | None = None) -> int:
        return sum(store.get(pid).size for pid in self.new_param_ids(layer_index))

    def validate(self, model: ModelGraph, store: ParamStore) -> None:
        seen: set[str] = set()
        for i, orig in self.original_width.items():
            layer = model.layers[i]
            want = orig + len(self.added[i])
            if layer.width != want:
                raise ValueError(f"ledger/model width mismatch at layer {i}: "
                                 f"{layer.width} != {orig}+{len(self.added[i])}")
            if self.added[i] != list(range(orig, want)):
                raise ValueError(f"ledger at layer {i}: added units are not a "
                                 f"trailing contiguous range")
        for r in self.records:
            if r.layer_index not in self.original_width:
                raise ValueError(f"record references unledgered layer {r.layer_index}")
            for pid in r.param_ids:
                if pid not in store:
                    raise ValueError(f"ledger references missing parameter {pid!r}")
                if pid in seen:
                    raise ValueError(f"parameter {pid!r} recorded by two events")
                seen.add(pid)

    def to_json(self) -> str:
        return json.dumps({
            "original_width": {str(i): w for i, w in sorted(self.original_width.items())},
            "added": {str(i): u for i, u in sorted(self.added.items())},
            "records": [r.to_dict() for r in self.records],
            "n_events": self.n_events,
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "NeuronLedger":
        d = json.loads(text)
        led = NeuronLedger({int(i): w for i, w in d["original_width"].items()},
                           {int(i): list(u) for i, u in d["added"].items()},
                           [SliceRecord.from_dict(r) for r in d["records"]],
                           d["n_events"])
        return led


@dataclass
class DropinPlan:
    """One growth event: which layers, how much, how to initialise."""
    layer_indices: list[int]
    ratio: float = 1.0
    init_sigma: float | None = None  # None: fan-scaled weights, zero biases
    freeze_original: bool = False
    seed: int = 42


def select_layers(model: ModelGraph, count: int = 1, seed: int = 42,
                  rng: np.random.Generator | None = None) -> list[int]:
    """Uniform draw (without replacement) from the expandable layer indices.

    Deterministic given the seed; an explicit generator can be passed instead
    when the caller manages its own streams."""
    pool = model.expandable_indices()
    if not pool:
        raise ValueError("model has no expandable layers")
    if not 1 <= count <= len(pool):
        raise ValueError(f"cannot select {count} of {len(pool)} expandable layers")
    rng = np.random.default_rng(seed) if rng is None else rng
    picks = rng.choice(len(pool), size=count, replace=False)
    return sorted(pool[int(k)] for k in picks)


# ---------------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------------

def _new_weight(shape, fan: int, sigma: float | None, rng) -> np.ndarray:
    s = (fan ** -0.5) if sigma is None else float(sigma)
    return rng.normal(0.0, s, shape) if s > 0 else np.zeros(shape)


def _new_bias(n: int, sigma: float | None, rng) -> np.ndarray:
    if sigma is None or sigma == 0.0:
        return np.zeros(n)
    return rng.normal(0.0, float(sigma), n)


def _add_brick(store, ids, bw: BlockWeight, arr, out_range, in_range) -> None:
    pid = bw.next_brick_id()
    store.add(pid, arr)
    bw.bricks.append(Brick(pid, out_range, in_range))
    ids.append(pid)


def _add_seg(store, ids, bv: BlockVector, arr, start) -> None:
    pid = bv.next_seg_id()
    store.add(pid, arr)
    bv.segs.append(Seg(pid, start, start + arr.shape[0]))
    ids.append(pid)


def _walk_consumer(model: ModelGraph, index: int):
    """(consumer layer or head, flat multiplier, flatten passed through)."""
    mult, flat = 1, None
    for j in range(index + 1, len(model.layers)):
        nxt = model.layers[j]
        if nxt.kind == "flatten":
            flat = nxt
            mult = int(np.prod(nxt.in_shape[1:]))
            continue
        if nxt.kind == "mean_pool_time":
            continue
        return nxt, mult, flat
    return model.head, mult, flat


def _grow_consumer_columns(model, index, n_new, sigma, rng, store, ids) -> None:
    """Give the downstream layer input columns for the appended neurons."""
    consumer, mult, flat = _walk_consumer(model, index)
    if flat is not None:
        c, h, w = flat.in_shape
        flat.in_shape = (c + n_new, h, w)
    if isinstance(consumer, DenseLayer):
        old_in = consumer.weight.in_dim
        add = n_new * mult
        arr = _new_weight((consumer.weight.out_dim, add), old_in + add, sigma, rng)
        _add_brick(store, ids, consumer.weight, arr,
                   (0, consumer.weight.out_dim), (old_in, old_in + add))
        consumer.weight.in_dim = old_in + add
        consumer.in_dim = old_in + add
    elif isinstance(consumer, Conv2dLayer):
        old_in = consumer.weight.in_dim
        arr = _new_weight((consumer.weight.out_dim, n_new, consumer.kernel_h, consumer.kernel_w),
                          (old_in + n_new) * consumer.kernel_h * consumer.kernel_w, sigma, rng)
        _add_brick(store, ids, consumer.weight, arr,
                   (0, consumer.weight.out_dim), (old_in, old_in + n_new))
        consumer.weight.in_dim = old_in + n_new
        consumer.in_channels = old_in + n_new
    elif isinstance(consumer, GruLayer):
        old_in = consumer.input_dim
        for g in GRU_GATES:
            arr = _new_weight((consumer.w[g].out_dim, n_new), old_in + n_new, sigma, rng)
            _add_brick(store, ids, consumer.w[g], arr,
                       (0, consumer.w[g].out_dim), (old_in, old_in + n_new))
            consumer.w[g].in_dim = old_in + n_new
        consumer.input_dim = old_in + n_new
    elif isinstance(consumer, AttentionBlock):
        raise ValueError(f"layer L{index} feeds attention block {consumer.name}; "
                         "its width is fixed")
    else:
        raise ValueError(f"cannot reconcile consumer {consumer.name} ({consumer.kind}) "
                         f"after growing layer L{index}")


def _grow_dense(layer: DenseLayer, n_new, sigma, rng, store, ids) -> None:
    w0 = layer.out_dim
    arr = _new_weight((n_new, layer.weight.in_dim), layer.weight.in_dim, sigma, rng)
    _add_brick(store, ids, layer.weight, arr, (w0, w0 + n_new), (0, layer.weight.in_dim))
    _add_seg(store, ids, layer.bias, _new_bias(n_new, sigma, rng), w0)
    layer.out_dim = w0 + n_new
    layer.weight.out_dim = w0 + n_new
    layer.bias.dim = w0 + n_new


def _grow_conv(layer: Conv2dLayer, n_new, sigma, rng, store, ids) -> None:
    w0 = layer.out_channels
    fan = layer.weight.in_dim * layer.kernel_h * layer.kernel_w
    arr = _new_weight((n_new, layer.weight.in_dim, layer.kernel_h, layer.kernel_w),
                      fan, sigma, rng)
    _add_brick(store, ids, layer.weight, arr, (w0, w0 + n_new), (0, layer.weight.in_dim))
    _add_seg(store, ids, layer.bias, _new_bias(n_new, sigma, rng), w0)
    layer.out_channels = w0 + n_new
    layer.weight.out_dim = w0 + n_new
    layer.bias.dim = w0 + n_new


def _grow_gru(layer: GruLayer, n_new, sigma, rng, store, ids) -> None:
    h0 = layer.hidden_dim
    h1 = h0 + n_new
    for g in GRU_GATES:
        w_in = layer.w[g].in_dim
        _add_brick(store, ids, layer.w[g], _new_weight((n_new, w_in), w_in, sigma, rng),
                   (h0, h1), (0, w_in))
        layer.w[g].out_dim = h1
        # recurrent blocks: [[U, C], [R, D]] with U the untouched original
        _add_brick(store, ids, layer.u[g], _new_weight((h0, n_new), h1, sigma, rng),
                   (0, h0), (h0, h1))
        _add_brick(store, ids, layer.u[g], _new_weight((n_new, h0), h1, sigma, rng),
                   (h0, h1), (0, h0))
        _add_brick(store, ids, layer.u[g], _new_weight((n_new, n_new), h1, sigma, rng),
                   (h0, h1), (h0, h1))
        layer.u[g].out_dim = h1
        layer.u[g].in_dim = h1
        _add_seg(store, ids, layer.b[g], _new_bias(n_new, sigma, rng), h0)
        layer.b[g].dim = h1
    layer.hidden_dim = h1


def _grow_attention(layer: AttentionBlock, n_new, sigma, rng, store, ids) -> None:
    d0 = layer.head_dim
    d1 = d0 + n_new
    for i in range(layer.num_heads):
        for bw in (layer.wq[i], layer.wk[i], layer.wv[i]):
            _add_brick(store, ids, bw, _new_weight((n_new, layer.model_dim),
                                                   layer.model_dim, sigma, rng),
                       (d0, d1), (0, layer.model_dim))
            bw.out_dim = d1
        _add_brick(store, ids, layer.wo[i], _new_weight((layer.model_dim, n_new), d1, sigma, rng),
                   (0, layer.model_dim), (d0, d1))
        layer.wo[i].in_dim = d1
    layer.head_dim = d1


_GROWERS = {"dense": _grow_dense, "conv2d": _grow_conv,
            "gru": _grow_gru, "attention": _grow_attention}


def dropin(model: ModelGraph, params: ParamStore, plan: DropinPlan,
           ledger: NeuronLedger | None = None,
           rng: np.random.Generator | None = None) -> NeuronLedger:
    """Append neurons to the planned layers, recording the event in a ledger.

    With ``plan.init_sigma == 0.0`` every new parameter is zero and the
    widened model computes exactly the original function (attention blocks
    need scale_mode="original" for this).  With ``freeze_original`` the
    trainable set is reduced to the parameters this ledger created.
    """
    if plan.ratio <= 0:
        raise ValueError(f"growth ratio must be positive, got {plan.ratio}")
    if len(set(plan.layer_indices)) != len(plan.layer_indices):
        raise ValueError("duplicate layer indices in dropin plan")
    ledger = NeuronLedger.fresh(model) if ledger is None else ledger
    rng = np.random.default_rng(plan.seed) if rng is None else rng

    event = ledger.n_events
    for i in sorted(plan.layer_indices):
        if not 0 <= i < len(model.layers):
            raise ValueError(f"layer index {i} out of range")
        layer = model.layers[i]
        if layer.kind not in _GROWERS:
            raise ValueError(f"layer L{i} ({layer.kind}) cannot be widened")
        if not layer.expandable:
            raise ValueError(f"layer L{i} is marked non-expandable")
        if i not in ledger.original_width:
            raise ValueError(f"layer {i} missing from ledger")
        n_new = int(round(plan.ratio * layer.width))
        if n_new < 1:
            raise ValueError(f"ratio {plan.ratio} adds no neurons to layer L{i} "
                             f"(width {layer.width})")
        w0 = layer.width
        ids: list[str] = []
        _GROWERS[layer.kind](layer, n_new, plan.init_sigma, rng, params, ids)
        if layer.kind != "attention":  # attention keeps model_dim, no consumer change
            _grow_consumer_columns(model, i, n_new, plan.init_sigma, rng, params, ids)
        units = list(range(w0, w0 + n_new))
        ledger.added[i] += units
        ledger.records.append(SliceRecord(event, i, units, ids))
    ledger.n_events = event + 1

    if plan.freeze_original:
        apply_freeze(params, ledger)
    ledger.validate(model, params)
    return ledger


def apply_freeze(params: ParamStore, ledger: NeuronLedger,
                 policy: str = "frozen") -> set[str]:
    """Set the trainable set according to the freeze policy.

    ``frozen`` keeps exactly the parameters the ledger's events created
    trainable; ``unfrozen`` makes every parameter trainable.  Returns the
    resulting trainable set."""
    if policy == "unfrozen":
        ids = set(params.entries)
        params.set_trainable(ids)
        return ids
    if policy != "frozen":
        raise ValueError(f"unknown freeze policy {policy!r} "
                         "(expected 'frozen' or 'unfrozen')")
    ids = set(ledger.new_param_ids())
    if not ids:
        raise ValueError("ledger has no added parameters to keep trainable")
    params.set_trainable(ids)
    return ids


def unfreeze_all(params: ParamStore) -> None:
    params.set_trainable(set(params.entries))


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def _clip_weight(bw: BlockWeight, dead: set[str], store: ParamStore,
                 new_out: int | None = None, new_in: int | None = None) -> None:
    kept = []
    for b in bw.bricks:
        if b.param_id in dead:
            continue
        o0, o1 = b.out_range
        i0, i1 = b.in_range
        arr = store.get(b.param_id)
        changed = False
        if new_out is not None and o1 > new_out:
            arr = arr[: new_out - o0]
            o1, changed = new_out, True
        if new_in is not None and i1 > new_in:
            arr = arr[:, : new_in - i0]
            i1, changed = new_in, True
        if changed:
            store.replace(b.param_id, arr)
        kept.append(Brick(b.param_id, (o0, o1), (i0, i1)))
    bw.bricks = kept
    if new_out is not None:
        bw.out_dim = new_out
    if new_in is not None:
        bw.in_dim = new_in


def _clip_vector(bv: BlockVector, dead: set[str], new_dim: int) -> None:
    bv.segs = [s for s in bv.segs if s.param_id not in dead]
    bv.dim = new_dim


def prune(model: ModelGraph, params: ParamStore, ledger: NeuronLedger,
          layer_indices: list[int] | None = None) -> list[str]:
    """Remove every ledgered added neuron from the selected layers (default:
    all grown layers), restoring their original widths.  Returns the deleted
    parameter ids.  Without intervening training this inverts dropin exactly:
    original bricks are never copied or rewritten."""
    if not ledger.grown_layers():
        raise ValueError("nothing to prune: ledger records no grown layers")
    targets = ledger.grown_layers() if layer_indices is None else sorted(set(layer_indices))
    removed: list[str] = []
    for i in targets:
        if i not in ledger.original_width:
            raise ValueError(f"layer {i} is not tracked by this ledger")
        if not ledger.added[i]:
            continue
        layer = model.layers[i]
        recs = [r for r in ledger.records if r.layer_index == i]
        dead = {pid for r in recs for pid in r.param_ids}
        n_gone = sum(len(r.added_units) for r in recs)
        orig = ledger.original_width[i]

        for pid in sorted(dead):
            params.remove(pid)
            removed.append(pid)

        if isinstance(layer, DenseLayer):
            _clip_weight(layer.weight, dead, params, new_out=orig)
            _clip_vector(layer.bias, dead, orig)
            layer.out_dim = orig
        elif isinstance(layer, Conv2dLayer):
            _clip_weight(layer.weight, dead, params, new_out=orig)
            _clip_vector(layer.bias, dead, orig)
            layer.out_channels = orig
        elif isinstance(layer, GruLayer):
            for g in GRU_GATES:
                _clip_weight(layer.w[g], dead, params, new_out=orig)
                _clip_weight(layer.u[g], dead, params, new_out=orig, new_in=orig)
                _clip_vector(layer.b[g], dead, orig)
            layer.hidden_dim = orig
        elif isinstance(layer, AttentionBlock):
            for h in range(layer.num_heads):
                _clip_weight(layer.wq[h], dead, params, new_out=orig)
                _clip_weight(layer.wk[h], dead, params, new_out=orig)
                _clip_weight(layer.wv[h], dead, params, new_out=orig)
                _clip_weight(layer.wo[h], dead, params, new_in=orig)
            layer.head_dim = orig
        else:  # pragma: no cover - ledger only tracks the four families
            raise ValueError(f"cannot prune layer kind {layer.kind}")

        if layer.kind != "attention":
            consumer, mult, flat = _walk_consumer(model, i)
            if flat is not None:
                c, hh, ww = flat.in_shape
                flat.in_shape = (c - n_gone, hh, ww)
            if isinstance(consumer, DenseLayer):
                new_in = consumer.weight.in_dim - n_gone * mult
                _clip_weight(consumer.weight, dead, params, new_in=new_in)
                consumer.in_dim = new_in
            elif isinstance(consumer, Conv2dLayer):
                new_in = consumer.weight.in_dim - n_gone
                _clip_weight(consumer.weight, dead, params, new_in=new_in)
                consumer.in_channels = new_in
            elif isinstance(consumer, GruLayer):
                new_in = consumer.input_dim - n_gone
                for g in GRU_GATES:
                    _clip_weight(consumer.w[g], dead, params, new_in=new_in)
                consumer.input_dim = new_in

        ledger.added[i] = []
        ledger.records = [r for r in ledger.records if r.layer_index != i]
    ledger.validate(model, params)
    return removed


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

@dataclass
class LoraAdapter:
    """Low-rank additive factors for one 2-D weight brick:
    effective = W + (alpha / rank) * B @ A."""
    target_id: str
    a_id: str
    b_id: str
    rank: int
    alpha: float

    def to_dict(self):
        return {"target_id": self.target_id, "a_id": self.a_id, "b_id": self.b_id,
                "rank": self.rank, "alpha": self.alpha}

    @staticmethod
    def from_dict(d):
        return LoraAdapter(d["target_id"], d["a_id"], d["b_id"], d["rank"], d["alpha"])


def default_lora_targets(model: ModelGraph) -> list[str]:
    """Dense-layer weights and attention projections (biases, convolution
    kernels, recurrent matrices and the classifier head stay untouched)."""
    ids = []
    for layer in model.layers:
        if isinstance(layer, DenseLayer):
            ids += layer.weight.param_ids()
        elif isinstance(layer, AttentionBlock):
            for bw in layer.head_weights():
                ids += bw.param_ids()
    return ids


def lora_wrap(model: ModelGraph, params: ParamStore, targets: list[str] | None = None,
              rank: int = 4, alpha: float | None = None,
              rng: np.random.Generator | None = None) -> list[LoraAdapter]:
    """Attach rank-``rank`` adapters to the target weight bricks and freeze
    everything else.  A is N(0, 1/n) with n the brick's input width, B starts
    at zero, so wrapping never changes the model's function."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    targets = default_lora_targets(model) if targets is None else list(targets)
    if not targets:
        raise ValueError("no LoRA targets: model has no dense or attention weights")
    alpha = float(rank) if alpha is None else float(alpha)
    rng = np.random.default_rng(42) if rng is None else rng

    adapters = []
    for pid in targets:
        base = params.get(pid)
        if base.ndim != 2:
            raise ValueError(f"LoRA target {pid!r} is {base.ndim}-D; only 2-D "
                             "weights can be wrapped")
        if pid in model.adapters:
            raise ValueError(f"parameter {pid!r} already has an adapter")
        m, n = base.shape
        if rank > min(m, n):
            raise ValueError(f"rank {rank} exceeds min dimension {min(m, n)} "
                             f"of target {pid!r} ({m}x{n})")
        a_id, b_id = f"{pid}.lora_a", f"{pid}.lora_b"
        params.add(a_id, rng.normal(0.0, n ** -0.5, (rank, n)))
        params.add(b_id, np.zeros((m, rank)))
        adapter = LoraAdapter(pid, a_id, b_id, rank, alpha)
        model.adapters[pid] = adapter
        adapters.append(adapter)

    params.set_trainable({x for a in adapters for x in (a.a_id, a.b_id)})
    return adapters


def param_count(store: ParamStore, trainable_only: bool = False,
                ids: list[str] | None = None) -> int:
    """Scalar-element count over the store, an id subset, or the trainable set."""
    if ids is not None:
        return sum(store.get(pid).size for pid in ids)
    return store.element_count(trainable_only=trainable_only)
