"""Neuron dropin, freezing, and exact pruning.

New neurons arrive as separate named parameter blocks appended after the
existing ones.  With init_sigma=0 the widened network computes exactly the
original function; the ledger records what was added so prune can remove
precisely those blocks again.
"""

import numpy as np

from plastinet.autodiff import Tensor
from plastinet.growth import DropinPlan, apply_freeze, dropin, param_count, prune
from plastinet.layers import build_model, eval_leaves
from plastinet.params import ParamStore
from plastinet.training import batch_for_model

rng = np.random.default_rng(42)
model = build_model([
    {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "flatten"},
    {"type": "dense", "out_dim": 8, "activation": "relu"},
], (8, 12))
store = ParamStore()
model.init_params(store, rng)
x = batch_for_model(model, rng.normal(size=(4, 8, 12)))

before = model.forward(eval_leaves(store), Tensor(x)).data.copy()
count0 = param_count(store)
print(f"seed network: {count0} params")

# grow both expandable layers by 100%, zero-initialized
plan = DropinPlan(layer_indices=[0, 2], ratio=1.0, init_sigma=0.0)
ledger = dropin(model, store, plan, rng=rng)
after = model.forward(eval_leaves(store), Tensor(x)).data
print(f"after dropin: {param_count(store)} params "
      f"(+{ledger.added_param_elements(store)} in {len(ledger.new_param_ids())} blocks)")
print(f"zero-init growth moved the outputs by {np.abs(after - before).max():.2e}")

# the frozen policy trains exactly the added blocks
apply_freeze(store, ledger, policy="frozen")
print(f"frozen policy: {param_count(store, trainable_only=True)} trainable "
      f"of {param_count(store)}")

# prune deletes the added blocks; untrained, this is a bit-exact inverse
removed = prune(model, store, ledger)
restored = model.forward(eval_leaves(store), Tensor(x)).data
print(f"after prune: {param_count(store)} params ({len(removed)} blocks removed)")
print(f"outputs restored bit-exactly: {np.array_equal(restored, before)}")
