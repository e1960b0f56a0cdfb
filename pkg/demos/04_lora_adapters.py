"""Low-rank adapters as the cheap-adaptation baseline.

lora_wrap freezes the whole model and attaches trainable (B, A) factor
pairs to the dense and attention weights; the effective weight is
W + (alpha/rank) * B @ A.  B starts at zero, so wrapping never changes the
model's function, and only the factors receive gradients.
"""

import numpy as np

from plastinet import autodiff as ad
from plastinet.autodiff import Tensor
from plastinet.growth import lora_wrap, param_count
from plastinet.layers import build_model, eval_leaves
from plastinet.params import ParamStore
from plastinet.training import batch_for_model, cross_entropy_graph, make_optimizer

rng = np.random.default_rng(42)
model = build_model([
    {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "flatten"},
    {"type": "dense", "out_dim": 16, "activation": "relu"},
], (16, 40))
store = ParamStore()
model.init_params(store, rng)
x = batch_for_model(model, rng.normal(size=(16, 16, 40)))
y = rng.integers(0, 2, size=16)

before = model.forward(eval_leaves(store), Tensor(x)).data.copy()
base_count = param_count(store)

adapters = lora_wrap(model, store, rank=4, rng=rng)
after = model.forward(eval_leaves(store), Tensor(x)).data
print(f"wrapped {len(adapters)} weights; outputs moved by "
      f"{np.abs(after - before).max():.2e} (B starts at zero)")
print(f"trainable: {param_count(store, trainable_only=True)} adapter params "
      f"vs {base_count} in the base model")

# a few optimizer steps touch only the factors
frozen = {pid: store.get(pid).copy() for pid in store.entries
          if not pid.endswith((".lora_a", ".lora_b"))}
graph = cross_entropy_graph(model)
opt = make_optimizer("adam", 1e-2)
for _ in range(10):
    ad.forward(graph, [x, np.eye(2)[y]], store)
    opt.step(store, ad.backward(graph, store))
intact = all(np.array_equal(store.get(pid), arr) for pid, arr in frozen.items())
print(f"after 10 steps the base weights are bit-identical: {intact}")

a = adapters[0]
delta = (a.alpha / a.rank) * store.get(a.b_id) @ store.get(a.a_id)
print(f"adapter on {a.target_id}: rank {a.rank}, learned |delta| up to "
      f"{np.abs(delta).max():.4f}")
