"""The four layer families and declarative model assembly.

build_model chains layer specs, infers every in-dimension, and picks the
input layout from the first layer: conv stacks see a 1-channel image,
recurrent/attention stacks see the frame sequence, dense stacks see a flat
vector.  Every model ends in a fixed 2-logit head.
"""

import numpy as np

from plastinet.autodiff import Tensor
from plastinet.layers import build_model, eval_leaves
from plastinet.params import ParamStore
from plastinet.training import batch_for_model

rng = np.random.default_rng(42)
FEATURES = (16, 40)          # (freq_bins, time_frames)
batch = rng.normal(size=(8, *FEATURES))

specs = {
    "cnn": [
        {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
        {"type": "conv2d", "out_channels": 8, "kernel": 3, "stride": 2, "padding": 1},
        {"type": "flatten"},
        {"type": "dense", "out_dim": 16, "activation": "relu"},
    ],
    "gru": [
        {"type": "dense", "out_dim": 12, "activation": "tanh"},
        {"type": "gru", "hidden_dim": 8},
    ],
    "attention": [
        {"type": "dense", "out_dim": 8, "activation": "tanh"},
        {"type": "attention", "num_heads": 2, "head_dim": 4, "ff_dim": 16},
        {"type": "mean_pool_time"},
    ],
}

for name, layers in specs.items():
    model = build_model(layers, FEATURES)
    store = ParamStore()
    model.init_params(store, rng)
    xb = batch_for_model(model, batch)
    logits = model.forward(eval_leaves(store), Tensor(xb))
    expandable = model.expandable_indices()
    print(f"{name:>9}: input {model.input_kind} {xb.shape} -> logits {logits.data.shape}, "
          f"{store.element_count()} params, expandable layers {expandable}")

# attention blocks pin their residual width, so the dense layer feeding one
# is auto-marked non-expandable (index 0 is absent above for "attention")
