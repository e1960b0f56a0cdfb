"""The grow-train-prune pipeline on a small synthetic task.

Three equal-budget stages: train the seed network, widen a randomly chosen
layer and train everything, prune exactly the added neurons and train the
survivors.  The returned parameters have the seed architecture's shape.
"""

import numpy as np

from plastinet.datasynth import SynthSpec, generate
from plastinet.layers import build_model
from plastinet.params import ParamStore
from plastinet.plasticity import PlasticityConfig, run_plasticity

spec = SynthSpec(n_train=300, n_dev=100, n_test=100, delta=0.5, noise=0.3,
                 seed=42, freq_bins=8, time_frames=16)
splits = generate(spec)

model = build_model([
    {"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "flatten"},
    {"type": "dense", "out_dim": 8, "activation": "relu"},
], (8, 16))
store = ParamStore()
model.init_params(store, np.random.default_rng(0))

cfg = PlasticityConfig(stage_epochs=3, growth_ratio=1.0, layer_count=1,
                       lr=2e-3, batch_size=32, optimizer="adam", seed=42)
params, records, report = run_plasticity(model, store, splits, cfg)

for rec in records:
    eer = "-" if rec.best_dev_eer is None else f"{100 * rec.best_dev_eer:.2f}%"
    extra = f", grew layers {rec.grown_layers}" if rec.stage == "expanded" else ""
    extra = f", removed {len(rec.removed_params)} blocks" if rec.stage == "pruned" else extra
    print(f"stage {rec.stage:>8}: {rec.params_before} -> {rec.params_total} params, "
          f"best dev EER {eer}{extra}")

print(f"\nfinal test EER: {100 * report.test_eer:.2f}% "
      f"(architecture back at {report.params_total} params)")
