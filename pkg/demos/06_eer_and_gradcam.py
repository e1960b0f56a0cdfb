"""Scoring a detector: equal error rate and Grad-CAM heatmaps.

EER is the operating point where the false-acceptance and false-rejection
rates cross (higher score = spoof).  Grad-CAM projects the class gradient
onto a conv feature map to show where the detector looks.
"""

import numpy as np

from plastinet.datasynth import SynthSpec, generate, spoof_artifact
from plastinet.layers import build_model
from plastinet.metrics import ScoreSet, compute_eer, gradcam
from plastinet.params import ParamStore
from plastinet.training import score_examples, train_stage

spec = SynthSpec(n_train=400, n_dev=100, n_test=100, delta=0.8, noise=0.3,
                 seed=42, freq_bins=16, time_frames=40)
splits = generate(spec)

model = build_model([
    {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "conv2d", "out_channels": 8, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "flatten"},
    {"type": "dense", "out_dim": 16, "activation": "relu"},
], (16, 40))
store = ParamStore()
model.init_params(store, np.random.default_rng(0))

res = train_stage(model, store, (splits["train"].x, splits["train"].y),
                  (splits["dev"].x, splits["dev"].y), epochs=5, batch_size=32,
                  lr=1e-3, optimizer="adam", rng=np.random.default_rng(7))
store.restore(res.best_values)

scores = score_examples(model, store, splits["test"].x)
eer = compute_eer(ScoreSet.from_labels(scores, splits["test"].y))
print(f"test EER after 5 epochs: {100 * eer:.2f}%")

# heatmaps from the last conv layer for the first spoofed test examples
spoof_idx = np.flatnonzero(splits["test"].y == 1)[:2]
x = splits["test"].x[spoof_idx][:, None, :, :]
cams = gradcam(model, store, x, layer_index=1, target_class=1)

shades = " .:-=+*#%@"
for n, cam in enumerate(cams):
    print(f"\nspoof example {spoof_idx[n]}, CAM over the {cam.shape} map "
          "(frequency down, time across):")
    for row in cam:
        print("  " + "".join(shades[min(int(v * 9.999), 9)] for v in row))

# the artifact lives in the high bands and a mid-band ripple; the CAM's
# mass sitting in matching rows is what the explanation should show
art = spoof_artifact(spec)
hot = art.mean(axis=1).argmax()
print(f"\nstrongest artifact row in the input: {hot} of {spec.freq_bins}")
