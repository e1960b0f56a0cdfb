"""All five strategies on identical data, one table.

baseline trains the seed network for the full budget; dropin_unfrozen and
dropin_frozen warm up, widen, and continue (training everything vs only the
new neurons); lora freezes the warm model and trains adapters; plasticity
runs grow-train-prune.  Budgets are equal: 6 = 2 + 4 = 3 x 2.
"""

import tempfile
from pathlib import Path

from plastinet.config import parse_config_text
from plastinet.experiment import compare_strategies
from plastinet.metrics import CSV_HEADER

cfg = parse_config_text("""
experiment:
  seed: 42
data:
  n_train: 300
  n_dev: 100
  n_test: 100
  delta: 0.6
  freq_bins: 8
  time_frames: 16
model:
  layers:
  - {type: conv2d, out_channels: 3, kernel: 3, stride: 2, padding: 1}
  - {type: conv2d, out_channels: 6, kernel: 3, stride: 2, padding: 1}
  - {type: flatten}
  - {type: dense, out_dim: 12, activation: relu}
train:
  epochs: 6
  batch_size: 32
strategy:
  stage_epochs: 2
  lora_rank: 2
timing:
  iters: 10
  warmup: 2
""")

workdir = Path(tempfile.mkdtemp(prefix="compare-"))
reports = compare_strategies(cfg, workdir=workdir, log=lambda m: None)

print(",".join(CSV_HEADER))
for rep in reports:
    print(",".join(rep.to_row()))

print(f"\nper-strategy artifacts and summary.csv under {workdir}")
print((workdir / "summary.csv").read_text().strip())
