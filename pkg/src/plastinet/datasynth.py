"""Synthetic two-class spoof-detection corpus.

Every example is a (freq_bins, time_frames) energy map of a few harmonic
bands with a slow temporal envelope plus white noise.  Spoofed examples add
a fixed artifact scaled by ``delta``: a high-band energy lift and a
fixed-phase frame-periodic ripple in the mid bands.  ``delta=0`` makes the
two classes distributionally identical (EER pins to chance); ``delta=1``
separates them almost linearly; values in between give a graded task.

Splits draw from independent seeded streams (``default_rng([seed, k])``), so
enlarging one split never shifts another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SynthSpec",
    "LabeledExample",
    "SplitData",
    "as_sequence",
    "spoof_artifact",
    "generate",
    "save_npz",
    "load_npz",
]

SPLIT_ORDER = ("train", "dev", "test")


@dataclass
class SynthSpec:
    """Knobs of the generator; delta is the spoof-artifact strength."""
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    delta: float = 0.5
    noise: float = 0.3
    seed: int = 42
    freq_bins: int = 16
    time_frames: int = 40

    def __post_init__(self):
        if not 0.0 <= self.delta:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2 (both classes must appear)")

    def to_dict(self):
        return {"n_train": self.n_train, "n_dev": self.n_dev, "n_test": self.n_test,
                "delta": self.delta, "noise": self.noise, "seed": self.seed,
                "freq_bins": self.freq_bins, "time_frames": self.time_frames}

    @staticmethod
    def from_dict(d):
        return SynthSpec(**d)


@dataclass
class LabeledExample:
    features: np.ndarray        # (freq_bins, time_frames)
    label: int                  # 0 = bona fide, 1 = spoof


def as_sequence(example: LabeledExample) -> np.ndarray:
    """Time-major view (time_frames, freq_bins) for recurrent/attention input."""
    return np.ascontiguousarray(example.features.T)


@dataclass
class SplitData:
    x: np.ndarray               # (N, freq_bins, time_frames)
    y: np.ndarray               # (N,) int64

    def __len__(self):
        return len(self.y)

    def examples(self):
        return [LabeledExample(self.x[i], int(self.y[i])) for i in range(len(self.y))]


def _bona_fide(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    f = np.arange(spec.freq_bins, dtype=np.float64)[:, None]
    t = np.arange(spec.time_frames, dtype=np.float64)[None, :]
    f0 = rng.uniform(2.0, 4.5)
    envelope = 1.0 + 0.3 * np.sin(2.0 * np.pi * t / rng.uniform(15.0, 30.0)
                                  + rng.uniform(0.0, 2.0 * np.pi))
    x = np.zeros((spec.freq_bins, spec.time_frames))
    for k in (1, 2, 3):
        amp = rng.uniform(0.8, 1.2)
        band = np.exp(-((f - k * f0) ** 2) / (2.0 * 0.8 ** 2))
        x += amp * band * envelope
    return x + spec.noise * rng.standard_normal((spec.freq_bins, spec.time_frames))


def spoof_artifact(spec: SynthSpec) -> np.ndarray:
    """The deterministic delta=1 artifact pattern (added to spoof examples)."""
    f = np.arange(spec.freq_bins, dtype=np.float64)[:, None]
    t = np.arange(spec.time_frames, dtype=np.float64)[None, :]
    hf_lift = 0.6 * np.exp(-((f - (spec.freq_bins - 2.5)) ** 2) / (2.0 * 1.5 ** 2))
    ripple_band = np.exp(-((f - spec.freq_bins / 2.0) ** 2) / (2.0 * 2.0 ** 2))
    ripple = 0.4 * ripple_band * np.cos(2.0 * np.pi * t / 4.0)
    return (hf_lift + ripple) * np.ones_like(t)


def _make_split(rng: np.random.Generator, n: int, spec: SynthSpec) -> SplitData:
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1
    labels = labels[rng.permutation(n)]
    artifact = spoof_artifact(spec)
    x = np.empty((n, spec.freq_bins, spec.time_frames))
    for i in range(n):
        x[i] = _bona_fide(rng, spec)
        if labels[i] == 1:
            x[i] += spec.delta * artifact
    return SplitData(x, labels)


def generate(spec: SynthSpec) -> dict[str, SplitData]:
    """Train/dev/test splits from per-split independent streams."""
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    out = {}
    for k, name in enumerate(SPLIT_ORDER):
        rng = np.random.default_rng([spec.seed, k])
        out[name] = _make_split(rng, sizes[name], spec)
    return out


def save_npz(splits: dict[str, SplitData], spec: SynthSpec, path) -> None:
    payload = {"spec": np.frombuffer(json.dumps(spec.to_dict()).encode(), dtype=np.uint8)}
    for name, split in splits.items():
        payload[f"{name}_x"] = split.x
        payload[f"{name}_y"] = split.y
    np.savez(path, **payload)


def load_npz(path) -> tuple[dict[str, SplitData], SynthSpec]:
    with np.load(path) as z:
        spec = SynthSpec.from_dict(json.loads(bytes(z["spec"]).decode()))
        splits = {name: SplitData(z[f"{name}_x"], z[f"{name}_y"])
                  for name in SPLIT_ORDER if f"{name}_x" in z}
    return splits, spec
