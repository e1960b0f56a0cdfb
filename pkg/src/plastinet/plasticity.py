"""The grow-train-prune pipeline.

Three stages with equal epoch budgets: train the seed network, widen
randomly chosen layers and continue training with every parameter
trainable, then remove exactly the added neurons and train the survivors.
Stage transitions continue from the last-epoch weights; the returned
parameters are the best-dev weights of the final stage.  The optimizer is
rebuilt at each stage boundary because the parameter set itself changes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .growth import DropinPlan, NeuronLedger, dropin, prune, select_layers, unfreeze_all
from .metrics import RunReport, ScoreSet, compute_eer
from .params import ParamStore
from .training import score_examples, train_stage

__all__ = ["PlasticityConfig", "StageRecord", "run_plasticity", "STAGES"]

STAGES = ("initial", "expanded", "pruned")


@dataclass
class PlasticityConfig:
    stage_epochs: int = 5
    growth_ratio: float = 1.0
    layer_count: int = 1
    init_sigma: float | None = None   # None: fan-scaled weights, zero biases
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    seed: int = 42

    def __post_init__(self):
        if self.stage_epochs < 0:
            raise ValueError(f"stage_epochs must be >= 0, got {self.stage_epochs}")

    def to_dict(self):
        return {"stage_epochs": self.stage_epochs, "growth_ratio": self.growth_ratio,
                "layer_count": self.layer_count, "init_sigma": self.init_sigma,
                "lr": self.lr, "batch_size": self.batch_size,
                "optimizer": self.optimizer, "seed": self.seed}

    @staticmethod
    def from_dict(d):
        return PlasticityConfig(**d)


@dataclass
class StageRecord:
    """What one stage did and how training went inside it."""
    stage: str
    epochs: int
    history: list[dict]
    best_dev_eer: float | None
    best_epoch: int
    params_before: int
    params_total: int
    params_trainable: int
    wall_time_s: float = 0.0
    grown_layers: list[int] = field(default_factory=list)
    removed_params: list[str] = field(default_factory=list)

    def to_dict(self):
        return {"stage": self.stage, "epochs": self.epochs, "history": self.history,
                "best_dev_eer": self.best_dev_eer, "best_epoch": self.best_epoch,
                "params_before": self.params_before, "params_total": self.params_total,
                "params_trainable": self.params_trainable,
                "wall_time_s": self.wall_time_s,
                "grown_layers": self.grown_layers, "removed_params": self.removed_params}

    @staticmethod
    def from_dict(d):
        return StageRecord(**d)


def run_plasticity(model, params: ParamStore, splits, cfg: PlasticityConfig,
                   workdir=None, log=None, dataset: str = "synth",
                   model_label: str = "model",
                   ) -> tuple[ParamStore, list[StageRecord], RunReport]:
    """Run the three stages on the data splits; mutate model and params.

    ``splits`` maps "train"/"dev" (and optionally "test") to objects with
    .x and .y.  On return the model has its original widths and params hold
    the best-dev weights of the pruned stage.  The report's EER is measured
    on the test split when present, otherwise it repeats the best dev EER;
    its timing and trainable-count columns are None because both quantities
    change across stages.  With a workdir the run leaves stage checkpoints,
    the evolving model/ledger JSON, and a records.jsonl behind.
    """
    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    train = (splits["train"].x, splits["train"].y)
    dev = (splits["dev"].x, splits["dev"].y)
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    select_rng = np.random.default_rng([cfg.seed, 11])
    init_rng = np.random.default_rng([cfg.seed, 13])
    records: list[StageRecord] = []
    baseline_count = params.element_count()

    def fit(tag):
        return train_stage(model, params, train, dev, epochs=cfg.stage_epochs,
                           batch_size=cfg.batch_size, lr=cfg.lr, optimizer=cfg.optimizer,
                           rng=shuffle_rng, checkpoint_dir=workdir, tag=tag, log=log)

    def record(stage, before, result, t0, grown=None, removed=None):
        records.append(StageRecord(
            stage=stage,
            epochs=len(result.history),
            history=[h.to_dict() for h in result.history],
            best_dev_eer=result.best_dev_eer,
            best_epoch=result.best_epoch,
            params_before=before,
            params_total=params.element_count(),
            params_trainable=params.element_count(trainable_only=True),
            wall_time_s=time.perf_counter() - t0,
            grown_layers=list(grown or []),
            removed_params=list(removed or []),
        ))

    def dump(name, text):
        if workdir is not None:
            (workdir / name).write_text(text)

    t0 = time.perf_counter()
    unfreeze_all(params)
    before = params.element_count()
    res1 = fit("stage1")
    record("initial", before, res1, t0)

    t0 = time.perf_counter()
    before = params.element_count()
    grown = select_layers(model, cfg.layer_count, rng=select_rng)
    plan = DropinPlan(grown, ratio=cfg.growth_ratio, init_sigma=cfg.init_sigma,
                      seed=cfg.seed)
    ledger = dropin(model, params, plan, rng=init_rng)
    # the expanded stage always trains old and new neurons together
    unfreeze_all(params)
    dump("model-expanded.json", json.dumps(model.to_dict()))
    dump("ledger.json", ledger.to_json())
    res2 = fit("stage2")
    record("expanded", before, res2, t0, grown=grown)

    t0 = time.perf_counter()
    before = params.element_count()
    removed = prune(model, params, ledger)
    unfreeze_all(params)
    dump("model-pruned.json", json.dumps(model.to_dict()))
    res3 = fit("stage3")
    record("pruned", before, res3, t0, grown=grown, removed=removed)

    if res3.best_values is not None:
        params.restore(res3.best_values)
    if workdir is not None:
        with open(workdir / "records.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    if "test" in splits:
        scores = score_examples(model, params, splits["test"].x)
        eer = compute_eer(ScoreSet.from_labels(scores, splits["test"].y))
    else:
        eer = res3.best_dev_eer if res3.best_dev_eer is not None else 0.5
    history = []
    for rec in records:
        for h in rec.history:
            history.append({"stage": rec.stage, **h})
    report = RunReport(
        dataset=dataset, model=model_label, strategy="plasticity",
        test_eer=eer, backward_ms=None,
        params_total=baseline_count, params_trainable=None,
        seed=cfg.seed, total_epochs=3 * cfg.stage_epochs, history=history)
    return params, records, report
