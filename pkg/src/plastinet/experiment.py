"""Strategy runner, comparison harness, and the per-layer ablation sweep.

Five strategies share one data seed, one architecture, and (by default) one
total epoch budget:

* baseline          - train the seed model straight through
* dropin_unfrozen   - warm phase, widen, keep training everything
* dropin_frozen     - warm phase, widen, train only the added neurons
* lora              - warm phase, freeze, train low-rank adapters
* plasticity        - grow-train-prune in three equal stages

The warm phase takes ``strategy.stage_epochs`` epochs; the remaining budget
goes to the post-surgery phase, so with the defaults (epochs=15,
stage_epochs=5) every strategy trains for 15 epochs in total.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, STRATEGIES, apply_overrides, canonical_yaml
from .datasynth import generate
from .growth import DropinPlan, dropin, lora_wrap, param_count, select_layers
from .layers import ModelGraph, build_model
from .metrics import (CSV_HEADER, RunReport, ScoreSet, compute_eer, emit_report,
                      measure_backward_time)
from .params import ParamStore, save_checkpoint
from .training import score_examples, train_stage

__all__ = [
    "build_from_config",
    "planned_epochs",
    "run_experiment",
    "compare_strategies",
    "AblationEntry",
    "AblationResult",
    "ablation_sweep",
]


def build_from_config(cfg: ExperimentConfig) -> tuple[ModelGraph, ParamStore]:
    d = cfg["data"]
    model = build_model(cfg["model"]["layers"], (d["freq_bins"], d["time_frames"]))
    store = ParamStore()
    model.init_params(store, np.random.default_rng([cfg.seed, 0]))
    return model, store


def _dataset_label(cfg: ExperimentConfig) -> str:
    return f"synth-d{cfg['data']['delta']:g}"


def planned_epochs(cfg: ExperimentConfig) -> int:
    """Total epochs a strategy will consume, before running anything."""
    if cfg.strategy == "plasticity":
        return 3 * cfg["strategy"]["stage_epochs"]
    return cfg["train"]["epochs"]


def run_experiment(cfg: ExperimentConfig, splits=None, workdir=None, log=None) -> RunReport:
    """Run one strategy end to end and return its report row.

    ``splits`` can be passed in so several strategies see identical data.
    With a workdir the run leaves config.yaml, report.csv, curves.jsonl and
    stage checkpoints behind.
    """
    from .plasticity import run_plasticity  # noqa: PLC0415 - keep import light

    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "config.yaml").write_text(cfg.canonical())
    strategy = cfg.strategy
    splits = generate(cfg.synth_spec()) if splits is None else splits
    model, store = build_from_config(cfg)

    train = (splits["train"].x, splits["train"].y)
    dev = (splits["dev"].x, splits["dev"].y)
    tcfg = cfg["train"]
    scfg = cfg["strategy"]
    total, stage = tcfg["epochs"], scfg["stage_epochs"]
    shuffle_rng = np.random.default_rng([cfg.seed, 7])
    select_rng = np.random.default_rng([cfg.seed, 11])
    init_rng = np.random.default_rng([cfg.seed, 13])
    history: list[dict] = []
    total_epochs = 0

    def phase(tag: str, epochs: int):
        nonlocal total_epochs
        res = train_stage(model, store, train, dev, epochs=epochs,
                          batch_size=tcfg["batch_size"], lr=tcfg["lr"],
                          optimizer=tcfg["optimizer"], rng=shuffle_rng,
                          checkpoint_dir=workdir, tag=tag, log=log)
        history.extend({"phase": tag, **h.to_dict()} for h in res.history)
        total_epochs += epochs
        return res

    def staged_budget():
        if total <= stage:
            raise ValueError(f"strategy {strategy!r} needs train.epochs > "
                             f"strategy.stage_epochs ({total} <= {stage})")
        return total - stage

    def pick_layers():
        if scfg["grow_layer"] is not None:
            return [scfg["grow_layer"]]
        return select_layers(model, scfg["layer_count"], rng=select_rng)

    if strategy == "baseline":
        final = phase("train", total)
    elif strategy in ("dropin_unfrozen", "dropin_frozen"):
        rest = staged_budget()
        phase("warm", stage)
        grown = pick_layers()
        plan = DropinPlan(grown, ratio=scfg["growth_ratio"], init_sigma=scfg["init_sigma"],
                          freeze_original=(strategy == "dropin_frozen"), seed=cfg.seed)
        dropin(model, store, plan, rng=init_rng)
        if log is not None:
            log(f"{strategy}: grew layers {grown}")
        final = phase("grown", rest)
    elif strategy == "lora":
        rest = staged_budget()
        phase("warm", stage)
        lora_wrap(model, store, rank=scfg["lora_rank"], alpha=scfg["lora_alpha"],
                  rng=init_rng)
        final = phase("adapted", rest)
    elif strategy == "plasticity":
        if total != 3 * stage and log is not None:
            log(f"plasticity ignores train.epochs={total}; its budget is "
                f"3 * stage_epochs = {3 * stage}")
        _, records, _ = run_plasticity(model, store, splits, cfg.plasticity_config(),
                                       workdir=workdir, log=log)
        for rec in records:
            history.extend({"phase": rec.stage, **h} for h in rec.history)
            total_epochs += rec.epochs
        final = None
    else:  # pragma: no cover - config validation rejects this earlier
        raise ValueError(f"unknown strategy {strategy!r}")

    if final is not None and final.best_values is not None:
        store.restore(final.best_values)

    test_scores = score_examples(model, store, splits["test"].x)
    test_eer = compute_eer(ScoreSet.from_labels(test_scores, splits["test"].y))

    # Per-step timing and a single trainable count are undefined for
    # plasticity (both change across its stages); adapter timing is skipped
    # because the adapter step is not the quantity under comparison.
    backward_ms = None
    if cfg["timing"]["enabled"] and strategy not in ("lora", "plasticity"):
        n = min(tcfg["batch_size"], len(train[1]))
        backward_ms = measure_backward_time(model, store, train[0][:n], train[1][:n],
                                            lr=tcfg["lr"], iters=cfg["timing"]["iters"],
                                            warmup=cfg["timing"]["warmup"])
    trainable = None if strategy == "plasticity" \
        else store.element_count(trainable_only=True)

    report = RunReport(
        dataset=_dataset_label(cfg),
        model=cfg["model"]["name"],
        strategy=strategy,
        test_eer=test_eer,
        backward_ms=backward_ms,
        params_total=param_count(store, ids=model.all_param_ids()),
        params_trainable=trainable,
        seed=cfg.seed,
        total_epochs=total_epochs,
        history=history,
    )
    if workdir is not None:
        (workdir / "model.json").write_text(json.dumps(model.to_dict()))
        save_checkpoint(store, workdir / "final.npz")
        emit_report(report, workdir / "report.csv", workdir / "curves.jsonl")
    if log is not None:
        shown = "/" if trainable is None else str(trainable)
        log(f"{strategy}: test EER {100 * test_eer:.2f}%  "
            f"params {report.params_total} ({shown} trainable)")
    return report


def _strategy_configs(configs) -> list[ExperimentConfig]:
    if isinstance(configs, ExperimentConfig):
        return [apply_overrides(configs, [f"strategy.name={name}"])
                for name in STRATEGIES]
    return list(configs)


def compare_strategies(configs, workdir=None, log=None) -> list[RunReport]:
    """Run strategy configs on identical data and emit one comparison table.

    ``configs`` is either a list of configs differing only in strategy, or a
    single base config which is expanded to all five strategies.  Mismatched
    data/model sections or seeds raise; unequal epoch budgets are reported
    up front but the comparison still runs.  Besides the standard report
    rows, ``summary.csv`` carries a relative-EER-change column versus the
    baseline row, computed as (baseline - strategy) / baseline.
    """
    workdir = Path(workdir) if workdir is not None else None
    members = _strategy_configs(configs)
    if not members:
        raise ValueError("compare_strategies needs at least one config")
    ref = members[0]
    for sub in members[1:]:
        for section in ("data", "model"):
            if canonical_yaml(sub[section]) != canonical_yaml(ref[section]):
                raise ValueError(f"configs disagree in the {section} section; "
                                 "comparisons need identical data and architecture")
        if sub.seed != ref.seed:
            raise ValueError(f"configs disagree on the seed ({sub.seed} != {ref.seed})")

    budgets = {sub.strategy: planned_epochs(sub) for sub in members}
    if len(set(budgets.values())) > 1 and log is not None:
        log(f"warning: unequal epoch budgets across strategies: {budgets}")

    splits = generate(ref.synth_spec())
    reports = []
    for sub in members:
        subdir = workdir / sub.strategy if workdir is not None else None
        reports.append(run_experiment(sub, splits=splits, workdir=subdir, log=log))

    base = next((r for r in reports if r.strategy == "baseline"), None)
    if log is not None and base is not None and base.test_eer > 0:
        for rep in reports:
            if rep is base:
                continue
            rel = 100.0 * (base.test_eer - rep.test_eer) / base.test_eer
            log(f"{rep.strategy}: EER {100 * rep.test_eer:.2f}% "
                f"({rel:+.1f}% relative change vs baseline)")
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        emit_report(reports, workdir / "report.csv", workdir / "curves.jsonl")
        _write_summary(reports, base, workdir / "summary.csv")
    return reports


def _write_summary(reports, base, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER + ["relative_eer_change_percent"])
        for rep in reports:
            if base is None or base.test_eer <= 0:
                rel = "/"
            else:
                rel = f"{100.0 * (base.test_eer - rep.test_eer) / base.test_eer:.1f}"
            writer.writerow(rep.to_row() + [rel])


@dataclass
class AblationEntry:
    """One grown layer's outcome; failures are recorded, not raised."""
    layer_index: int
    ok: bool
    report: RunReport | None
    error: str | None

    def to_dict(self):
        return {"layer_index": self.layer_index, "ok": self.ok,
                "report": self.report.to_dict() if self.report else None,
                "error": self.error}


@dataclass
class AblationResult:
    """Per-layer EER table from growing one expandable layer at a time."""
    strategy: str
    seed: int
    entries: list[AblationEntry] = field(default_factory=list)

    def eer_by_layer(self) -> dict[int, float]:
        return {e.layer_index: e.report.test_eer for e in self.entries if e.ok}

    def spread(self) -> float | None:
        """Max minus min test EER over the successful entries."""
        eers = list(self.eer_by_layer().values())
        if len(eers) < 2:
            return None
        return max(eers) - min(eers)

    def to_dict(self):
        return {"strategy": self.strategy, "seed": self.seed,
                "entries": [e.to_dict() for e in self.entries]}


def ablation_sweep(cfg: ExperimentConfig, workdir=None, log=None) -> AblationResult:
    """Grow each expandable layer in turn under one shared config.

    The strategy must be a dropin variant.  Every entry uses the same seed,
    data, and epoch budget, differing only in ``strategy.grow_layer``; a
    failing entry is recorded with its error and the sweep continues.
    """
    if cfg.strategy not in ("dropin_unfrozen", "dropin_frozen"):
        raise ValueError(f"ablation_sweep needs a dropin strategy, got {cfg.strategy!r}")
    workdir = Path(workdir) if workdir is not None else None
    model, _ = build_from_config(cfg)
    pool = model.expandable_indices()
    if not pool:
        raise ValueError("model has no expandable layers to sweep")
    splits = generate(cfg.synth_spec())

    result = AblationResult(strategy=cfg.strategy, seed=cfg.seed)
    for i in pool:
        try:
            sub = apply_overrides(cfg, [f"strategy.grow_layer={i}"])
            subdir = workdir / f"layer{i}" if workdir is not None else None
            report = run_experiment(sub, splits=splits, workdir=subdir, log=log)
            result.entries.append(AblationEntry(i, True, report, None))
        except Exception as exc:  # noqa: BLE001 - sweep must survive bad entries
            result.entries.append(AblationEntry(i, False, None, str(exc)))
            if log is not None:
                log(f"sweep entry layer{i} failed: {exc}")

    if log is not None:
        spread = result.spread()
        if spread is not None:
            log(f"sweep EER spread across layers: {100 * spread:.2f} points")
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        emit_report([e.report for e in result.entries if e.ok],
                    workdir / "report.csv")
        with open(workdir / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer_index", "test_eer_percent", "status"])
            for e in result.entries:
                eer = f"{100 * e.report.test_eer:.4f}" if e.ok else "/"
                writer.writerow([e.layer_index, eer, "ok" if e.ok else "failed"])
        with open(workdir / "sweep.jsonl", "w") as fh:
            for e in result.entries:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    return result
