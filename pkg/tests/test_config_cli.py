"""Config parsing, dotted overrides, and the command-line front end."""

import json
import subprocess

import numpy as np
import pytest

from plastinet.cli import main
from plastinet.config import (
    DEFAULTS,
    STRATEGIES,
    apply_overrides,
    canonical_yaml,
    parse_config,
    parse_config_text,
)
from plastinet.datasynth import load_npz
from plastinet.metrics import CSV_HEADER


class TestConfigDefaults:
    """Merging user YAML over the complete default tree."""

    def test_empty_text_materializes_defaults(self):
        cfg = parse_config_text("")
        assert cfg.seed == 42
        assert cfg.strategy == "baseline"
        assert cfg["train"]["epochs"] == 15
        assert cfg["data"]["delta"] == 0.5
        assert cfg["timing"]["enabled"] is True
        assert cfg["model"]["layers"] == DEFAULTS["model"]["layers"]

    def test_partial_override_keeps_siblings(self):
        cfg = parse_config_text("train:\n  lr: 0.01\n")
        assert cfg["train"]["lr"] == 0.01
        assert cfg["train"]["epochs"] == 15

    def test_unknown_key_is_named(self):
        with pytest.raises(ValueError, match="train.dropn"):
            parse_config_text("train:\n  dropn: 0.1\n")
        with pytest.raises(ValueError, match="extras"):
            parse_config_text("extras: {}\n")

    def test_canonical_round_trip(self):
        cfg = parse_config_text("experiment:\n  seed: 7\nstrategy:\n  name: lora\n")
        again = parse_config_text(cfg.canonical())
        assert again.canonical() == cfg.canonical()

    def test_type_mismatches_rejected(self):
        with pytest.raises(ValueError, match="train.epochs"):
            parse_config_text("train:\n  epochs: five\n")
        with pytest.raises(ValueError, match="boolean"):
            parse_config_text("timing:\n  enabled: 1\n")

    def test_int_promotes_to_float(self):
        cfg = parse_config_text("train:\n  lr: 1\n")
        assert cfg["train"]["lr"] == 1.0 and isinstance(cfg["train"]["lr"], float)

    def test_nullable_keys(self):
        cfg = parse_config_text("strategy:\n  init_sigma: 0.25\n  grow_layer: 2\n")
        assert cfg["strategy"]["init_sigma"] == 0.25
        assert cfg["strategy"]["grow_layer"] == 2
        cfg = parse_config_text("strategy:\n  init_sigma: null\n")
        assert cfg["strategy"]["init_sigma"] is None
        with pytest.raises(ValueError, match="must not be null"):
            parse_config_text("experiment:\n  name: null\n")

    def test_layer_list_shape_checked(self):
        with pytest.raises(ValueError, match="model.layers"):
            parse_config_text("model:\n  layers: conv\n")

    def test_semantic_validation(self):
        for text, frag in [
            ("strategy:\n  name: bogus\n", "unknown strategy"),
            ("train:\n  optimizer: rmsprop\n", "optimizer"),
            ("train:\n  epochs: -1\n", "epochs"),
            ("train:\n  batch_size: 0\n", "batch_size"),
            ("strategy:\n  stage_epochs: -2\n", "stage_epochs"),
            ("strategy:\n  lora_rank: 0\n", "lora_rank"),
        ]:
            with pytest.raises(ValueError, match=frag):
                parse_config_text(text)

    def test_parse_config_reads_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("experiment:\n  seed: 5\n")
        assert parse_config(path).seed == 5

    def test_derived_spec_objects(self):
        cfg = parse_config_text(
            "experiment:\n  seed: 3\ndata:\n  delta: 0.9\n"
            "strategy:\n  stage_epochs: 2\ntrain:\n  lr: 0.05\n")
        spec = cfg.synth_spec()
        assert spec.delta == 0.9 and spec.seed == 3
        pcfg = cfg.plasticity_config()
        assert pcfg.stage_epochs == 2 and pcfg.lr == 0.05 and pcfg.seed == 3

    def test_strategy_list_is_fixed(self):
        assert STRATEGIES == ("baseline", "dropin_unfrozen", "dropin_frozen",
                              "lora", "plasticity")


class TestOverrides:
    """Dotted-path assignments re-run the full validation."""

    def test_typed_values(self):
        cfg = parse_config_text("")
        out = apply_overrides(cfg, ["train.lr=0.01", "train.epochs=3",
                                    "strategy.name=lora", "timing.enabled=false"])
        assert out["train"]["lr"] == 0.01
        assert out["train"]["epochs"] == 3
        assert out.strategy == "lora"
        assert out["timing"]["enabled"] is False

    def test_null_and_int_for_nullable_key(self):
        cfg = parse_config_text("strategy:\n  grow_layer: 1\n")
        assert apply_overrides(cfg, ["strategy.grow_layer=null"])["strategy"]["grow_layer"] is None
        assert apply_overrides(cfg, ["strategy.grow_layer=2"])["strategy"]["grow_layer"] == 2

    def test_unknown_path_rejected(self):
        cfg = parse_config_text("")
        with pytest.raises(ValueError, match="train.nope"):
            apply_overrides(cfg, ["train.nope=1"])

    def test_malformed_assignment_rejected(self):
        with pytest.raises(ValueError, match="key.path=value"):
            apply_overrides(parse_config_text(""), ["train.lr"])

    def test_source_config_unchanged(self):
        cfg = parse_config_text("")
        apply_overrides(cfg, ["train.epochs=1"])
        assert cfg["train"]["epochs"] == 15

    def test_override_failing_validation_rejected(self):
        with pytest.raises(ValueError, match="unknown strategy"):
            apply_overrides(parse_config_text(""), ["strategy.name=bogus"])


FAST = [
    "--set", "data.n_train=40", "--set", "data.n_dev=20", "--set", "data.n_test=20",
    "--set", "data.freq_bins=6", "--set", "data.time_frames=8",
    "--set", "data.delta=1.0", "--set", "train.epochs=1",
    "--set", "strategy.stage_epochs=0", "--set", "timing.enabled=false",
]


class TestCliRun:
    """The run subcommand and its error codes."""

    def test_run_prints_report_row(self, tmp_path, capsys):
        rc = main(["run", "--outdir", str(tmp_path / "w"), *FAST])
        assert rc == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert out[0] == ",".join(CSV_HEADER)
        row = out[1].split(",")
        assert row[0] == "synth-d1" and row[2] == "baseline"
        assert len(row) == len(CSV_HEADER)
        for name in ("config.yaml", "model.json", "final.npz", "report.csv"):
            assert (tmp_path / "w" / name).exists(), name

    def test_run_reads_config_file(self, tmp_path, capsys):
        path = tmp_path / "exp.yaml"
        path.write_text("strategy:\n  name: lora\ntrain:\n  epochs: 1\n"
                        "data:\n  n_train: 40\n  n_dev: 20\n  n_test: 20\n"
                        "  freq_bins: 6\n  time_frames: 8\n"
                        "timing:\n  enabled: false\n")
        rc = main(["run", "--config", str(path), "--outdir", str(tmp_path / "w"),
                   "--set", "strategy.stage_epochs=0"])
        assert rc == 0
        assert capsys.readouterr().out.strip().split("\n")[1].split(",")[2] == "lora"

    def test_config_error_exits_2_with_json(self, capsys, tmp_path):
        rc = main(["run", "--outdir", str(tmp_path), "--set", "train.epochs=-1"])
        assert rc == 2
        err = capsys.readouterr().err.strip().split("\n")[-1]
        payload = json.loads(err)
        assert payload["error"] == "config"
        assert "epochs" in payload["message"]

    def test_missing_config_file_exits_2(self, capsys, tmp_path):
        rc = main(["run", "--config", str(tmp_path / "absent.yaml")])
        assert rc == 2
        assert json.loads(capsys.readouterr().err.strip().split("\n")[-1])["error"] == "config"


class TestCliDataAndGradcam:
    """gen-data and gradcam plumbing."""

    def test_gen_data_writes_loadable_corpus(self, tmp_path, capsys):
        out = tmp_path / "d" / "corpus.npz"
        rc = main(["gen-data", "--out", str(out), *[a for a in FAST if a != "--outdir"]])
        assert rc == 0
        assert capsys.readouterr().out.strip() == str(out)
        splits, spec = load_npz(out)
        assert spec.n_train == 40 and spec.delta == 1.0
        assert splits["train"].x.shape == (40, 6, 8)

    def test_gradcam_from_run_artifacts(self, tmp_path, capsys):
        work = tmp_path / "w"
        assert main(["run", "--outdir", str(work), *FAST]) == 0
        data = tmp_path / "corpus.npz"
        assert main(["gen-data", "--out", str(data), *FAST]) == 0
        capsys.readouterr()
        out = tmp_path / "cams.npz"
        rc = main(["gradcam", "--model-json", str(work / "model.json"),
                   "--checkpoint", str(work / "final.npz"),
                   "--data", str(data), "--count", "3", "--out", str(out)])
        assert rc == 0
        assert capsys.readouterr().out.strip() == str(out)
        with np.load(out) as z:
            cams = z["cams"]
            assert cams.shape[0] == 3
            assert np.all(cams >= 0.0) and np.all(cams <= 1.0)
        txt = out.with_suffix(".txt").read_text()
        assert "# example 0 label" in txt

    def test_gradcam_rejects_non_conv_layer(self, tmp_path, capsys):
        work = tmp_path / "w"
        assert main(["run", "--outdir", str(work), *FAST]) == 0
        capsys.readouterr()
        rc = main(["gradcam", "--model-json", str(work / "model.json"),
                   "--checkpoint", str(work / "final.npz"), "--layer", "2",
                   "--out", str(tmp_path / "c.npz"), *FAST])
        assert rc == 2
        assert json.loads(capsys.readouterr().err.strip().split("\n")[-1])["error"] == "config"


class TestCliSweepAndCompare:
    """Multi-run subcommands."""

    def test_sweep_emits_one_row_per_expandable_layer(self, tmp_path, capsys):
        rc = main(["sweep", "--outdir", str(tmp_path / "w"), *FAST])
        assert rc == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert out[0] == "layer_index,test_eer_percent,status"
        rows = [line.split(",") for line in out[1:]]
        assert [r[0] for r in rows] == ["0", "1", "3"]      # conv, conv, dense
        assert all(r[2] == "ok" for r in rows)
        assert (tmp_path / "w" / "sweep.csv").exists()

    def test_compare_runs_selected_strategies(self, tmp_path, capsys):
        rc = main(["compare", "--strategies", "baseline,lora",
                   "--outdir", str(tmp_path / "w"), *FAST])
        assert rc == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert out[0] == ",".join(CSV_HEADER)
        assert [line.split(",")[2] for line in out[1:]] == ["baseline", "lora"]
        assert (tmp_path / "w" / "summary.csv").exists()

    def test_compare_rejects_unknown_strategy_name(self, capsys, tmp_path):
        rc = main(["compare", "--strategies", "baseline,nope",
                   "--outdir", str(tmp_path)])
        assert rc == 2
        assert json.loads(capsys.readouterr().err.strip().split("\n")[-1])["error"] == "config"


class TestConsoleScript:
    """The installed entry point answers --help."""

    def test_help_runs(self):
        proc = subprocess.run(["plastinet", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "run" in proc.stdout and "sweep" in proc.stdout
