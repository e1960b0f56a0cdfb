"""Command-line front end.

Progress goes to stderr; machine-readable results (the report table, file
paths) go to stdout.  Configuration and usage mistakes exit with code 2 and
a one-line JSON error on stderr; unexpected runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import STRATEGIES, apply_overrides, load_config, config_from_dict
from .datasynth import generate, load_npz, save_npz
from .experiment import ablation_sweep, compare_strategies, run_experiment
from .growth import NeuronLedger
from .layers import ModelGraph
from .metrics import CSV_HEADER, gradcam
from .params import load_checkpoint

__all__ = ["main"]


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def _config_from_args(args) -> "ExperimentConfig":
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _outdir(args, cfg) -> Path:
    return Path(args.outdir) if args.outdir else Path(cfg["experiment"]["outdir"])


def _print_table(reports) -> None:
    print(",".join(CSV_HEADER))
    for rep in reports:
        print(",".join(rep.to_row()))


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    report = run_experiment(cfg, workdir=_outdir(args, cfg), log=_log)
    _print_table([report])
    return 0


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    if args.strategies:
        names = [s.strip() for s in args.strategies.split(",") if s.strip()]
        unknown = [s for s in names if s not in STRATEGIES]
        if unknown:
            raise ValueError(f"unknown strategies: {', '.join(unknown)}")
        configs = [apply_overrides(cfg, [f"strategy.name={name}"]) for name in names]
    else:
        configs = cfg
    reports = compare_strategies(configs, workdir=_outdir(args, cfg), log=_log)
    _print_table(reports)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    if args.strategy:
        cfg = apply_overrides(cfg, [f"strategy.name={args.strategy}"])
    elif cfg.strategy not in ("dropin_unfrozen", "dropin_frozen"):
        cfg = apply_overrides(cfg, ["strategy.name=dropin_unfrozen"])
    result = ablation_sweep(cfg, workdir=_outdir(args, cfg), log=_log)
    print("layer_index,test_eer_percent,status")
    for e in result.entries:
        eer = f"{100 * e.report.test_eer:.4f}" if e.ok else "/"
        print(f"{e.layer_index},{eer},{'ok' if e.ok else 'failed'}")
    failed = [e for e in result.entries if not e.ok]
    for e in failed:
        _log(f"failed: layer{e.layer_index}: {e.error}")
    return 0 if not failed else 1


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.synth_spec()
    splits = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_npz(splits, spec, out)
    sizes = {k: len(v) for k, v in splits.items()}
    _log(f"wrote {sizes} examples (delta={spec.delta}) to {out}")
    print(str(out))
    return 0


def cmd_gradcam(args) -> int:
    model = ModelGraph.from_dict(json.loads(Path(args.model_json).read_text()))
    params = load_checkpoint(args.checkpoint)
    if args.data:
        splits, _ = load_npz(args.data)
        if args.split not in splits:
            raise ValueError(f"split {args.split!r} not present in {args.data}")
        split = splits[args.split]
    else:
        cfg = _config_from_args(args)
        split = generate(cfg.synth_spec())[args.split]
    conv_layers = [i for i, l in enumerate(model.layers) if l.kind == "conv2d"]
    if not conv_layers:
        raise ValueError("model has no conv2d layer to explain")
    layer = args.layer if args.layer is not None else conv_layers[-1]
    if layer not in conv_layers:
        raise ValueError(f"layer {layer} is not a conv2d layer (candidates: {conv_layers})")

    n = min(args.count, len(split))
    x = split.x[:n][:, None, :, :]
    cams = gradcam(model, params, x, layer, target_class=args.target_class)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, cams=cams, features=split.x[:n], labels=split.y[:n],
             layer=np.array(layer), target_class=np.array(args.target_class))
    txt = out.with_suffix(".txt")
    with open(txt, "w") as fh:
        for i in range(n):
            fh.write(f"# example {i} label {int(split.y[i])}\n")
            np.savetxt(fh, cams[i], fmt="%.6f")
            fh.write("\n")
    _log(f"wrote {n} heatmaps of layer L{layer} (shape {cams.shape[1:]}) "
         f"to {out} and {txt}")
    print(str(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plastinet",
        description="Neuron-growth experiments on synthetic spoof detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML experiment config (defaults apply)")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted config override, e.g. train.lr=0.01")
        p.add_argument("--outdir", help="artifact directory (default: experiment.outdir)")

    p = sub.add_parser("run", help="run one strategy end to end")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="run several strategies on identical data")
    common(p)
    p.add_argument("--strategies", help="comma list (default: all five)")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("sweep", help="grow each expandable layer in turn")
    common(p)
    p.add_argument("--strategy", choices=["dropin_unfrozen", "dropin_frozen"],
                   help="dropin variant (default: config value, or dropin_unfrozen)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to .npz")
    p.add_argument("--config", help="YAML config (data section is used)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gradcam", help="class-activation maps from a checkpoint")
    p.add_argument("--config", help="YAML config (for data when --data absent)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--model-json", required=True, help="serialized model structure")
    p.add_argument("--checkpoint", required=True, help="parameter checkpoint .npz")
    p.add_argument("--data", help="dataset .npz from gen-data (else regenerate)")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--layer", type=int, default=None, help="conv layer index (default: last)")
    p.add_argument("--target-class", type=int, default=1, choices=[0, 1])
    p.add_argument("--count", type=int, default=8, help="number of examples")
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(fn=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        return _fail("config", str(exc), 2)
    except ArithmeticError as exc:
        return _fail("numeric", str(exc), 1)
    except OSError as exc:
        return _fail("io", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
