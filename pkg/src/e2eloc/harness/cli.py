"""Command line entry point: ``python3 -m e2eloc <command>``.

Every ExperimentConfig field is also a flag (``--beta-att 0``,
``--glyph-n-train 500``); ``--config FILE`` loads a key/value file first and
flags override it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ..synthdata import (
    dump_attention_dataset,
    dump_glyph_dataset,
    gen_attention_dataset,
    gen_glyph_dataset,
    load_attention_split,
    load_glyph_split,
)
from .config import ExperimentConfig, dump_config, load_config, parse_overrides, parse_value

_NESTED = ("glyph", "attention")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("experiment settings")
    defaults = ExperimentConfig()
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _NESTED:
            for sub in dataclasses.fields(getattr(defaults, f.name)):
                g.add_argument(_flag(f"{f.name}_{sub.name}"), dest=f"{f.name}.{sub.name}", type=parse_value,
                               metavar="V")
        else:
            g.add_argument(_flag(f.name), dest=f.name, type=parse_value, metavar="V")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    keys = {f.name for f in dataclasses.fields(ExperimentConfig)}
    overrides = {
        k: v for k, v in vars(args).items()
        if v is not None and (k in keys or k.split(".", 1)[0] in _NESTED)
    }
    return parse_overrides(overrides, cfg) if overrides else cfg


def _glyph_data(cfg: ExperimentConfig, data_dir: str | None):
    if data_dir:
        return load_glyph_split(data_dir, "train"), load_glyph_split(data_dir, "test")
    return gen_glyph_dataset(cfg.glyph)


def _attention_data(cfg: ExperimentConfig, data_dir: str | None):
    if data_dir:
        return load_attention_split(data_dir, "train"), load_attention_split(data_dir, "test")
    return gen_attention_dataset(cfg.attention)


def _report(checks: dict[str, bool]) -> int:
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(checks.values()) else 1


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    if args.kind in ("glyph", "both"):
        train, test = gen_glyph_dataset(cfg.glyph)
        dump_glyph_dataset(out / "glyph", cfg.glyph, {"train": train, "test": test})
        print(f"wrote {len(train)} + {len(test)} glyph images to {out / 'glyph'}")
    if args.kind in ("attention", "both"):
        train, test = gen_attention_dataset(cfg.attention)
        dump_attention_dataset(out / "attention", cfg.attention, {"train": train, "test": test})
        print(f"wrote {len(train)} + {len(test)} attention maps to {out / 'attention'}")
    return 0


def cmd_train(args) -> int:
    from .train import train_e2e

    cfg = config_from_args(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.txt")
    train, test = _glyph_data(cfg, args.data)
    result = train_e2e(cfg, train, test, out_dir=out)
    last = result.history[-1]
    print(f"test accuracy {last['test_acc']:.4f}  test IoU {last['test_iou']:.3f}  ({result.seconds:.0f}s)")
    if args.visualize:
        from .visualize import save_crops

        path = save_crops(result.model, test, out / "crops.png", args.visualize)
        print(f"crops written to {path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    if args.data:
        test = load_glyph_split(args.data, "test")
    else:
        _, test = gen_glyph_dataset(cfg.glyph)
    scores = evaluate(model, test)
    print(json.dumps(scores, indent=2))
    if args.visualize:
        from .visualize import save_crops

        out = Path(args.out or Path(args.checkpoint).parent)
        print(f"crops written to {save_crops(model, test, out / 'crops.png', args.visualize)}")
    return 0


def cmd_affnet_bench(args) -> int:
    from .bench import check_bench, run_affnet_bench

    cfg = config_from_args(args)
    out = Path(args.out or cfg.out_dir)
    rows = run_affnet_bench(cfg, _attention_data(cfg, args.data), out_dir=out)
    print(f"{'architecture':<10} {'prep':<5} {'params':>8} {'ms':>7} {'SL1e-3':>7} {'IoU>.8':>6} {'IoU>.95':>7}")
    for r in rows:
        print(f"{r.architecture:<10} {str(r.preprocess):<5} {r.parameters:>8} {r.runtime_ms:>7.3f} "
              f"{r.sl1_error * 1e3:>7.2f} {r.iou_gt_08:>6.3f} {r.iou_gt_095:>7.3f}")
    print(f"table written to {out / 'table1.csv'}")
    return _report(check_bench(rows))


def cmd_ablation(args) -> int:
    from .ablation import check_ablation, run_ablation

    cfg = config_from_args(args)
    out = Path(args.out or cfg.out_dir)
    result = run_ablation(cfg, _glyph_data(cfg, args.data), out_dir=out)
    for r in result.rows:
        print(f"{r.description:<36} acc {r.accuracy * 100:5.1f} +- {r.accuracy_std * 100:4.1f}  IoU {r.test_iou:.3f}")
    print(f"table written to {out / 'table2.csv'}")
    return _report(check_ablation(result.rows))


def cmd_grad_check(args) -> int:
    from .gradsuite import run_end_to_end_checks, run_op_checks

    seeds = range(args.seeds)
    ops = run_op_checks(seeds)
    e2e = run_end_to_end_checks(seeds)
    worst_op = max(ops, key=lambda r: r.error)
    worst_e2e = max(e2e, key=lambda r: r.error)
    print(f"per-op: {len(ops)} checks, worst {worst_op.error:.2e} ({worst_op.case}/{worst_op.tensor})")
    print(f"end-to-end: {len(e2e)} checks, worst {worst_e2e.error:.2e} ({worst_e2e.tensor})")
    return _report({
        "per-op relative error < 1e-4": worst_op.error < 1e-4,
        "end-to-end relative error < 1e-3": worst_e2e.error < 1e-3,
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2eloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and dump the synthetic datasets")
    p.add_argument("--kind", choices=("glyph", "attention", "both"), default="both")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the localizer and classifier jointly")
    p.add_argument("--out")
    p.add_argument("--data", help="glyph dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--visualize", type=int, default=0, metavar="N", help="save N test crops as a PNG")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the glyph test split")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--visualize", type=int, default=0, metavar="N")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("affnet-bench", help="compare affine estimators on attention maps (table1.csv)")
    p.add_argument("--out")
    p.add_argument("--data", help="attention dataset directory from gen-data")
    _add_config_flags(p)
    p.set_defaults(func=cmd_affnet_bench)

    p = sub.add_parser("ablation", help="five-way loss/gate ablation (table2.csv)")
    p.add_argument("--out")
    p.add_argument("--data")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("grad-check", help="finite-difference checks of every op and the full loss")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
