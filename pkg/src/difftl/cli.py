"""``difftl`` command line: inspect, train, search, detect, svcca, synth, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config
from .experiment import (
    ExperimentError,
    emit_report,
    run_detection,
    run_experiment,
    run_search,
    run_svcca,
    svcca_from_actv,
)
from .graph import GraphError, HeadSpec, complexity_table, format_table
from .synthetic import KINDS, SyntheticTaskSpec, generate_synthetic
from .zoo import build_backbone, load_backbone

log = logging.getLogger("difftl")


def _shape(text: str) -> tuple[int, int, int]:
    try:
        c, h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}") from None
    return c, h, w


def _config(args):
    path = Path(args.config)
    cfg = load_config(path)
    if args.out:
        cfg = replace(cfg, out=args.out)
    return cfg, path.parent


def cmd_inspect(args) -> int:
    if Path(args.model).suffix in (".pt", ".pth"):
        backbone = load_backbone(args.model)
    else:
        backbone = build_backbone({"name": args.model})
    head = HeadSpec(args.num_outputs, pooled=not args.unpooled)
    graph = backbone.graph(head, args.input_shape)
    rows = complexity_table(graph, head)
    table = format_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        graph.save(out / "graph.json")
        (out / "complexity.txt").write_text(table + "\n")
        (out / "complexity.json").write_text(json.dumps(rows, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg, base = _config(args)
    rec = run_experiment(cfg, base)
    print(json.dumps({"out": cfg.out, "best_val_auprc": rec.best_val_auprc, "test": rec.test,
                      "params": rec.params, "macs": rec.macs, "stop_reason": rec.stop_reason}, indent=1))
    return 0


def cmd_search(args) -> int:
    cfg, base = _config(args)
    res = run_search(cfg, args.strategy, args.stage, base)
    print(json.dumps({"chosen": res.chosen.layer_index, "score": res.chosen_score,
                      "trainings": res.total_trainings, "out": cfg.out}, indent=1))
    return 0


def cmd_detect(args) -> int:
    cfg, base = _config(args)
    res = run_detection(cfg, args.tau, base)
    print(json.dumps({"detected": res.detected.layer_index, "fallback_used": res.fallback_used,
                      "gaps": [round(g, 4) for g in res.gaps], "ttl_test_auprc": res.ttl_score,
                      "out": cfg.out}, indent=1))
    return 0


def cmd_svcca(args) -> int:
    if args.actv:
        if not args.out:
            raise ConfigError("--out is required")
        rep = svcca_from_actv(*args.actv, variance_keep=args.variance_keep)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "svcca.json").write_text(json.dumps([rep.to_dict()], indent=1))
        print(json.dumps({"k": rep.k, "mean": rep.summary()["mean"], "auc_gap": rep.auc_gap}, indent=1))
        return 0
    if not (args.config and args.after):
        raise ConfigError("svcca needs either --actv A B, or a config with --after CHECKPOINT")
    cfg, base = _config(args)
    reports = run_svcca(cfg, args.after, args.mode, base)
    for r in reports:
        print(f"{r.tag:>12}  k={r.k:<4} mean={r.summary()['mean']:.3f}  auc_gap={r.auc_gap:.3f}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticTaskSpec(args.kind, args.image_size, args.samples_per_class, args.noise, args.seed)
    manifest = generate_synthetic(spec, args.out)
    print(manifest)
    return 0


def cmd_report(args) -> int:
    problems = emit_report(args.dirs, args.out)
    for p in problems:
        print(f"missing: {p}", file=sys.stderr)
    comparison = Path(args.out) / "comparison.txt"
    if comparison.exists():
        print(comparison.read_text(), end="")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difftl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="list truncation points with parameter and MAC counts")
    p.add_argument("model", help="zoo name (resnet18/34/50/101/152, mini_resnet, plain_convnet) or a .pt backbone")
    p.add_argument("--input-shape", type=_shape, default=None, metavar="CxHxW")
    p.add_argument("--num-outputs", type=int, default=2)
    p.add_argument("--unpooled", action="store_true", help="head flattens the feature map instead of pooling")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    for name, func, helptext in (("train", cmd_train, "finetune one strategy from a config"),
                                 ("search", cmd_search, "two-stage cutoff search"),
                                 ("detect", cmd_detect, "SVCCA-based cutoff detection")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "search":
            p.add_argument("--strategy", choices=["ttl", "tf", "lwft"], default="ttl")
            p.add_argument("--stage", choices=["1", "2", "both"], default=None)
        if name == "detect":
            p.add_argument("--tau", type=float, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("svcca", help="SVCCA between a backbone and a finetuned model, or two .actv files")
    p.add_argument("config", nargs="?")
    p.add_argument("--after", help="finetuned checkpoint (best.ckpt)")
    p.add_argument("--mode", choices=["horizontal", "vertical"], default="horizontal")
    p.add_argument("--actv", nargs=2, metavar=("A", "B"))
    p.add_argument("--variance-keep", type=float, default=0.99)
    p.add_argument("--out")
    p.set_defaults(func=cmd_svcca)

    p = sub.add_parser("synth", help="write a synthetic texture or shape dataset")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--image-size", type=int, default=40)
    p.add_argument("--samples-per-class", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="comparison tables and plots from experiment directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError, GraphError, ValueError, FileNotFoundError) as err:
        print(f"difftl {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
