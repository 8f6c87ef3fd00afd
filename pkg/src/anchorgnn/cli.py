"""Command-line entry point: ``anchorgnn {gen,train,eval,sweep-anchor-layer}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .anchoring import AnchorError
from .graphs import DatasetError
from .model import ModelError
from .posthoc import CalibrationError
from . import experiment as ex

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("anchorgnn")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchorgnn", description="Stochastic anchoring experiments for GNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, jobs=True):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        if data:
            sp.add_argument("--data", help="dataset file (defaults to the config's dataset section)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker threads for independent cells")
        sp.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    g = sub.add_parser("gen", help="generate a dataset file")
    common(g, data=False, jobs=False)
    g.add_argument("--out", required=True, help="output .jsonl path")

    t = sub.add_parser("train", help="train every (method, seed) cell")
    common(t)
    t.add_argument("--out", required=True, help="checkpoint directory")

    e = sub.add_parser("eval", help="evaluate checkpoints and write a JSON report plus CSV")
    common(e)
    e.add_argument("--ckpt", required=True, help="checkpoint directory written by train")
    e.add_argument("--out", required=True, help="report .json path (the CSV goes next to it)")

    s = sub.add_parser("sweep-anchor-layer", help="train and evaluate every anchoring layer choice")
    common(s)
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--ckpt", help="checkpoint directory (default: <out>.ckpt)")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = ex.load_config(args.config)
        if args.command == "gen":
            splits = ex.cmd_gen(cfg, args.out)
            sizes = {name: len(splits.split(name)) for name in ("train", "id_val", "id_test", "ood_test")}
            if splits.masks:
                sizes = {name: int(len(splits.masks[name])) for name in sizes}
            if not args.quiet:
                print(" ".join(f"{k}={v}" for k, v in sizes.items()))
            return EXIT_OK
        if args.jobs < 1:
            raise ex.ConfigError("--jobs: must be >= 1")
        splits = ex.load_data(cfg, args.data)
        if args.command == "train":
            ex.cmd_train(cfg, splits, args.out, args.jobs)
            log.info("trained %d cells into %s", len(cfg.methods) * len(cfg.train.seeds), args.out)
        elif args.command == "eval":
            report = ex.cmd_eval(cfg, splits, args.ckpt, args.out, args.jobs)
            if not args.quiet:
                for s in report["summary"]:
                    print(f"{s['method']:<26} {s['posthoc']:<12} {s['split']:<9} "
                          f"acc {s['accuracy']['mean']:.3f}±{s['accuracy']['std']:.3f} "
                          f"ece {s['ece']['mean']:.3f}±{s['ece']['std']:.3f}")
        else:
            ckpt = args.ckpt or f"{args.out}.ckpt"
            ex.cmd_sweep_anchor_layer(cfg, splits, args.out, ckpt, args.jobs)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetError, ModelError, AnchorError, CalibrationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
