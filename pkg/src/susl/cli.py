"""Command line entry point: ``susl run|summarize|eval|gen-grid|export-latents``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import experiments as X


def _cmd_run(args) -> int:
    cfg = X.load_config(args.config, args.set)
    result = X.run_experiment(cfg, args.out)
    for row in result["summary"]:
        sd = "" if row["acc_sd"] is None else f" +/- {100 * row['acc_sd']:.1f}"
        print(f"{row['family']:7s} {row['dataset']:13s} {row['regime']:18s} "
              f"ACC {100 * row['acc']:.1f}{sd}  (n={row['n_runs']})")
    for r in result["results"]:
        if "error" in r:
            print(f"seed {r['seed']} failed: {r['error']}", file=sys.stderr)
        elif not r["status"]["ok"]:
            bad = [k for k, v in r["status"]["invariants"].items() if not v]
            print(f"seed {r['seed']} violated invariants: {bad}", file=sys.stderr)
    return 0 if result["ok"] else 1


def _cmd_summarize(args) -> int:
    try:
        rows = X.summarize(args.dirs, args.out)
    except X.IncompatibleRunsError as exc:
        print(f"refusing to summarise: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(rows, indent=1))
    return 0


def _cmd_eval(args) -> int:
    cfg = X.load_config(args.dataset) if args.dataset else None
    report = X.eval_checkpoint(args.checkpoint, cfg, args.out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "confusion"}, indent=1))
    return 0


def _cmd_gen_grid(args) -> int:
    store, pp, _, seed = X.load_run_checkpoint(args.checkpoint)
    grid = E.generation_grid(store, args.rows, np.random.default_rng(args.seed))
    out = Path(args.out or Path(args.checkpoint).with_suffix("").as_posix() + f"_grid_s{args.seed}")
    np.save(out.with_suffix(".npy"), grid)
    if pp is not None and pp.image_shape:
        E.write_pgm(out.with_suffix(".pgm"),
                    E.grid_to_image(grid, lambda x: D.restore_layout(x, pp), pp.image_shape))
    print(out)
    return 0


def _cmd_export_latents(args) -> int:
    store, pp, cfg, _ = X.load_run_checkpoint(args.checkpoint)
    if args.dataset:
        cfg = X.load_config(args.dataset)
    train, test = X.load_datasets(cfg)
    ds = D.apply_preprocess(test if args.split == "test" else train, pp)
    lat = E.export_latents(store, ds.features, args.policy, ds.labels)
    np.savetxt(args.out, np.column_stack([lat, ds.labels]), delimiter="\t",
               header="\t".join([f"z{i}" for i in range(lat.shape[1])] + ["label"]), comments="",
               fmt=["%.17g"] * lat.shape[1] + ["%d"])
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="susl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="train and evaluate every seed of an experiment config")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="run directory (default: <output_dir>/<name>)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("summarize", help="mean +/- SD table over run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", help="output stem for .tsv/.json")
    p.set_defaults(fn=_cmd_summarize)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test set")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", help="config file describing the dataset (default: from checkpoint)")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gen-grid", help="decoder means for shared z draws across every y")
    p.add_argument("checkpoint")
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_gen_grid)

    p = sub.add_parser("export-latents", help="posterior means for downstream embedding tools")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--policy", choices=["argmax", "labels"], default="argmax")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", default="latents.tsv")
    p.set_defaults(fn=_cmd_export_latents)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (FileNotFoundError, X.ConfigError, D.ConfigurationError, D.DataError) as exc:
        print(f"susl {args.cmd}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
