"""Shared setup for the experiment scripts: default synthetic data, class split, run config."""

from __future__ import annotations

import argparse
import logging

from skd.config import resolve
from skd.data import SplitSpec, SyntheticConfig, generate_synthetic, split_dataset


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated training seeds")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="extra run-config overrides")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args) -> tuple:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    overrides = dict(kv.split("=", 1) for kv in args.set)
    run = resolve({}, {"num_tasks": args.tasks, **overrides})
    dataset = generate_synthetic(SyntheticConfig(seed=args.data_seed))
    train, _, test = split_dataset(dataset, SplitSpec.contiguous(run.n_train, run.n_val, run.n_test))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    return run, train, test, seeds


def progress(result) -> None:
    print(f"seed {result.seed}  {result.cell.name:<24} {100 * result.report.mean:6.2f} "
          f"+- {100 * result.report.ci95:.2f}", flush=True)


