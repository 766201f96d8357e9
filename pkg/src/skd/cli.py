"""``skd`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numeric failure.  Failures print exactly one line to stderr::

    error code=<n> kind=<ExceptionName> msg=<json string>
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from skd import ablation
from skd.checkpoint import load_checkpoint, params_digest, save_checkpoint
from skd.config import FIELD_TYPES, RunConfig, load_config_file, parse_float_list, parse_int_list, resolve
from skd.data import SplitSpec, generate_synthetic, load_fsds, save_fsds, split_dataset
from skd.errors import ConfigError, ContractError, DataError, NumericError
from skd.fewshot import evaluate
from skd.train import run_gen0, run_gen1

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen-data", "train-gen0", "train-gen1", "eval", "ablate")
ALIASES = {"tasks": "num_tasks"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skd", description="Self-supervised knowledge distillation for few-shot learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override its entries")
        for key in FIELD_TYPES:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")
        for alias, key in ALIASES.items():
            p.add_argument("--" + alias, dest=key, default=None, metavar="VALUE", help=f"alias of --{key}")
    return parser


def _split_path(run: RunConfig, data_path: str) -> Path:
    return Path(run.split) if run.split else Path(data_path).with_suffix(".split.json")


def _log_path(run: RunConfig, out: Path) -> Path:
    return Path(run.log) if run.log else out.with_suffix(".jsonl")


def _load_splits(run: RunConfig):
    dataset = load_fsds(run.data)
    split_file = _split_path(run, run.data)
    spec = SplitSpec.load(split_file) if split_file.exists() else SplitSpec.contiguous(run.n_train, run.n_val, run.n_test)
    return split_dataset(dataset, spec)


def _pick_eval_split(run: RunConfig, splits):
    names = {"train": 0, "val": 1, "test": 2}
    if run.eval_split not in names:
        raise ConfigError(f"eval_split must be one of {sorted(names)}")
    return splits[names[run.eval_split]]


def cmd_gen_data(run: RunConfig) -> str:
    out = Path(run.out or run.data)
    spec = SplitSpec.contiguous(run.n_train, run.n_val, run.n_test)
    if run.n_train + run.n_val + run.n_test != run.num_classes:
        raise ConfigError(f"split sizes sum to {run.n_train + run.n_val + run.n_test}, "
                          f"dataset has {run.num_classes} classes")
    dataset = generate_synthetic(run.synthetic())
    save_fsds(dataset, out)
    split_file = _split_path(run, str(out))
    spec.save(split_file)
    return f"wrote {out} ({len(dataset)} samples) and {split_file}"


def cmd_train_gen0(run: RunConfig) -> str:
    train, _, _ = _load_splits(run)
    c, h, _ = train.image_shape
    backbone = run.backbone(train.num_classes, c, h)
    out = Path(run.out or "gen0.skdc")
    meta = {"run": run.to_dict(), "seed": run.seed}
    with open(_log_path(run, out), "w", encoding="utf-8") as log_file:
        state = run_gen0(train, run.sgd(), run.loss(), backbone, augment=run.augment(), pretext=run.pretext,
                         log_file=log_file, checkpoint_dir=run.checkpoint_dir or None, meta=meta)
    save_checkpoint(state.params, out, {**meta, "generation": 0})
    return f"wrote {out} after {state.step} steps, final loss {state.loss_history[-1][1]:.4f}" \
        if state.loss_history else f"wrote {out} (no steps)"


def cmd_train_gen1(run: RunConfig) -> str:
    if not run.teacher:
        raise UsageError("train-gen1 requires --teacher")
    teacher, teacher_meta = load_checkpoint(run.teacher, requires_grad=False)
    train, _, _ = _load_splits(run)
    out = Path(run.out or "gen1.skdc")
    meta = {"run": run.to_dict(), "seed": run.seed, "teacher": str(run.teacher),
            "teacher_digest": params_digest(teacher)}
    with open(_log_path(run, out), "w", encoding="utf-8") as log_file:
        state = run_gen1(teacher, train, run.gen1_sgd(), run.loss(), run.twin_rotation, augment=run.augment(),
                         log_file=log_file, checkpoint_dir=run.checkpoint_dir or None, meta=meta)
    save_checkpoint(state.params, out, {**meta, "generation": 1})
    return f"wrote {out} after {state.step} steps"


def cmd_eval(run: RunConfig) -> str:
    if not run.checkpoint:
        raise UsageError("eval requires --checkpoint")
    params, meta = load_checkpoint(run.checkpoint, requires_grad=False)
    test = _pick_eval_split(run, _load_splits(run))
    report = evaluate(params, test, run.n_way, run.k_shot, run.q_size, run.num_tasks, run.eval_seed,
                      run.l2_reg, run.max_iters,
                      config={"run": run.to_dict(), "checkpoint": run.checkpoint,
                              "checkpoint_digest": params_digest(params)})
    out = Path(run.out or "report.json")
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    return f"{run.n_way}-way {run.k_shot}-shot over {report.num_tasks} tasks: " \
        f"{100 * report.mean:.2f} +- {100 * report.ci95:.2f} -> {out}"


def cmd_ablate(run: RunConfig) -> str:
    cells = []
    if run.grid:
        if run.grid != "table3":
            raise ConfigError(f"unknown grid {run.grid!r}; only 'table3' is defined")
        cells += ablation.table3_cells(run.alpha, run.beta)
    if run.alpha_grid:
        cells += ablation.alpha_cells(parse_float_list(run.alpha_grid, "alpha_grid"))
    if run.beta_grid:
        cells += ablation.beta_cells(run.alpha, parse_float_list(run.beta_grid, "beta_grid"))
    if not cells:
        raise UsageError("ablate needs --grid table3, --alpha-grid or --beta-grid")
    names = [c.name for c in cells]
    cells = [c for i, c in enumerate(cells) if c.name not in names[:i]]
    splits = _load_splits(run)
    train, test = splits[0], _pick_eval_split(run, splits)
    seeds = parse_int_list(run.seeds, "seeds")
    if not seeds:
        raise ConfigError("seeds must list at least one integer")
    results = ablation.run_grid(train, test, run, cells, seeds)
    out = Path(run.out or "ablation")
    rows = ablation.write_outputs(results, out, run)
    return ablation.format_summary(rows).rstrip("\n")


HANDLERS = {"gen-data": cmd_gen_data, "train-gen0": cmd_train_gen0, "train-gen1": cmd_train_gen1,
            "eval": cmd_eval, "ablate": cmd_ablate}


def _fail(code: int, exc: BaseException) -> int:
    msg = json.dumps(" ".join(str(exc).split()))
    print(f"error code={code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose one of {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        file_values = load_config_file(args.config) if args.config else {}
        overrides = {k: v for k, v in vars(args).items() if k in FIELD_TYPES and v is not None}
        run = resolve(file_values, overrides)
        print(HANDLERS[args.command](run))
        return EXIT_OK
    except (UsageError, ConfigError, ContractError) as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataError, OSError) as exc:
        return _fail(EXIT_DATA, exc)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
