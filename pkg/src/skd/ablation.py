"""Grid runner for loss-combination and weight sweeps.

A cell is a Gen-0 loss (``alpha``, pretext) optionally followed by a Gen-1
stage (``beta``).  Gen-0 networks are trained once per (seed, alpha, pretext)
and shared by every Gen-1 cell that distills from them.  All cells are scored
on the same episodes (same evaluation seed).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from skd.config import RunConfig
from skd.data import Dataset
from skd.fewshot import EvalReport, evaluate
from skd.model import ModelParams
from skd.train import train_gen0, train_gen1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    name: str
    alpha: float
    beta: float | None = None  # None: stop after Gen-0
    pretext: str = "rotation"

    @property
    def generation(self) -> int:
        return 0 if self.beta is None else 1


@dataclass
class CellResult:
    cell: Cell
    seed: int
    report: EvalReport

    def to_dict(self) -> dict:
        return {"cell": self.cell.name, "generation": self.cell.generation, "seed": self.seed,
                "alpha": self.cell.alpha, "beta": self.cell.beta, "pretext": self.cell.pretext,
                "mean": self.report.mean, "ci95": self.report.ci95}


def table3_cells(alpha: float, beta: float) -> list[Cell]:
    """Two Gen-0 losses, each followed by the two Gen-1 losses."""
    return [
        Cell("gen0 ce", 0.0),
        Cell("gen0 ce+ss", alpha),
        Cell("gen1 ce -> kd", 0.0, 0.0),
        Cell("gen1 ce -> kd+l2", 0.0, beta),
        Cell("gen1 ce+ss -> kd", alpha, 0.0),
        Cell("gen1 ce+ss -> kd+l2", alpha, beta),
    ]


def alpha_cells(alphas) -> list[Cell]:
    return [Cell(f"gen0 alpha={a:g}", float(a)) for a in alphas]


def beta_cells(alpha: float, betas) -> list[Cell]:
    return [Cell(f"gen1 beta={b:g}", alpha, float(b)) for b in betas]


def run_grid(train: Dataset, test: Dataset, run: RunConfig, cells: list[Cell], seeds,
             backbone=None, on_result: Callable[[CellResult], None] | None = None) -> list[CellResult]:
    """Train and evaluate every cell for every seed."""
    c, h, _ = train.image_shape
    backbone = backbone or run.backbone(train.num_classes, c, h)
    results: list[CellResult] = []
    for seed in seeds:
        sgd = run.sgd(seed=int(seed))
        parents: dict[tuple[float, str], ModelParams] = {}

        def parent(alpha: float, pretext: str) -> ModelParams:
            key = (alpha, pretext)
            if key not in parents:
                log.info("seed %s: gen0 alpha=%g pretext=%s", seed, alpha, pretext)
                parents[key] = train_gen0(train, sgd, run.loss(alpha=alpha), backbone,
                                          augment=run.augment(), pretext=pretext)
            return parents[key]

        for cell in cells:
            model = parent(cell.alpha, cell.pretext)
            if cell.beta is not None:
                log.info("seed %s: gen1 from alpha=%g beta=%g", seed, cell.alpha, cell.beta)
                model = train_gen1(model, train, run.gen1_sgd(int(seed)), run.loss(alpha=cell.alpha, beta=cell.beta),
                                   run.twin_rotation, augment=run.augment())
            report = evaluate(model, test, run.n_way, run.k_shot, run.q_size, run.num_tasks, run.eval_seed,
                              run.l2_reg, run.max_iters,
                              config={"run": run.to_dict(), "cell": asdict(cell), "train_seed": int(seed)})
            result = CellResult(cell, int(seed), report)
            results.append(result)
            if on_result is not None:
                on_result(result)
    return results


def summarize(results: list[CellResult]) -> list[dict]:
    """One row per cell, in first-seen order, with per-seed accuracies and their mean."""
    rows: dict[str, dict] = {}
    for r in results:
        row = rows.setdefault(r.cell.name, {"cell": r.cell.name, "generation": r.cell.generation,
                                            "alpha": r.cell.alpha, "beta": r.cell.beta,
                                            "pretext": r.cell.pretext, "per_seed": {}})
        row["per_seed"][str(r.seed)] = r.report.mean
    for row in rows.values():
        row["mean"] = float(np.mean(list(row["per_seed"].values())))
    return list(rows.values())


def format_summary(rows: list[dict]) -> str:
    seeds = list(rows[0]["per_seed"]) if rows else []
    width = max([len(r["cell"]) for r in rows] + [4])
    head = f"{'cell':<{width}}  " + "  ".join(f"s{s:>6}" for s in seeds) + "     mean"
    lines = [head, "-" * len(head)]
    for r in rows:
        accs = "  ".join(f"{100 * r['per_seed'][s]:7.2f}" for s in seeds)
        lines.append(f"{r['cell']:<{width}}  {accs}  {100 * r['mean']:7.2f}")
    return "\n".join(lines) + "\n"


def write_outputs(results: list[CellResult], out_dir, run: RunConfig) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        slug = r.cell.name.replace(" -> ", "_to_").replace("+", "_").replace(" ", "_").replace("=", "")
        (out / f"{slug}__seed{r.seed}.json").write_text(r.report.to_json() + "\n", encoding="utf-8")
    rows = summarize(results)
    (out / "summary.txt").write_text(format_summary(rows), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps({"config": run.to_dict(), "rows": rows}, indent=2) + "\n",
                                      encoding="utf-8")
    return rows
