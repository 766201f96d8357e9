"""Episodic n-way k-shot evaluation with a logistic-regression head on unit-norm embeddings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from skd.data import Dataset
from skd.errors import ContractError, DataError, NumericError
from skd.model import ModelParams, embed_numpy
from skd.tensor import Tensor


@dataclass(frozen=True, eq=False)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_ids: tuple[int, ...]
    support_idx: np.ndarray = field(repr=False)
    query_idx: np.ndarray = field(repr=False)


@dataclass
class EvalReport:
    n_way: int
    k_shot: int
    num_tasks: int
    seed: int
    mean: float
    ci95: float
    per_task_accuracy: list[float]
    config: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, accs, n_way: int, k_shot: int, seed: int, config: dict | None = None) -> "EvalReport":
        accs = [float(a) for a in accs]
        mean, ci = mean_ci95(accs)
        return cls(n_way, k_shot, len(accs), seed, mean, ci, accs, dict(config or {}))

    def to_json(self) -> str:
        d = {"n_way": self.n_way, "k_shot": self.k_shot, "num_tasks": self.num_tasks, "seed": self.seed,
             "mean": self.mean, "ci95": self.ci95, "per_task_accuracy": self.per_task_accuracy}
        if self.config:
            d["config"] = self.config
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["n_way"], d["k_shot"], d["num_tasks"], d["seed"], d["mean"], d["ci95"],
                   d["per_task_accuracy"], d.get("config", {}))


def mean_ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation half-width 1.96 * s / sqrt(N) (sample std)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("no values to summarize")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    return mean, float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))


def task_rng(seed: int, task_index: int) -> np.random.Generator:
    """Independent stream per task, so serial and parallel runs agree."""
    return np.random.default_rng(np.random.SeedSequence([seed, task_index]))


def sample_episode_indices(labels: np.ndarray, n: int, k: int, q_size: int,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, tuple]:
    classes = np.unique(labels)
    if len(classes) < n:
        raise DataError(f"need {n} classes, test set has {len(classes)}")
    counts = {int(c): int(np.sum(labels == c)) for c in classes}
    eligible = np.array([c for c in classes if counts[int(c)] >= k + q_size])
    if len(eligible) < n:
        raise DataError(f"fewer than {n} classes have {k + q_size} samples")
    chosen = np.sort(rng.choice(eligible, size=n, replace=False))
    s_idx, s_y, q_idx, q_y = [], [], [], []
    for new_label, c in enumerate(chosen):
        pool = np.flatnonzero(labels == c)
        picks = rng.choice(pool, size=k + q_size, replace=False)
        s_idx.append(picks[:k])
        q_idx.append(picks[k:])
        s_y.append(np.full(k, new_label))
        q_y.append(np.full(q_size, new_label))
    return (np.concatenate(s_idx), np.concatenate(s_y), np.concatenate(q_idx), np.concatenate(q_y),
            tuple(int(c) for c in chosen))


def sample_episode(test_set: Dataset, n: int, k: int, q_size: int, rng: np.random.Generator) -> Episode:
    """Classes are relabelled 0..n-1 in ascending original-id order."""
    s_idx, s_y, q_idx, q_y, chosen = sample_episode_indices(test_set.labels, n, k, q_size, rng)
    return Episode(test_set.images[s_idx], s_y, test_set.images[q_idx], q_y,
                   tuple(test_set.class_ids[c] for c in chosen), s_idx, q_idx)


def normalize_embeddings(v) -> np.ndarray:
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericError("cannot normalize a zero or non-finite embedding row")
    return v / norms


def _lr_objective(wb: np.ndarray, xb: np.ndarray, onehot: np.ndarray, l2_reg: float) -> tuple[float, np.ndarray]:
    logits = xb @ wb
    logits = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    f = float(np.sum(lse - (logits * onehot).sum(axis=1)) + 0.5 * l2_reg * np.sum(wb[:-1] ** 2))
    probs = np.exp(logits - lse[:, None])
    grad = xb.T @ (probs - onehot)
    grad[:-1] += l2_reg * wb[:-1]
    return f, grad


def fit_logistic_regression(features, labels, n_classes: int, l2_reg: float = 1.0, max_iters: int = 1000,
                            tol: float = 1e-5, trace: list | None = None) -> np.ndarray:
    """Multinomial logistic regression with bias by backtracking gradient descent.

    Minimizes  sum_i CE(x_i) + l2_reg/2 * ||W||^2  (the bias row is not
    penalized) from a zero start.  Returns a ``[d + 1, n_classes]`` matrix
    whose last row is the bias.  ``trace`` receives the objective per iterate.
    """
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ContractError(f"features {x.shape} and labels {y.shape} disagree")
    if set(np.unique(y)) != set(range(n_classes)):
        raise ContractError(f"every one of the {n_classes} classes must be present")
    xb = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(n_classes)[y]
    wb = np.zeros((x.shape[1] + 1, n_classes))
    f, g = _lr_objective(wb, xb, onehot, l2_reg)
    step = 1.0
    if trace is not None:
        trace.append(f)
    for _ in range(max_iters):
        if np.max(np.abs(g)) < tol:
            break
        gg = float(np.sum(g * g))
        while True:
            cand = wb - step * g
            f_new, g_new = _lr_objective(cand, xb, onehot, l2_reg)
            if f_new <= f - 0.5 * step * gg or step < 1e-12:
                break
            step *= 0.5
        if f_new > f:
            break
        wb, f, g = cand, f_new, g_new
        step *= 2.0
        if trace is not None:
            trace.append(f)
    return wb


def predict(wb: np.ndarray, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    return np.argmax(x @ wb[:-1] + wb[-1], axis=1)


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels))


def evaluate_embeddings(embeddings: np.ndarray, labels: np.ndarray, n: int, k: int, q_size: int = 15,
                        num_tasks: int = 600, seed: int = 0, l2_reg: float = 1.0, max_iters: int = 1000,
                        trace: list | None = None) -> list[float]:
    """Per-task query accuracies given precomputed embeddings for every sample."""
    accs = []
    for t in range(num_tasks):
        s_idx, s_y, q_idx, q_y, _ = sample_episode_indices(labels, n, k, q_size, task_rng(seed, t))
        support = normalize_embeddings(embeddings[s_idx])
        query = normalize_embeddings(embeddings[q_idx])
        if trace is not None:
            trace.append("normalize")
        wb = fit_logistic_regression(support, s_y, n, l2_reg, max_iters)
        if trace is not None:
            trace.append("fit")
        accs.append(accuracy(predict(wb, query), q_y))
    return accs


def evaluate(params: ModelParams, test_set: Dataset, n: int = 5, k: int = 1, q_size: int = 15,
             num_tasks: int = 600, seed: int = 0, l2_reg: float = 1.0, max_iters: int = 1000,
             embed_fn: Callable[[np.ndarray], np.ndarray] | None = None,
             config: dict | None = None, trace: list | None = None) -> EvalReport:
    """Embed the test set once with the backbone, then score ``num_tasks`` episodes.

    The backbone has no batch-dependent layers, so embedding all samples up
    front gives the same features as embedding each episode separately.
    """
    embed = embed_fn or (lambda imgs: embed_numpy(params, imgs))
    embeddings = np.asarray(embed(test_set.images), dtype=np.float64)
    if trace is not None:
        trace.append("embed")
    accs = evaluate_embeddings(embeddings, test_set.labels, n, k, q_size, num_tasks, seed, l2_reg, max_iters, trace)
    return EvalReport.from_accuracies(accs, n, k, seed, config)
