"""SGD and the two training generations.

Gen-0 trains phi, theta and psi on the four-way pretext batch with
``ce + alpha * ss``.  Gen-1 clones the Gen-0 network into a frozen teacher and
a student, and trains only the student's phi and theta with
``kd(student, teacher) + beta * ||p(x) - p(twin(x))||``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from skd.augment import augment_batch, make_crop_batch, make_rotation_batch
from skd.checkpoint import save_checkpoint
from skd.data import Dataset
from skd.errors import ConfigError, ContractError, NumericError
from skd.losses import LossWeights, cross_entropy, gen0_terms, gen1_terms, l2_pair_loss, self_supervision_loss
from skd.model import BackboneConfig, ModelParams, forward, forward_embed, forward_logits, init_params
from skd.tensor import GradientTape, Tensor

log = logging.getLogger(__name__)

PRETEXTS = ("rotation", "crop")
TWIN_ROTATIONS = {90: 1, 180: 2, 270: 3}


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epoch: int = 20
    lr_drop_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    max_grad_norm: float = 1.0  # global-norm clip applied before the update; 0 disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 < self.lr_drop_factor <= 1:
            raise ConfigError("lr_drop_factor must lie in (0, 1]")
        if self.max_grad_norm < 0:
            raise ConfigError("max_grad_norm must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def paper_preset(cls, **overrides) -> "SgdConfig":
        """Full-scale schedule: 65 epochs, lr drop after epoch 60."""
        return cls(**{"epochs": 65, "lr_drop_epoch": 60, "batch_size": 64, **overrides})


@dataclass(frozen=True)
class AugmentConfig:
    # flips off by default: mirrored gratings are a different class's orientation
    flip_prob: float = 0.0
    crop_pad: int = 2


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    loss_history: list[tuple[int, float]] = field(default_factory=list)


def lr_at(cfg: SgdConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else cfg.lr


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], cfg: SgdConfig) -> TrainState:
    """Classical momentum with coupled weight decay, applied to the names in ``grads`` only.

    g' = g + wd * w;  v = momentum * v + g';  w = w - lr * v
    """
    named = state.params.named()
    lr = lr_at(cfg, state.epoch)
    for name, g in grads.items():
        if name not in named:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        w = named[name]
        if g.shape != w.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * w.data
        v = g if name not in state.velocity else cfg.momentum * state.velocity[name] + g
        state.velocity[name] = v
        # rebind rather than mutate so clones sharing nothing stay untouched
        w.data = (w.data - lr * v).astype(w.dtype, copy=False)
    state.step += 1
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        return grads
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}


def _minibatches(n: int, m: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, m):
        yield order[start:start + m]


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"loss became non-finite at step {step}")


class _Recorder:
    """Writes the JSON-lines log and per-epoch checkpoints."""

    def __init__(self, log_file: TextIO | None, checkpoint_dir, header: dict, stem: str,
                 on_step: Callable[[dict], None] | None):
        self.log_file = log_file
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.header = header
        self.stem = stem
        self.on_step = on_step
        if log_file is not None:
            log_file.write(json.dumps({"event": "config", **header}) + "\n")

    def step(self, record: dict) -> None:
        if self.log_file is not None:
            self.log_file.write(json.dumps(record) + "\n")
        if self.on_step is not None:
            self.on_step(record)

    def epoch_end(self, params: ModelParams, epoch: int) -> None:
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(params, self.checkpoint_dir / f"{self.stem}_epoch{epoch:03d}.skdc",
                            {**self.header, "epoch": epoch})


def gen0_pass(params: ModelParams, x: np.ndarray, y, alpha: float,
              pretext: str = "rotation") -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, ce, ss) of one Gen-0 minibatch; ss is None only for crop with alpha == 0.

    Rotation: both terms over the 4m rotated copies.  Crop: the class loss
    sees the full images and the quadrant loss sees the 4m half-size crops,
    both read through the same class head.
    """
    if pretext == "rotation":
        batch = make_rotation_batch(x, y)
        _, p_hat, q_hat = forward(params, batch.x_hat)
        total, ce, ss = gen0_terms(p_hat, batch.y_hat, q_hat, batch.r_hat, alpha)
        # alpha == 0: report ss anyway, detached from the objective
        return total, ce, ss if ss is not None else self_supervision_loss(q_hat.detach(), batch.r_hat)
    _, p, _ = forward(params, x)
    ce = cross_entropy(p, y)
    if alpha == 0:
        return ce, ce, None
    batch = make_crop_batch(x, y)
    _, _, q_hat = forward(params, batch.x_hat)
    ss = self_supervision_loss(q_hat, batch.r_hat)
    return ce + ss * alpha, ce, ss


def _crop_loss(params: ModelParams, x: np.ndarray, y) -> Tensor:
    # logged only; computed off-tape
    batch = make_crop_batch(x, y)
    _, _, q_hat = forward(params, batch.x_hat)
    return self_supervision_loss(q_hat.detach(), batch.r_hat)


def run_gen0(dataset: Dataset, cfg: SgdConfig, weights: LossWeights, config: BackboneConfig, *,
             augment: AugmentConfig = AugmentConfig(), pretext: str = "rotation",
             init: ModelParams | None = None, log_file: TextIO | None = None,
             checkpoint_dir=None, meta: dict | None = None,
             on_step: Callable[[dict], None] | None = None) -> TrainState:
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    if dataset.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, backbone expects {config.num_classes}")
    if pretext not in PRETEXTS:
        raise ConfigError(f"pretext must be one of {PRETEXTS}")
    c, h, w = dataset.image_shape
    if h != w or c != config.input_channels:
        raise ConfigError(f"images {dataset.image_shape} do not fit backbone config")

    params = init_params(config, cfg.seed) if init is None else init.clone()
    state = TrainState(params, rng=np.random.default_rng(cfg.seed))
    trainable = params.named()
    header = {"generation": 0, "pretext": pretext, "sgd": asdict(cfg), "loss": asdict(weights),
              "augment": asdict(augment), "backbone": config.to_dict(), **(meta or {})}
    rec = _Recorder(log_file, checkpoint_dir, header, "gen0", on_step)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        for idx in _minibatches(len(dataset), cfg.batch_size, state.rng):
            x = augment_batch(dataset.images[idx], state.rng, augment.flip_prob, augment.crop_pad)
            with GradientTape() as tape:
                loss, ce, ss = gen0_pass(params, x, dataset.labels[idx], weights.alpha, pretext)
            value = loss.item()
            _check_finite(value, state.step)
            grads = tape.backward(loss, wrt=trainable.values(), accumulate=False)
            lr = lr_at(cfg, epoch)
            grad_map = clip_grad_norm({name: grads[t] for name, t in trainable.items()}, cfg.max_grad_norm)
            sgd_step(state, grad_map, cfg)
            if ss is None:
                ss = _crop_loss(params, x, dataset.labels[idx])
            state.loss_history.append((state.step, value))
            rec.step({"step": state.step, "epoch": epoch, "lr": lr, "loss": value,
                      "loss_ce": ce.item(), "loss_ss": ss.item()})
        rec.epoch_end(params, epoch)
        log.debug("gen0 epoch %d loss %.4f", epoch, state.loss_history[-1][1] if state.loss_history else float("nan"))
    return state


def train_gen0(dataset: Dataset, cfg: SgdConfig, weights: LossWeights, config: BackboneConfig,
               **kwargs) -> ModelParams:
    return run_gen0(dataset, cfg, weights, config, **kwargs).params


def _rotate_batch(x: np.ndarray, k: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(x, k=k, axes=(2, 3)))


def run_gen1(teacher: ModelParams, dataset: Dataset, cfg: SgdConfig, weights: LossWeights,
             twin_rotation: int = 180, *, augment: AugmentConfig = AugmentConfig(),
             student: ModelParams | None = None, log_file: TextIO | None = None,
             checkpoint_dir=None, meta: dict | None = None,
             on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Self-distillation.  ``teacher`` is never modified; the student starts as its clone."""
    if twin_rotation not in TWIN_ROTATIONS:
        raise ConfigError(f"twin_rotation must be one of {sorted(TWIN_ROTATIONS)}")
    if student is not None and student.config != teacher.config:
        raise ContractError("student and teacher configs differ")
    if dataset.num_classes != teacher.config.num_classes:
        raise ContractError(f"dataset has {dataset.num_classes} classes, teacher has {teacher.config.num_classes}")
    if len(dataset) == 0:
        raise ConfigError("training set is empty")

    frozen = teacher.clone(requires_grad=False)
    student = (student or teacher).clone(requires_grad=True)
    trainable = student.group("phi", "theta")
    k = TWIN_ROTATIONS[twin_rotation]
    state = TrainState(student, rng=np.random.default_rng(cfg.seed))
    header = {"generation": 1, "twin_rotation": twin_rotation, "sgd": asdict(cfg), "loss": asdict(weights),
              "augment": asdict(augment), "backbone": teacher.config.to_dict(), **(meta or {})}
    rec = _Recorder(log_file, checkpoint_dir, header, "gen1", on_step)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        for idx in _minibatches(len(dataset), cfg.batch_size, state.rng):
            x = augment_batch(dataset.images[idx], state.rng, augment.flip_prob, augment.crop_pad)
            m = len(x)
            # frozen tensors never enter a tape
            p_t = forward_logits(frozen, forward_embed(frozen, x)).data
            with GradientTape() as tape:
                both = forward_logits(student, forward_embed(student, np.concatenate([x, _rotate_batch(x, k)])))
                p_s, p_bar = both[:m], both[m:]
                loss, kd, l2 = gen1_terms(p_s, p_t, p_bar, weights.beta, weights.temperature,
                                          weights.kd_direction, weights.kd_t2_scaling)
            value = loss.item()
            _check_finite(value, state.step)
            grads = tape.backward(loss, wrt=trainable.values(), accumulate=False)
            lr = lr_at(cfg, epoch)
            grad_map = clip_grad_norm({name: grads[t] for name, t in trainable.items()}, cfg.max_grad_norm)
            sgd_step(state, grad_map, cfg)
            if l2 is None:
                l2 = l2_pair_loss(p_s.detach(), p_bar.detach())
            state.loss_history.append((state.step, value))
            rec.step({"step": state.step, "epoch": epoch, "lr": lr, "loss": value,
                      "loss_kd": kd.item(), "loss_l2": l2.item()})
        rec.epoch_end(student, epoch)
    return state


def train_gen1(teacher: ModelParams, dataset: Dataset, cfg: SgdConfig, weights: LossWeights,
               twin_rotation: int = 180, **kwargs) -> ModelParams:
    return run_gen1(teacher, dataset, cfg, weights, twin_rotation, **kwargs).params


def gen0_objective(params: ModelParams, x: np.ndarray, y: np.ndarray, alpha: float,
                   pretext: str = "rotation") -> float:
    """Tape-free Gen-0 loss of ``params`` on a fixed (unaugmented) batch."""
    if pretext not in PRETEXTS:
        raise ConfigError(f"pretext must be one of {PRETEXTS}")
    x = np.asarray(x, dtype=params.theta["weight"].dtype)
    return gen0_pass(params, x, y, alpha, pretext)[0].item()
