"""Three-stage network: backbone (phi) -> class logits (theta) -> rotation logits (psi).

The rotation head reads the class logits, not the embedding, so any signal it
needs must pass through the classifier layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from skd.errors import ConfigError, DimensionError
from skd.tensor import Tensor, affine, as_tensor, conv2d, pool, relu

NUM_BLOCKS = 4
KERNEL = 3


@dataclass(frozen=True)
class BackboneConfig:
    block_filters: tuple[int, ...] = (8, 16, 32, 64)
    input_channels: int = 1
    input_size: int = 16
    num_classes: int = 20
    rotation_classes: int = 4
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(int(f) for f in self.block_filters))
        if not self.block_filters or any(f < 1 for f in self.block_filters):
            raise ConfigError(f"block_filters must be positive, got {self.block_filters}")
        if self.input_std <= 0:
            raise ConfigError("input_std must be positive")
        if self.input_channels < 1 or self.num_classes < 1:
            raise ConfigError("input_channels and num_classes must be positive")
        if self.rotation_classes != 4:
            raise ConfigError("rotation head is fixed at 4 outputs")
        if self.input_size < 1 or self.input_size % self.size_multiple:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of {self.size_multiple}")

    @property
    def size_multiple(self) -> int:
        # one 2x2 pool after every block but the last
        return 2 ** (len(self.block_filters) - 1)

    @property
    def embed_dim(self) -> int:
        return self.block_filters[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_filters"] = list(self.block_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{**d, "block_filters": tuple(d["block_filters"])})


@dataclass
class ModelParams:
    """Parameters grouped as phi (backbone), theta (classifier) and psi (rotation head)."""

    config: BackboneConfig
    phi: dict[str, Tensor] = field(default_factory=dict)
    theta: dict[str, Tensor] = field(default_factory=dict)
    psi: dict[str, Tensor] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group in ("phi", "theta", "psi"):
            for key, t in getattr(self, group).items():
                out[f"{group}.{key}"] = t
        return out

    def group(self, *names: str) -> dict[str, Tensor]:
        return {k: t for k, t in self.named().items() if k.split(".", 1)[0] in names}

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.named().items())

    def clone(self, requires_grad: bool = True) -> "ModelParams":
        def cp(d):
            return {k: t.copy(requires_grad=requires_grad) for k, t in d.items()}
        return ModelParams(self.config, cp(self.phi), cp(self.theta), cp(self.psi))

    def astype(self, dtype) -> "ModelParams":
        def cv(d):
            return {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in d.items()}
        return ModelParams(self.config, cv(self.phi), cv(self.theta), cv(self.psi))

    @classmethod
    def from_named(cls, config: BackboneConfig, tensors: dict[str, Tensor]) -> "ModelParams":
        params = cls(config)
        for name, t in tensors.items():
            group, _, key = name.partition(".")
            if group not in ("phi", "theta", "psi") or not key:
                raise ConfigError(f"parameter name {name!r} is not in the phi/theta/psi namespace")
            getattr(params, group)[key] = t
        params.validate()
        return params

    def validate(self) -> None:
        cfg = self.config
        expected = expected_shapes(cfg)
        got = {k: t.shape for k, t in self.named().items()}
        if got != expected:
            raise DimensionError(f"parameter shapes {got} do not match config {expected}")
        for name, t in self.named().items():
            if not np.all(np.isfinite(t.data)):
                raise DimensionError(f"parameter {name} has non-finite entries")


def expected_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = cfg.input_channels
    for i, f in enumerate(cfg.block_filters, start=1):
        shapes[f"phi.block{i}.weight"] = (f, c_in, KERNEL, KERNEL)
        shapes[f"phi.block{i}.bias"] = (f,)
        c_in = f
    shapes["theta.weight"] = (cfg.embed_dim, cfg.num_classes)
    shapes["theta.bias"] = (cfg.num_classes,)
    shapes["psi.weight"] = (cfg.num_classes, cfg.rotation_classes)
    shapes["psi.bias"] = (cfg.rotation_classes,)
    return shapes


def init_params(config: BackboneConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams.from_named(config, tensors)


def forward_embed(params: ModelParams, x) -> Tensor:
    """conv3x3 -> relu (-> max2x2 for all but the last block) -> global average pool.

    Any square input whose side is a multiple of ``2**(blocks-1)`` is accepted;
    the global pool makes the embedding size-independent.
    """
    x = as_tensor(x, dtype=params.phi["block1.weight"].dtype)
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise DimensionError(f"expected [N,{cfg.input_channels},H,W] input, got {x.shape}")
    h, w = x.shape[2:]
    if h != w or h % cfg.size_multiple:
        raise DimensionError(f"spatial size {h}x{w} must be square and a multiple of {cfg.size_multiple}")
    if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
        x = (x - cfg.input_mean) * (1.0 / cfg.input_std)
    n_blocks = len(cfg.block_filters)
    for i in range(1, n_blocks + 1):
        x = relu(conv2d(x, params.phi[f"block{i}.weight"], params.phi[f"block{i}.bias"], stride=1, padding=1))
        x = pool(x, "max2x2" if i < n_blocks else "global_avg")
    return x


def forward_logits(params: ModelParams, v: Tensor) -> Tensor:
    w = params.theta["weight"]
    if v.ndim != 2 or v.shape[1] != w.shape[0]:
        raise DimensionError(f"embedding width {v.shape} does not match classifier input {w.shape[0]}")
    return affine(v, w, params.theta["bias"])


def forward_rotation(params: ModelParams, p: Tensor) -> Tensor:
    w = params.psi["weight"]
    if p.ndim != 2 or p.shape[1] != w.shape[0]:
        raise DimensionError(f"logit width {p.shape} does not match rotation head input {w.shape[0]}")
    return affine(p, w, params.psi["bias"])


def forward(params: ModelParams, x) -> tuple[Tensor, Tensor, Tensor]:
    """Full pass returning (embedding, class logits, rotation logits)."""
    v = forward_embed(params, x)
    p = forward_logits(params, v)
    return v, p, forward_rotation(params, p)


def embed_numpy(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Tape-free embedding of a whole image array, in batches."""
    chunks = [forward_embed(params, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks)
