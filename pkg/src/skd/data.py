"""Datasets: the FSDS container, class-disjoint splits and a synthetic grating generator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from skd.errors import ConfigError, ContractError, DataError, FormatError

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1
FSDS_HEADER = struct.Struct("<4sIIIHHHB")  # 23 bytes
PIXEL_U8 = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images in [0, 1] with dense integer labels.

    ``class_ids`` maps each dense label back to the id it had in the parent
    dataset (identity for freshly generated or loaded data).
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None
    class_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise DataError(f"images {images.shape} and labels {labels.shape} do not pair up")
        if len(labels) == 0:
            raise DataError("dataset is empty")
        n_cls = int(labels.max()) + 1
        if labels.min() < 0 or len(np.unique(labels)) != n_cls:
            raise DataError("labels must be dense in [0, num_classes)")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if not self.class_ids:
            object.__setattr__(self, "class_ids", tuple(range(n_cls)))
        elif len(self.class_ids) != n_cls:
            raise DataError("class_ids must name every dense label")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.labels)

    def indices_by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def same_as(self, other: "Dataset") -> bool:
        return (self.images.dtype == other.images.dtype
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------------------
# FSDS container


def _quantize(images: np.ndarray) -> np.ndarray:
    if images.min() < 0 or images.max() > 1:
        raise DataError("pixel values must lie in [0, 1]")
    return np.rint(images * 255.0).astype(np.uint8)


def encode_fsds(dataset: Dataset) -> bytes:
    """Samples are written grouped by class in ascending id (stable within a class)."""
    c, h, w = dataset.image_shape
    order = np.argsort(dataset.labels, kind="stable")
    pixels = _quantize(dataset.images[order]).reshape(len(order), -1)
    labels = dataset.labels[order].astype("<u4")
    header = FSDS_HEADER.pack(FSDS_MAGIC, FSDS_VERSION, dataset.num_classes, len(order), c, h, w, PIXEL_U8)
    records = np.empty((len(order), 4 + pixels.shape[1]), dtype=np.uint8)
    records[:, :4] = labels.view(np.uint8).reshape(-1, 4)
    records[:, 4:] = pixels
    return header + records.tobytes()


def decode_fsds(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != FSDS_MAGIC:
        raise FormatError("bad magic, expected b'FSDS'", 0)
    if len(buf) < FSDS_HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, n_cls, total, c, h, w, dtype = FSDS_HEADER.unpack_from(buf)
    if version != FSDS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != PIXEL_U8:
        raise FormatError(f"unsupported pixel dtype code {dtype}", FSDS_HEADER.size - 1)
    if min(c, h, w) == 0 or total == 0 or n_cls == 0:
        raise FormatError("zero-sized dimension in header", 8)
    rec = 4 + c * h * w
    expected = FSDS_HEADER.size + total * rec
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    records = np.frombuffer(buf, dtype=np.uint8, offset=FSDS_HEADER.size).reshape(total, rec)
    labels = records[:, :4].copy().view("<u4").ravel().astype(np.int64)
    bad = np.flatnonzero(labels >= n_cls)
    if bad.size:
        raise FormatError(f"class id {labels[bad[0]]} out of range [0, {n_cls})", FSDS_HEADER.size + int(bad[0]) * rec)
    back = np.flatnonzero(np.diff(labels) < 0)
    if back.size:
        raise FormatError("samples are not grouped by ascending class id", FSDS_HEADER.size + int(back[0] + 1) * rec)
    if len(np.unique(labels)) != n_cls:
        raise FormatError(f"header declares {n_cls} classes but not all are present", 8)
    images = (records[:, 4:].astype(np.float32) / np.float32(255.0)).reshape(total, c, h, w)
    return Dataset(images, labels)


def save_fsds(dataset: Dataset, path) -> None:
    Path(path).write_bytes(encode_fsds(dataset))


def load_fsds(path) -> Dataset:
    return decode_fsds(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def __post_init__(self):
        sets = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        if any(not s for s in sets):
            raise ContractError("every split needs at least one class")
        if any(len(s) != len(t) for s, t in zip(sets, (self.train_classes, self.val_classes, self.test_classes))):
            raise ContractError("duplicate class id within a split")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ContractError("split class sets overlap")

    @classmethod
    def contiguous(cls, n_train: int, n_val: int, n_test: int) -> "SplitSpec":
        ids = list(range(n_train + n_val + n_test))
        return cls(tuple(ids[:n_train]), tuple(ids[n_train:n_train + n_val]), tuple(ids[n_train + n_val:]))

    def to_json(self) -> str:
        return json.dumps({"train": list(self.train_classes), "val": list(self.val_classes),
                           "test": list(self.test_classes)})

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        try:
            d = json.loads(text)
            return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed split file: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def subset_classes(dataset: Dataset, class_ids) -> Dataset:
    """Samples of the given classes, relabelled densely by ascending id."""
    ids = sorted(int(c) for c in class_ids)
    if any(c < 0 or c >= dataset.num_classes for c in ids):
        raise ContractError(f"class ids {ids} not all present in dataset")
    remap = np.full(dataset.num_classes, -1, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    mask = remap[dataset.labels] >= 0
    names = tuple(dataset.class_names[c] for c in ids) if dataset.class_names else None
    return Dataset(dataset.images[mask], remap[dataset.labels[mask]], names,
                   tuple(dataset.class_ids[c] for c in ids))


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    return (subset_classes(dataset, spec.train_classes),
            subset_classes(dataset, spec.val_classes),
            subset_classes(dataset, spec.test_classes))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 32
    samples_per_class: int = 50
    image_size: int = 16
    noise_std: float = 0.1
    seed: int = 0
    channels: int = 1
    gratings: int = 3
    min_freq: float = 1.0   # cycles per image
    max_freq: float = 4.0
    max_shift: int | None = None  # default image_size // 8
    orientation_spread: float = np.pi  # gratings lie within +-spread/2 of vertical stripes (pi: any)
    illumination: float = 0.8  # strength of a shared top-bright luminance ramp

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.num_classes < 1 or self.samples_per_class < 1 or self.channels < 1:
            raise ConfigError("class count, samples per class and channels must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")


def class_template(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Sum of randomly oriented planar sinusoid gratings, rescaled into [0, 1]."""
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    out = np.empty((cfg.channels, s, s))
    for ch in range(cfg.channels):
        acc = np.zeros((s, s))
        amp_total = 0.0
        for _ in range(cfg.gratings):
            theta = rng.uniform(-0.5, 0.5) * cfg.orientation_spread
            freq = rng.uniform(cfg.min_freq, cfg.max_freq)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            acc += amp * np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            amp_total += amp
        out[ch] = 0.5 + 0.5 * acc / amp_total
    if cfg.illumination:
        ramp = cfg.illumination * (0.5 - (np.arange(s) + 0.5) / s)
        out = (out + ramp[None, :, None]) / (1.0 + cfg.illumination)
        out += 0.5 * cfg.illumination / (1.0 + cfg.illumination)
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Each class is a grating template; samples add a circular shift and Gaussian noise.

    Class ``c`` draws from its own child seed, so a class's samples do not
    depend on how many other classes are generated.  Pixels are quantized to
    multiples of 1/255 so the dataset survives FSDS storage unchanged.
    """
    max_shift = cfg.image_size // 8 if cfg.max_shift is None else cfg.max_shift
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_classes)
    images = np.empty((cfg.num_classes * cfg.samples_per_class, cfg.channels, cfg.image_size, cfg.image_size),
                      dtype=np.float32)
    for c, child in enumerate(children):
        rng = np.random.default_rng(child)
        template = class_template(cfg, rng)
        for i in range(cfg.samples_per_class):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(template, (dy, dx), axis=(1, 2))
            if cfg.noise_std:
                img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
            levels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32)
            images[c * cfg.samples_per_class + i] = levels / np.float32(255.0)
    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
    return Dataset(images, labels, tuple(f"class_{c:03d}" for c in range(cfg.num_classes)))
