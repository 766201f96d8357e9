"""Lossless image transformations and the Gen-0 pretext batches.

All functions take and return numpy arrays in CHW / NCHW layout (a
:class:`~skd.tensor.Tensor` is accepted and unwrapped).  Nothing here
interpolates: every output pixel is a copy of an input pixel or padding zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from skd.errors import ContractError
from skd.tensor import Tensor

NUM_ROTATIONS = 4
NUM_QUADRANTS = 4


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class AugmentedBatch:
    """Pretext batch ``(x_hat, y_hat, r_hat)`` made of four blocks of ``m`` rows.

    Block ``i`` holds transformation ``i`` of every source image, so
    ``r_hat == repeat([0, 1, 2, 3], m)`` and ``y_hat == tile(y, 4)``.
    """

    x_hat: np.ndarray
    y_hat: np.ndarray
    r_hat: np.ndarray

    def __len__(self) -> int:
        return len(self.y_hat)


def rot90(image, k: int) -> np.ndarray:
    """Rotate a CHW image counter-clockwise by ``k * 90`` degrees.

    One quarter turn sends pixel (row, col) to (W - 1 - col, row).
    """
    img = _array(image)
    if img.ndim != 3:
        raise ContractError(f"rot90 expects a CHW image, got shape {img.shape}")
    return np.ascontiguousarray(np.rot90(img, k=k % NUM_ROTATIONS, axes=(1, 2)))


def _label_blocks(y, m: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (m,):
        raise ContractError(f"expected {m} labels, got shape {y.shape}")
    return np.tile(y, NUM_ROTATIONS), np.repeat(np.arange(NUM_ROTATIONS, dtype=np.int64), m)


def make_rotation_batch(x, y) -> AugmentedBatch:
    """Stack ``{x, x90, x180, x270}`` with repeated class labels and rotation labels."""
    x = _array(x)
    if x.ndim != 4:
        raise ContractError(f"expected [m,C,H,W] images, got {x.shape}")
    m, _, h, w = x.shape
    if h != w:
        raise ContractError(f"rotation batch needs square images, got {h}x{w}")
    blocks = [np.rot90(x, k=k, axes=(2, 3)) for k in range(NUM_ROTATIONS)]
    y_hat, r_hat = _label_blocks(y, m)
    return AugmentedBatch(np.ascontiguousarray(np.concatenate(blocks)), y_hat, r_hat)


def crop_quadrant(image, quadrant: int) -> np.ndarray:
    """Quadrant of a CHW image: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    img = _array(image)
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"quadrant crop needs even spatial dims, got {h}x{w}")
    if quadrant not in range(NUM_QUADRANTS):
        raise ContractError(f"quadrant must be in 0..3, got {quadrant}")
    r, c = divmod(quadrant, 2)
    h2, w2 = h // 2, w // 2
    return np.ascontiguousarray(img[..., r * h2:(r + 1) * h2, c * w2:(c + 1) * w2])


def make_crop_batch(x, y) -> AugmentedBatch:
    """Location pretext: the four quadrant crops of every image, labelled by quadrant."""
    x = _array(x)
    if x.ndim != 4:
        raise ContractError(f"expected [m,C,H,W] images, got {x.shape}")
    blocks = [crop_quadrant(x, q) for q in range(NUM_QUADRANTS)]
    y_hat, r_hat = _label_blocks(y, x.shape[0])
    return AugmentedBatch(np.concatenate(blocks), y_hat, r_hat)


def hflip(image) -> np.ndarray:
    return np.ascontiguousarray(_array(image)[..., ::-1])


def random_augment(image, rng: np.random.Generator, flip_prob: float = 0.5, crop_pad: int = 0) -> np.ndarray:
    """Random horizontal flip, then zero-pad by ``crop_pad`` and take a random HxW window.

    Exactly two draws are taken from ``rng`` per call so streams stay aligned
    regardless of the settings.
    """
    img = _array(image)
    if not 0.0 <= flip_prob <= 1.0:
        raise ContractError(f"flip_prob must lie in [0, 1], got {flip_prob}")
    if crop_pad < 0:
        raise ContractError(f"crop_pad must be nonnegative, got {crop_pad}")
    flip = rng.random() < flip_prob
    offsets = rng.integers(0, 2 * crop_pad + 1, size=2)
    if flip:
        img = img[..., ::-1]
    if crop_pad:
        h, w = img.shape[-2:]
        pad = [(0, 0)] * (img.ndim - 2) + [(crop_pad, crop_pad)] * 2
        img = np.pad(img, pad)
        dy, dx = offsets
        img = img[..., dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(img)


def augment_batch(x: np.ndarray, rng: np.random.Generator, flip_prob: float, crop_pad: int) -> np.ndarray:
    if flip_prob == 0.0 and crop_pad == 0:
        return x
    return np.stack([random_augment(img, rng, flip_prob, crop_pad) for img in x])
