import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skd.augment import (augment_batch, crop_quadrant, hflip, make_crop_batch, make_rotation_batch,
                         random_augment, rot90)
from skd.errors import ContractError
from skd.tensor import Tensor

square_images = st.integers(1, 6).flatmap(
    lambda s: arrays(np.float32, (2, s, s), elements=st.floats(0, 1, width=32)))


def rot90_by_mapping(img):
    """One counter-clockwise quarter turn via (row, col) -> (W-1-col, row)."""
    c, h, w = img.shape
    out = np.empty((c, w, h), dtype=img.dtype)
    for r in range(h):
        for col in range(w):
            out[:, w - 1 - col, r] = img[:, r, col]
    return out


def test_rot90_zero_is_identity(rng):
    img = rng.random((3, 4, 4))
    np.testing.assert_array_equal(rot90(img, 0), img)


def test_rot90_coordinate_mapping():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    np.testing.assert_array_equal(rot90(np.array([[[a, b], [c, d]]]), 1), [[[b, d], [a, c]]])


def test_rot90_matches_pixel_mapping_on_rectangles(rng):
    img = rng.random((2, 3, 5))
    np.testing.assert_array_equal(rot90(img, 1), rot90_by_mapping(img))
    np.testing.assert_array_equal(rot90(img, 3), rot90_by_mapping(rot90_by_mapping(rot90_by_mapping(img))))


def test_rot90_accepts_tensor(rng):
    img = rng.random((1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(rot90(Tensor(img), 2), rot90(img, 2))


@given(square_images, st.integers(0, 3), st.integers(0, 3))
def test_rot90_composition_law(img, k1, k2):
    np.testing.assert_array_equal(rot90(rot90(img, k1), k2), rot90(img, (k1 + k2) % 4))


@given(square_images)
def test_rot90_has_order_four(img):
    out = img
    for _ in range(4):
        out = rot90(out, 1)
    np.testing.assert_array_equal(out, img)


def test_rotation_batch_m1_labels(rng):
    batch = make_rotation_batch(rng.random((1, 1, 4, 4)), [7])
    np.testing.assert_array_equal(batch.r_hat, [0, 1, 2, 3])
    np.testing.assert_array_equal(batch.y_hat, [7, 7, 7, 7])


def test_rotation_batch_m2_labels(rng):
    batch = make_rotation_batch(rng.random((2, 1, 4, 4)), [3, 5])
    np.testing.assert_array_equal(batch.r_hat, [0, 0, 1, 1, 2, 2, 3, 3])
    np.testing.assert_array_equal(batch.y_hat, [3, 5, 3, 5, 3, 5, 3, 5])


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_rotation_batch_blocks(m, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((m, 2, 4, 4))
    y = rng.integers(0, 10, size=m)
    batch = make_rotation_batch(x, y)
    assert len(batch) == 4 * m and batch.x_hat.shape == (4 * m, 2, 4, 4)
    for block in range(4):
        for j in range(m):
            row = block * m + j
            np.testing.assert_array_equal(batch.x_hat[row], rot90(x[j], block))
            # a rotation only permutes pixels
            np.testing.assert_array_equal(np.sort(batch.x_hat[row], axis=None), np.sort(x[j], axis=None))
            assert batch.r_hat[row] == block and batch.y_hat[row] == y[j]


def test_rotation_batch_rejects_non_square():
    with pytest.raises(ContractError):
        make_rotation_batch(np.zeros((1, 1, 4, 6)), [0])


def test_crop_quadrant_top_left():
    img = np.arange(16, dtype=float).reshape(1, 4, 4)
    np.testing.assert_array_equal(crop_quadrant(img, 0), img[:, 0:2, 0:2])
    np.testing.assert_array_equal(crop_quadrant(img, 1), img[:, 0:2, 2:4])
    np.testing.assert_array_equal(crop_quadrant(img, 2), img[:, 2:4, 0:2])
    np.testing.assert_array_equal(crop_quadrant(img, 3), img[:, 2:4, 2:4])


@given(st.integers(1, 4).flatmap(lambda s: arrays(np.float64, (2, 2 * s, 2 * s),
                                                    elements=st.floats(-5, 5, allow_nan=False))))
def test_quadrants_reassemble_bit_exactly(img):
    q = [crop_quadrant(img, i) for i in range(4)]
    rebuilt = np.concatenate([np.concatenate(q[:2], axis=2), np.concatenate(q[2:], axis=2)], axis=1)
    assert rebuilt.tobytes() == img.tobytes()
    # the four crops tile the image: total pixel count matches and multiset is preserved
    assert sum(c.size for c in q) == img.size
    np.testing.assert_array_equal(np.sort(np.concatenate([c.ravel() for c in q])), np.sort(img.ravel()))


def test_crop_quadrant_rejects_odd():
    with pytest.raises(ContractError):
        crop_quadrant(np.zeros((1, 3, 4)), 0)


def test_crop_batch_layout(rng):
    x = rng.random((3, 1, 8, 8))
    batch = make_crop_batch(x, [0, 1, 2])
    assert batch.x_hat.shape == (12, 1, 4, 4)
    np.testing.assert_array_equal(batch.r_hat, np.repeat(np.arange(4), 3))
    np.testing.assert_array_equal(batch.x_hat[3 * 1 + 1], crop_quadrant(x[1], 1))


def test_random_augment_identity_settings(rng):
    img = rng.random((2, 6, 6))
    np.testing.assert_array_equal(random_augment(img, np.random.default_rng(0), 0.0, 0), img)


def test_flip_is_an_involution(rng):
    img = rng.random((2, 5, 5))
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    always = random_augment(random_augment(img, np.random.default_rng(1), 1.0, 0), np.random.default_rng(2), 1.0, 0)
    np.testing.assert_array_equal(always, img)


def test_random_augment_is_deterministic_per_seed(rng):
    img = rng.random((1, 8, 8))
    a = random_augment(img, np.random.default_rng(42), 0.5, 2)
    b = random_augment(img, np.random.default_rng(42), 0.5, 2)
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_random_augment_never_interpolates(seed, pad):
    img = np.random.default_rng(seed).integers(1, 255, size=(1, 6, 6)).astype(np.float32)
    out = random_augment(img, np.random.default_rng(seed), 0.5, pad)
    assert out.shape == img.shape
    assert set(np.unique(out)) <= set(np.unique(img)) | {0.0}


def test_augment_batch_shape(rng):
    x = rng.random((4, 1, 8, 8)).astype(np.float32)
    out = augment_batch(x, np.random.default_rng(0), 0.5, 2)
    assert out.shape == x.shape and out.dtype == x.dtype
