import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dqsal.core import (
    InvariantError,
    RgbdSample,
    ShapeMismatchError,
    as_binary_mask,
    as_scalar_map,
    hadamard,
    pos,
    resize_map,
)

maps_8x8 = arrays(
    np.float64, (8, 8), elements=st.floats(0.0, 1.0, allow_nan=False)
)


class TestPos:
    def test_clamps_negatives(self):
        np.testing.assert_array_equal(
            pos(np.array([-0.3, 0.0, 0.7])), np.array([0.0, 0.0, 0.7])
        )

    def test_zero_fixed_point(self):
        z = np.zeros((3, 3))
        np.testing.assert_array_equal(pos(z), z)

    def test_identity_on_nonnegative(self):
        x = np.array([[0.1, 0.9], [0.0, 0.5]])
        np.testing.assert_array_equal(pos(x), x)

    def test_rejects_non_finite(self):
        with pytest.raises(InvariantError, match="non-finite"):
            pos(np.array([1.0, np.nan]))
        with pytest.raises(InvariantError, match="non-finite"):
            pos(np.array([np.inf]))

    @given(arrays(np.float64, (5, 5), elements=st.floats(-10, 10, allow_nan=False)))
    def test_idempotent(self, x):
        np.testing.assert_array_equal(pos(pos(x)), pos(x))


class TestHadamard:
    def test_ones_identity(self):
        a = np.array([[0.2, 0.8], [0.0, 1.0]])
        np.testing.assert_array_equal(hadamard(a, np.ones_like(a)), a)

    def test_zeros_annihilate(self):
        a = np.array([[0.2, 0.8], [0.0, 1.0]])
        np.testing.assert_array_equal(hadamard(a, np.zeros_like(a)), np.zeros_like(a))

    def test_hand_value(self):
        got = hadamard(np.array([[0.5, 1.0]]), np.array([[0.4, 0.5]]))
        np.testing.assert_allclose(got, np.array([[0.2, 0.5]]))

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeMismatchError) as err:
            hadamard(np.zeros((2, 3)), np.zeros((3, 2)))
        assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)

    @given(maps_8x8, maps_8x8)
    def test_commutative(self, a, b):
        np.testing.assert_array_equal(hadamard(a, b), hadamard(b, a))


def _bilinear_oracle(src, h, w):
    """Brute-force corner-aligned bilinear sample, one target pixel at a time."""
    sh, sw = src.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            y = 0.0 if (h == 1 or sh == 1) else i * (sh - 1) / (h - 1)
            x = 0.0 if (w == 1 or sw == 1) else j * (sw - 1) / (w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, sh - 1), min(x0 + 1, sw - 1)
            fy, fx = y - y0, x - x0
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


class TestResizeMap:
    def test_same_shape_identity(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(size=(4, 4))
        np.testing.assert_array_equal(resize_map(m, 4, 4), m)

    def test_constant_fixed_point(self):
        m = np.full((3, 5), 0.7)
        for h, w in ((1, 1), (7, 2), (10, 10)):
            np.testing.assert_allclose(resize_map(m, h, w), np.full((h, w), 0.7))

    def test_upsample_monotone_and_matches_oracle(self):
        m = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = resize_map(m, 2, 4)
        assert np.all(np.diff(out, axis=1) >= 0)
        np.testing.assert_allclose(out, _bilinear_oracle(m, 2, 4), atol=1e-12)

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(3)
        m = rng.uniform(size=(5, 7))
        for h, w in ((9, 13), (3, 4), (1, 6)):
            np.testing.assert_allclose(resize_map(m, h, w), _bilinear_oracle(m, h, w),
                                       atol=1e-12)

    @given(maps_8x8, st.integers(1, 12), st.integers(1, 12))
    @settings(max_examples=40)
    def test_preserves_range(self, m, h, w):
        out = resize_map(m, h, w)
        assert out.shape == (h, w)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_round_trip_tolerance_for_smooth_maps(self):
        ys, xs = np.mgrid[0:12, 0:12] / 11.0
        m = 0.5 + 0.4 * np.sin(2 * np.pi * xs) * np.cos(np.pi * ys)
        back = resize_map(resize_map(m, 24, 24), 12, 12)
        assert np.abs(back - m).max() <= 0.05

    def test_rejects_bad_target(self):
        with pytest.raises(InvariantError):
            resize_map(np.zeros((2, 2)), 0, 4)


class TestValidators:
    def test_scalar_map_range(self):
        with pytest.raises(InvariantError, match=r"\[0, 1\]"):
            as_scalar_map(np.array([[1.5]]))
        with pytest.raises(InvariantError):
            as_scalar_map(np.array([1.0, 0.0]))  # 1-D

    def test_binary_mask(self):
        as_binary_mask(np.array([[0.0, 1.0]]))
        with pytest.raises(InvariantError, match="0 and 1"):
            as_binary_mask(np.array([[0.5]]))


class TestRgbdSample:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            RgbdSample(id="x", rgb=np.zeros((4, 4, 3)), depth=np.zeros((5, 5)))

    def test_gt_must_be_binary(self):
        with pytest.raises(InvariantError):
            RgbdSample(id="x", rgb=np.zeros((4, 4, 3)), depth=np.zeros((4, 4)),
                       gt=np.full((4, 4), 0.5))

    def test_resized_keeps_mask_binary(self):
        gt = np.zeros((8, 8))
        gt[2:6, 2:6] = 1.0
        s = RgbdSample(id="x", rgb=np.zeros((8, 8, 3)), depth=np.zeros((8, 8)), gt=gt)
        r = s.resized(5, 5)
        assert set(np.unique(r.gt)) <= {0.0, 1.0}
        assert r.shape == (5, 5)
