"""Feature map, pyramid, and channel-statistics contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkdistill.features import (
    ChannelSample,
    FeatureMap,
    FeaturePyramid,
    channel_sample,
    normalize,
    pyramid_summary,
)


class TestFeatureMap:
    def test_from_flat_roundtrip(self):
        values = np.arange(2 * 3 * 4 * 5, dtype=float)
        fmap = FeatureMap.from_flat(2, 3, 4, 5, values)
        assert (fmap.b, fmap.c, fmap.h, fmap.w) == (2, 3, 4, 5)
        np.testing.assert_array_equal(fmap.values, values)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="expected 8 values"):
            FeatureMap.from_flat(1, 2, 2, 2, np.zeros(7))

    def test_non_finite_rejected_with_index(self):
        values = np.zeros(8)
        values[5] = np.nan
        with pytest.raises(ValueError, match="flat index 5"):
            FeatureMap.from_flat(1, 2, 2, 2, values)

    def test_backing_array_is_readonly(self):
        fmap = FeatureMap(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            fmap.data[0, 0, 0, 0] = 1.0

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            FeatureMap(np.zeros((1, 0, 2, 2)))


class TestFeaturePyramid:
    def test_default_level_names(self):
        pyr = FeaturePyramid((FeatureMap(np.zeros((1, 2, 4, 4))), FeatureMap(np.zeros((1, 2, 2, 2)))))
        assert pyr.level_names == ("P3", "P4")

    def test_batch_mismatch_rejected(self):
        with pytest.raises(ValueError, match="batch size"):
            FeaturePyramid(
                (FeatureMap(np.zeros((1, 2, 4, 4))), FeatureMap(np.zeros((2, 2, 2, 2))))
            )

    def test_growing_levels_rejected(self):
        with pytest.raises(ValueError, match="non-increasing"):
            FeaturePyramid(
                (FeatureMap(np.zeros((1, 2, 2, 2))), FeatureMap(np.zeros((1, 2, 4, 4))))
            )

    def test_empty_pyramid_rejected(self):
        with pytest.raises(ValueError, match="at least one level"):
            FeaturePyramid(())


class TestChannelSample:
    def test_hand_computed_stats(self):
        # sum of squared deviations of [1,2,3,4] is 5, so sample std is sqrt(5/3)
        fmap = FeatureMap.from_flat(1, 1, 2, 2, [1.0, 2.0, 3.0, 4.0])
        s = channel_sample(fmap, 0)
        assert s.m == 4
        assert s.mean == pytest.approx(2.5)
        assert s.std == pytest.approx(np.sqrt(5.0 / 3.0))

    def test_constant_channel_zero_std(self):
        s = channel_sample(FeatureMap.from_flat(1, 1, 2, 2, [5.0] * 4), 0)
        assert s.mean == 5.0
        assert s.std == 0.0

    def test_two_point_sample_across_batch(self):
        fmap = FeatureMap.from_flat(2, 1, 1, 1, [-1.0, 1.0])
        s = channel_sample(fmap, 0)
        assert s.m == 2
        assert s.mean == 0.0
        assert s.std == pytest.approx(np.sqrt(2.0))

    def test_out_of_range_channel(self):
        fmap = FeatureMap(np.zeros((1, 2, 2, 2)))
        with pytest.raises(IndexError):
            channel_sample(fmap, 2)

    def test_single_value_sample_rejected(self):
        with pytest.raises(ValueError, match="m >= 2"):
            channel_sample(FeatureMap(np.zeros((1, 3, 1, 1))), 0)

    def test_extraction_is_lossless(self):
        rng = np.random.default_rng(42)
        fmap = FeatureMap(rng.normal(size=(2, 3, 4, 5)))
        rebuilt = np.stack(
            [channel_sample(fmap, c).values.reshape(2, 4, 5) for c in range(3)], axis=1
        )
        np.testing.assert_array_equal(rebuilt, fmap.data)


class TestNormalize:
    def test_zero_mean_unit_variance(self):
        out = normalize(ChannelSample([1.0, 2.0, 3.0, 4.0]), 1e-8)
        assert abs(out.mean) <= 1e-6
        assert abs(out.std**2 - 1.0) <= 1e-6

    def test_constant_maps_to_zeros(self):
        out = normalize(ChannelSample([5.0, 5.0, 5.0, 5.0]), 1e-8)
        np.testing.assert_array_equal(out.values, np.zeros(4))

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        once = normalize(ChannelSample(rng.normal(3.0, 2.0, 64)))
        twice = normalize(once)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-6)

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ValueError, match="epsilon"):
            normalize(ChannelSample([1.0, 2.0]), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(
        scale=st.floats(min_value=0.1, max_value=1e3),
        shift=st.floats(min_value=-1e3, max_value=1e3),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_affine_invariance(self, scale, shift, seed):
        # scale floor keeps the scaled std well above the 1e-8 regularizer,
        # mirroring the std >= 1e-3 guard on idempotence
        values = np.random.default_rng(seed).normal(0.0, 1.0, 32)
        base = normalize(ChannelSample(values))
        moved = normalize(ChannelSample(scale * values + shift))
        np.testing.assert_allclose(moved.values, base.values, atol=1e-6)


class TestPyramidSummary:
    def test_zeros_level(self):
        rows = pyramid_summary(FeaturePyramid((FeatureMap(np.zeros((1, 1, 2, 2))),)))
        assert rows[0]["mean"] == 0.0
        assert rows[0]["std"] == 0.0

    def test_sign_symmetric_level(self):
        fmap = FeatureMap.from_flat(1, 1, 1, 2, [-1.0, 1.0])
        rows = pyramid_summary(FeaturePyramid((fmap,)))
        assert rows[0]["abs_mean"] == 1.0
        assert rows[0]["mean"] == 0.0

    def test_matches_single_pass_reference(self):
        rng = np.random.default_rng(7)
        data = rng.normal(2.0, 3.0, (2, 3, 4, 4))
        rows = pyramid_summary(FeaturePyramid((FeatureMap(data),)))
        # independent single-pass accumulation over the flat values
        total = sq_total = abs_total = 0.0
        lo, hi = np.inf, -np.inf
        flat = data.reshape(-1)
        for v in flat:
            total += v
            sq_total += v * v
            abs_total += abs(v)
            lo, hi = min(lo, v), max(hi, v)
        n = flat.size
        mean = total / n
        np.testing.assert_allclose(rows[0]["mean"], mean, atol=1e-12)
        np.testing.assert_allclose(rows[0]["std"], np.sqrt(sq_total / n - mean**2), atol=1e-9)
        np.testing.assert_allclose(rows[0]["abs_mean"], abs_total / n, atol=1e-12)
        assert rows[0]["min"] == lo
        assert rows[0]["max"] == hi
