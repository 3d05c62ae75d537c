import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftcache.cache import (
    CacheMiss,
    FeatureCache,
    FreshnessFlags,
    StaleCacheError,
    build_mask,
)
from shiftcache.numerics import MASK_BLOCK, MaskVariant, softmax_attention

SLICE = (3, 2, 2)


def _feats(value):
    return np.full(SLICE, value, dtype=np.float32)


class TestFeatureCache:
    def test_store_then_fetch_next_step_is_good(self):
        cache = FeatureCache()
        cache.store(0, _feats(1.0), step_index=3)
        feats, computed, flags = cache.fetch([0], current_step_position=4)
        assert computed.tolist() == [3]
        assert flags.good.tolist() == [True]
        np.testing.assert_array_equal(feats[0], _feats(1.0))

    def test_last_writer_wins(self):
        cache = FeatureCache()
        cache.store(5, _feats(1.0), step_index=1)
        cache.store(5, _feats(2.0), step_index=2)
        feats, _, _ = cache.fetch([5], current_step_position=3)
        np.testing.assert_array_equal(feats[0], _feats(2.0))

    def test_staleness_two_flagged_bad(self):
        cache = FeatureCache()
        cache.store(1, _feats(0.5), step_index=2)
        _, _, flags = cache.fetch([1], current_step_position=4)
        assert flags.good.tolist() == [False]

    def test_mixed_halves_delta_half_chunk(self):
        # First half last fully computed two steps ago, second half one step
        # ago: flags come out [bad x 4, good x 4].
        cache = FeatureCache()
        for f in range(4):
            cache.store(f, _feats(f), step_index=5)
        for f in range(4, 8):
            cache.store(f, _feats(f), step_index=6)
        _, _, flags = cache.fetch(range(8), current_step_position=7)
        assert flags.good.tolist() == [False] * 4 + [True] * 4

    def test_cache_miss(self):
        cache = FeatureCache()
        with pytest.raises(CacheMiss):
            cache.fetch([0], current_step_position=1)

    def test_staleness_over_cap_rejected(self):
        cache = FeatureCache(staleness_cap=2)
        cache.store(0, _feats(1.0), step_index=0)
        with pytest.raises(StaleCacheError):
            cache.fetch([0], current_step_position=3)

    def test_slice_shape_enforced(self):
        cache = FeatureCache()
        cache.store(0, _feats(1.0), step_index=0)
        with pytest.raises(ValueError, match="slice shape"):
            cache.store(1, np.zeros((3, 2, 3), dtype=np.float32), step_index=0)

    def test_computed_at_monotonic_per_frame(self):
        cache = FeatureCache()
        cache.store(0, _feats(1.0), step_index=4)
        with pytest.raises(ValueError, match="backwards"):
            cache.store(0, _feats(1.0), step_index=3)

    def test_store_block_matches_per_frame_store(self):
        block = np.random.default_rng(0).standard_normal((4,) + SLICE).astype(np.float32)
        a, b = FeatureCache(), FeatureCache()
        a.store_block(10, block, step_index=2)
        for i in range(4):
            b.store(10 + i, block[i], step_index=2)
        fa, ca, _ = a.fetch(range(10, 14), 3)
        fb, cb, _ = b.fetch(range(10, 14), 3)
        np.testing.assert_array_equal(fa, fb)
        np.testing.assert_array_equal(ca, cb)

    def test_store_block_copies(self):
        block = np.ones((2,) + SLICE, dtype=np.float32)
        cache = FeatureCache()
        cache.store_block(0, block, step_index=0)
        block[:] = 7.0
        feats, _, _ = cache.fetch([0, 1], 1)
        np.testing.assert_array_equal(feats, np.ones((2,) + SLICE, dtype=np.float32))


def flags_of(pattern: str) -> FreshnessFlags:
    return FreshnessFlags(good=np.array([c == "g" for c in pattern]))


class TestBuildMask:
    def test_half_reference_pattern(self):
        mask = build_mask(MaskVariant.HALF, flags_of("bbgg"))
        expected_row = np.array([MASK_BLOCK, MASK_BLOCK, 0.0, 0.0], dtype=np.float32)
        for row in mask.matrix:
            np.testing.assert_array_equal(row, expected_row)

    def test_quarter_reference_pattern(self):
        mask = build_mask(MaskVariant.QUARTER, flags_of("bbgg"))
        np.testing.assert_array_equal(mask.matrix[0], np.zeros(4, dtype=np.float32))
        np.testing.assert_array_equal(mask.matrix[1], np.zeros(4, dtype=np.float32))
        blocked_row = np.array([MASK_BLOCK, MASK_BLOCK, 0.0, 0.0], dtype=np.float32)
        np.testing.assert_array_equal(mask.matrix[2], blocked_row)
        np.testing.assert_array_equal(mask.matrix[3], blocked_row)

    def test_full_is_all_zero(self):
        mask = build_mask(MaskVariant.FULL, flags_of("bgbg"))
        np.testing.assert_array_equal(mask.matrix, np.zeros((4, 4), dtype=np.float32))

    def test_causal_upper_triangular_including_diagonal(self):
        mask = build_mask(MaskVariant.CAUSAL, flags_of("bbgg"))
        blocked = mask.blocked()
        for q in range(4):
            for k in range(4):
                assert blocked[q, k] == (k < q)

    def test_half_all_bad_degrades_to_full(self):
        mask = build_mask(MaskVariant.HALF, flags_of("bbbb"))
        assert mask.variant is MaskVariant.FULL
        np.testing.assert_array_equal(mask.matrix, np.zeros((4, 4), dtype=np.float32))

    def test_empty_flags_rejected(self):
        with pytest.raises(ValueError):
            FreshnessFlags(good=np.array([], dtype=bool))

    @given(pattern=st.lists(st.booleans(), min_size=1, max_size=12))
    @settings(max_examples=150, deadline=None)
    def test_structure_properties(self, pattern):
        flags = FreshnessFlags(good=np.array(pattern))
        length = len(pattern)
        good = np.array(pattern)
        for variant in MaskVariant:
            mask = build_mask(variant, flags)
            blocked = mask.blocked()
            # no fully blocked query rows after fallback
            assert not np.any(blocked.all(axis=1))
            if variant is MaskVariant.HALF and good.any():
                # column k fully blocked iff flags[k] is bad
                np.testing.assert_array_equal(blocked.all(axis=0), ~good)
                # the good-query submatrix of quarter equals half's
                quarter = build_mask(MaskVariant.QUARTER, flags)
                np.testing.assert_array_equal(
                    quarter.blocked()[good], blocked[good])
            if variant is MaskVariant.QUARTER:
                assert not blocked[~good].any()  # bad queries unrestricted
            if variant is MaskVariant.CAUSAL:
                k_idx = np.arange(length)
                np.testing.assert_array_equal(blocked, k_idx[None, :] < k_idx[:, None])

    def test_half_blocks_bad_value_perturbations_exactly(self):
        # behavioral information-flow check: bad keys carry exactly zero
        # weight, so perturbing a bad frame's value input changes nothing
        rng = np.random.default_rng(11)
        flags = flags_of("bgbggb")
        mask = build_mask(MaskVariant.HALF, flags)
        L = 6
        q = rng.standard_normal((3, L, 8)).astype(np.float32)
        k = rng.standard_normal((3, L, 8)).astype(np.float32)
        v = rng.standard_normal((3, L, 8)).astype(np.float32)
        base = softmax_attention(q, k, v, mask)
        v2 = v.copy()
        v2[:, ~flags.good, :] += 100.0
        np.testing.assert_array_equal(softmax_attention(q, k, v2, mask), base)

    def test_full_mask_equals_unmasked_attention(self):
        rng = np.random.default_rng(12)
        mask = build_mask(MaskVariant.FULL, flags_of("gbgb"))
        q = rng.standard_normal((2, 4, 6)).astype(np.float32)
        k = rng.standard_normal((2, 4, 6)).astype(np.float32)
        v = rng.standard_normal((2, 4, 6)).astype(np.float32)
        np.testing.assert_allclose(
            softmax_attention(q, k, v, mask), softmax_attention(q, k, v), atol=1e-6)
