import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftcache.denoiser import ToyDenoiserConfig
from shiftcache.numerics import MaskVariant
from shiftcache.scheduler import (
    Chunk,
    ChunkMode,
    EngineConfig,
    aggregate_overlaps,
    mark_partial,
    plan_overlap,
    plan_shift,
    run_inference,
    synthesize_conditions,
)

TINY_TOY = ToyDenoiserConfig(shallow_width=4, deep_width=8, shallow_blocks=2,
                             deep_blocks=2, seed=0)


def starts(chunks):
    return [c.start for c in chunks]


def covers_exactly(chunks, n_total):
    hits = np.zeros(n_total, dtype=int)
    for c in chunks:
        hits[c.start:c.stop] += 1
    return hits


class TestPlanOverlap:
    def test_spec_example_32_16_8(self):
        assert starts(plan_overlap(32, 16, 8)) == [0, 8, 16]

    def test_no_overlap_disjoint_cover(self):
        chunks = plan_overlap(40, 8, 0)
        assert starts(chunks) == [0, 8, 16, 24, 32]
        assert np.all(covers_exactly(chunks, 40) == 1)

    def test_counts_for_table_sweep(self):
        for s, expected in ((0, 9), (4, 12), (8, 17), (15, 129)):
            assert len(plan_overlap(144, 16, s)) == expected

    def test_last_chunk_clamped_to_end(self):
        chunks = plan_overlap(150, 16, 8)
        assert chunks[-1].stop == 150
        assert all(c.length == 16 for c in chunks)

    def test_every_frame_covered(self):
        for n, l, s in ((17, 16, 4), (100, 7, 3), (16, 16, 0)):
            assert np.all(covers_exactly(plan_overlap(n, l, s), n) >= 1)

    def test_overlap_must_be_smaller_than_chunk(self):
        with pytest.raises(ValueError):
            plan_overlap(32, 16, 16)
        with pytest.raises(ValueError):
            plan_overlap(8, 16, 0)


class TestPlanShift:
    def test_spec_example_12_4_2(self):
        k0 = plan_shift(12, 4, 2, step_index=0)
        assert [(c.start, c.stop) for c in k0] == [(0, 4), (4, 8), (8, 12)]
        k1 = plan_shift(12, 4, 2, step_index=1)
        assert [(c.start, c.stop) for c in k1] == [(0, 2), (2, 6), (6, 10), (10, 12)]

    def test_delta_zero_matches_overlap_s0(self):
        for k in range(5):
            shift = plan_shift(48, 8, 0, step_index=k)
            overlap = plan_overlap(48, 8, 0)
            assert [(c.start, c.stop) for c in shift] == \
                [(c.start, c.stop) for c in overlap]

    def test_disjoint_exact_cover(self):
        for k in range(8):
            chunks = plan_shift(45, 8, 3, step_index=k)
            assert np.all(covers_exactly(chunks, 45) == 1)

    def test_boundary_phase_count_is_l_over_gcd(self):
        # modular-arithmetic oracle over a long horizon of steps
        for l, delta in ((16, 4), (16, 6), (12, 8), (8, 3), (10, 0)):
            offsets = {(k * delta) % l for k in range(4 * l)}
            expected = l // math.gcd(l, delta) if delta else 1
            assert len(offsets) == expected
            seen = set()
            for k in range(4 * l):
                chunks = plan_shift(8 * l, l, delta, step_index=k)
                seen.add(tuple(c.start for c in chunks))
            assert len(seen) == expected

    def test_fixed_shift_boundary_membership(self):
        # interior boundary sits between frames j-1 and j exactly when
        # j is congruent to k * delta (mod L)
        n, l, delta = 40, 8, 3
        for k in range(3 * l):
            offset = (k * delta) % l
            boundaries = {c.start for c in plan_shift(n, l, delta, k)} - {0}
            expected = {j for j in range(1, n) if j % l == offset}
            assert boundaries == expected

    def test_random_mode_seeded_and_in_range(self):
        a = [plan_shift(32, 8, 0, k, mode="random", seed=5) for k in range(6)]
        b = [plan_shift(32, 8, 0, k, mode="random", seed=5) for k in range(6)]
        for pa, pb in zip(a, b):
            assert [(c.start, c.stop) for c in pa] == [(c.start, c.stop) for c in pb]
        offsets = {p[0].stop for p in a if p[0].length < 8}
        assert all(0 < o < 8 for o in offsets)

    def test_delta_bounds(self):
        with pytest.raises(ValueError):
            plan_shift(32, 8, 8, 0)
        with pytest.raises(ValueError):
            plan_shift(4, 8, 0, 0)

    @given(n=st.integers(4, 200), l=st.integers(1, 32), delta=st.integers(0, 31),
           k=st.integers(0, 60))
    @settings(max_examples=200, deadline=None)
    def test_property_disjoint_cover(self, n, l, delta, k):
        l = min(l, n)
        delta = min(delta, l - 1)
        chunks = plan_shift(n, l, delta, k)
        assert np.all(covers_exactly(chunks, n) == 1)
        assert all(c.length <= l for c in chunks)


class TestAggregateOverlaps:
    def test_mean_of_two(self):
        chunks = [Chunk(0, 2), Chunk(0, 2)]
        eps = [np.zeros((2, 1, 1, 1), dtype=np.float32),
               np.ones((2, 1, 1, 1), dtype=np.float32)]
        out = aggregate_overlaps(eps, chunks, 2)
        np.testing.assert_array_equal(out, np.full((2, 1, 1, 1), 0.5, dtype=np.float32))

    def test_single_cover_is_identity_bitwise(self):
        chunks = [Chunk(0, 3)]
        eps = [np.random.default_rng(0).standard_normal((3, 4, 2, 2)).astype(np.float32)]
        np.testing.assert_array_equal(aggregate_overlaps(eps, chunks, 3), eps[0])

    def test_three_covers_order_independent(self):
        rng = np.random.default_rng(1)
        vals = [rng.standard_normal((2, 1, 1, 1)).astype(np.float32) for _ in range(3)]
        chunks = [Chunk(0, 2)] * 3
        base = aggregate_overlaps(vals, chunks, 2)
        for perm in ((1, 0, 2), (2, 1, 0), (1, 2, 0)):
            out = aggregate_overlaps([vals[i] for i in perm],
                                     [chunks[i] for i in perm], 2)
            np.testing.assert_allclose(out, base, atol=1e-6)
        np.testing.assert_allclose(base, (vals[0] + vals[1] + vals[2]) / 3, atol=1e-6)

    def test_uncovered_frame_rejected(self):
        with pytest.raises(ValueError, match="not covered"):
            aggregate_overlaps([np.zeros((2, 1, 1, 1))], [Chunk(0, 2)], 3)


def all_full_plans(n, l, delta, steps, mode="fixed", seed=0):
    return [plan_shift(n, l, delta, k, mode=mode, seed=seed) for k in range(steps)]


class TestMarkPartial:
    def test_p_zero_all_full(self):
        plans, stats = mark_partial(all_full_plans(48, 8, 2, 10), 0.0, 2, 0, 8)
        assert all(c.mode is ChunkMode.FULL for step in plans for c in step)
        assert stats.bernoulli_partials == 0

    def test_first_and_last_steps_full(self):
        plans, _ = mark_partial(all_full_plans(48, 8, 2, 12), 1.0, 2, 0, 8)
        assert all(c.mode is ChunkMode.FULL for c in plans[0])
        assert all(c.mode is ChunkMode.FULL for c in plans[-1])

    def test_short_chunks_always_full(self):
        plans, _ = mark_partial(all_full_plans(48, 8, 3, 12), 1.0, 2, 0, 8)
        for step in plans:
            for c in step:
                if c.length < 8:
                    assert c.mode is ChunkMode.FULL

    def test_p_one_staleness_pattern(self):
        # static chunks, p=1: per frame the pattern is F, P, P, F, P, P, ...
        steps = 14
        plans, _ = mark_partial(all_full_plans(32, 8, 0, steps), 1.0, 2, 0, 8)
        modes = [[c.mode for c in step] for step in plans]
        last_full = np.zeros(4, dtype=int)
        for k, step in enumerate(modes):
            for idx, mode in enumerate(step):
                if mode is ChunkMode.PARTIAL:
                    staleness = k - last_full[idx]
                    assert 1 <= staleness <= 2
                else:
                    last_full[idx] = k
        # interior steps alternate in period-3 cycles: exactly the forced ones
        interior = modes[1:-1]
        partial_count = sum(m is ChunkMode.PARTIAL for step in interior for m in step)
        assert partial_count == pytest.approx(len(interior) * 4 * 2 / 3, abs=6)

    def test_realized_fraction_near_p(self):
        # 25 steps x 9 static chunks -> 207 interior chunk slots; the marked
        # fraction over actual coin decisions tracks p within ten points
        plans, stats = mark_partial(all_full_plans(144, 16, 0, 25), 0.5, 2, 3, 16)
        interior_slots = 23 * 9
        partials = sum(c.mode is ChunkMode.PARTIAL for step in plans for c in step)
        assert stats.eligible_decisions + stats.forced_full == interior_slots
        assert interior_slots >= 200
        assert partials == stats.bernoulli_partials
        assert abs(stats.bernoulli_partials / stats.eligible_decisions - 0.5) <= 0.10

    def test_seeded_reproducibility(self):
        a, _ = mark_partial(all_full_plans(64, 8, 4, 20), 0.7, 2, 9, 8)
        b, _ = mark_partial(all_full_plans(64, 8, 4, 20), 0.7, 2, 9, 8)
        assert [[c.mode for c in s] for s in a] == [[c.mode for c in s] for s in b]

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            mark_partial(all_full_plans(16, 8, 0, 3), 1.5, 2, 0, 8)


def small_config(**kw):
    base = dict(n_total=24, chunk_len=8, policy="shift", delta=2, shift_mode="fixed",
                partial_fraction=0.0, ddim_steps=4, seed=0, toy=TINY_TOY,
                latent_h=8, latent_w=8, denoiser="toy")
    base.update(kw)
    return EngineConfig(**base)


class TestRunInference:
    def test_shift_delta0_equals_overlap_s0_bitwise(self):
        shift_cfg = small_config(policy="shift", delta=0)
        overlap_cfg = small_config(policy="overlap", overlap_s=0)
        va, sa = run_inference(shift_cfg)
        vb, sb = run_inference(overlap_cfg)
        np.testing.assert_array_equal(va.z, vb.z)
        assert sa.full_chunk_evals == sb.full_chunk_evals
        assert sa.partial_chunk_evals == sb.partial_chunk_evals == 0
        assert sa.deep_flops == sb.deep_flops
        assert sa.shallow_flops == sb.shallow_flops

    @pytest.mark.parametrize("policy,kw", [
        ("overlap", dict(overlap_s=0)),
        ("overlap", dict(overlap_s=3)),
        ("shift", dict(delta=0)),
        ("shift", dict(delta=3)),
        ("shift", dict(delta=2, shift_mode="random")),
    ])
    def test_oracle_recovers_target_any_policy(self, policy, kw):
        cfg = small_config(policy=policy, denoiser="oracle", ddim_steps=25, **kw)
        conditions = synthesize_conditions(cfg)
        video, stats = run_inference(cfg, conditions)
        assert np.max(np.abs(video.z - conditions.target_x0)) <= 1e-4

    def test_oracle_float64_recovers_target_tightly(self):
        cfg = small_config(policy="shift", delta=3, denoiser="oracle", ddim_steps=25)
        conditions = synthesize_conditions(cfg, dtype=np.float64)
        video, _ = run_inference(cfg, conditions, dtype=np.float64)
        assert video.z.dtype == np.float64
        assert np.max(np.abs(video.z - conditions.target_x0)) <= 1e-9

    def test_eval_counts_match_plan_sizes(self):
        cfg = small_config(policy="overlap", overlap_s=0, ddim_steps=3)
        _, stats = run_inference(cfg)
        assert stats.full_chunk_evals == 3 * 3  # ceil(24/8) chunks x 3 steps

    def test_partial_run_respects_staleness_cap(self):
        cfg = small_config(partial_fraction=0.7, ddim_steps=8, delta=3,
                           mask_variant=MaskVariant.HALF)
        _, stats = run_inference(cfg)
        assert stats.partial_chunk_evals > 0
        assert stats.freshness_trace.max() <= cfg.staleness_cap
        assert stats.freshness_trace[0].max() == 0
        assert stats.freshness_trace[-1].max() == 0

    def test_reproducible_bitwise(self):
        cfg = small_config(partial_fraction=0.5, shift_mode="random", ddim_steps=6)
        va, sa = run_inference(cfg)
        vb, sb = run_inference(cfg)
        np.testing.assert_array_equal(va.z, vb.z)
        assert sa.deep_flops == sb.deep_flops
        assert sa.full_chunk_evals == sb.full_chunk_evals
        np.testing.assert_array_equal(sa.freshness_trace, sb.freshness_trace)

    def test_thread_count_does_not_change_results(self):
        cfg = small_config(partial_fraction=0.5, ddim_steps=5, delta=3)
        old = os.environ.get("SHIFTCACHE_THREADS")
        try:
            os.environ["SHIFTCACHE_THREADS"] = "1"
            va, sa = run_inference(cfg)
            os.environ["SHIFTCACHE_THREADS"] = "2"
            vb, sb = run_inference(cfg)
        finally:
            if old is None:
                os.environ.pop("SHIFTCACHE_THREADS", None)
            else:
                os.environ["SHIFTCACHE_THREADS"] = old
        np.testing.assert_array_equal(va.z, vb.z)
        assert (sa.full_chunk_evals, sa.partial_chunk_evals, sa.deep_flops,
                sa.shallow_flops) == \
               (sb.full_chunk_evals, sb.partial_chunk_evals, sb.deep_flops,
                sb.shallow_flops)

    def test_monotone_deep_cost_in_partial_fraction(self):
        # expectation over seeds: more partial marking, less deep compute
        lows, highs = [], []
        for seed in range(10):
            cfg_lo = small_config(partial_fraction=0.2, ddim_steps=6, seed=seed)
            cfg_hi = small_config(partial_fraction=0.8, ddim_steps=6, seed=seed)
            lows.append(run_inference(cfg_lo)[1].deep_flops)
            highs.append(run_inference(cfg_hi)[1].deep_flops)
        assert np.mean(highs) < np.mean(lows)

    def test_overlap_with_partial_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            small_config(policy="overlap", partial_fraction=0.5).validate()

    def test_oracle_with_partial_rejected(self):
        with pytest.raises(ValueError, match="oracle"):
            small_config(denoiser="oracle", partial_fraction=0.5).validate()

    def test_latent_video_freshness_tracks_last_full(self):
        cfg = small_config(partial_fraction=0.0, ddim_steps=4)
        video, _ = run_inference(cfg)
        np.testing.assert_array_equal(video.freshness, np.full(24, 3))


class TestHardSkipAblation:
    def test_skipped_chunks_are_not_evaluated(self):
        cfg = small_config(partial_fraction=1.0, hard_skip=True, ddim_steps=8, delta=3)
        video, stats = run_inference(cfg)
        assert stats.skipped_chunk_evals > 0
        assert stats.partial_chunk_evals == 0
        assert np.all(np.isfinite(video.z))
        full_only = small_config(partial_fraction=0.0, ddim_steps=8, delta=3)
        _, full_stats = run_inference(full_only)
        assert stats.deep_flops < full_stats.deep_flops
        assert not np.array_equal(video.z, run_inference(full_only)[0].z)

    def test_skipped_frames_miss_their_update(self):
        # two steps: step 1 skips a chunk; those frames keep their step-0 value
        cfg = small_config(n_total=16, chunk_len=8, delta=0, partial_fraction=1.0,
                           hard_skip=True, ddim_steps=3)
        video, stats = run_inference(cfg)
        cfg_full = small_config(n_total=16, chunk_len=8, delta=0,
                                partial_fraction=0.0, ddim_steps=3)
        video_full, _ = run_inference(cfg_full)
        assert stats.skipped_chunk_evals == 2  # both chunks at the interior step
        assert not np.allclose(video.z, video_full.z)

    def test_hard_skip_reproducible(self):
        cfg = small_config(partial_fraction=0.6, hard_skip=True, ddim_steps=6,
                           shift_mode="random")
        va, sa = run_inference(cfg)
        vb, sb = run_inference(cfg)
        np.testing.assert_array_equal(va.z, vb.z)
        assert sa.skipped_chunk_evals == sb.skipped_chunk_evals

    def test_hard_skip_requires_shift_policy(self):
        with pytest.raises(ValueError, match="hard_skip"):
            small_config(policy="overlap", overlap_s=0, hard_skip=True,
                         partial_fraction=0.0).validate()
