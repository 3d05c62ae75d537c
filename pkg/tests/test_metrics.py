import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftcache.denoiser import ToyDenoiser, ToyDenoiserConfig
from shiftcache.metrics import (
    BenchRecord,
    flicker_index,
    ssim,
    throughput_model,
    video_ssim,
)
from shiftcache.scheduler import EngineConfig, RunStats, run_inference

TINY_TOY = ToyDenoiserConfig(shallow_width=4, deep_width=8, shallow_blocks=2,
                             deep_blocks=2, seed=0)


def image(seed=0, h=16, w=16):
    return np.random.default_rng(seed).standard_normal((h, w))


class TestSsim:
    def test_identical_images_score_exactly_one(self):
        x = image(0)
        assert ssim(x, x) == 1.0

    def test_identical_constant_images_score_one(self):
        x = np.full((16, 16), 3.5)
        assert ssim(x, x) == 1.0

    def test_symmetry(self):
        a, b = image(1), image(2)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_anticorrelated_checkerboard_is_negative(self):
        y, x = np.mgrid[0:16, 0:16]
        board = ((x + y) % 2).astype(np.float64)
        assert ssim(board, 1.0 - board) < 0

    def test_channel_averaging_accepted(self):
        a = np.random.default_rng(3).standard_normal((3, 16, 16))
        assert ssim(a, a) == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            ssim(image(0), image(0, h=17))

    def test_window_larger_than_image_rejected(self):
        small = np.zeros((8, 8))
        with pytest.raises(ValueError, match="window"):
            ssim(small, small)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=60, deadline=None)
    def test_bounded_above_by_one(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((12, 14))
        b = a + 0.3 * rng.standard_normal((12, 14))
        assert ssim(a, b) <= 1.0

    def test_matches_reference_implementation(self):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(9)
        for _ in range(5):
            a = rng.standard_normal((24, 20))
            b = a + 0.5 * rng.standard_normal((24, 20))
            data_range = max(a.max(), b.max()) - min(a.min(), b.min())
            expected = skimage_metrics.structural_similarity(
                a, b, win_size=11, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=data_range)
            assert ssim(a, b) == pytest.approx(expected, abs=1e-7)

    def test_video_ssim_means_over_frames(self):
        v = np.random.default_rng(4).standard_normal((3, 2, 16, 16))
        assert video_ssim(v, v) == 1.0


class TestFlickerIndex:
    def test_constant_video_is_zero(self):
        assert flicker_index(np.ones((4, 2, 3, 3))) == 0.0

    def test_alternating_unit_frames(self):
        video = np.zeros((4, 1, 2, 2))
        video[1::2] = 1.0
        assert flicker_index(video) == 1.0

    def test_linear_ramp_squared_step(self):
        d = 0.37
        video = np.arange(5)[:, None, None, None] * d * np.ones((5, 2, 3, 3))
        assert flicker_index(video) == pytest.approx(d * d, rel=1e-12)

    def test_invariant_to_constant_shift(self):
        v = np.random.default_rng(5).standard_normal((4, 2, 4, 4))
        assert flicker_index(v + 100.0) == pytest.approx(flicker_index(v), rel=1e-9)

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            flicker_index(np.zeros((1, 1, 2, 2)))


class TestThroughputModel:
    def test_baseline_against_itself_is_exactly_one(self):
        cfg = EngineConfig(n_total=24, chunk_len=8, policy="overlap", overlap_s=0,
                           ddim_steps=3, toy=TINY_TOY, latent_h=8, latent_w=8)
        _, stats = run_inference(cfg)
        assert throughput_model(stats, ToyDenoiser(TINY_TOY)) == 1.0

    def test_overlap_ratio_matches_count_formula(self):
        # large-N closed form: ratio -> (L - S) / L
        d = ToyDenoiser(TINY_TOY)
        for s, expected_counts in ((2, 8), (4, 11), (7, 41)):
            cfg = EngineConfig(n_total=48, chunk_len=8, policy="overlap",
                               overlap_s=s, ddim_steps=2, toy=TINY_TOY,
                               latent_h=8, latent_w=8)
            _, stats = run_inference(cfg)
            assert stats.full_chunk_evals == 2 * expected_counts
            assert throughput_model(stats, d) == pytest.approx(6 / expected_counts)

    def test_half_partial_cost_algebra(self):
        # stats where exactly half the chunk evals were partial predict a
        # ratio of 2 / (2 - deep_share); a deep share of 0.75 gives 1.6
        d = ToyDenoiser(TINY_TOY)
        deep, shallow, partial = d.chunk_cost(8, 8, 8, 4)
        stats = RunStats(n_total=24, chunk_len=8, steps=10, latent_h=8, latent_w=8,
                         garment_count=4, full_chunk_evals=15, partial_chunk_evals=15,
                         deep_flops=15 * deep, shallow_flops=15 * shallow + 15 * partial)
        share = deep / (deep + shallow)
        assert throughput_model(stats, d) == pytest.approx(2.0 / (2.0 - share))
        assert 2.0 / (2.0 - 0.75) == pytest.approx(1.6)

    def test_zero_cost_run_rejected(self):
        stats = RunStats(n_total=8, chunk_len=8, steps=1, latent_h=8, latent_w=8,
                         garment_count=0)
        with pytest.raises(ValueError):
            throughput_model(stats, ToyDenoiser(TINY_TOY))


class TestBenchRecord:
    def test_validation(self):
        good = dict(config="x", policy="overlap", s=0, delta=0, partial_frac=0.0,
                    mask="half", full_chunks=1, partial_chunks=0, deep_flops=1,
                    shallow_flops=1, wall_ms=1.0, frames=8, fps_proxy=1.0,
                    flicker=0.0, ssim_vs_reference=None)
        BenchRecord(**good)
        with pytest.raises(ValueError):
            BenchRecord(**{**good, "fps_proxy": 0.0})
        with pytest.raises(ValueError):
            BenchRecord(**{**good, "flicker": -1.0})
        with pytest.raises(ValueError):
            BenchRecord(**{**good, "ssim_vs_reference": 1.5})
