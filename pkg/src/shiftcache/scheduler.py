"""Chunk planning and the timestep-loop inference engine.

Two scheduling policies over a video of ``n_total`` frames:

* overlap: sliding chunks sharing ``overlap_s`` frames; overlapping noise
  predictions are averaged per frame before the DDIM update (the
  temporal-aggregation baseline).
* shift: non-overlapping chunks whose boundary offset rotates every
  sampling step (fixed stride ``delta`` or a fresh uniform draw), with
  optional partial computation backed by the deep-feature cache.

All randomness (initial noise, random shifts, partial marking, synthetic
conditioning) derives from the single config seed via tagged substreams,
so identical configs reproduce bit-identical runs.
"""

from __future__ import annotations

import enum
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .cache import FeatureCache
from .denoiser import (
    DeepFeatures,
    DenoiserInput,
    FlopTally,
    GarmentCondition,
    OracleDenoiser,
    ToyDenoiser,
    ToyDenoiserConfig,
)
from .diffusion import LatentVideo, NoiseSchedule, ddim_step, make_schedule
from .numerics import MaskVariant

# Seed-stream tags: keep distinct so config fields never alias each other.
_STREAM_NOISE = 1
_STREAM_SHIFT = 2
_STREAM_MARK = 3
_STREAM_CONDITIONS = 4


class ChunkMode(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"


@dataclass(frozen=True)
class Chunk:
    start: int
    length: int
    mode: ChunkMode = ChunkMode.FULL

    def __post_init__(self):
        if self.start < 0 or self.length < 1:
            raise ValueError(f"bad chunk [{self.start}, +{self.length})")

    @property
    def stop(self) -> int:
        return self.start + self.length

    def frames(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class ChunkPlan:
    """Chunks for one sampling step."""

    step_index: int
    chunks: tuple[Chunk, ...]


def plan_overlap(n_total: int, chunk_len: int, overlap: int) -> list[Chunk]:
    """Sliding-window chunks of fixed length sharing ``overlap`` frames.

    Starts advance by ``chunk_len - overlap``; the final start is pulled back
    so the last chunk ends exactly at ``n_total``. Every chunk has full
    length, so the union covers [0, n_total).
    """
    if not 0 <= overlap < chunk_len:
        raise ValueError(f"need 0 <= overlap < chunk_len, got {overlap} vs {chunk_len}")
    if chunk_len > n_total:
        raise ValueError(f"chunk_len {chunk_len} exceeds video length {n_total}")
    stride = chunk_len - overlap
    starts = [0]
    while starts[-1] + chunk_len < n_total:
        starts.append(starts[-1] + stride)
    if starts[-1] + chunk_len > n_total:
        starts[-1] = n_total - chunk_len
    return [Chunk(start=s, length=chunk_len) for s in starts]


def plan_shift(n_total: int, chunk_len: int, delta: int, step_index: int,
               mode: str = "fixed", seed: int = 0) -> list[Chunk]:
    """Disjoint chunks exactly covering [0, n_total), rotated per step.

    The offset is (step_index * delta) mod chunk_len for fixed mode, or a
    per-step uniform draw from {0..chunk_len-1} for random mode. A nonzero
    offset produces short leading/trailing edge chunks.
    """
    if not 0 <= delta < chunk_len:
        raise ValueError(f"need 0 <= delta < chunk_len, got {delta} vs {chunk_len}")
    if chunk_len > n_total:
        raise ValueError(f"chunk_len {chunk_len} exceeds video length {n_total}")
    if mode == "fixed":
        offset = (step_index * delta) % chunk_len
    elif mode == "random":
        rng = np.random.default_rng([seed, _STREAM_SHIFT, step_index])
        offset = int(rng.integers(0, chunk_len))
    else:
        raise ValueError(f"unknown shift mode: {mode!r}")

    chunks = []
    if offset > 0:
        chunks.append(Chunk(start=0, length=min(offset, n_total)))
    start = offset
    while start + chunk_len <= n_total:
        chunks.append(Chunk(start=start, length=chunk_len))
        start += chunk_len
    if start < n_total:
        chunks.append(Chunk(start=start, length=n_total - start))
    return chunks


def aggregate_overlaps(per_chunk_eps: list[np.ndarray], chunks: list[Chunk],
                       n_total: int) -> np.ndarray:
    """Per-frame unweighted mean of every chunk prediction covering it."""
    if len(per_chunk_eps) != len(chunks):
        raise ValueError("one eps array per chunk required")
    first = per_chunk_eps[0]
    acc = np.zeros((n_total,) + first.shape[1:], dtype=first.dtype)
    count = np.zeros(n_total, dtype=np.int64)
    for eps, chunk in zip(per_chunk_eps, chunks):
        if eps.shape[0] != chunk.length:
            raise ValueError("eps length does not match its chunk")
        acc[chunk.start:chunk.stop] += eps
        count[chunk.start:chunk.stop] += 1
    if np.any(count == 0):
        raise ValueError(f"frame {int(np.argmin(count))} not covered by any chunk")
    return acc / count.astype(acc.dtype)[:, None, None, None]


@dataclass
class MarkingStats:
    eligible_decisions: int = 0
    bernoulli_partials: int = 0
    forced_full: int = 0


def mark_partial(plans: list[list[Chunk]], p: float, staleness_cap: int, seed: int,
                 chunk_len: int) -> tuple[list[list[Chunk]], MarkingStats]:
    """Annotate per-step plans with partial-computation marks.

    Rules, applied in step order with a per-frame freshness simulation:
    first and last steps stay full; short edge chunks stay full; a chunk
    whose members would exceed ``staleness_cap`` steps since their last
    full computation is forced full; everything else flips an independent
    seeded coin with probability ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"partial fraction must lie in [0, 1], got {p}")
    num_steps = len(plans)
    n_total = max(c.stop for c in plans[0]) if plans else 0
    last_full = np.zeros(n_total, dtype=np.int64)
    stats = MarkingStats()
    marked: list[list[Chunk]] = []
    for k, chunks in enumerate(plans):
        rng = np.random.default_rng([seed, _STREAM_MARK, k])
        step_out = []
        for chunk in chunks:
            mode = ChunkMode.FULL
            interior = 0 < k < num_steps - 1 and chunk.length == chunk_len
            if interior:
                worst = k - int(last_full[chunk.start:chunk.stop].min())
                if worst > staleness_cap:
                    stats.forced_full += 1
                else:
                    stats.eligible_decisions += 1
                    if rng.random() < p:
                        mode = ChunkMode.PARTIAL
                        stats.bernoulli_partials += 1
            if mode is ChunkMode.FULL:
                last_full[chunk.start:chunk.stop] = k
            step_out.append(replace(chunk, mode=mode))
        marked.append(step_out)
    return marked, stats


@dataclass
class EngineConfig:
    """Fully-resolved run configuration; one seed drives all randomness."""

    n_total: int = 144
    chunk_len: int = 16
    policy: str = "shift"                      # "overlap" | "shift"
    overlap_s: int = 0
    delta: int = 4
    shift_mode: str = "fixed"                  # "fixed" | "random"
    partial_fraction: float = 0.0
    # ablation: drop marked chunks outright instead of computing them
    # partially; their frames miss that step's DDIM update entirely
    hard_skip: bool = False
    mask_variant: MaskVariant = MaskVariant.HALF
    staleness_cap: int = 2
    seed: int = 0
    ddim_steps: int = 25
    denoiser: str = "toy"                      # "toy" | "oracle"
    toy: ToyDenoiserConfig = field(default_factory=ToyDenoiserConfig)
    latent_h: int = 16
    latent_w: int = 12
    garment_tokens: int = 4
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.n_total < 1:
            raise ValueError("n_total must be >= 1")
        if not 1 <= self.chunk_len <= self.n_total:
            raise ValueError("need 1 <= chunk_len <= n_total")
        if self.policy not in ("overlap", "shift"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if not 0 <= self.overlap_s < self.chunk_len:
            raise ValueError("need 0 <= overlap_s < chunk_len")
        if not 0 <= self.delta < self.chunk_len:
            raise ValueError("need 0 <= delta < chunk_len")
        if self.shift_mode not in ("fixed", "random"):
            raise ValueError(f"unknown shift mode {self.shift_mode!r}")
        if not 0.0 <= self.partial_fraction <= 1.0:
            raise ValueError("partial_fraction must lie in [0, 1]")
        if self.policy == "overlap" and self.partial_fraction > 0:
            raise ValueError("partial computation is not combined with the overlap policy")
        if self.denoiser not in ("toy", "oracle"):
            raise ValueError(f"unknown denoiser {self.denoiser!r}")
        if self.denoiser == "oracle" and self.partial_fraction > 0 and not self.hard_skip:
            raise ValueError("the oracle denoiser has no deep stage to cache; use partial_fraction=0")
        if self.hard_skip and self.policy != "shift":
            raise ValueError("hard_skip is an ablation of the shift policy")
        if self.staleness_cap not in (1, 2):
            raise ValueError("staleness_cap must be 1 or 2 (freshness is binary good/bad)")
        if self.ddim_steps < 1 or self.ddim_steps > self.t_train:
            raise ValueError("need 1 <= ddim_steps <= t_train")
        if self.latent_h % 2 or self.latent_w % 2 or self.latent_h < 2 or self.latent_w < 2:
            raise ValueError("latent dims must be even and >= 2")
        if self.garment_tokens < 0:
            raise ValueError("garment_tokens must be >= 0")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.t_train, self.beta_start, self.beta_end, self.ddim_steps)


@dataclass
class RunStats:
    """Counters and traces from one completed inference run.

    FLOP counters track matmul FLOPs as reported by the denoiser.
    ``freshness_trace[k, f]`` is the staleness of the deep features used
    for frame f at step k (0 when the frame was fully computed that step).
    """

    n_total: int
    chunk_len: int
    steps: int
    latent_h: int
    latent_w: int
    garment_count: int
    full_chunk_evals: int = 0
    partial_chunk_evals: int = 0
    skipped_chunk_evals: int = 0
    deep_flops: int = 0
    shallow_flops: int = 0
    wall_seconds: float = 0.0
    freshness_trace: np.ndarray | None = None
    eligible_decisions: int = 0
    bernoulli_partials: int = 0
    forced_full: int = 0

    @property
    def total_flops(self) -> int:
        return self.deep_flops + self.shallow_flops

    @property
    def fps_proxy(self) -> float:
        if self.wall_seconds <= 0:
            raise ValueError("run recorded no wall time")
        return self.n_total / self.wall_seconds

    @property
    def realized_partial_fraction(self) -> float:
        evals = self.full_chunk_evals + self.partial_chunk_evals
        return self.partial_chunk_evals / evals if evals else 0.0


@dataclass
class Conditions:
    """Per-frame conditioning plus the oracle's target video."""

    masked_video: np.ndarray   # [N, 4, H, W]
    binary_mask: np.ndarray    # [N, 1, H, W]
    pose: np.ndarray           # [N, 4, H, W]
    garment: GarmentCondition
    target_x0: np.ndarray      # [N, 4, H, W]


def synthesize_conditions(config: EngineConfig, dtype=np.float32) -> Conditions:
    """Seeded smooth-noise stand-ins for the real conditioning inputs."""
    rng = np.random.default_rng([config.seed, _STREAM_CONDITIONS])
    n, h, w = config.n_total, config.latent_h, config.latent_w

    def smooth(channels):
        x = rng.standard_normal((n, channels, h, w))
        x = gaussian_filter(x, sigma=(0, 0, 1.5, 1.5), mode="wrap")
        x /= max(x.std(), 1e-12)
        return x.astype(dtype)

    video = smooth(4)
    mask = np.zeros((n, 1, h, w), dtype=dtype)
    mask[:, :, h // 4: (3 * h) // 4, w // 4: (3 * w) // 4] = 1
    masked_video = video * (1 - mask)
    pose = smooth(4)
    target = smooth(4)
    garment = GarmentCondition(
        garment_tokens=rng.standard_normal(
            (config.garment_tokens, config.toy.shallow_width)).astype(np.float32))
    return Conditions(masked_video=masked_video, binary_mask=mask, pose=pose,
                      garment=garment, target_x0=target)


def build_plans(config: EngineConfig) -> tuple[list[ChunkPlan], MarkingStats]:
    """Per-step chunk plans for a config, with partial marks applied."""
    config.validate()
    steps = config.ddim_steps
    if config.policy == "overlap":
        base = plan_overlap(config.n_total, config.chunk_len, config.overlap_s)
        plans = [ChunkPlan(step_index=k, chunks=tuple(base)) for k in range(steps)]
        return plans, MarkingStats()
    raw = [
        plan_shift(config.n_total, config.chunk_len, config.delta, k,
                   mode=config.shift_mode, seed=config.seed)
        for k in range(steps)
    ]
    marked, stats = mark_partial(raw, config.partial_fraction, config.staleness_cap,
                                 config.seed, config.chunk_len)
    plans = [ChunkPlan(step_index=k, chunks=tuple(step)) for k, step in enumerate(marked)]
    return plans, stats


def _worker_count() -> int:
    # Default is serial: at desk scale the chunk evals are small numpy ops
    # and GIL contention makes a thread-per-chunk pool measurably slower.
    # SHIFTCACHE_THREADS opts in to concurrent chunk evaluation.
    env = os.environ.get("SHIFTCACHE_THREADS")
    if env:
        return max(1, int(env))
    return 1


def run_inference(config: EngineConfig, conditions: Conditions | None = None,
                  dtype=np.float32) -> tuple[LatentVideo, RunStats]:
    """Run the full sampling loop under the configured policy.

    Per step: build the chunk plan, evaluate every chunk (full chunks write
    the deep-feature cache on shift runs, partial chunks read it under the
    configured mask variant), merge overlap predictions by averaging, then
    apply one DDIM update per frame.
    """
    config.validate()
    if conditions is None:
        conditions = synthesize_conditions(config, dtype=dtype)
    sched = config.schedule()
    steps = sched.num_steps
    n = config.n_total

    plans, marking = build_plans(config)

    if config.denoiser == "toy":
        toy = ToyDenoiser(config.toy)
        oracle = None
    else:
        toy = None
        oracle = OracleDenoiser(conditions.target_x0.astype(dtype), sched)

    rng = np.random.default_rng([config.seed, _STREAM_NOISE])
    z = rng.standard_normal((n, 4, config.latent_h, config.latent_w)).astype(dtype)

    cache = FeatureCache(staleness_cap=config.staleness_cap)
    use_cache = config.policy == "shift" and toy is not None and not config.hard_skip
    stats = RunStats(
        n_total=n, chunk_len=config.chunk_len, steps=steps,
        latent_h=config.latent_h, latent_w=config.latent_w,
        garment_count=config.garment_tokens,
        eligible_decisions=marking.eligible_decisions,
        bernoulli_partials=marking.bernoulli_partials,
        forced_full=marking.forced_full,
    )
    trace = np.zeros((steps, n), dtype=np.int64)
    last_full = np.zeros(n, dtype=np.int64)

    workers = _worker_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def eval_chunk(step_index, chunk, z_step):
        sl = slice(chunk.start, chunk.stop)
        offsets = np.arange(chunk.start, chunk.stop)
        if oracle is not None:
            eps = oracle.eps_for(z_step[sl], step_index, offsets)
            return eps, None, None, FlopTally()
        inp = DenoiserInput(
            noise_latent=z_step[sl],
            masked_video_latent=conditions.masked_video[sl],
            binary_mask=conditions.binary_mask[sl],
            pose_features=conditions.pose[sl],
            step_index=step_index,
            frame_offsets=offsets,
        )
        tally = FlopTally()
        if chunk.mode is ChunkMode.FULL:
            eps, deep = toy.denoise_full(inp, conditions.garment, tally=tally)
            return eps, deep, None, tally
        feats, computed, flags = cache.fetch(chunk.frames(), step_index)
        cached = DeepFeatures(feats=feats, computed_at=computed)
        eps = toy.denoise_partial(inp, cached, flags, config.mask_variant,
                                  conditions.garment, tally=tally)
        return eps, None, flags, tally

    t_start = time.perf_counter()
    try:
        for k in range(steps):
            chunks = plans[k].chunks
            if config.hard_skip:
                todo = [c for c in chunks if c.mode is ChunkMode.FULL]
                skipped = [c for c in chunks if c.mode is ChunkMode.PARTIAL]
            else:
                todo, skipped = list(chunks), []
            if pool is not None and len(todo) > 1:
                results = list(pool.map(lambda c: eval_chunk(k, c, z), todo))
            else:
                results = [eval_chunk(k, c, z) for c in todo]

            if config.policy == "overlap":
                eps_all = aggregate_overlaps([r[0] for r in results], todo, n)
            else:
                eps_all = np.empty_like(z)
                for (eps, _, _, _), chunk in zip(results, todo):
                    eps_all[chunk.start:chunk.stop] = eps

            # Post-barrier bookkeeping, committed in chunk order.
            for (eps, deep, flags, tally), chunk in zip(results, todo):
                stats.deep_flops += tally.deep
                stats.shallow_flops += tally.shallow
                if chunk.mode is ChunkMode.FULL:
                    stats.full_chunk_evals += 1
                    if use_cache:
                        cache.store_block(chunk.start, deep.feats, k)
                    last_full[chunk.start:chunk.stop] = k
                else:
                    stats.partial_chunk_evals += 1
                    trace[k, chunk.start:chunk.stop] = k - last_full[chunk.start:chunk.stop]

            if skipped:
                # naive-skip ablation: dropped frames miss this DDIM update
                stats.skipped_chunk_evals += len(skipped)
                updated = np.zeros(n, dtype=bool)
                for chunk in todo:
                    updated[chunk.start:chunk.stop] = True
                for chunk in skipped:
                    trace[k, chunk.start:chunk.stop] = \
                        k - last_full[chunk.start:chunk.stop]
                z = z.copy()
                z[updated] = ddim_step(z[updated], eps_all[updated], k, sched)
            else:
                z = ddim_step(z, eps_all, k, sched)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    stats.wall_seconds = time.perf_counter() - t_start
    stats.freshness_trace = trace

    video = LatentVideo(z=z, freshness=last_full)
    return video, stats
