"""Long-video diffusion inference scheduling: shifted non-overlapping
chunks with deep-feature caching and masked temporal attention, benchmarked
against the overlap/averaging baseline."""

from .cache import CacheMiss, FeatureCache, FreshnessFlags, StaleCacheError, build_mask
from .denoiser import (
    DeepFeatures,
    DenoiserInput,
    FlopTally,
    GarmentCondition,
    OracleDenoiser,
    ToyDenoiser,
    ToyDenoiserConfig,
    assemble_input,
    reference_spatial_attention,
)
from .diffusion import LatentVideo, NoiseSchedule, ddim_step, make_schedule, oracle_eps
from .metrics import BenchRecord, flicker_index, ssim, throughput_model, video_ssim
from .numerics import (
    MASK_BLOCK,
    AttentionMask,
    MaskVariant,
    reshape_spatial_temporal,
    reshape_temporal_spatial,
    sinusoidal_encoding,
    softmax_attention,
)
from .pose_select import (
    DEFAULT_JOINT_TRIPLES,
    JointTripleSpec,
    KeypointFrame,
    calculate_angle,
    perfect_pose_score,
    select_best_frame,
)
from .scheduler import (
    Chunk,
    ChunkMode,
    ChunkPlan,
    Conditions,
    EngineConfig,
    RunStats,
    aggregate_overlaps,
    build_plans,
    mark_partial,
    plan_overlap,
    plan_shift,
    run_inference,
    synthesize_conditions,
)

__version__ = "0.1.0"
