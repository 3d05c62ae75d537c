"""Bit-exact file formats: latent videos, keypoints, configs, benchmark CSV.

Latent files ("LVT1"): magic | u8 dtype tag (0=f32, 1=f64) | u32 rank (=4) |
4x u32 dims | row-major little-endian payload. Round-trips are lossless.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import ToyDenoiserConfig
from .diffusion import LatentVideo
from .metrics import BenchRecord
from .numerics import MaskVariant
from .pose_select import JointTripleSpec, KeypointFrame
from .scheduler import EngineConfig

LATENT_MAGIC = b"LVT1"
LATENT_RANK = 4
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_ELEMENTS = 1 << 40  # refuse absurd dim products before allocating

CSV_VERSION_LINE = "# shiftcache-bench v1"
CSV_HEADER = ("config,policy,S,delta,partial_frac,mask,full_chunks,partial_chunks,"
              "deep_flops,shallow_flops,wall_ms,frames,fps_proxy,flicker,ssim")


class FormatError(ValueError):
    """A file does not match its declared format."""


def save_latents(path, video) -> None:
    """Write a LatentVideo (or bare [N, C, H, W] array) as an LVT1 file."""
    z = video.z if isinstance(video, LatentVideo) else np.asarray(video)
    if z.ndim != LATENT_RANK:
        raise FormatError(f"latents must have rank {LATENT_RANK}, got {z.ndim}")
    tag = _TAG_FOR_KIND.get(np.dtype(z.dtype))
    if tag is None:
        raise FormatError(f"unsupported dtype {z.dtype}; use float32 or float64")
    payload = np.ascontiguousarray(z, dtype=_DTYPE_TAGS[tag])
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<B", tag))
        fh.write(struct.pack("<I", LATENT_RANK))
        fh.write(struct.pack("<4I", *payload.shape))
        fh.write(payload.tobytes())


def load_latents(path) -> LatentVideo:
    blob = Path(path).read_bytes()
    header = 4 + 1 + 4 + 4 * LATENT_RANK
    if len(blob) < header:
        raise FormatError("file too short for an LVT1 header")
    if blob[:4] != LATENT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}; expected {LATENT_MAGIC!r}")
    tag = blob[4]
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    (rank,) = struct.unpack_from("<I", blob, 5)
    if rank != LATENT_RANK:
        raise FormatError(f"expected rank {LATENT_RANK}, got {rank}")
    dims = struct.unpack_from("<4I", blob, 9)
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise FormatError(f"dims {dims} overflow the element budget")
    dtype = _DTYPE_TAGS[tag]
    expected = header + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"payload length {len(blob) - header} != dims product {count} x {dtype.itemsize}"
        )
    z = np.frombuffer(blob, dtype=dtype, count=count, offset=header).reshape(dims).copy()
    return LatentVideo(z=z, freshness=np.zeros(dims[0], dtype=np.int64))


# -- keypoints ---------------------------------------------------------------

def load_keypoints(path) -> list[KeypointFrame]:
    """Parse {"frames": [{"frame_index": i, "joints": {name: [x, y, conf]}}]}."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "frames" not in doc:
        raise FormatError('keypoints file must be an object with a "frames" list')
    frames = []
    seen = set()
    for entry in doc["frames"]:
        idx = entry.get("frame_index")
        if not isinstance(idx, int):
            raise FormatError(f"frame_index must be an integer, got {idx!r}")
        if idx in seen:
            raise FormatError(f"duplicate frame_index {idx}")
        seen.add(idx)
        joints = {}
        for name, triple in entry.get("joints", {}).items():
            if not isinstance(triple, list) or len(triple) != 3:
                raise FormatError(f"joint {name!r} must be [x, y, confidence]")
            joints[name] = (float(triple[0]), float(triple[1]), float(triple[2]))
        frames.append(KeypointFrame(frame_index=idx, joints=joints))
    return frames


def load_joint_specs(path) -> tuple[JointTripleSpec, ...]:
    """Parse [{"name": ..., "triple": [a, b, c], "target_angle": deg}, ...]."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, list) or not doc:
        raise FormatError("joint spec file must be a non-empty list")
    specs = []
    for entry in doc:
        triple = entry.get("triple")
        if not isinstance(triple, list) or len(triple) != 3:
            raise FormatError("each spec needs a 3-element joint triple")
        specs.append(JointTripleSpec(
            name=str(entry.get("name", "-".join(triple))),
            triple=tuple(str(j) for j in triple),
            target_angle=float(entry["target_angle"]),
        ))
    return tuple(specs)


# -- config ------------------------------------------------------------------

_TOY_KEYS = {"shallow_width", "deep_width", "shallow_blocks", "deep_blocks",
             "seed", "deep_cost_share"}
_LATENT_KEYS = {"h", "w"}
_TOP_KEYS = {"n_total", "chunk_len", "policy", "overlap_s", "delta", "shift_mode",
             "partial_fraction", "hard_skip", "mask_variant", "staleness_cap",
             "seed", "ddim_steps", "denoiser", "toy", "latent", "garment_tokens",
             "t_train", "beta_start", "beta_end"}


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise FormatError(f"unknown key(s) in {where}: {sorted(unknown)}")


def config_from_dict(doc: dict) -> EngineConfig:
    """Build an EngineConfig from a JSON document; unknown keys are rejected
    and every omitted key takes its documented default."""
    if not isinstance(doc, dict):
        raise FormatError("config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    toy_doc = doc.get("toy", {})
    if not isinstance(toy_doc, dict):
        raise FormatError('"toy" must be an object')
    _reject_unknown(toy_doc, _TOY_KEYS, "toy block")
    latent_doc = doc.get("latent", {})
    if not isinstance(latent_doc, dict):
        raise FormatError('"latent" must be an object')
    _reject_unknown(latent_doc, _LATENT_KEYS, "latent block")

    defaults = EngineConfig()
    toy_defaults = defaults.toy.to_dict()
    toy = ToyDenoiserConfig(**{**toy_defaults, **toy_doc})

    mask_name = doc.get("mask_variant", defaults.mask_variant.value)
    try:
        mask_variant = MaskVariant(mask_name)
    except ValueError:
        raise FormatError(f"unknown mask_variant {mask_name!r}") from None

    config = EngineConfig(
        n_total=int(doc.get("n_total", defaults.n_total)),
        chunk_len=int(doc.get("chunk_len", defaults.chunk_len)),
        policy=str(doc.get("policy", defaults.policy)),
        overlap_s=int(doc.get("overlap_s", defaults.overlap_s)),
        delta=int(doc.get("delta", defaults.delta)),
        shift_mode=str(doc.get("shift_mode", defaults.shift_mode)),
        partial_fraction=float(doc.get("partial_fraction", defaults.partial_fraction)),
        hard_skip=bool(doc.get("hard_skip", defaults.hard_skip)),
        mask_variant=mask_variant,
        staleness_cap=int(doc.get("staleness_cap", defaults.staleness_cap)),
        seed=int(doc.get("seed", defaults.seed)),
        ddim_steps=int(doc.get("ddim_steps", defaults.ddim_steps)),
        denoiser=str(doc.get("denoiser", defaults.denoiser)),
        toy=toy,
        latent_h=int(latent_doc.get("h", defaults.latent_h)),
        latent_w=int(latent_doc.get("w", defaults.latent_w)),
        garment_tokens=int(doc.get("garment_tokens", defaults.garment_tokens)),
        t_train=int(doc.get("t_train", defaults.t_train)),
        beta_start=float(doc.get("beta_start", defaults.beta_start)),
        beta_end=float(doc.get("beta_end", defaults.beta_end)),
    )
    config.validate()
    return config


def load_config(path) -> EngineConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def config_to_dict(config: EngineConfig) -> dict:
    """Fully-resolved effective config, loadable back via config_from_dict."""
    return {
        "n_total": config.n_total,
        "chunk_len": config.chunk_len,
        "policy": config.policy,
        "overlap_s": config.overlap_s,
        "delta": config.delta,
        "shift_mode": config.shift_mode,
        "partial_fraction": config.partial_fraction,
        "hard_skip": config.hard_skip,
        "mask_variant": config.mask_variant.value,
        "staleness_cap": config.staleness_cap,
        "seed": config.seed,
        "ddim_steps": config.ddim_steps,
        "denoiser": config.denoiser,
        "toy": config.toy.to_dict(),
        "latent": {"h": config.latent_h, "w": config.latent_w},
        "garment_tokens": config.garment_tokens,
        "t_train": config.t_train,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
    }


# -- diagnostics -------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) of a 2D array, min-max normalized."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM dump needs a 2D image, got {img.shape}")
    lo, hi = img.min(), img.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.rint(np.clip((img - lo) * scale, 0, 255)).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


# -- benchmark CSV -----------------------------------------------------------

def format_bench_row(record: BenchRecord) -> str:
    ssim_field = "" if record.ssim_vs_reference is None else f"{record.ssim_vs_reference:.9g}"
    return ",".join([
        record.config,
        record.policy,
        str(record.s),
        str(record.delta),
        f"{record.partial_frac:.9g}",
        record.mask,
        str(record.full_chunks),
        str(record.partial_chunks),
        str(record.deep_flops),
        str(record.shallow_flops),
        f"{record.wall_ms:.3f}",
        str(record.frames),
        f"{record.fps_proxy:.6g}",
        f"{record.flicker:.9g}",
        ssim_field,
    ])


def write_bench_csv(path, records) -> None:
    lines = [CSV_VERSION_LINE, CSV_HEADER]
    lines.extend(format_bench_row(r) for r in records)
    Path(path).write_text("\n".join(lines) + "\n")
