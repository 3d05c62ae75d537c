"""Dense-array primitives: masked softmax attention, sinusoidal frame
encoding, and the spatial<->temporal token reshape.

Everything here is a pure function over numpy arrays (float32 by default,
float64 supported throughout for high-precision checks). Learned
projections deliberately live one level up, in the denoiser.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# Additive mask sentinel: most-negative finite float32. exp() underflows to
# exactly 0.0 for any realistic logit offset, so blocked keys get weight 0
# without producing NaNs (as long as each query keeps one open key).
MASK_BLOCK = float(np.finfo(np.float32).min)


class MaskVariant(enum.Enum):
    FULL = "full"
    HALF = "half"
    QUARTER = "quarter"
    CAUSAL = "causal"


@dataclass(frozen=True)
class AttentionMask:
    """L x L additive attention mask with entries in {0, MASK_BLOCK}."""

    matrix: np.ndarray
    variant: MaskVariant

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"mask must be square, got shape {m.shape}")
        if not np.all((m == 0.0) | (m == MASK_BLOCK)):
            raise ValueError("mask entries must be 0 or the block sentinel")
        if np.any(np.all(m == MASK_BLOCK, axis=1)):
            raise ValueError("mask has a fully blocked query row")

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def blocked(self) -> np.ndarray:
        """Boolean [L, L] array, True where attention is blocked."""
        return self.matrix == MASK_BLOCK


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-stabilized softmax. Rows of -inf-like logits are rejected
    upstream (see softmax_attention), so no NaN guards here.

    Blocked entries sit at MASK_BLOCK; subtracting the row max pushes them
    past float32 range to -inf, and exp() turns them into exact zeros. That
    overflow is intended, so the warning is silenced.
    """
    with np.errstate(over="ignore"):
        shifted = logits - logits.max(axis=axis, keepdims=True)
        np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    return shifted


def softmax_attention(q, k, v, mask: AttentionMask | None = None) -> np.ndarray:
    """Scaled dot-product attention over [B, L, C] arrays.

    out[b, i] = sum_j softmax_j(q[b,i] . k[b,j] / sqrt(C) + mask[i,j]) v[b,j]

    The optional mask is additive and shared across the batch axis. Raises
    on shape disagreement and on masks that block an entire query row.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ValueError(
            f"q/k/v must share a [B, L, C] shape, got {q.shape}, {k.shape}, {v.shape}"
        )
    _, length, channels = q.shape
    if mask is not None:
        if mask.size != length:
            raise ValueError(f"mask size {mask.size} != sequence length {length}")

    scale = 1.0 / np.sqrt(np.asarray(channels, dtype=q.dtype))
    logits = np.matmul(q, np.swapaxes(k, -1, -2))
    logits *= scale
    if mask is not None:
        with np.errstate(over="ignore"):
            logits += mask.matrix.astype(logits.dtype)
    weights = softmax(logits, axis=-1)
    return np.matmul(weights, v)


def sinusoidal_encoding(frame_index: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos positional code at geometric frequencies.

    enc[2i] = sin(t / 10000^(2i/dim)), enc[2i+1] = cos(same), as float32.
    """
    if dim % 2 != 0 or dim <= 0:
        raise ValueError(f"encoding dim must be a positive even integer, got {dim}")
    if frame_index < 0:
        raise ValueError(f"frame index must be >= 0, got {frame_index}")
    half = np.arange(dim // 2, dtype=np.float64)
    freqs = np.power(10000.0, -2.0 * half / dim)
    angles = frame_index * freqs
    enc = np.empty(dim, dtype=np.float64)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc.astype(np.float32)


def sinusoidal_encoding_batch(frame_indices, dim: int) -> np.ndarray:
    """Vectorized sinusoidal_encoding -> [len(frame_indices), dim]."""
    idx = np.asarray(frame_indices)
    if idx.ndim != 1:
        raise ValueError("frame_indices must be one-dimensional")
    if np.any(idx < 0):
        raise ValueError("frame indices must be >= 0")
    if dim % 2 != 0 or dim <= 0:
        raise ValueError(f"encoding dim must be a positive even integer, got {dim}")
    half = np.arange(dim // 2, dtype=np.float64)
    freqs = np.power(10000.0, -2.0 * half / dim)
    angles = idx[:, None].astype(np.float64) * freqs[None, :]
    enc = np.empty((idx.shape[0], dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc.astype(np.float32)


def reshape_spatial_temporal(x: np.ndarray) -> np.ndarray:
    """[L, C, H, W] -> [(H*W), L, C] so attention can run along frames.

    Position p = h*W + w of the output batch axis holds x[:, :, h, w].
    """
    if x.ndim != 4:
        raise ValueError(f"expected [L, C, H, W], got shape {x.shape}")
    length, channels, h, w = x.shape
    return np.ascontiguousarray(x.transpose(2, 3, 0, 1).reshape(h * w, length, channels))


def reshape_temporal_spatial(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of reshape_spatial_temporal: [(H*W), L, C] -> [L, C, H, W]."""
    if x.ndim != 3:
        raise ValueError(f"expected [(H*W), L, C], got shape {x.shape}")
    positions, length, channels = x.shape
    if positions != h * w:
        raise ValueError(f"batch axis {positions} != H*W = {h * w}")
    return np.ascontiguousarray(x.reshape(h, w, length, channels).transpose(2, 3, 0, 1))
