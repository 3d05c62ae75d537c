"""Per-frame deep-feature cache and the temporal-attention mask builders.

Freshness is counted in sampling-step positions: a frame fully computed at
step position ``k`` and reused at position ``k + d`` has staleness ``d``.
Staleness 1 is "good", staleness 2 is "bad"; the scheduler guarantees the
cap is never exceeded, and ``fetch`` re-checks it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import MASK_BLOCK, AttentionMask, MaskVariant

GOOD_MAX_STALENESS = 1


@dataclass(frozen=True)
class FreshnessFlags:
    """Per-frame good/bad freshness for one chunk. True = good."""

    good: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.good, dtype=bool)
        if g.ndim != 1 or g.size == 0:
            raise ValueError("freshness flags must be a non-empty vector")
        object.__setattr__(self, "good", g)

    def __len__(self) -> int:
        return len(self.good)


class CacheMiss(KeyError):
    """Requested a frame with no stored deep features."""


class StaleCacheError(ValueError):
    """Stored features are older than the staleness cap allows."""


class FeatureCache:
    """Maps frame index -> (deep feature slice, step position it was computed at)."""

    def __init__(self, staleness_cap: int = 2):
        if staleness_cap < 1:
            raise ValueError("staleness cap must be >= 1")
        self.staleness_cap = staleness_cap
        self._feats: dict[int, np.ndarray] = {}
        self._computed_at: dict[int, int] = {}
        self._slice_shape: tuple[int, ...] | None = None

    def __len__(self) -> int:
        return len(self._feats)

    def store(self, frame_index: int, feats: np.ndarray, step_index: int) -> None:
        feats = np.asarray(feats)
        if self._slice_shape is None:
            self._slice_shape = feats.shape
        elif feats.shape != self._slice_shape:
            raise ValueError(
                f"feature slice shape {feats.shape} != cache slice shape {self._slice_shape}"
            )
        prev = self._computed_at.get(frame_index)
        if prev is not None and step_index < prev:
            raise ValueError(
                f"cache write for frame {frame_index} moves computed_at backwards "
                f"({prev} -> {step_index})"
            )
        self._feats[frame_index] = feats.copy()
        self._computed_at[frame_index] = step_index

    def store_block(self, first_frame: int, feats: np.ndarray, step_index: int) -> None:
        """Store consecutive frames [first_frame, first_frame + len(feats))
        from one [L, ...slice] array with a single copy (entries are views
        into that copy, which the cache owns)."""
        block = np.array(feats, copy=True)
        if self._slice_shape is None:
            self._slice_shape = block.shape[1:]
        elif block.shape[1:] != self._slice_shape:
            raise ValueError(
                f"feature slice shape {block.shape[1:]} != cache slice shape {self._slice_shape}"
            )
        for i in range(block.shape[0]):
            frame = first_frame + i
            prev = self._computed_at.get(frame)
            if prev is not None and step_index < prev:
                raise ValueError(
                    f"cache write for frame {frame} moves computed_at backwards "
                    f"({prev} -> {step_index})"
                )
            self._feats[frame] = block[i]
            self._computed_at[frame] = step_index

    def computed_at(self, frame_index: int) -> int:
        if frame_index not in self._computed_at:
            raise CacheMiss(frame_index)
        return self._computed_at[frame_index]

    def fetch(self, frames, current_step_position: int):
        """Concatenated features for ``frames`` plus their freshness flags.

        Returns (feats [len(frames), ...slice], computed_at [len(frames)],
        FreshnessFlags). Raises CacheMiss for unstored frames and
        StaleCacheError when any staleness exceeds the cap.
        """
        frames = list(frames)
        if not frames:
            raise ValueError("fetch needs at least one frame")
        missing = [f for f in frames if f not in self._feats]
        if missing:
            raise CacheMiss(missing[0])
        feats = np.stack([self._feats[f] for f in frames])
        computed = np.array([self._computed_at[f] for f in frames], dtype=np.int64)
        staleness = current_step_position - computed
        if np.any(staleness < 0):
            raise ValueError("cache entry computed in the future of the requested step")
        if np.any(staleness > self.staleness_cap):
            worst = frames[int(np.argmax(staleness))]
            raise StaleCacheError(
                f"frame {worst} staleness {int(staleness.max())} exceeds cap {self.staleness_cap}"
            )
        flags = FreshnessFlags(good=staleness <= GOOD_MAX_STALENESS)
        return feats, computed, flags


def build_mask(variant: MaskVariant, flags: FreshnessFlags) -> AttentionMask:
    """L x L additive mask for one chunk, from its freshness flags.

    full:    every frame attends to every frame.
    half:    every query attends exactly to the good frames.
    quarter: bad queries attend to everything; good queries only to good.
    causal:  query q attends to keys k >= q in chunk order.

    A variant that would leave some query with no open key (half with zero
    good frames) degrades to full for that chunk.
    """
    length = len(flags)
    if length < 1:
        raise ValueError("flags must be non-empty")
    good = flags.good

    if variant is MaskVariant.FULL:
        blocked = np.zeros((length, length), dtype=bool)
    elif variant is MaskVariant.HALF:
        if not good.any():
            return build_mask(MaskVariant.FULL, flags)
        blocked = np.broadcast_to(~good[None, :], (length, length)).copy()
    elif variant is MaskVariant.QUARTER:
        blocked = np.zeros((length, length), dtype=bool)
        blocked[good, :] = ~good[None, :]
    elif variant is MaskVariant.CAUSAL:
        k = np.arange(length)
        blocked = k[None, :] < k[:, None]
    else:
        raise ValueError(f"unknown mask variant: {variant!r}")

    matrix = np.where(blocked, np.float32(MASK_BLOCK), np.float32(0.0))
    return AttentionMask(matrix=matrix, variant=variant)
