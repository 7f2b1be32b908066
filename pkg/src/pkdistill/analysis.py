"""Diagnostics for feature pathologies: dominant channels, stage magnitudes,
and activation-pattern maps.

These reproduce the three failure signatures that motivate a magnitude-
invariant imitation loss: models whose overall feature scales differ, pyramid
stages that are much more activated than others, and a handful of channels
that dominate the per-pixel maxima (and hence would dominate a squared-error
gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMap, FeaturePyramid

__all__ = [
    "DominantChannelReport",
    "ActivationPattern",
    "dominant_channels",
    "activation_patterns",
    "stage_magnitude_profile",
]


@dataclass(frozen=True, eq=False)
class DominantChannelReport:
    """How often each channel attains the per-pixel maximum.

    ``counts[i]`` is the number of (batch element, pixel) sites where channel
    i wins the argmax over channels; counts sum to b*h*w.  ``ranking`` lists
    channel indices by descending count (ties: lower index first).
    """

    level_name: str
    counts: np.ndarray
    ranking: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        ranking = np.array(self.ranking, dtype=np.int64)
        counts.flags.writeable = False
        ranking.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "ranking", ranking)


@dataclass(frozen=True, eq=False)
class ActivationPattern:
    """Per-level 2-D maps of channel-wise maxima, jointly scaled to 0..255.

    One batch element at a time.  All levels share the normalization bounds
    (``lo``/``hi`` are the global min/max of the per-pixel maxima across
    levels), so a weakly activated stage renders dark next to a strong one.
    A degenerate range (hi == lo) maps everything to 0.
    """

    level_names: tuple[str, ...]
    levels: tuple[np.ndarray, ...]
    lo: float
    hi: float

    def __post_init__(self):
        levels = []
        for lvl in self.levels:
            arr = np.array(lvl, dtype=np.uint8)
            arr.flags.writeable = False
            levels.append(arr)
        object.__setattr__(self, "levels", tuple(levels))
        object.__setattr__(self, "level_names", tuple(self.level_names))


def dominant_channels(fmap: FeatureMap, level_name: str = "") -> DominantChannelReport:
    """Tally the per-pixel argmax channel over the batch and all pixels.

    Ties go to the lowest channel index.  Invariant under any strictly
    increasing transform applied uniformly to all values.
    """
    winners = np.argmax(fmap.data, axis=1)  # ties -> first (lowest) index
    counts = np.bincount(winners.reshape(-1), minlength=fmap.c)
    ranking = np.argsort(-counts, kind="stable")
    return DominantChannelReport(level_name, counts, ranking)


def activation_patterns(pyr: FeaturePyramid, batch_index: int) -> ActivationPattern:
    """Channel-max maps for one batch element, min-max scaled jointly to 0..255.

    Rounding is half away from zero, so the global max maps to exactly 255
    and the global min to 0.
    """
    if not 0 <= batch_index < pyr.b:
        raise IndexError(f"batch index {batch_index} out of range for batch size {pyr.b}")
    maxima = [lvl.data[batch_index].max(axis=0) for lvl in pyr.levels]
    lo = min(float(m.min()) for m in maxima)
    hi = max(float(m.max()) for m in maxima)
    if hi == lo:
        scaled = [np.zeros_like(m, dtype=np.uint8) for m in maxima]
    else:
        # values are >= 0 after scaling, so floor(x + 0.5) rounds half away from zero
        scaled = [
            np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8) for m in maxima
        ]
    return ActivationPattern(pyr.level_names, tuple(scaled), lo, hi)


def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile on an ascending array: value at rank ceil(q*n)."""
    rank = max(1, int(np.ceil(q * sorted_values.size)))
    return float(sorted_values[rank - 1])


def stage_magnitude_profile(pyr: FeaturePyramid) -> list[dict]:
    """Per-level magnitude statistics: mean |v|, nearest-rank p50/p99, max.

    Quantiles use the nearest-rank rule on the sorted absolute values, so
    they are reproducible by a plain sort-and-index reference.
    """
    rows = []
    for name, lvl in zip(pyr.level_names, pyr.levels):
        mags = np.sort(np.abs(lvl.values))
        rows.append(
            {
                "level": name,
                "mean_abs": float(mags.mean()),
                "p50": _nearest_rank(mags, 0.50),
                "p99": _nearest_rank(mags, 0.99),
                "max": float(mags[-1]),
            }
        )
    return rows
