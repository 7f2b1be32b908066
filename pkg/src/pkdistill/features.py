"""Feature pyramids and per-channel statistics over the effective mini-batch.

A feature map is a dense (batch, channel, height, width) tensor; a pyramid is
an ordered list of maps with non-increasing spatial size, mirroring the
multi-scale outputs of a detection neck.  All channel statistics treat one
channel's values across batch and spatial positions as a single sample of
size m = b * h * w (the "effective mini-batch"); that sample is the domain on
which the correlation losses in :mod:`pkdistill.losses` operate.

Values are stored and reduced in float64 regardless of the source precision
so that the statistical identities tested elsewhere hold at 1e-9 tolerances.
All objects here are immutable; operations return new objects and are safe
to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_EPSILON",
    "FeatureMap",
    "FeaturePyramid",
    "ChannelSample",
    "channel_sample",
    "normalize",
    "pyramid_summary",
]

DEFAULT_EPSILON = 1e-8


def _frozen_f64(values, shape=None) -> np.ndarray:
    """Copy into a read-only, C-contiguous float64 array."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One multi-channel feature tensor, laid out (batch, channel, height, width).

    The backing array is copied to read-only float64 on construction and all
    values must be finite.  The canonical flat layout is row-major with batch
    outermost and width innermost.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 4:
            raise ValueError(f"feature map must be 4-D (b, c, h, w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"all feature map dimensions must be >= 1, got shape {data.shape}")
        if not np.isfinite(data).all():
            bad = int(np.flatnonzero(~np.isfinite(data.reshape(-1)))[0])
            raise ValueError(f"feature map contains a non-finite value at flat index {bad}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, b: int, c: int, h: int, w: int, values) -> "FeatureMap":
        """Build from a flat row-major buffer (batch outermost, width innermost)."""
        values = np.asarray(values, dtype=np.float64)
        if values.size != b * c * h * w:
            raise ValueError(
                f"expected {b * c * h * w} values for shape ({b}, {c}, {h}, {w}), got {values.size}"
            )
        return cls(values.reshape(b, c, h, w))

    @property
    def b(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of all values."""
        return self.data.reshape(-1)

    def __repr__(self):
        return f"FeatureMap(b={self.b}, c={self.c}, h={self.h}, w={self.w})"


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Ordered multi-scale feature maps sharing a batch size.

    Spatial sizes must be non-increasing with level index (the first level is
    the highest-resolution one).  Level names default to "P3", "P4", ...
    """

    levels: tuple[FeatureMap, ...]
    level_names: tuple[str, ...] | None = None

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ValueError("feature pyramid must have at least one level")
        names = self.level_names
        if names is None:
            names = tuple(f"P{3 + i}" for i in range(len(levels)))
        else:
            names = tuple(str(n) for n in names)
        if len(names) != len(levels):
            raise ValueError(f"{len(levels)} levels but {len(names)} level names")
        if len(set(names)) != len(names):
            raise ValueError(f"level names must be unique, got {names}")
        b = levels[0].b
        for i, lvl in enumerate(levels):
            if lvl.b != b:
                raise ValueError(f"level {i} has batch size {lvl.b}, expected {b}")
            if i > 0 and (lvl.h > levels[i - 1].h or lvl.w > levels[i - 1].w):
                raise ValueError(
                    f"level {i} is larger ({lvl.h}x{lvl.w}) than level {i - 1} "
                    f"({levels[i - 1].h}x{levels[i - 1].w}); sizes must be non-increasing"
                )
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "level_names", names)

    @property
    def b(self) -> int:
        return self.levels[0].b

    def __len__(self) -> int:
        return len(self.levels)

    def __repr__(self):
        shapes = ", ".join(
            f"{n}:{m.c}x{m.h}x{m.w}" for n, m in zip(self.level_names, self.levels)
        )
        return f"FeaturePyramid(b={self.b}, {shapes})"


@dataclass(frozen=True, eq=False)
class ChannelSample:
    """One channel's m = b*h*w values with its sample mean and std.

    The std uses the Bessel-corrected (m - 1) denominator, so a normalized
    sample has sum of squares exactly m - 1.  At least two values are
    required; a single value has no sample variance.
    """

    values: np.ndarray
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size < 2:
            raise ValueError(f"channel sample needs m >= 2 values, got {values.size}")
        if not np.isfinite(values).all():
            raise ValueError("channel sample contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mean", float(values.mean()))
        object.__setattr__(self, "std", float(values.std(ddof=1)))

    @property
    def m(self) -> int:
        return self.values.size

    def __repr__(self):
        return f"ChannelSample(m={self.m}, mean={self.mean:.6g}, std={self.std:.6g})"


def channel_sample(fmap: FeatureMap, channel: int) -> ChannelSample:
    """Extract one channel of a feature map as a flat sample of b*h*w values.

    Raises IndexError for an out-of-range channel and ValueError when the
    effective mini-batch is smaller than 2 (b = h = w = 1).
    """
    if not 0 <= channel < fmap.c:
        raise IndexError(f"channel {channel} out of range for {fmap.c} channels")
    return ChannelSample(fmap.data[:, channel, :, :].reshape(-1))


def normalize(sample: ChannelSample, epsilon: float = DEFAULT_EPSILON) -> ChannelSample:
    """Standardize a sample to zero mean and unit sample variance.

    The divisor is std + epsilon, so a constant channel (std = 0) maps to all
    zeros instead of dividing by zero.  For std >> epsilon the result has
    |mean| <= 1e-6 and |sample variance - 1| <= 1e-6, and normalizing again
    is the identity within the same tolerance.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return ChannelSample((sample.values - sample.mean) / (sample.std + epsilon))


def pyramid_summary(pyr: FeaturePyramid) -> list[dict]:
    """Per-level descriptive statistics over all b*c*h*w values.

    Returns one dict per level with keys ``level``, ``min``, ``max``,
    ``mean``, ``std`` (population, ddof=0) and ``abs_mean``.
    """
    rows = []
    for name, lvl in zip(pyr.level_names, pyr.levels):
        v = lvl.values
        rows.append(
            {
                "level": name,
                "min": float(v.min()),
                "max": float(v.max()),
                "mean": float(v.mean()),
                "std": float(v.std()),
                "abs_mean": float(np.abs(v).mean()),
            }
        )
    return rows
