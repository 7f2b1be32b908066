"""Pairing of student and teacher pyramids with mismatched geometry.

Heterogeneous model pairs produce pyramids whose paired levels can differ in
spatial resolution (the lower-resolution member is bilinearly upsampled) or
channel width (either rejected, or bridged by a trainable 1x1 channel
adapter).  Upsampling uses the half-pixel-center convention:
``src = (dst + 0.5) * src_size / dst_size - 0.5``, clamped to the source
grid, which is an exact identity when sizes already match.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, FeaturePyramid

__all__ = [
    "AlignmentError",
    "AlignmentPolicy",
    "ChannelAdapter",
    "upsample_bilinear",
    "align",
    "adapter_apply",
    "adapter_grad",
]


class AlignmentError(ValueError):
    """Student/teacher pyramids cannot be paired as requested."""


@dataclass(eq=False)
class ChannelAdapter:
    """Per-pixel linear map (1x1 convolution) from c_in to c_out channels.

    Parameters are trainable; gradient buffers exist for optimizer loops that
    accumulate into them.  An adapter instance must not be shared across
    concurrent training steps.
    """

    weight: np.ndarray  # (c_out, c_in)
    bias: np.ndarray  # (c_out,)
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError(f"adapter weight must be 2-D (c_out, c_in), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"adapter bias shape {self.bias.shape} does not match c_out {self.weight.shape[0]}"
            )
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "ChannelAdapter":
        return cls(np.eye(channels), np.zeros(channels))

    @classmethod
    def initialized(cls, c_in: int, c_out: int, seed: int = 0) -> "ChannelAdapter":
        """He-style seeded init: weight std sqrt(2 / c_in), zero bias."""
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, np.sqrt(2.0 / c_in), (c_out, c_in)), np.zeros(c_out))


@dataclass(frozen=True)
class AlignmentPolicy:
    """How to pair two pyramids: level pairs, spatial rule, channel rule.

    ``pairs`` lists (student level index, teacher level index); student
    indices must be strictly increasing.  The only spatial rule is upsampling
    the smaller member of each pair (bilinear); the channel rule is either
    ``require_equal`` or ``adapter`` (student passed through ``adapter``).
    """

    pairs: tuple[tuple[int, int], ...]
    channel_rule: str = "require_equal"
    adapter: ChannelAdapter | None = None
    interpolation: str = "bilinear"

    def __post_init__(self):
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        if not pairs:
            raise ValueError("alignment policy needs at least one level pair")
        s_indices = [i for i, _ in pairs]
        if sorted(set(s_indices)) != s_indices:
            raise ValueError(f"student level indices must be strictly increasing, got {s_indices}")
        if self.channel_rule not in ("require_equal", "adapter"):
            raise ValueError(f"unknown channel rule {self.channel_rule!r}")
        if self.channel_rule == "adapter" and self.adapter is None:
            raise ValueError("channel rule 'adapter' needs an adapter instance")
        if self.interpolation != "bilinear":
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def identity(cls, n_levels: int, **kwargs) -> "AlignmentPolicy":
        return cls(tuple((i, i) for i in range(n_levels)), **kwargs)


def upsample_bilinear(fmap: FeatureMap, target_h: int, target_w: int) -> FeatureMap:
    """Bilinearly upsample a map to (target_h, target_w), half-pixel centers.

    Downsampling is rejected; equal sizes return the input unchanged.  Output
    values are convex combinations of source values, so they stay within the
    source's [min, max].
    """
    h, w = fmap.h, fmap.w
    if target_h < h or target_w < w:
        raise ValueError(
            f"upsample-only: target {target_h}x{target_w} is smaller than source {h}x{w}"
        )
    if (target_h, target_w) == (h, w):
        return fmap

    def axis_coords(src: int, dst: int):
        pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis_coords(h, target_h)
    x0, x1, wx = axis_coords(w, target_w)
    d = fmap.data
    top = (1.0 - wx) * d[:, :, y0[:, None], x0[None, :]] + wx * d[:, :, y0[:, None], x1[None, :]]
    bot = (1.0 - wx) * d[:, :, y1[:, None], x0[None, :]] + wx * d[:, :, y1[:, None], x1[None, :]]
    out = (1.0 - wy)[:, None] * top + wy[:, None] * bot
    return FeatureMap(out)


def adapter_apply(adapter: ChannelAdapter, fmap: FeatureMap) -> FeatureMap:
    """Apply the 1x1 channel map; preserves b, h, w and maps c_in -> c_out."""
    if fmap.c != adapter.c_in:
        raise ValueError(f"adapter expects {adapter.c_in} input channels, map has {fmap.c}")
    out = np.einsum("oi,bihw->bohw", adapter.weight, fmap.data)
    out += adapter.bias[None, :, None, None]
    return FeatureMap(out)


def adapter_grad(
    adapter: ChannelAdapter, fmap: FeatureMap, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward pass of :func:`adapter_apply`.

    ``upstream`` is the gradient at the adapter output, shape
    (b, c_out, h, w).  Returns (grad_input, grad_weight, grad_bias); the
    adapter's own buffers are not modified.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (fmap.b, adapter.c_out, fmap.h, fmap.w)
    if upstream.shape != expected:
        raise ValueError(f"upstream gradient shape {upstream.shape}, expected {expected}")
    grad_input = np.einsum("oi,bohw->bihw", adapter.weight, upstream)
    grad_weight = np.einsum("bohw,bihw->oi", upstream, fmap.data)
    grad_bias = upstream.sum(axis=(0, 2, 3))
    return grad_input, grad_weight, grad_bias


def align(
    student: FeaturePyramid, teacher: FeaturePyramid, policy: AlignmentPolicy
) -> tuple[FeaturePyramid, FeaturePyramid]:
    """Pair levels per the policy and return spatially aligned pyramids.

    For each pair the lower-resolution member (whichever model it comes
    from) is upsampled to the other's size.  Aligning already-aligned
    pyramids is the identity.
    """
    if student.b != teacher.b:
        raise AlignmentError(f"batch size mismatch: student {student.b}, teacher {teacher.b}")
    s_out, t_out, s_names, t_names = [], [], [], []
    for si, ti in policy.pairs:
        if not 0 <= si < len(student.levels):
            raise AlignmentError(f"student level index {si} out of range ({len(student.levels)} levels)")
        if not 0 <= ti < len(teacher.levels):
            raise AlignmentError(f"teacher level index {ti} out of range ({len(teacher.levels)} levels)")
        s_lvl, t_lvl = student.levels[si], teacher.levels[ti]
        th, tw = max(s_lvl.h, t_lvl.h), max(s_lvl.w, t_lvl.w)
        s_lvl = upsample_bilinear(s_lvl, th, tw)
        t_lvl = upsample_bilinear(t_lvl, th, tw)
        if policy.channel_rule == "adapter":
            s_lvl = adapter_apply(policy.adapter, s_lvl)
        elif s_lvl.c != t_lvl.c:
            raise AlignmentError(
                f"channel mismatch at pair ({si}, {ti}) "
                f"({student.level_names[si]} vs {teacher.level_names[ti]}): "
                f"student has {s_lvl.c} channels, teacher {t_lvl.c}"
            )
        s_out.append(s_lvl)
        t_out.append(t_lvl)
        s_names.append(student.level_names[si])
        t_names.append(teacher.level_names[ti])
    return (
        FeaturePyramid(tuple(s_out), tuple(s_names)),
        FeaturePyramid(tuple(t_out), tuple(t_names)),
    )
