"""Feature-imitation losses over pyramids, with analytic student gradients.

Three interchangeable losses:

* ``pkd`` -- one minus the Pearson correlation of each student/teacher
  channel pair, computed over the channel's m = b*h*w values.  Bounded in
  [0, 2], invariant under positive per-channel affine transforms of either
  side, and insensitive to magnitude mismatch between models, stages, and
  channels.
* ``masked_mse`` -- the classic weighted squared-error feature imitation,
  optionally through a 1x1 channel adapter when widths differ.
* ``norm_kl`` -- temperature-softmax KL divergence between the standardized
  channel values; in the high-temperature limit its gradient approaches the
  normalized-MSE gradient (and hence the correlation loss up to scale).

Per-channel losses are averaged over channels, then over levels; gradients
are with respect to the student features only (the teacher is a constant)
and are exact derivatives of the returned total, including the paths through
the per-channel mean and standard deviation.  All reductions run in float64
with a fixed summation order, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentError, ChannelAdapter, adapter_apply
from .features import (
    DEFAULT_EPSILON,
    ChannelSample,
    FeatureMap,
    FeaturePyramid,
    channel_sample,
)

__all__ = [
    "DegenerateMaskError",
    "LossConfig",
    "LossResult",
    "pcc",
    "pkd_channel_loss",
    "pkd_pyramid_loss",
    "masked_mse_loss",
    "norm_kl_loss",
    "kl_divergence_normalized",
    "pyramid_loss",
    "pyramid_pcc",
    "total_loss",
]

LOSS_KINDS = ("pkd", "masked_mse", "norm_kl")

# Default distillation weight by teacher family: 6 behind a two-stage-style
# teacher, 10 behind a one-stage-style one.
DEFAULT_ALPHA_TWO_STAGE = 6.0
DEFAULT_ALPHA_ONE_STAGE = 10.0


class DegenerateMaskError(ValueError):
    """An imitation mask sums to zero on some level, leaving nothing to fit."""


@dataclass(frozen=True, eq=False)
class LossConfig:
    """Configuration shared by the pyramid losses.

    ``mask`` is an optional per-level sequence of non-negative weight maps of
    shape (c, h, w) or (1, h, w), used by ``masked_mse`` only (omitting it
    means all-ones).  ``adapter`` bridges a student/teacher channel mismatch
    for ``masked_mse`` when ``use_adapter`` is set; the correlation loss
    needs no adapter.
    """

    loss_kind: str = "pkd"
    alpha: float = DEFAULT_ALPHA_TWO_STAGE
    temperature: float = 50.0
    epsilon: float = DEFAULT_EPSILON
    channel_aggregation: str = "mean"
    level_aggregation: str = "mean"
    mask: tuple[np.ndarray, ...] | None = None
    use_adapter: bool = False
    adapter: ChannelAdapter | None = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.loss_kind == "norm_kl" and not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.channel_aggregation != "mean" or self.level_aggregation != "mean":
            raise ValueError("only mean aggregation is supported")
        if self.use_adapter and self.adapter is None:
            raise ValueError("use_adapter is set but no adapter was supplied")
        if self.mask is not None:
            masks = []
            for i, m in enumerate(self.mask):
                m = np.array(m, dtype=np.float64)
                if m.ndim != 3:
                    raise ValueError(f"mask for level {i} must be 3-D (c|1, h, w), got {m.shape}")
                if not np.isfinite(m).all() or (m < 0).any():
                    raise ValueError(f"mask for level {i} must be finite and non-negative")
                m.flags.writeable = False
                masks.append(m)
            object.__setattr__(self, "mask", tuple(masks))


@dataclass(frozen=True, eq=False)
class LossResult:
    """A scalar loss with its per-level / per-channel breakdown and gradient.

    ``total`` is the mean of ``per_level``; each per-level value is the mean
    of its per-channel values.  ``grad`` is d(total)/d(student features) and
    matches the student pyramid's shape; ``adapter_grads`` is (d_weight,
    d_bias) when a channel adapter participated.
    """

    total: float
    per_level: np.ndarray
    per_channel: tuple[np.ndarray, ...]
    grad: FeaturePyramid
    adapter_grads: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        per_level = np.array(self.per_level, dtype=np.float64)
        per_channel = tuple(np.array(c, dtype=np.float64) for c in self.per_channel)
        if len(per_channel) != per_level.size or per_level.size != len(self.grad.levels):
            raise ValueError("per-level, per-channel, and gradient level counts disagree")
        if abs(self.total - per_level.mean()) > 1e-9:
            raise ValueError("total does not equal the mean of per-level losses")
        for lvl, chans in zip(per_level, per_channel):
            if abs(lvl - chans.mean()) > 1e-9:
                raise ValueError("a per-level loss does not equal the mean of its channels")
        per_level.flags.writeable = False
        for c in per_channel:
            c.flags.writeable = False
        object.__setattr__(self, "per_level", per_level)
        object.__setattr__(self, "per_channel", per_channel)


def pcc(s: ChannelSample, t: ChannelSample, epsilon: float = DEFAULT_EPSILON) -> float:
    """Pearson correlation coefficient of two equally sized channel samples.

    r = sum((s - mu_s)(t - mu_t)) / (||s - mu_s|| * ||t - mu_t|| + epsilon).

    The epsilon on the denominator product makes a constant channel yield
    r = 0 instead of 0/0, and keeps |r| < 1 for every finite input.
    """
    if s.m != t.m:
        raise ValueError(f"sample length mismatch: {s.m} vs {t.m}")
    ds = s.values - s.mean
    dt = t.values - t.mean
    denom = np.sqrt(ds @ ds) * np.sqrt(dt @ dt) + epsilon
    return float((ds @ dt) / denom)


def pkd_channel_loss(
    s: ChannelSample, t: ChannelSample, epsilon: float = DEFAULT_EPSILON
) -> tuple[float, np.ndarray]:
    """Correlation loss 1 - r for one channel pair, with its student gradient.

    The gradient is the full derivative of 1 - r through the student's mean
    and Bessel-corrected std:

        d(1 - r)/ds_i = (r * s_hat_i - t_hat_i) / ((m - 1) * sigma_s)

    with sigma regularized by epsilon (both here and inside the normalized
    values).  The teacher receives no gradient.  Loss values lie in [0, 2]:
    0 when the pair is perfectly positively correlated, 2 when perfectly
    anti-correlated, and exactly 1 for a constant channel on either side.
    """
    r = pcc(s, t, epsilon)
    s_hat = (s.values - s.mean) / (s.std + epsilon)
    t_hat = (t.values - t.mean) / (t.std + epsilon)
    grad = (r * s_hat - t_hat) / ((s.m - 1) * (s.std + epsilon))
    return 1.0 - r, grad


def kl_divergence_normalized(
    s_hat: np.ndarray, t_hat: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Temperature-scaled KL divergence between two standardized vectors.

    Both vectors are turned into distributions with a temperature softmax
    (max-subtracted, so it never overflows); the loss is
    T^2 * sum(p * log(p / q)) with p from the teacher and q from the
    student.  Returns the loss and its gradient with respect to ``s_hat``,
    which is T * (q - p); for T large against the values' magnitude this
    gradient approaches (s_hat - t_hat) / m.
    """
    s_hat = np.asarray(s_hat, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    if s_hat.shape != t_hat.shape:
        raise ValueError(f"shape mismatch: {s_hat.shape} vs {t_hat.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    def log_softmax(z):
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    log_q = log_softmax(s_hat / temperature)
    log_p = log_softmax(t_hat / temperature)
    p = np.exp(log_p)
    q = np.exp(log_q)
    loss = temperature**2 * float(p @ (log_p - log_q))
    grad = temperature * (q - p)
    return loss, grad


def _check_paired_levels(student: FeaturePyramid, teacher: FeaturePyramid, *, channels: bool):
    if len(student.levels) != len(teacher.levels):
        raise AlignmentError(
            f"level count mismatch: student has {len(student.levels)}, "
            f"teacher {len(teacher.levels)}; run align() first"
        )
    for i, (s_lvl, t_lvl) in enumerate(zip(student.levels, teacher.levels)):
        name = student.level_names[i]
        if s_lvl.b != t_lvl.b or s_lvl.h != t_lvl.h or s_lvl.w != t_lvl.w:
            raise AlignmentError(
                f"shape mismatch at level {i} ({name}): student {s_lvl!r} vs teacher {t_lvl!r}"
            )
        if channels and s_lvl.c != t_lvl.c:
            raise AlignmentError(
                f"channel mismatch at level {i} ({name}): {s_lvl.c} vs {t_lvl.c}"
            )


def _assemble(student, per_level, per_channel, grad_levels, adapter_grads=None) -> LossResult:
    per_level = np.asarray(per_level, dtype=np.float64)
    grad = FeaturePyramid(tuple(FeatureMap(g) for g in grad_levels), student.level_names)
    return LossResult(
        total=float(per_level.mean()),
        per_level=per_level,
        per_channel=tuple(per_channel),
        grad=grad,
        adapter_grads=adapter_grads,
    )


def pkd_pyramid_loss(
    student: FeaturePyramid, teacher: FeaturePyramid, cfg: LossConfig
) -> LossResult:
    """Correlation loss averaged over channels then levels, with gradient.

    Pyramids must already be aligned (equal level counts and per-level
    shapes).  The gradient of the total is the per-channel gradient scaled
    by 1 / (levels * channels).
    """
    _check_paired_levels(student, teacher, channels=True)
    n_levels = len(student.levels)
    per_level, per_channel, grad_levels = [], [], []
    for s_lvl, t_lvl in zip(student.levels, teacher.levels):
        losses = np.empty(s_lvl.c)
        grad = np.empty_like(s_lvl.data)
        for c in range(s_lvl.c):
            loss_c, grad_c = pkd_channel_loss(
                channel_sample(s_lvl, c), channel_sample(t_lvl, c), cfg.epsilon
            )
            losses[c] = loss_c
            grad[:, c] = grad_c.reshape(s_lvl.b, s_lvl.h, s_lvl.w)
        grad /= n_levels * s_lvl.c
        per_channel.append(losses)
        per_level.append(losses.mean())
        grad_levels.append(grad)
    return _assemble(student, per_level, per_channel, grad_levels)


def masked_mse_loss(
    student: FeaturePyramid, teacher: FeaturePyramid, cfg: LossConfig
) -> LossResult:
    """Weighted squared-error imitation, normalized by the mask mass.

    Per level: sum(M * (t - a(s))^2) / sum(M), where M broadcasts over the
    batch and a() is the identity or the configured 1x1 adapter.  Channel
    breakdown entries are scaled so their mean reproduces the level loss.
    When the adapter participates, its parameter gradients are returned in
    ``adapter_grads`` (it is trained jointly with the student).
    """
    _check_paired_levels(student, teacher, channels=not cfg.use_adapter)
    if cfg.mask is not None and len(cfg.mask) != len(student.levels):
        raise ValueError(
            f"{len(cfg.mask)} masks for {len(student.levels)} levels"
        )
    n_levels = len(student.levels)
    per_level, per_channel, grad_levels = [], [], []
    grad_w = grad_b = None
    if cfg.use_adapter:
        grad_w = np.zeros_like(cfg.adapter.weight)
        grad_b = np.zeros_like(cfg.adapter.bias)
    for i, (s_lvl, t_lvl) in enumerate(zip(student.levels, teacher.levels)):
        name = student.level_names[i]
        adapted = adapter_apply(cfg.adapter, s_lvl).data if cfg.use_adapter else s_lvl.data
        if adapted.shape[1] != t_lvl.c:
            raise AlignmentError(
                f"channel mismatch at level {i} ({name}): "
                f"adapted student has {adapted.shape[1]} channels, teacher {t_lvl.c}"
            )
        diff = adapted - t_lvl.data
        if cfg.mask is not None:
            m = cfg.mask[i]
            if m.shape[0] not in (1, t_lvl.c) or m.shape[1:] != (t_lvl.h, t_lvl.w):
                raise ValueError(
                    f"mask shape {m.shape} incompatible with level {i} ({name}) "
                    f"shape ({t_lvl.c}, {t_lvl.h}, {t_lvl.w})"
                )
            mask = np.broadcast_to(m[None], diff.shape)
        else:
            mask = np.ones_like(diff)
        n_sites = float(mask.sum())
        if n_sites == 0:
            raise DegenerateMaskError(f"mask at level {i} ({name}) sums to zero")
        weighted_sq = mask * diff * diff
        channel_sums = weighted_sq.sum(axis=(0, 2, 3))
        per_level.append(channel_sums.sum() / n_sites)
        per_channel.append(t_lvl.c * channel_sums / n_sites)
        upstream = (2.0 / (n_levels * n_sites)) * mask * diff
        if cfg.use_adapter:
            grad_levels.append(np.einsum("oi,bohw->bihw", cfg.adapter.weight, upstream))
            grad_w += np.einsum("bohw,bihw->oi", upstream, s_lvl.data)
            grad_b += upstream.sum(axis=(0, 2, 3))
        else:
            grad_levels.append(upstream)
    adapter_grads = (grad_w, grad_b) if cfg.use_adapter else None
    return _assemble(student, per_level, per_channel, grad_levels, adapter_grads)


def norm_kl_loss(
    student: FeaturePyramid, teacher: FeaturePyramid, cfg: LossConfig
) -> LossResult:
    """Temperature-KL loss between standardized channels, with gradient.

    Each channel pair is standardized over its m values, softened by the
    temperature softmax, and scored with T^2 * KL(teacher || student).  The
    student gradient chains exactly through the standardization (mean and
    std are functions of the student values).  Aggregation matches the
    correlation loss: mean over channels, then over levels.
    """
    _check_paired_levels(student, teacher, channels=True)
    n_levels = len(student.levels)
    eps = cfg.epsilon
    per_level, per_channel, grad_levels = [], [], []
    for s_lvl, t_lvl in zip(student.levels, teacher.levels):
        losses = np.empty(s_lvl.c)
        grad = np.empty_like(s_lvl.data)
        for c in range(s_lvl.c):
            s_smp = channel_sample(s_lvl, c)
            t_smp = channel_sample(t_lvl, c)
            sig = s_smp.std + eps
            s_hat = (s_smp.values - s_smp.mean) / sig
            t_hat = (t_smp.values - t_smp.mean) / (t_smp.std + eps)
            loss_c, g_hat = kl_divergence_normalized(s_hat, t_hat, cfg.temperature)
            # chain rule through (s - mean) / (std + eps)
            grad_c = (g_hat - g_hat.mean()) / sig - s_hat * (g_hat @ s_hat) / ((s_smp.m - 1) * sig)
            losses[c] = loss_c
            grad[:, c] = grad_c.reshape(s_lvl.b, s_lvl.h, s_lvl.w)
        grad /= n_levels * s_lvl.c
        per_channel.append(losses)
        per_level.append(losses.mean())
        grad_levels.append(grad)
    return _assemble(student, per_level, per_channel, grad_levels)


def pyramid_loss(student: FeaturePyramid, teacher: FeaturePyramid, cfg: LossConfig) -> LossResult:
    """Dispatch to the configured loss kind."""
    if cfg.loss_kind == "pkd":
        return pkd_pyramid_loss(student, teacher, cfg)
    if cfg.loss_kind == "masked_mse":
        return masked_mse_loss(student, teacher, cfg)
    return norm_kl_loss(student, teacher, cfg)


def pyramid_pcc(
    student: FeaturePyramid, teacher: FeaturePyramid, epsilon: float = DEFAULT_EPSILON
) -> np.ndarray:
    """Channel-mean Pearson correlation per level (diagnostic, no gradient)."""
    _check_paired_levels(student, teacher, channels=True)
    out = np.empty(len(student.levels))
    for i, (s_lvl, t_lvl) in enumerate(zip(student.levels, teacher.levels)):
        rs = [
            pcc(channel_sample(s_lvl, c), channel_sample(t_lvl, c), epsilon)
            for c in range(s_lvl.c)
        ]
        out[i] = np.mean(rs)
    return out


def total_loss(gt_loss: float, fpn: LossResult, alpha: float) -> float:
    """Combined training objective: task loss plus alpha times imitation loss."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return float(gt_loss) + alpha * fpn.total
