"""Minimal multi-scale convolutional nets with manual forward/backward.

A ToyNet is a chain of 3x3 stride-2 ReLU conv stages, a 1x1 lateral
projection per stage onto a common channel width (the pyramid levels, finest
first), and one shared 1x1 head mapping each level to a single dense output
channel.  It is just big enough to exhibit multi-scale structure while every
gradient stays checkable against finite differences.

Backward accepts gradients injected at two points: the pyramid outputs
(imitation losses) and the head outputs (task loss); both paths accumulate
into the same parameter gradients.  Training state is single-writer: a
forward cache is tied to the parameter version that produced it and goes
stale after an optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMap, FeaturePyramid

__all__ = [
    "ToyNetSpec",
    "ToyNet",
    "ForwardPass",
    "SyntheticBatch",
    "forward",
    "backward",
    "sgd_step",
]


@dataclass(frozen=True)
class ToyNetSpec:
    """Architecture: input width, per-stage conv widths, lateral width."""

    in_channels: int = 2
    stage_channels: tuple[int, ...] = (8, 12, 16)
    lateral_channels: int = 8

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) < 1:
            raise ValueError("need at least one conv stage")
        if self.in_channels < 1 or self.lateral_channels < 1 or min(self.stage_channels) < 1:
            raise ValueError("all channel counts must be >= 1")

    @property
    def n_levels(self) -> int:
        return len(self.stage_channels)


@dataclass(eq=False)
class SyntheticBatch:
    """One training batch: inputs plus per-level dense regression targets."""

    inputs: np.ndarray  # (b, c0, h, w)
    targets: tuple[np.ndarray, ...]  # per level, (b, 1, h_l, w_l)


class ToyNet:
    """Parameter store for the toy detector; see module docstring."""

    def __init__(self, spec: ToyNetSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.velocity: dict[str, np.ndarray] = {}
        self._version = 0

    @classmethod
    def initialized(cls, seed, spec: ToyNetSpec) -> "ToyNet":
        """He-style init (weight std sqrt(2/fan_in), zero bias), seeded.

        Identical seeds give bitwise-identical parameters; the draw order is
        stages, then laterals, then the head.
        """
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        c_prev = spec.in_channels
        for i, c_out in enumerate(spec.stage_channels):
            fan_in = c_prev * 9
            params[f"stage{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_prev, 3, 3))
            params[f"stage{i}.bias"] = np.zeros(c_out)
            c_prev = c_out
        for i, c_stage in enumerate(spec.stage_channels):
            params[f"lateral{i}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / c_stage), (spec.lateral_channels, c_stage)
            )
            params[f"lateral{i}.bias"] = np.zeros(spec.lateral_channels)
        params["head.weight"] = rng.normal(
            0.0, np.sqrt(2.0 / spec.lateral_channels), (1, spec.lateral_channels)
        )
        params["head.bias"] = np.zeros(1)
        return cls(spec, params)

    def param_bytes(self) -> bytes:
        """Concatenated parameter bytes in key order, for hashing/freezing checks."""
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))


def _conv3x3_s2_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """3x3 stride-2 conv, zero padding 1.  Returns (out, patch cache)."""
    b, _, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, x.shape[1], 3, 3, ho, wo))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + 2 * ho - 1 : 2, kx : kx + 2 * wo - 1 : 2]
    out = np.einsum("ocyx,bcyxhw->bohw", weight, cols, optimize=True)
    out += bias[None, :, None, None]
    return out, cols


def _conv3x3_s2_backward(grad_out, cols, weight, in_shape):
    grad_w = np.einsum("bohw,bcyxhw->ocyx", grad_out, cols, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_cols = np.einsum("ocyx,bohw->bcyxhw", weight, grad_out, optimize=True)
    b, c, h, w = in_shape
    ho, wo = grad_out.shape[2:]
    gxp = np.zeros((b, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            gxp[:, :, ky : ky + 2 * ho - 1 : 2, kx : kx + 2 * wo - 1 : 2] += grad_cols[:, :, ky, kx]
    return grad_w, grad_b, gxp[:, :, 1:-1, 1:-1]


def _conv1x1_forward(x, weight, bias):
    out = np.einsum("oi,bihw->bohw", weight, x)
    out += bias[None, :, None, None]
    return out


def _conv1x1_backward(grad_out, x, weight):
    grad_w = np.einsum("bohw,bihw->oi", grad_out, x)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = np.einsum("oi,bohw->bihw", weight, grad_out)
    return grad_w, grad_b, grad_x


@dataclass(eq=False)
class ForwardPass:
    """Outputs of one forward evaluation plus the cache backward needs."""

    pyramid: FeaturePyramid
    head_outputs: tuple[np.ndarray, ...]
    stage_pre: tuple[np.ndarray, ...]
    stage_act: tuple[np.ndarray, ...]
    stage_cols: tuple[np.ndarray, ...]
    level_raw: tuple[np.ndarray, ...]
    inputs: np.ndarray
    version: int


def forward(net: ToyNet, inputs: np.ndarray) -> ForwardPass:
    """Run the net on a (b, in_channels, h, w) batch.

    Deterministic; pyramid levels are ordered finest to coarsest, halving
    per stage, and are emitted as an immutable FeaturePyramid.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != net.spec.in_channels:
        raise ValueError(
            f"inputs must be (b, {net.spec.in_channels}, h, w), got {x.shape}"
        )
    stage_pre, stage_act, stage_cols = [], [], []
    a = x
    for i in range(net.spec.n_levels):
        z, cols = _conv3x3_s2_forward(a, net.params[f"stage{i}.weight"], net.params[f"stage{i}.bias"])
        a = np.maximum(z, 0.0)
        stage_pre.append(z)
        stage_act.append(a)
        stage_cols.append(cols)
    level_raw = [
        _conv1x1_forward(stage_act[i], net.params[f"lateral{i}.weight"], net.params[f"lateral{i}.bias"])
        for i in range(net.spec.n_levels)
    ]
    head_outputs = tuple(
        _conv1x1_forward(p, net.params["head.weight"], net.params["head.bias"]) for p in level_raw
    )
    pyramid = FeaturePyramid(tuple(FeatureMap(p) for p in level_raw))
    return ForwardPass(
        pyramid=pyramid,
        head_outputs=head_outputs,
        stage_pre=tuple(stage_pre),
        stage_act=tuple(stage_act),
        stage_cols=tuple(stage_cols),
        level_raw=tuple(level_raw),
        inputs=x,
        version=net._version,
    )


def backward(
    net: ToyNet,
    fwd: ForwardPass,
    pyramid_grads=None,
    head_grads=None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients from the two injection points.

    ``pyramid_grads`` are d(loss)/d(level features) per level (a sequence of
    arrays or a FeaturePyramid); ``head_grads`` are d(loss)/d(head outputs).
    Either may be None.  Raises if the cache predates the current parameters.
    """
    if fwd.version != net._version:
        raise RuntimeError(
            "stale forward cache: parameters changed since this forward pass"
        )
    if isinstance(pyramid_grads, FeaturePyramid):
        pyramid_grads = [lvl.data for lvl in pyramid_grads.levels]
    k = net.spec.n_levels
    grads = {name: np.zeros_like(p) for name, p in net.params.items()}
    act_grads = [np.zeros_like(a) for a in fwd.stage_act]
    for i in range(k):
        g_level = np.zeros_like(fwd.level_raw[i])
        if pyramid_grads is not None and pyramid_grads[i] is not None:
            g_level = g_level + np.asarray(pyramid_grads[i], dtype=np.float64)
        if head_grads is not None and head_grads[i] is not None:
            gw, gb, gx = _conv1x1_backward(
                np.asarray(head_grads[i], dtype=np.float64), fwd.level_raw[i], net.params["head.weight"]
            )
            grads["head.weight"] += gw
            grads["head.bias"] += gb
            g_level = g_level + gx
        gw, gb, gx = _conv1x1_backward(g_level, fwd.stage_act[i], net.params[f"lateral{i}.weight"])
        grads[f"lateral{i}.weight"] += gw
        grads[f"lateral{i}.bias"] += gb
        act_grads[i] += gx
    for i in range(k - 1, -1, -1):
        gz = act_grads[i] * (fwd.stage_pre[i] > 0)
        in_shape = fwd.inputs.shape if i == 0 else fwd.stage_act[i - 1].shape
        gw, gb, gx = _conv3x3_s2_backward(gz, fwd.stage_cols[i], net.params[f"stage{i}.weight"], in_shape)
        grads[f"stage{i}.weight"] += gw
        grads[f"stage{i}.bias"] += gb
        if i > 0:
            act_grads[i - 1] += gx
    return grads


def sgd_step(
    net: ToyNet,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """Standard SGD with momentum: v = mu*v + (g + wd*p); p -= lr*v.

    Mutates the net in place and invalidates outstanding forward caches.
    """
    for name, p in net.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        g = g + weight_decay * p
        v = net.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g
        net.velocity[name] = v
        p -= lr * v
    net._version += 1
