"""Flat key/value experiment config files.

One ``key = value`` pair per line; blank lines and ``#`` comments are
ignored.  Unknown or duplicate keys are rejected by name.  The only required
key is ``experiment``; everything else has a default.

Documented keys::

    experiment              distill | sweep | kl_limit        (required)
    loss                    pkd | masked_mse | norm_kl        [pkd]
    alpha                   float >= 0; omitted -> 6 for a two_stage-style
                            teacher, 10 for a one_stage-style one
    temperature             float > 0                         [50]
    epsilon                 float > 0                          [1e-8]
    steps                   int >= 1                           [500]
    batch                   int >= 1                           [2]
    input_channels          int >= 1                           [2]
    input_size              int, multiple of 2**len(stage_channels)  [24]
    stage_channels          comma-separated ints               [8,12,16]
    lateral_channels        int >= 1                           [6]
    lr                      float > 0                          [0.04]
    momentum                float in [0, 1)                    [0.9]
    weight_decay            float >= 0                         [1e-4]
    clip_grad_norm          float; <= 0 disables clipping      [5]
    seed                    int >= 0 (master seed)             [0]
    teacher_seed            int (default derived from seed)
    student_seed            int (default derived from seed)
    data_seed               int (default derived from seed)
    teacher_style           two_stage | one_stage              [one_stage]
    teacher_level_scales    comma-separated floats, one per level
    teacher_stage_boosts    comma-separated floats, one per level
    teacher_channel_boosts  idx:mult[,idx:mult...]
    teacher_noise_std       float >= 0                         [0]
    alphas                  comma-separated floats (sweep)     [3,5,8,10,13]
    temperatures            comma floats ascending (kl_limit)  [10,50,100]
    kl_m                    int >= 2 (kl_limit sample size)    [256]
    out_dir                 output directory                   [runs/<experiment>]
"""

from __future__ import annotations

from dataclasses import dataclass

from .harness import (
    DEFAULT_SWEEP_ALPHAS,
    DistillConfig,
    PathologyConfig,
)

__all__ = ["ConfigError", "RunConfig", "parse_config", "default_config_text", "EXPERIMENTS"]

EXPERIMENTS = ("distill", "sweep", "kl_limit")


class ConfigError(ValueError):
    """A config file is invalid; the message names the offending key."""


def _parse_int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected an integer, got {value!r}") from None


def _parse_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a number, got {value!r}") from None


def _parse_float_list(key, value):
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated numbers, got {value!r}") from None


def _parse_int_list(key, value):
    try:
        return tuple(int(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated integers, got {value!r}") from None


def _parse_channel_boosts(key, value):
    boosts = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            idx, mult = part.split(":")
            boosts.append((int(idx), float(mult)))
        except ValueError:
            raise ConfigError(
                f"key {key!r}: expected idx:mult pairs, got {part!r}"
            ) from None
    return tuple(boosts)


_PARSERS = {
    "experiment": lambda k, v: v,
    "loss": lambda k, v: v,
    "alpha": _parse_float,
    "temperature": _parse_float,
    "epsilon": _parse_float,
    "steps": _parse_int,
    "batch": _parse_int,
    "input_channels": _parse_int,
    "input_size": _parse_int,
    "stage_channels": _parse_int_list,
    "lateral_channels": _parse_int,
    "lr": _parse_float,
    "momentum": _parse_float,
    "weight_decay": _parse_float,
    "clip_grad_norm": _parse_float,
    "seed": _parse_int,
    "teacher_seed": _parse_int,
    "student_seed": _parse_int,
    "data_seed": _parse_int,
    "teacher_style": lambda k, v: v,
    "teacher_level_scales": _parse_float_list,
    "teacher_stage_boosts": _parse_float_list,
    "teacher_channel_boosts": _parse_channel_boosts,
    "teacher_noise_std": _parse_float,
    "alphas": _parse_float_list,
    "temperatures": _parse_float_list,
    "kl_m": _parse_int,
    "out_dir": lambda k, v: v,
}

KNOWN_KEYS = frozenset(_PARSERS)


@dataclass(frozen=True)
class RunConfig:
    """A parsed, validated experiment config."""

    experiment: str
    distill: DistillConfig
    alphas: tuple[float, ...]
    temperatures: tuple[float, ...]
    kl_m: int
    out_dir: str


def parse_config(text: str) -> RunConfig:
    """Parse config text; raises ConfigError naming any offending key."""
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        if key in raw:
            raise ConfigError(f"duplicate config key: {key!r}")
        raw[key] = _PARSERS[key](key, value)
    if "experiment" not in raw:
        raise ConfigError("missing required key: 'experiment'")
    experiment = raw.pop("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"key 'experiment': must be one of {EXPERIMENTS}, got {experiment!r}")

    alphas = raw.pop("alphas", DEFAULT_SWEEP_ALPHAS)
    temperatures = raw.pop("temperatures", (10.0, 50.0, 100.0))
    kl_m = raw.pop("kl_m", 256)
    out_dir = raw.pop("out_dir", f"runs/{experiment}")

    pathology_kwargs = {}
    if "teacher_level_scales" in raw:
        pathology_kwargs["level_scales"] = raw.pop("teacher_level_scales")
    if "teacher_stage_boosts" in raw:
        pathology_kwargs["stage_boosts"] = raw.pop("teacher_stage_boosts")
    if "teacher_channel_boosts" in raw:
        pathology_kwargs["channel_boosts"] = raw.pop("teacher_channel_boosts")
    if "teacher_noise_std" in raw:
        pathology_kwargs["noise_std"] = raw.pop("teacher_noise_std")
    if "loss" in raw:
        raw["loss_kind"] = raw.pop("loss")
    try:
        distill = DistillConfig(pathology=PathologyConfig(**pathology_kwargs), **raw)
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc
    if kl_m < 2:
        raise ConfigError(f"key 'kl_m': must be >= 2, got {kl_m}")
    return RunConfig(
        experiment=experiment,
        distill=distill,
        alphas=alphas,
        temperatures=temperatures,
        kl_m=kl_m,
        out_dir=out_dir,
    )


DEFAULT_CONFIG_TEXTS = {
    "distill": """\
# Default distillation run: correlation loss, clean teacher.
experiment = distill
loss = pkd
steps = 500
seed = 0
""",
    "sweep": """\
# Default distillation-weight sensitivity sweep.
experiment = sweep
loss = pkd
steps = 500
seed = 0
alphas = 3,5,8,10,13
""",
    "kl_limit": """\
# Default high-temperature limit check for the normalized-KL gradient.
experiment = kl_limit
seed = 0
temperatures = 10,50,100
kl_m = 256
""",
}


def default_config_text(experiment: str) -> str:
    if experiment not in DEFAULT_CONFIG_TEXTS:
        raise ValueError(f"no default config for {experiment!r}")
    return DEFAULT_CONFIG_TEXTS[experiment]
