"""Command-line front end: stats, loss evaluation, gradient checks, experiments.

Subcommands
-----------
``stats``     feature-dump diagnostics: stage-profile CSV, per-level
              dominant-channel CSVs, and PGM activation patterns.
``loss``      evaluate a distillation loss between two feature dumps; JSON
              report on stdout, optional gradient dump.
``gradcheck`` verify analytic gradients against central finite differences.
``distill``   run one training experiment from a config file.
``sweep``     distillation-weight sensitivity sweep.
``kl-limit``  high-temperature limit check for the normalized-KL gradient.

Exit codes: 0 ok, 1 failed check, 2 bad input (files, flags, configs),
3 I/O error, 4 diverged run.

Output formats
--------------
Feature dumps are FMP1 binary files (see :mod:`pkdistill.fmap_io`).  Curves
are CSV with one row per step (``step,gt_loss,fpn_loss,total_loss,pcc_<level>...``);
summaries are JSON; activation patterns are binary PGM (P5, maxval 255).
Each experiment directory also gets a gnuplot script (``plot.gp``) so curves
can be rendered without any plotting dependency.  All files are written to a
temp name and renamed into place, so failures never leave partial files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .align import AlignmentPolicy, ChannelAdapter, align, upsample_bilinear
from .analysis import activation_patterns, dominant_channels, stage_magnitude_profile
from .features import FeatureMap, FeaturePyramid, pyramid_summary
from .fmap_io import FmapFormatError, atomic_write_bytes, atomic_write_text, read_fmap, write_fmap
from .gradcheck import central_difference_grad, relative_error
from .harness import (
    DivergenceError,
    alpha_sweep,
    kl_limit_check,
    run_distillation,
)
from .losses import LossConfig, pyramid_loss
from .runconfig import ConfigError, parse_config, default_config_text

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

_CLI_LOSS_NAMES = {"pkd": "pkd", "mse": "masked_mse", "norm-kl": "norm_kl"}


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def _write_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _plot_script(csv_name: str, n_curve_columns: int) -> str:
    lines = [
        "# gnuplot script for the curves next to this file",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 'step'",
    ]
    plots = ", ".join(
        f"'{csv_name}' using 1:{i} with lines" for i in range(2, 2 + n_curve_columns)
    )
    lines.append(f"plot {plots}")
    return "\n".join(lines) + "\n"


def cmd_stats(args) -> int:
    pyr = read_fmap(args.input)
    os.makedirs(args.out, exist_ok=True)
    summary = pyramid_summary(pyr)
    profile = stage_magnitude_profile(pyr)
    rows = ["level,min,max,mean,std,abs_mean,p50_abs,p99_abs,max_abs"]
    for s, p in zip(summary, profile):
        rows.append(
            f"{s['level']},{s['min']!r},{s['max']!r},{s['mean']!r},{s['std']!r},"
            f"{s['abs_mean']!r},{p['p50']!r},{p['p99']!r},{p['max']!r}"
        )
    atomic_write_text(os.path.join(args.out, "stage_profile.csv"), "\n".join(rows) + "\n")
    for name, lvl in zip(pyr.level_names, pyr.levels):
        report = dominant_channels(lvl, name)
        lines = ["rank,channel,count"]
        for rank, ch in enumerate(report.ranking):
            lines.append(f"{rank},{ch},{report.counts[ch]}")
        atomic_write_text(os.path.join(args.out, f"dominant_{name}.csv"), "\n".join(lines) + "\n")
    pattern = activation_patterns(pyr, args.batch_index)
    for name, image in zip(pattern.level_names, pattern.levels):
        _write_pgm(os.path.join(args.out, f"activation_{name}.pgm"), image)
    print(f"wrote stats for {len(pyr.levels)} levels to {args.out}")
    return EXIT_OK


def _parse_pairs(args, student: FeaturePyramid, teacher: FeaturePyramid):
    if args.pair:
        pairs = []
        for spec in args.pair:
            try:
                i, j = spec.split(":")
                pairs.append((int(i), int(j)))
            except ValueError:
                raise ValueError(f"--pair expects i:j, got {spec!r}") from None
        return tuple(pairs)
    if len(student.levels) != len(teacher.levels):
        raise ValueError(
            f"student has {len(student.levels)} levels and teacher "
            f"{len(teacher.levels)}; supply explicit --pair i:j flags"
        )
    return tuple((i, i) for i in range(len(student.levels)))


def _spatial_align(student, teacher, pairs):
    """Upsample the smaller member of each pair; no channel handling."""
    s_out, t_out, s_names, t_names = [], [], [], []
    for si, ti in pairs:
        s_lvl, t_lvl = student.levels[si], teacher.levels[ti]
        th, tw = max(s_lvl.h, t_lvl.h), max(s_lvl.w, t_lvl.w)
        s_out.append(upsample_bilinear(s_lvl, th, tw))
        t_out.append(upsample_bilinear(t_lvl, th, tw))
        s_names.append(student.level_names[si])
        t_names.append(teacher.level_names[ti])
    return (
        FeaturePyramid(tuple(s_out), tuple(s_names)),
        FeaturePyramid(tuple(t_out), tuple(t_names)),
    )


def cmd_loss(args) -> int:
    loss_kind = _CLI_LOSS_NAMES[args.loss]
    if loss_kind == "norm_kl" and args.temperature is None:
        return _fail("--loss norm-kl requires --temperature", EXIT_BAD_INPUT)
    if args.adapter and loss_kind != "masked_mse":
        return _fail("--adapter is the masked-MSE channel bridge; use --loss mse", EXIT_BAD_INPUT)
    student = read_fmap(args.student)
    teacher = read_fmap(args.teacher)
    pairs = _parse_pairs(args, student, teacher)
    adapter = None
    if args.adapter:
        # seeded 1x1 bridge from the student's width to the teacher's
        adapter = ChannelAdapter.initialized(
            student.levels[pairs[0][0]].c, teacher.levels[pairs[0][1]].c, seed=args.seed
        )
        s_al, t_al = _spatial_align(student, teacher, pairs)
    else:
        s_al, t_al = align(student, teacher, AlignmentPolicy(pairs))
    mask = None
    if args.mask:
        mask_pyr = read_fmap(args.mask)
        if len(mask_pyr.levels) != len(s_al.levels):
            return _fail(
                f"mask has {len(mask_pyr.levels)} levels, loss needs {len(s_al.levels)}",
                EXIT_BAD_INPUT,
            )
        mask = tuple(lvl.data[0] for lvl in mask_pyr.levels)  # (c|1, h, w) from b=1 dumps
    cfg = LossConfig(
        loss_kind=loss_kind,
        temperature=args.temperature if args.temperature is not None else 50.0,
        epsilon=args.epsilon,
        mask=mask,
        use_adapter=adapter is not None,
        adapter=adapter,
    )
    result = pyramid_loss(s_al, t_al, cfg)
    per_channel_summary = {
        name: {
            "mean": float(ch.mean()),
            "min": float(ch.min()),
            "max": float(ch.max()),
        }
        for name, ch in zip(s_al.level_names, result.per_channel)
    }
    payload = {
        "loss": args.loss,
        "total": result.total,
        "per_level": {n: float(v) for n, v in zip(s_al.level_names, result.per_level)},
        "per_channel_summary": per_channel_summary,
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.grad_out:
        # gradient w.r.t. the (spatially aligned) student features; the
        # masked-MSE adapter path already chains back through the adapter
        write_fmap(args.grad_out, result.grad)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        b, c, h, w = (int(v) for v in args.size.split(","))
    except ValueError:
        return _fail(f"--size expects b,c,h,w, got {args.size!r}", EXIT_BAD_INPUT)
    if min(b, c, h, w) < 1 or b * h * w < 2:
        return _fail(f"invalid size {args.size!r}: need b,c,h,w >= 1 and b*h*w >= 2", EXIT_BAD_INPUT)
    kinds = ["pkd", "mse", "mse-adapter", "norm-kl"] if args.loss == "all" else [args.loss]
    rng = np.random.default_rng(args.seed)
    tolerance = 1e-4
    all_ok = True
    print(f"gradient check: sizes b={b} c={c} h={h} w={w}, step {args.step}, tol {tolerance}")
    for kind in kinds:
        teacher = FeaturePyramid((FeatureMap(rng.normal(0, 1, (b, c, h, w))),))
        adapter = None
        if kind == "mse-adapter":
            s_channels = c + 1
            adapter = ChannelAdapter.initialized(s_channels, c, seed=args.seed + 1)
        else:
            s_channels = c
        student_data = rng.normal(0, 1, (b, s_channels, h, w))
        cfg = LossConfig(
            loss_kind=_CLI_LOSS_NAMES.get(kind, "masked_mse"),
            temperature=args.temperature,
            use_adapter=adapter is not None,
            adapter=adapter,
        )

        def total_of(data):
            pyr = FeaturePyramid((FeatureMap(data),))
            return pyramid_loss(pyr, teacher, cfg).total

        result = pyramid_loss(FeaturePyramid((FeatureMap(student_data),)), teacher, cfg)
        analytic = result.grad.levels[0].data
        if args.corrupt_gradient:
            analytic = analytic * 1.01 + 1e-3
        numeric = central_difference_grad(total_of, student_data, args.step)
        err = relative_error(analytic, numeric)
        checks = [("student", err)]
        if adapter is not None:
            gw, gb = result.adapter_grads
            if args.corrupt_gradient:
                gw = gw * 1.01 + 1e-3

            def total_of_weight(wt):
                cfg2 = LossConfig(
                    loss_kind="masked_mse",
                    use_adapter=True,
                    adapter=ChannelAdapter(wt, adapter.bias),
                )
                return pyramid_loss(
                    FeaturePyramid((FeatureMap(student_data),)), teacher, cfg2
                ).total

            def total_of_bias(bias):
                cfg2 = LossConfig(
                    loss_kind="masked_mse",
                    use_adapter=True,
                    adapter=ChannelAdapter(adapter.weight, bias),
                )
                return pyramid_loss(
                    FeaturePyramid((FeatureMap(student_data),)), teacher, cfg2
                ).total

            checks.append(
                ("adapter.weight", relative_error(gw, central_difference_grad(total_of_weight, adapter.weight, args.step)))
            )
            checks.append(
                ("adapter.bias", relative_error(gb, central_difference_grad(total_of_bias, adapter.bias, args.step)))
            )
        for target, e in checks:
            ok = e < tolerance
            all_ok &= ok
            print(f"  {kind:<12s} {target:<15s} max_rel_err={e:.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def _load_runconfig(args, expected: str):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    else:
        text = default_config_text(expected)
    run = parse_config(text)
    if run.experiment != expected:
        raise ConfigError(
            f"key 'experiment': config says {run.experiment!r} but the "
            f"{expected!r} command was invoked"
        )
    return run


def _apply_overrides(run, args):
    from dataclasses import replace

    distill = run.distill
    if getattr(args, "alpha", None) is not None:
        distill = replace(distill, alpha=args.alpha)
    if getattr(args, "temperature", None) is not None:
        distill = replace(distill, temperature=args.temperature)
    if getattr(args, "loss", None) is not None:
        distill = replace(distill, loss_kind=_CLI_LOSS_NAMES[args.loss])
    if getattr(args, "seed", None) is not None:
        distill = replace(distill, seed=args.seed)
    out_dir = args.out if args.out else run.out_dir
    return distill, out_dir


def _write_curves(out_dir, report, basename="curves"):
    csv_name = f"{basename}.csv"
    atomic_write_text(os.path.join(out_dir, csv_name), report.to_csv_text())
    n_curves = 3 + len(report.level_names)
    atomic_write_text(os.path.join(out_dir, "plot.gp"), _plot_script(csv_name, n_curves))


def cmd_distill(args) -> int:
    run = _load_runconfig(args, "distill")
    distill, out_dir = _apply_overrides(run, args)
    report = run_distillation(distill)
    os.makedirs(out_dir, exist_ok=True)
    _write_curves(out_dir, report)
    _write_json(os.path.join(out_dir, "summary.json"), report.to_json_dict())
    s = report.summary
    print(
        f"distill[{distill.loss_kind}] alpha={distill.resolved_alpha:g} "
        f"steps={distill.steps} final_mean_pcc={s['final_mean_pcc']:.4f} "
        f"steps_to_pcc_{s['pcc_threshold']:g}={s['steps_to_pcc_threshold']} "
        f"final_gt_loss={s['final_gt_loss']:.6g} out={out_dir}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = _load_runconfig(args, "sweep")
    distill, out_dir = _apply_overrides(run, args)
    sweep = alpha_sweep(distill, run.alphas)
    os.makedirs(out_dir, exist_ok=True)
    lines = ["alpha,final_mean_pcc,final_gt_loss,steps_to_pcc_threshold"]
    for row in sweep.rows():
        lines.append(
            f"{row['alpha']!r},{row['final_mean_pcc']!r},{row['final_gt_loss']!r},"
            f"{row['steps_to_pcc_threshold']}"
        )
    atomic_write_text(os.path.join(out_dir, "alpha_sweep.csv"), "\n".join(lines) + "\n")
    payload = {
        "alphas": list(run.alphas),
        "pcc_spread": sweep.pcc_spread,
        "rows": sweep.rows(),
        "config": distill.echo(),
    }
    _write_json(os.path.join(out_dir, "alpha_sweep.json"), payload)
    print(
        f"sweep[{distill.loss_kind}] alphas={list(run.alphas)} "
        f"pcc_spread={sweep.pcc_spread:.4f} out={out_dir}"
    )
    return EXIT_OK


def cmd_kl_limit(args) -> int:
    run = _load_runconfig(args, "kl_limit")
    out_dir = args.out if args.out else run.out_dir
    seed = args.seed if args.seed is not None else run.distill.seed
    report = kl_limit_check(run.temperatures, seed=seed, m=run.kl_m)
    os.makedirs(out_dir, exist_ok=True)
    lines = ["temperature,gap,gap_times_t"]
    for row in report.rows():
        lines.append(f"{row['temperature']!r},{row['gap']!r},{row['gap_times_t']!r}")
    atomic_write_text(os.path.join(out_dir, "kl_limit.csv"), "\n".join(lines) + "\n")
    _write_json(
        os.path.join(out_dir, "kl_limit.json"),
        {"m": report.m, "seed": report.seed, "rows": report.rows()},
    )
    for row in report.rows():
        print(
            f"T={row['temperature']:<8g} gap={row['gap']:.6e} gap*T={row['gap_times_t']:.6e}"
        )
    print(f"out={out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pkdistill",
        description="Correlation-based feature-imitation distillation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="feature-dump diagnostics (CSV + PGM)")
    p.add_argument("input", help="FMP1 feature dump")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--batch-index", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("loss", help="evaluate a distillation loss between two dumps")
    p.add_argument("student")
    p.add_argument("teacher")
    p.add_argument("--loss", choices=sorted(_CLI_LOSS_NAMES), default="pkd")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--mask", default=None, help="FMP1 mask file (b=1 levels)")
    p.add_argument("--pair", action="append", default=[], metavar="I:J",
                   help="student:teacher level pairing, repeatable")
    p.add_argument("--adapter", action="store_true",
                   help="bridge a channel mismatch with a seeded 1x1 adapter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grad-out", default=None, help="write student gradient as FMP1")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--loss", choices=["pkd", "mse", "mse-adapter", "norm-kl", "all"], default="all")
    p.add_argument("--size", default="2,3,6,5", help="b,c,h,w")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--temperature", type=float, default=20.0)
    p.add_argument("--corrupt-gradient", action="store_true",
                   help="negative control: corrupt the analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    for name, func, help_text in (
        ("distill", cmd_distill, "run one distillation experiment"),
        ("sweep", cmd_sweep, "distillation-weight sensitivity sweep"),
        ("kl-limit", cmd_kl_limit, "high-temperature KL gradient limit check"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None)
        if name != "kl-limit":
            p.add_argument("--loss", choices=sorted(_CLI_LOSS_NAMES), default=None)
            p.add_argument("--alpha", type=float, default=None)
            p.add_argument("--temperature", type=float, default=None)
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FmapFormatError as exc:
        return _fail(str(exc), EXIT_BAD_INPUT)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_BAD_INPUT)
    except DivergenceError as exc:
        return _fail(str(exc), EXIT_DIVERGED)
    except (ValueError, IndexError) as exc:
        return _fail(str(exc), EXIT_BAD_INPUT)
    except OSError as exc:
        return _fail(str(exc), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
