"""``nfresnet`` command line: spp, gamma, moments, gradcheck, train-demo, config.

Exit codes: 0 success, 1 usage error, 2 validation failure or signal collapse.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--config", help="model config JSON; explicit flags override its fields")
    g.add_argument("--model", choices=("nf-resnet", "bn-resnet", "nf-regnet"))
    g.add_argument("--variant", help="NF-RegNet variant B0..B5 (default B0)")
    g.add_argument("--depths", type=_int_list,
                   help="blocks per stage, e.g. 3,4,6,3, or a named ResNet depth such as 50")
    g.add_argument("--widths", type=_int_list, help="output channels per stage")
    g.add_argument("--alpha", type=float)
    g.add_argument("--ordering", help="bn-resnet ordering: bn-relu-conv or relu-bn-conv")
    g.add_argument("--no-ws", action="store_true", help="plain He-initialized convs")
    g.add_argument("--width-scale", type=float)
    g.add_argument("--activation", choices=("relu", "silu", "tanh", "identity"))
    g.add_argument("--num-classes", type=int)
    g.add_argument("--dtype", choices=("single", "double"))
    p.add_argument("--seed", type=int, default=0)


def resolve_config(args):
    """Model config from ``--config`` and/or flags. Flags win over the file."""
    from .models import RESNET_DEPTHS, ModelConfig, nf_regnet_config, resnet_config

    depths = args.depths
    if depths and len(depths) == 1 and depths[0] in RESNET_DEPTHS:
        depths = list(RESNET_DEPTHS[depths[0]])
    if args.config:
        if args.width_scale is not None or args.variant:
            raise UsageError("--width-scale and --variant cannot be combined with --config")
        base = ModelConfig.from_json(args.config).to_dict()
        if args.model:
            base["model"] = args.model
    else:
        scale = args.width_scale if args.width_scale is not None else 1.0
        kind = args.model or "nf-resnet"
        if kind == "nf-regnet":
            cfg = nf_regnet_config(args.variant or "B0", scale, args.seed)
        else:
            if args.variant:
                raise UsageError("--variant only applies to nf-regnet")
            if args.widths is None and depths and len(depths) > 4:
                raise UsageError("--widths is required for more than four stages")
            cfg = resnet_config(None, scale, model=kind, stage_depths=depths or RESNET_DEPTHS[50],
                                stage_widths=args.widths)
        base = cfg.to_dict()
    overrides = {
        "stage_depths": depths,
        "stage_widths": args.widths,
        "alpha": args.alpha,
        "activation": args.activation,
        "num_classes": args.num_classes,
        "dtype": args.dtype,
        "ordering": args.ordering,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    if args.no_ws:
        base["use_scaled_ws"] = False
    base["seed"] = args.seed
    return ModelConfig.from_dict(base)


# -- subcommands ------------------------------------------------------------------------


def cmd_spp(args):
    from .models import build_model, force_skipinit_gains
    from .spp import emit, fit_stage_growth, generate_spp

    cfg = resolve_config(args)
    model = build_model(cfg)
    if args.skipinit_gain is not None:
        force_skipinit_gains(model, args.skipinit_gain)
    records = generate_spp(model, (args.batch, args.res, args.res, cfg.in_channels), args.seed)
    fmt = args.format or _format_from_path(args.out) or "csv"
    if args.out:
        emit(records, fmt, args.out)
    else:
        from .spp import records_to_csv, records_to_json
        if fmt == "svg":
            raise UsageError("svg output needs --out")
        sys.stdout.write(records_to_csv(records) if fmt == "csv" else records_to_json(records) + "\n")
    resid = np.mean([r.residual_var for r in records])
    print(f"blocks={len(records)} mean_residual_var={resid:.6f}", file=sys.stderr)
    if model.is_nf:
        report = fit_stage_growth(records, alpha=cfg.alpha * args.skipinit_gain)
        print(f"max_relative_ledger_error={report.max_relative_ledger_error:.6f}", file=sys.stderr)
    return 0


def _format_from_path(path):
    if not path:
        return None
    ext = os.path.splitext(path)[1].lower().lstrip(".")
    return ext if ext in ("csv", "json", "svg") else None


def cmd_gamma(args):
    from .scaled_ws import estimate_activation_std

    sigma = estimate_activation_std(args.activation, args.dim, args.samples, args.seed)
    gamma = 1.0 / sigma
    if args.json:
        print(json.dumps({"activation": args.activation, "sigma_g": sigma, "gamma": gamma,
                          "dim": args.dim, "samples": args.samples, "seed": args.seed}))
    else:
        print(f"sigma_g {sigma:.6f}")
        print(f"gamma {gamma:.6f}")
    return 0


def cmd_moments(args):
    from .scaled_ws import check_moments

    rng = np.random.default_rng(args.seed)
    W = rng.normal(rng.normal(0.0, 0.5), 1.0, (args.units, args.fan_in))
    check = check_moments(W, args.activation, args.samples, rng=args.seed + 1)
    for i in range(W.shape[0]):
        print(f"unit {i}: mean pred {check.predicted.mean[i]:.5f} mc {check.mc_mean[i]:.5f} "
              f"z {check.z_mean[i]:+.2f} | var pred {check.predicted.var[i]:.5f} "
              f"mc {check.mc_var[i]:.5f} z {check.z_var[i]:+.2f}")
    print(f"max_z {check.max_z:.4f}")
    if args.max_z is not None and check.max_z > args.max_z:
        print(f"max z-score exceeds {args.max_z}", file=sys.stderr)
        return 2
    return 0


def cmd_gradcheck(args):
    from .checks import check_op, op_cases, run_model_check

    failed = []
    if args.scope == "op":
        for name, (fn, params) in op_cases(args.seed).items():
            report = check_op(name, fn, params, args.seed, fd_step=args.fd_step, tolerance=args.tol)
            print(f"{name:28s} max_rel_err {report.max_error:.3e} {'ok' if report.passed else 'FAIL'}")
            if not report.passed:
                failed.append(name)
    else:
        report = run_model_check(args.seed, fd_step=args.fd_step, tolerance=args.tol)
        for name, err in report.errors.items():
            print(f"{name:36s} max_rel_err {err:.3e} {'ok' if err <= args.tol else 'FAIL'}")
        print(f"model max_rel_err {report.max_error:.3e} (floor {report.floor:.2e})")
        failed = list(report.failures)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_train_demo(args):
    from .training import TaskConfig, demo_model_config, train_demo, write_loss_csv
    from .spp import emit

    if args.config or args.model:
        cfg = resolve_config(args)
        if args.num_classes is None:
            cfg = type(cfg).from_dict({**cfg.to_dict(), "num_classes": args.classes})
    else:
        cfg = demo_model_config(args.seed, args.classes)
    task = TaskConfig(args.classes, args.samples, args.res, args.batch, seed=args.seed)
    result = train_demo(cfg, task, args.steps, args.lr, args.momentum,
                        spp_batch=(16, args.res, args.res, cfg.in_channels))
    write_loss_csv(result.losses, args.loss_out)
    emit(result.spp, _format_from_path(args.spp_out) or "csv", args.spp_out)
    print(f"initial_loss {result.initial_loss:.6f}")
    print(f"final_loss {result.final_loss:.6f}")
    print(f"halved {result.halved}")
    return 0


def cmd_config(args):
    cfg = resolve_config(args)
    text = cfg.to_json()
    if args.out:
        cfg.to_json(args.out)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nfresnet", description="Normalizer-free ResNet signal propagation tools")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("spp", help="signal propagation statistics at initialization")
    _add_model_args(p)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", help="output path; stdout when omitted")
    p.add_argument("--format", choices=("csv", "json", "svg"))
    p.add_argument("--skipinit-gain", type=float, default=1.0,
                   help="value forced onto every skipinit gain; 0 keeps every block the identity")
    p.set_defaults(func=cmd_spp)

    p = sub.add_parser("gamma", help="estimate sigma_g and the gain gamma")
    p.add_argument("--activation", default="relu", choices=("relu", "silu", "tanh", "identity"))
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gamma)

    p = sub.add_parser("moments", help="fixed-W moment predictions against Monte Carlo")
    p.add_argument("--activation", default="relu", choices=("relu", "silu", "tanh", "identity"))
    p.add_argument("--units", type=int, default=4)
    p.add_argument("--fan-in", type=int, default=8)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-z", type=float, help="exit 2 when any z-score exceeds this")
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("gradcheck", help="central-difference gradient checks")
    p.add_argument("--scope", choices=("op", "model"), default="op")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-demo", help="train on the synthetic task")
    _add_model_args(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--res", type=int, default=16)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--loss-out", default="loss.csv")
    p.add_argument("--spp-out", default="spp_after_training.csv")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("config", help="print the resolved model config as JSON")
    _add_model_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)
    return parser


def _thread_cap():
    """BLAS thread limit from ``NF_THREADS``; numpy is already loaded, so env vars would be too late."""
    from contextlib import nullcontext

    from threadpoolctl import threadpool_limits

    cap = os.environ.get("NF_THREADS")
    if not cap:
        return nullcontext()
    try:
        return threadpool_limits(limits=max(1, int(cap)))
    except ValueError:
        raise UsageError(f"NF_THREADS must be an integer, got {cap!r}") from None


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from .blocks import SignalCollapseError
    from .training import NonFiniteLossError

    try:
        with _thread_cap():
            return args.func(args)
    except UsageError as err:
        print(f"nfresnet: error: {err}", file=sys.stderr)
        return 1
    except (SignalCollapseError, NonFiniteLossError, FloatingPointError) as err:
        print(f"nfresnet: collapse: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"nfresnet: invalid input: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
