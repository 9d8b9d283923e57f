"""Command-line front end.

Subcommands: ``generate-data`` (excitation trajectory to CSV),
``check-pe`` (excitation diagnostics on a data file), ``equilibrium``
(optimal reachable equilibrium for the configured target), ``run``
(closed-loop experiment with verification), and ``report`` (plot-series
bundle from a stored log).

Exit codes: 0 success, 1 a check failed, 2 usage, config, or I/O error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import closed_loop, config as config_mod, storage
from .equilibria import optimal_reachable_equilibrium
from .hankel import (DataTrajectory, generate_pe_input,
                     is_persistently_exciting, max_pe_order)
from .plant import simulate

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def _out_dir(args):
    if args.out is not None:
        return Path(args.out)
    env = os.environ.get("DDTMPC_OUT")
    return Path(env) if env else Path(".")


def _say(args, message):
    if not args.quiet:
        print(message)


def _fail(message):
    print(f"error: {message}", file=sys.stderr)
    return EXIT_ERROR


def _load_config(args):
    if args.config is None:
        raise config_mod.ConfigError("--config is required for this command")
    return config_mod.load(args.config)


def cmd_generate_data(args):
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.data_seed
    sys_ = cfg.plant
    u = generate_pe_input(sys_.m, cfg.data_length, bounds=cfg.data_bounds,
                          seed=seed)
    data = DataTrajectory.from_trajectory(
        simulate(sys_, np.zeros(sys_.n), u))
    out = _out_dir(args)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = storage.save_data(
            data, out / "data.csv", seed=seed,
            generator=f"uniform[{cfg.data_bounds[0]},{cfg.data_bounds[1]}]")
    except OSError as err:
        return _fail(f"cannot write to {out}: {err}")
    order = max_pe_order(data.u)
    _say(args, f"wrote {path} ({data.length} samples, m={data.m},"
               f" p={data.p})")
    _say(args, f"max excitation order for this length: {order}")
    return EXIT_OK


def cmd_check_pe(args):
    data, _ = storage.load_data(args.data)
    report = is_persistently_exciting(data.u, args.order)
    required = data.m * args.order
    _say(args, f"order {args.order}: rank {report.rank} of {required}"
               f" required, margin {report.margin:.3e}")
    if report.excited:
        _say(args, "persistently exciting: yes")
        return EXIT_OK
    note = (" (structurally impossible at this length)"
            if report.structurally_impossible else "")
    _say(args, f"persistently exciting: no{note}")
    _say(args, report.detail)
    return EXIT_CHECK_FAILED


def cmd_equilibrium(args):
    cfg = _load_config(args)
    sys_ = cfg.plant
    seed = args.seed if args.seed is not None else cfg.data_seed
    u = generate_pe_input(sys_.m, cfg.data_length, bounds=cfg.data_bounds,
                          seed=seed)
    data = DataTrajectory.from_trajectory(
        simulate(sys_, np.zeros(sys_.n), u))
    ctrl = cfg.controller
    sol = optimal_reachable_equilibrium(
        data, cfg.first_target, ctrl.eq_input_box, ctrl.eq_output_box,
        ctrl.order, s_weight=ctrl.s_mat, t_weight=ctrl.t_mat)
    if not sol.optimal:
        _say(args, f"equilibrium solve failed: {sol.status}")
        return EXIT_CHECK_FAILED
    u_s = np.asarray(sol.u_s)
    y_s = np.asarray(sol.y_s)
    _say(args, f"u_s = {np.array2string(u_s, precision=6)}")
    _say(args, f"y_s = {np.array2string(y_s, precision=6)}")
    _say(args, f"cost = {sol.cost:.6g}")
    out = _out_dir(args)
    try:
        out.mkdir(parents=True, exist_ok=True)
        doc = {"u_s": [float(v) for v in u_s],
               "y_s": [float(v) for v in y_s],
               "cost": float(sol.cost), "status": sol.status}
        (out / "equilibrium.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    except OSError as err:
        return _fail(f"cannot write to {out}: {err}")
    return EXIT_OK


def _write_run_outputs(out, log, metrics, seed, bounds):
    out.mkdir(parents=True, exist_ok=True)
    storage.save_data(log.data, out / "data.csv", seed=seed,
                      generator=f"uniform[{bounds[0]},{bounds[1]}]")
    storage.save_log_csv(log, out / "log.csv")
    jsonl = storage.save_log_jsonl(log, out / "log.jsonl")
    storage.save_metrics(metrics, out / "metrics.json")
    storage.emit_plot_series(storage.load_log_jsonl(jsonl), out / "plots")


def _run_one(args, exp, out, seed, bounds):
    log, metrics = closed_loop.run(exp)
    try:
        _write_run_outputs(out, log, metrics, seed, bounds)
    except OSError as err:
        return _fail(f"cannot write to {out}: {err}"), None
    report = closed_loop.verify_theorem2(log, metrics,
                                         band=exp.settling_band)
    if not args.quiet:
        print(str(report))
        print(f"final error {metrics.final_error:.4e}, settling at"
              f" t={metrics.settling_time}, decay rate"
              f" {metrics.decay.rate:.4f}")
    return (EXIT_OK if report.all_pass else EXIT_CHECK_FAILED), report


def cmd_run(args):
    cfg = _load_config(args)
    out = _out_dir(args)
    if cfg.sweep_seeds is not None:
        results = closed_loop.run_sweep(cfg.sweep_experiments())
        worst = EXIT_OK
        for key, (log, metrics) in results.items():
            sub = out / key
            seed = int(key.split("-", 1)[1])
            try:
                _write_run_outputs(sub, log, metrics, seed, cfg.data_bounds)
            except OSError as err:
                return _fail(f"cannot write to {sub}: {err}")
            report = closed_loop.verify_theorem2(log, metrics,
                                                 band=cfg.settling_band)
            _say(args, f"[{key}] {'pass' if report.all_pass else 'FAIL'}:"
                       f" final error {metrics.final_error:.4e}")
            if not report.all_pass:
                worst = EXIT_CHECK_FAILED
        return worst
    seed = args.seed if args.seed is not None else cfg.data_seed
    exp = cfg.experiment(data_seed=seed)
    code, _ = _run_one(args, exp, out, seed, cfg.data_bounds)
    return code


def cmd_report(args):
    bundle = storage.load_log_jsonl(args.log)
    if not bundle.has_predictions():
        _say(args, "log holds no stored predicted windows; re-run with"
                   " snapshot_times set to the steps you want plotted")
        return EXIT_CHECK_FAILED
    out = _out_dir(args)
    try:
        written = storage.emit_plot_series(bundle, out)
    except OSError as err:
        return _fail(f"cannot write to {out}: {err}")
    _say(args, f"wrote {len(written)} series files to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ddtmpc",
        description="Data-driven tracking MPC toolbox")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config):
        if needs_config:
            p.add_argument("--config", metavar="PATH",
                           help="experiment config file (JSON, comments ok)")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (default: $DDTMPC_OUT or .)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the excitation seed from the config")
        p.add_argument("--quiet", action="store_true",
                       help="suppress informational output")

    p = sub.add_parser("generate-data",
                       help="simulate the excitation experiment, write CSV")
    common(p, needs_config=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("check-pe",
                       help="excitation-order diagnostics on a data file")
    p.add_argument("data", metavar="DATA.csv")
    p.add_argument("--order", type=int, required=True,
                   help="excitation order to verify")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_check_pe)

    p = sub.add_parser("equilibrium",
                       help="solve for the optimal reachable equilibrium")
    common(p, needs_config=True)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("run",
                       help="closed-loop experiment with verification")
    common(p, needs_config=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report",
                       help="emit plot-series files from a stored log")
    p.add_argument("log", metavar="LOG.jsonl")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (config_mod.ConfigError, storage.DataFormatError) as err:
        return _fail(str(err))
    except OSError as err:
        return _fail(str(err))


if __name__ == "__main__":
    sys.exit(main())
