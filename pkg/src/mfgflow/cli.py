"""Command line entry point: ``mfgflow run|audit|gamma|oracle``."""

import argparse
import csv
from dataclasses import asdict
import io
import json
import os
import sys

import numpy as np
import yaml

from . import __version__
from .config import build_measure, build_model, leaf_keys, load_config, solver_settings
from .errors import ConfigError, MfgFlowError

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2


# --------------------------------------------------------------------------
# emission helpers


def header_lines(config):
    return [f"mfgflow {__version__}", f"config_hash: {config.digest}", f"seed: {config.seed}"]


def header_dict(config):
    return {"tool": "mfgflow", "version": __version__, "config_hash": config.digest, "seed": config.seed}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, config, columns, rows):
    buf = io.StringIO()
    for line in header_lines(config):
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else str(v)
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def write_json(path, config, body):
    doc = {"header": header_dict(config)}
    doc.update(body)
    with open(path, "w") as fh:
        json.dump(_plain(doc), fh, indent=2)
        fh.write("\n")


def write_text(path, config, text):
    with open(path, "w") as fh:
        for line in header_lines(config):
            fh.write(f"# {line}\n")
        fh.write(text.rstrip("\n") + "\n")


def _output_dir(config):
    path = config["outputs"]["directory"]
    os.makedirs(path, exist_ok=True)
    return path


def _kept_nodes(n_nodes, stride):
    nodes = list(range(0, n_nodes, stride))
    if nodes[-1] != n_nodes - 1:
        nodes.append(n_nodes - 1)
    return nodes


def _trajectory_rows(solution, stride):
    t = solution.times()
    n = solution.n_points
    for k in _kept_nodes(t.size, stride):
        for i in range(solution.X.shape[1]):
            role = "point" if i < n else "probe"
            yield (t[k], i, role, solution.X[k, i], solution.Z[k, i], solution.alpha[k, i])


def _plot_rows(model, solution, stride):
    from .master import _node_moments

    t = solution.times()
    mass = solution.first_moments()
    cone = solution.cone_margins().min(axis=1)
    growth = solution.growth_margins().min(axis=1)
    M = _node_moments(solution)[..., None]
    foc = np.abs(model.raw("drift_a", solution.X, M, solution.alpha) * solution.Z
                 + model.raw("running_a", solution.X, M, solution.alpha)).max(axis=1)
    for k in _kept_nodes(t.size, stride):
        yield (t[k], mass[k], cone[k], growth[k], foc[k])


# --------------------------------------------------------------------------
# subcommands


def _audit_files(config, model, out, cascade=None):
    from .verify import audit_assumptions

    report = audit_assumptions(model, config["checks"]["audit_samples"], cascade=cascade)
    write_text(os.path.join(out, "audit.txt"), config, report.to_text())
    write_json(os.path.join(out, "audit.json"), config, report.as_dict())
    return report


def run(config, log=print):
    """Solve, check and emit; returns the exit status."""
    from .master import dxV_discrepancies, value_record
    from .solver import nash_gap, solve_global
    from .verify import compute_cascade

    out = _output_dir(config)
    emit = config["outputs"]["emit"]
    stride = config["outputs"]["stride"]
    model = build_model(config)
    mu = build_measure(config)
    settings = solver_settings(config)
    h = config["horizon"]
    resolved = config.as_dict()
    resolved["outputs"].pop("directory")  # the hash ignores it, so the outputs do too
    diagnostics = {"status": "ok", "config": resolved, "settings": asdict(settings)}
    status = EXIT_OK
    try:
        cascade = compute_cascade(model)
        diagnostics["cascade"] = cascade.as_dict()
        solution = solve_global(model, cascade, mu, h["t0"], h["T"], config["solver"]["dt"], settings)
        gap = nash_gap(model, solution)
        diagnostics["solve"] = {
            "grid_steps": solution.grid.n_steps,
            "picard_iterations": solution.picard_iterations,
            "interval_boundaries": solution.interval_boundaries,
            "interface_rounds": solution.interface_rounds,
            "interface_mismatch": solution.interface_mismatch,
            "terminal_residual": solution.terminal_residual,
            "nash_gap": gap,
            "cone_violations": solution.cone_violations(),
            "min_cone_margin": float(solution.cone_margins().min()),
            "min_growth_margin": float(solution.growth_margins().min()),
        }
        if solution.n_probes:
            d = dxV_discrepancies(model, solution, step=config["checks"]["fd_step"])
            diagnostics["dxV_vs_Z"] = {"max": float(d.max()), "per_probe": d}
        if config["checks"]["value_record"]:
            rec = value_record(model, solution)
            diagnostics["value_record"] = rec.as_dict()
    except MfgFlowError as err:
        status = EXIT_FAILURE
        diagnostics["status"] = "failed"
        diagnostics["error"] = {"type": type(err).__name__, "message": str(err)}
        solution = None
    if "diagnostics" in emit:
        write_json(os.path.join(out, "diagnostics.json"), config, diagnostics)
    if solution is not None:
        if "trajectories" in emit:
            write_csv(os.path.join(out, "trajectories.csv"), config,
                      ["s", "id", "kind", "X_1", "Z_1", "alpha_1"], _trajectory_rows(solution, stride))
        if "plotdata" in emit:
            write_csv(os.path.join(out, "plotdata.csv"), config,
                      ["t", "first_moment", "min_cone_margin", "min_growth_margin", "foc_residual"],
                      _plot_rows(model, solution, stride))
    if "audit" in emit:
        report = _audit_files(config, model, out)
        if not report.passed and status == EXIT_OK:
            status = EXIT_FAILURE
    if status == EXIT_OK:
        s = diagnostics["solve"]
        log(f"ok: terminal_residual={s['terminal_residual']:.3g} nash_gap={s['nash_gap']:.3g} "
            f"cone_violations={s['cone_violations']} -> {out}")
    else:
        log(f"solver failure: {diagnostics.get('error', {}).get('message', 'audit failed')}")
    return status


def audit(config, log=print):
    model = build_model(config)
    report = _audit_files(config, model, _output_dir(config))
    log(report.to_text())
    return EXIT_OK if report.passed else EXIT_FAILURE


def gamma(config, lower, upper, count, at=None, log=print):
    """Tabulate the decoupling field on a uniform probe grid at time ``at``."""
    from .solver import eval_gamma
    from .verify import compute_cascade

    model = build_model(config)
    mu = build_measure(config).without_probes()
    h = config["horizon"]
    t = h["t0"] if at is None else at
    xs = np.linspace(lower, upper, count)
    try:
        values = eval_gamma(model, compute_cascade(model), t, xs, mu, h["T"], config["solver"]["dt"],
                            solver_settings(config))
    except MfgFlowError as err:
        log(f"solver failure: {err}")
        return EXIT_FAILURE
    out = _output_dir(config)
    write_csv(os.path.join(out, "gamma.csv"), config, ["t", "x", "gamma"], ((t, x, g) for x, g in zip(xs, values)))
    log(f"ok: {count} values -> {out}")
    return EXIT_OK


def oracle_rows(x0s, horizons, dt):
    """Closed-form LQ trajectories: X = Z = x0 exp(-(s - t)), V = x0^2 / 2."""
    for T in horizons:
        n = int(round(T / dt))
        s = np.linspace(0.0, T, n + 1)
        for x0 in x0s:
            path = x0 * np.exp(-s)
            for k in range(n + 1):
                yield (T, x0, s[k], path[k], path[k], -path[k], 0.5 * x0 * x0)


def oracle(config, x0s, horizons, dt, log=print):
    out = _output_dir(config)
    write_csv(os.path.join(out, "lq_oracle.csv"), config, ["T", "x0", "s", "X", "Z", "alpha", "V"],
              oracle_rows(x0s, horizons, dt))
    log(f"ok: oracle table -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _flag_value(text):
    return yaml.safe_load(text)


def _parser():
    parser = argparse.ArgumentParser(prog="mfgflow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mfgflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        for key in leaf_keys():
            p.add_argument(f"--{key}", dest=f"set:{key}", type=_flag_value, default=argparse.SUPPRESS,
                           metavar="VALUE")
        return p

    common(sub.add_parser("run", help="solve, check and write outputs"))
    common(sub.add_parser("audit", help="audit the model's structural assumptions"))
    g = common(sub.add_parser("gamma", help="tabulate the decoupling field on a probe grid"))
    g.add_argument("--grid", nargs=3, type=float, metavar=("LOWER", "UPPER", "COUNT"), default=(-2.0, 2.0, 41))
    g.add_argument("--at", type=float, default=None, help="evaluation time (default: horizon.t0)")
    o = common(sub.add_parser("oracle", help="closed-form LQ tables for test fixtures"))
    o.add_argument("--x0", nargs="+", type=float, default=[-2.0, -1.0, 0.5, 1.0, 3.0])
    o.add_argument("--horizons", nargs="+", type=float, default=[0.5, 1.0, 5.0])
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:")}
    try:
        config = load_config(args.config, overrides)
        if args.command == "run":
            return run(config)
        if args.command == "audit":
            return audit(config)
        if args.command == "gamma":
            lower, upper, count = args.grid
            return gamma(config, lower, upper, int(count), args.at)
        return oracle(config, args.x0, args.horizons, config["solver"]["dt"])
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
