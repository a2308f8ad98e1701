"""Command-line front end: one experiment per invocation.

Output is a tab-separated table preceded by ``# key: value`` metadata lines
that echo the resolved configuration. Exit codes: 0 all checks pass, 1 a
check failed, 2 usage or configuration error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import geometry, kernel, maximal, process
from .core import check_matrix_estimates, lyapunov_residual_of
from .errors import ConfigParse, ModelInvalid, NumericalError, OULabError
from .modelfile import (as_bool, as_choice, as_float, as_function, as_int, as_list,
                        as_optional, as_points, build_function, model_from_spec,
                        resolve_config, validate_params)
from .reports import IdentityCheck

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclass
class CommandResult:
    columns: list
    rows: list
    passed: bool = True
    meta: dict = field(default_factory=dict)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_artifact(fh, config, status, result=None, error=None):
    fh.write(f"# command: {config.command}\n")
    fh.write(f"# seed: {config.seed}\n")
    fh.write(f"# status: {status}\n")
    fh.write("# config: " + json.dumps(_jsonable(config.resolved()), sort_keys=True) + "\n")
    if error is not None:
        fh.write("# error: " + json.dumps(error, sort_keys=True) + "\n")
    if result is None:
        return
    for k, v in result.meta.items():
        fh.write(f"# {k}: " + json.dumps(_jsonable(v), sort_keys=True) + "\n")
    fh.write("\t".join(result.columns) + "\n")
    for row in result.rows:
        fh.write("\t".join(_fmt(v) for v in row) + "\n")


# -- commands ----------------------------------------------------------------------

def _report_rows(reports):
    rows = []
    for r in reports:
        if isinstance(r, IdentityCheck):
            rows.append((r.claim_id, "identity", r.sample_count, math.nan, math.nan,
                         r.max_error, r.passed))
        else:
            rows.append((r.claim_id, r.kind, r.sample_count, r.fitted_c, r.fitted_C,
                         math.nan, r.passed))
    return rows


REPORT_COLUMNS = ["claim_id", "kind", "sample_count", "fitted_c", "fitted_C",
                  "max_error", "passed"]


def cmd_model_check(model, p, cfg):
    reports = check_matrix_estimates(model, directions=p["directions"], seed=cfg.seed)
    reports += geometry.derivative_identities_check(model, count=p["identity_count"],
                                                    seed=cfg.seed)
    rows = _report_rows(reports)
    return CommandResult(REPORT_COLUMNS, rows, all(r[-1] for r in rows),
                         {"Q_inf": model.Q_inf,
                          "lyapunov_residual": lyapunov_residual_of(model)})


def cmd_kernel(model, p, cfg):
    n = model.n
    rows = []
    for t in p["t"]:
        for x in p["x"]:
            for u in p["u"]:
                k = kernel.mehler_log_kernel(model, t, np.array(x), np.array(u))
                rows.append((t, *x, *u, float(k.log_value), float(k.value)))
    cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(n)]
    return CommandResult(cols + ["log_K", "K"], rows)


def cmd_semigroup(model, p, cfg):
    f = build_function(model, p["function"])
    X = np.array(p["x"])
    rows = []
    for t in p["t"]:
        res = kernel.apply_semigroup(model, t, f, X, route=p["route"], count=p["count"],
                                     seed=cfg.seed, rtol=p["rtol"])
        for x, v, e in zip(X, res.value, res.error):
            rows.append((t, *x, v, e))
    cols = ["t"] + [f"x{i + 1}" for i in range(model.n)] + ["value", "error"]
    return CommandResult(cols, rows, meta={"route": p["route"],
                                           "l1_norm": f.l1_norm(model)})


def cmd_polar(model, p, cfg):
    X = np.array(p["points"])
    pp = geometry.polar_decompose(model, p["beta"], X)
    back = geometry.polar_compose(model, pp.s, pp.x_tilde)
    err = np.linalg.norm(back - X, axis=1) / np.linalg.norm(X, axis=1)
    n = model.n
    rows = [(*x, s, *xt, e) for x, s, xt, e in zip(X, pp.s, pp.x_tilde, err)]
    cols = ([f"x{i + 1}" for i in range(n)] + ["s"]
            + [f"x_tilde{i + 1}" for i in range(n)] + ["roundtrip_error"])
    return CommandResult(cols, rows, bool(np.all(err <= 1e-9)))


def cmd_tube(model, p, cfg):
    rep, ests = geometry.tube_bound_report(
        model, betas=p["betas"], aperture=p["aperture"], direction=p["direction"],
        mc_count=p["mc_count"], seed=cfg.seed)
    rows = [(e_beta, e.measure_hat, e.std_error, e.hits, e.sample_count)
            for e_beta, e in zip(p["betas"], ests)]
    return CommandResult(["beta", "measure_hat", "std_error", "hits", "sample_count"],
                         rows, rep.passed,
                         {"claim_id": rep.claim_id, "fitted_C": rep.fitted_C,
                          "end_slopes": rep.end_slopes})


def cmd_bounds(model, p, cfg):
    spec = kernel.SampleSpec(count=p["samples"], seed=cfg.seed)
    reports = check_matrix_estimates(model, seed=cfg.seed)
    reports += kernel.check_kernel_bounds_small_t(model, spec)
    reports += kernel.check_kernel_bounds_large_t(model, spec.with_(t_range=(1.0, 20.0)))
    reports += kernel.check_global_small_t_bound(model, p["alpha"], spec)
    reports += geometry.distance_bounds_check(model, p["beta"], count=p["samples"],
                                              seed=cfg.seed)
    reports.append(geometry.tube_bound_report(model, betas=p["tube_betas"],
                                              mc_count=p["tube_mc_count"],
                                              seed=cfg.seed)[0])
    reports.append(geometry.annulus_complement_report(model))
    rows = _report_rows(reports)
    return CommandResult(REPORT_COLUMNS, rows, all(r[-1] for r in rows))


def _scan_result(rep, extra_meta=None):
    cols = list(maximal.ScanReport.COLUMNS)
    meta = {"claim_id": rep.claim_id, "slopes": rep.slopes,
            "max_statistic": rep.max_statistic, "grid": rep.grid}
    meta.update(extra_meta or {})
    return CommandResult(cols, rep.table(), rep.passed, meta)


def cmd_weaktype(model, p, cfg):
    fam = maximal.weaktype_family(model, p["centers"])
    rep = maximal.weaktype_scan(model, fam, p["alpha_grid"], p["mc_budget"], cfg.seed,
                                variant=p["variant"], workers=cfg.workers,
                                min_hits=p["min_hits"])
    return _scan_result(rep)


def cmd_refine_large_t(model, p, cfg):
    fam = maximal.large_t_family(model, p["direction"], p["flow_times"])
    rep = maximal.large_t_refinement_scan(model, fam, p["alpha_grid"], p["mc_budget"],
                                          cfg.seed, workers=cfg.workers,
                                          min_hits=p["min_hits"])
    return _scan_result(rep)


def cmd_sharpness(model, p, cfg):
    rep = maximal.sharpness_scan(model, p["t"], p["alpha_grid"], p["mc_count"], cfg.seed,
                                 band=(p["band_low"], p["band_high"]),
                                 direction=p["direction"])
    return _scan_result(rep, {"c0": rep.rows[0]["c0"],
                              "widths": [r["width"] for r in rep.rows]})


def _default_masses(model, alpha):
    la = math.log(alpha)
    n = model.n
    d1 = np.eye(n)[0]
    d2 = np.eye(n)[-1] - 0.3 * d1 if n > 1 else -d1
    return [(maximal.level_point(model, la + 1, d1), 0.5),
            (maximal.level_point(model, la + 1, d2), 0.5)]


def cmd_zones(model, p, cfg):
    if p["masses"] is None:
        masses = _default_masses(model, p["alpha"])
    else:
        masses = [(np.array(pt), w) for pt, w in zip(p["masses"], p["weights"])]
    rows, meta, ok = [], {}, True
    for m in p["m"]:
        run = maximal.forbidden_zone_construct(
            model, masses, p["alpha"], m=m, A=p["A"], M=p["M"],
            grid_step=p["grid_step"], max_zones=p["max_zones"])
        ok &= run.passed
        meta[f"m{m}"] = {"zones": run.zone_count, "level_set_size": run.level_set_size,
                         "terminated": run.terminated, "checks": run.checks}
        for ell in range(run.zone_count):
            rows.append((m, ell + 1, *run.points[ell], run.times[ell],
                         *run.ball_centers[ell], run.ball_radii[ell]))
    n = model.n
    cols = (["m", "ell"] + [f"x{i + 1}" for i in range(n)] + ["t"]
            + [f"ball_c{i + 1}" for i in range(n)] + ["ball_radius"])
    meta["masses"] = [[pt, w] for pt, w in masses]
    return CommandResult(cols, rows, ok, meta)


def _sim_rows(model, res, x0, T):
    rows = []
    mean_exp = model.expm(T) @ x0
    cov_exp = model.qt(T)
    se_m = res.mean_std_error()
    se_c = res.cov_std_error()
    n = model.n
    for i in range(n):
        z = (res.mean[i] - mean_exp[i]) / se_m[i]
        rows.append((T, res.spec.step, f"mean{i + 1}", res.mean[i], mean_exp[i], se_m[i],
                     z, abs(z) <= 4))
    for i in range(n):
        for j in range(i, n):
            z = (res.cov[i, j] - cov_exp[i, j]) / se_c[i, j]
            rows.append((T, res.spec.step, f"cov{i + 1}{j + 1}", res.cov[i, j],
                         cov_exp[i, j], se_c[i, j], z, abs(z) <= 4))
    return rows


def cmd_simulate(model, p, cfg):
    x0 = np.array(p["x0"][0])
    rows = []
    dump = None
    for k, T in enumerate(p["horizons"]):
        h = min(T, 1.0) / p["steps_per_unit"] if p["step"] is None else p["step"]
        hs = [h]
        if p["h_check"]:
            hs = [min(T, 1.0), min(T, 1.0) / 10, min(T, 1.0) / 100]
        for j, hh in enumerate(hs):
            spec = process.PathSpec(x0, T, hh, p["path_count"], seed=[cfg.seed, k, j])
            res = process.simulate_exact(model, spec, workers=cfg.workers)
            rows += _sim_rows(model, res, x0, T)
    if p["dump"]:
        spec = process.PathSpec(x0, p["horizons"][0], min(p["horizons"][0], 1.0)
                                / p["steps_per_unit"], p["dump_paths"], cfg.seed)
        res = process.simulate_exact(model, spec, keep_paths=True)
        with open(p["dump"], "w") as fh:
            process.write_paths(res, fh)
        dump = p["dump"]
    cols = ["T", "h", "statistic", "empirical", "expected", "std_error", "z", "pass"]
    return CommandResult(cols, rows, all(r[-1] for r in rows),
                         {"path_dump": dump} if dump else {})


def _schemas(n):
    alpha_grid = (as_list(as_float("alpha", 1, strict_lo=True), "alpha_grid"),
                  [1e2, 1e3, 1e4])
    direction = (as_optional(lambda v: as_points("direction", n)(v)[0]), None)
    return {
        "model-check": {"directions": (as_int("directions", 1), 256),
                        "identity_count": (as_int("identity_count", 1), 1000)},
        "kernel": {"t": (as_list(as_float("t", 0, strict_lo=True), "t"), [1.0]),
                   "x": (as_points("x", n), [[0.0] * n]),
                   "u": (as_points("u", n), [[0.0] * n])},
        "semigroup": {"function": (as_function("function", n),
                                   {"kind": "constant", "value": 1.0}),
                      "t": (as_list(as_float("t", 0, strict_lo=True), "t"), [1.0]),
                      "x": (as_points("x", n), [[0.0] * n]),
                      "route": (as_choice("route", kernel.ROUTES), "kolmogorov_quadrature"),
                      "count": (as_int("count", 2), 100_000),
                      "rtol": (as_float("rtol", 0, strict_lo=True), 1e-6)},
        "polar": {"beta": (as_float("beta", 0, strict_lo=True), 1.0),
                  "points": (as_points("points", n), [[1.0] + [0.0] * (n - 1)])},
        "tube": {"betas": (as_list(as_float("beta", geometry.BETA_MIN), "betas", 2),
                           [4.0, 6.0, 9.0, 12.0]),
                 "aperture": (as_float("aperture", 0, strict_lo=True), 0.5),
                 "direction": direction,
                 "mc_count": (as_int("mc_count", 10_000), 100_000)},
        "bounds": {"samples": (as_int("samples", 100), 10_000),
                   "alpha": (as_float("alpha", math.e, strict_lo=True), 1e3),
                   "beta": (as_float("beta", 0, strict_lo=True), 4.0),
                   "tube_betas": (as_list(as_float("beta", geometry.BETA_MIN),
                                          "tube_betas", 2), [4.0, 6.0, 9.0, 12.0]),
                   "tube_mc_count": (as_int("tube_mc_count", 10_000), 100_000)},
        "weaktype": {"alpha_grid": alpha_grid,
                     "mc_budget": (as_int("mc_budget", 1000), 100_000),
                     "centers": (as_optional(as_points("centers", n)), None),
                     "variant": (as_choice("variant", ("full", "local", "global")),
                                 "full"),
                     "min_hits": (as_int("min_hits", 1), 100)},
        "refine-large-t": {"alpha_grid": (as_list(as_float("alpha", 10), "alpha_grid"),
                                          [1e2, 1e3, 1e4]),
                           "mc_budget": (as_int("mc_budget", 1000), 100_000),
                           "direction": direction,
                           "flow_times": (as_list(as_float("flow_time", 0, strict_lo=True),
                                                  "flow_times"), [1.5, 3.0]),
                           "min_hits": (as_int("min_hits", 1), 100)},
        "sharpness": {"t": (as_float("t", 1, strict_lo=True), 2.0),
                      "alpha_grid": (as_list(as_float("alpha", 100), "alpha_grid"),
                                     [1e2, 1e3, 1e4]),
                      "mc_count": (as_int("mc_count", 1000), 100_000),
                      "band_low": (as_float("band_low", 0, strict_lo=True), 1 / 20),
                      "band_high": (as_float("band_high", 0, strict_lo=True), 20.0),
                      "direction": direction},
        "zones": {"alpha": (as_float("alpha", math.e, strict_lo=True), 1e2),
                  "m": (as_list(as_int("m", 0), "m"), [0, 1]),
                  "A": (as_float("A", 0, strict_lo=True), 8.0),
                  "M": (as_float("M", 0, strict_lo=True), 4.0),
                  "masses": (as_optional(as_points("masses", n)), None),
                  "weights": (as_optional(as_list(as_float("weight", 0), "weights")),
                              None),
                  "grid_step": (as_float("grid_step", 0, strict_lo=True), 0.02),
                  "max_zones": (as_int("max_zones", 1), 1000)},
        "simulate": {"x0": (as_points("x0", n), [[0.0] * n]),
                     "horizons": (as_list(as_float("horizon", 0, strict_lo=True),
                                          "horizons"), [0.5, 2.0]),
                     "step": (as_optional(as_float("step", 0, 1, strict_lo=True)), None),
                     "steps_per_unit": (as_int("steps_per_unit", 1), 10),
                     "path_count": (as_int("path_count", 2), 1_000_000),
                     "h_check": (as_bool("h_check"), False),
                     "dump": (as_optional(str), None),
                     "dump_paths": (as_int("dump_paths", 1), 10)},
    }


COMMANDS = {"model-check": cmd_model_check, "kernel": cmd_kernel,
            "semigroup": cmd_semigroup, "polar": cmd_polar, "tube": cmd_tube,
            "bounds": cmd_bounds, "weaktype": cmd_weaktype,
            "refine-large-t": cmd_refine_large_t, "sharpness": cmd_sharpness,
            "zones": cmd_zones, "simulate": cmd_simulate}


def _cross_checks(command, p):
    if command == "zones" and p["masses"] is not None:
        if p["weights"] is None or len(p["weights"]) != len(p["masses"]):
            raise ConfigParse("zones needs one weight per mass")
        if not math.isclose(sum(p["weights"]), 1.0, rel_tol=1e-9):
            raise ConfigParse("zone weights must sum to 1")
    if command == "simulate" and p["step"] is not None:
        for T in p["horizons"]:
            k = T / p["step"]
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ConfigParse("each horizon must be a multiple of step")
    if command == "sharpness" and not p["band_low"] < p["band_high"]:
        raise ConfigParse("band_low must be below band_high")


def run(config):
    """Validate, dispatch and return ``(exit_code, result)``."""
    if config.command not in COMMANDS:
        raise ConfigParse(f"unknown command {config.command!r}; "
                          f"choose from {sorted(COMMANDS)}")
    model = model_from_spec(config.model)
    params = validate_params(config.params, _schemas(model.n)[config.command],
                             config.command)
    _cross_checks(config.command, params)
    config.params = params
    result = COMMANDS[config.command](model, params, config)
    return (EXIT_PASS if result.passed else EXIT_FAIL), result


def _error_record(exc):
    return {"type": type(exc).__name__, "message": str(exc)}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="oulab", description="Ornstein-Uhlenbeck semigroup experiments.")
    parser.add_argument("--config", required=True, help="experiment YAML file")
    parser.add_argument("--command", choices=sorted(COMMANDS),
                        help="override the command in the config")
    parser.add_argument("--seed", type=int, help="64-bit seed")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("--out", help="output table (default: stdout)")
    args = parser.parse_args(argv)

    try:
        config = resolve_config(args.config, args.command, args.seed, args.workers,
                                args.out)
    except (ConfigParse, ValueError) as exc:
        print(json.dumps({"status": "ERROR", **_error_record(exc)}), file=sys.stderr)
        return EXIT_CONFIG

    result, error = None, None
    try:
        code, result = run(config)
        status = "PASS" if code == EXIT_PASS else "FAIL"
    except (ConfigParse, ModelInvalid) as exc:
        code, status, error = EXIT_CONFIG, "ERROR", _error_record(exc)
    except NumericalError as exc:
        code, status, error = EXIT_NUMERICAL, "ERROR", _error_record(exc)
    except (OULabError, ValueError) as exc:
        code, status, error = EXIT_CONFIG, "ERROR", _error_record(exc)

    buf = io.StringIO()
    write_artifact(buf, config, status, result, error)
    if config.out:
        with open(config.out, "w") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if error is not None:
        print(json.dumps({"status": status, **error}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
