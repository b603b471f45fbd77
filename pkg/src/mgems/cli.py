"""Command-line entry points: run, complexity-sweep, forecast-eval, validate.

Exit codes: 0 success, 2 solver failure in any requested run, 3 configuration
error (no report is written in that case). ``EMS_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .assembler import build_layout
from .ems import ALL_MODES, EmsMode, Microgrid, daily_energy_cap, run_simulation, write_trace_csv
from .forecast import ForecastError, evaluate_forecasts
from .netmodel import NetworkError
from .scenario import ConfigError, builtin_case, from_dict, make_profile_set, to_dict

log = logging.getLogger("mgems")

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_CONFIG = 3

SWEEP_CASES = ("10bus", "18bus", "33bus")
SWEEP_HORIZONS = (6, 12, 24)


def report_schema() -> dict:
    """JSON schema shared by run, complexity-sweep and forecast-eval reports."""
    return json.loads(resources.files("mgems.data").joinpath("report_schema.json").read_text())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def parse_dt(text: str) -> float:
    """Decision step in hours from '1h', '5min', '300s' or a bare number of hours."""
    t = text.strip().lower()
    try:
        for suffix, scale in (("min", 1 / 60), ("h", 1.0), ("s", 1 / 3600)):
            if t.endswith(suffix):
                val = float(t[: -len(suffix)]) * scale
                break
        else:
            val = float(t)
    except ValueError:
        raise ConfigError(f"--dt-d: cannot parse {text!r}") from None
    if val <= 0:
        raise ConfigError("--dt-d: must be positive")
    return val


def parse_modes(text: str) -> list[EmsMode]:
    if text.strip().lower() == "all":
        return list(ALL_MODES)
    out = []
    for tok in text.split(","):
        try:
            out.append(EmsMode.parse(tok.strip()))
        except ValueError as exc:
            raise ConfigError(f"--modes: {exc}") from None
    return out


def resolve_config(args):
    """Scenario from --builtin or --scenario with the --seed and --dt-d overrides applied."""
    if bool(args.builtin) == bool(args.scenario):
        raise ConfigError("give exactly one of --builtin or --scenario")
    if args.builtin:
        seed = args.seed if args.seed is not None else 7
        _, cfg = builtin_case(args.builtin, seed)
    else:
        try:
            data = json.loads(Path(args.scenario).read_text())
        except OSError as exc:
            raise ConfigError(f"--scenario: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.scenario}: not valid JSON ({exc})") from None
        if args.seed is not None and isinstance(data, dict):
            data["rng_seed"] = args.seed
        cfg = from_dict(data)
    hz = cfg.horizon
    if getattr(args, "dt_d", None):
        dt_d = parse_dt(args.dt_d)
        ratio = hz.dt_p / dt_d
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(f"--dt-d: {args.dt_d} must divide the prediction step {hz.dt_p} h")
        hz = dataclasses.replace(hz, dt_d=hz.dt_p / round(ratio))
    if getattr(args, "n_pre", None):
        if args.n_pre < 1:
            raise ConfigError("--n-pre: must be >= 1")
        hz = dataclasses.replace(hz, n_pre=args.n_pre)
    if hz != cfg.horizon:
        cfg = cfg.with_changes(horizon=hz)
    if getattr(args, "without_dr", False):
        cfg = cfg.without_dr()
    return cfg


def model_header(cfg) -> dict:
    """Resolved defaults that the scenario file leaves implicit."""
    mg = Microgrid(cfg)
    fc = mg.forecaster
    return {
        "phase_convention": "three-phase" if cfg.three_phase else "single-phase",
        "i_base_a": mg.net.i_base,
        "forecast": {
            "lag": cfg.forecast.lag,
            "n_dict": len(fc.dictionary.profiles) if fc.dictionary is not None else 0,
            "anchor": fc.anchor,
            "use_dictionary": fc.use_dictionary,
            "hyper": {k: [m.bandwidth, m.regularization] for k, m in fc.models.items()},
        },
        "energy_cap_pu_h": daily_energy_cap(mg),
        "p_br_max_pu": mg.p_br_max,
    }


def _tightness(trace) -> dict:
    g = np.array([r.gap for r in trace.records if np.isfinite(r.gap)])
    if not len(g):
        return {"mean": None, "std": None, "max": None, "steps": 0}
    return {"mean": float(g.mean()), "std": float(g.std()), "max": float(g.max()), "steps": int(len(g))}


def _run_mode(cfg, mode_name: str, out_dir: str):
    mode = EmsMode.parse(mode_name)
    t0 = time.perf_counter()
    trace, rep = run_simulation(cfg, mode)
    path = write_trace_csv(trace, Path(out_dir) / f"trace_{mode.name}.csv")
    entry = {"cost": rep.to_json(), "trace_csv": str(path), "wall_time_s": time.perf_counter() - t0,
             "decision_steps": len(trace.records)}
    if mode.flow_model == "SOCP":
        entry["tightness"] = _tightness(trace)
    return mode.name, entry, rep.solver_failures


def _map(fn, jobs: int, items):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, *zip(*items)))
    return [fn(*it) for it in items]


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    modes = parse_modes(args.modes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _map(_run_mode, args.jobs, [(cfg, m.name, str(out)) for m in modes])
    failures = sum(r[2] for r in results)
    report = {
        "command": "run",
        "version": __version__,
        "scenario": to_dict(cfg),
        "model": model_header(cfg),
        "modes": {name: entry for name, entry, _ in results},
        "solver_failures": failures,
    }
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2))
    for name, entry, _ in results:
        c = entry["cost"]
        line = f"{name:9s} cost ${c['economic_cost']:.2f}  security {c['security_constraints']}"
        if "tightness" in entry and entry["tightness"]["mean"] is not None:
            line += f"  gap {entry['tightness']['mean']:.3g}% +/- {entry['tightness']['std']:.3g}%"
        print(line)
    print(f"report: {path}")
    return EXIT_SOLVER if failures else EXIT_OK


def _sweep_cell(case: str, n_pre: int, seed: int):
    _, cfg = builtin_case(case, seed)
    cfg = cfg.with_changes(horizon=dataclasses.replace(cfg.horizon, n_pre=n_pre))
    mg = Microgrid(cfg)
    trace, rep = run_simulation(cfg, EmsMode.parse("socp-mpc"), microgrid=mg)
    recs = [r for r in trace.records if r.iterations]
    its = [r.iterations for r in recs]
    t_it = [r.per_iteration_time for r in recs]
    n_br = mg.net.n_br
    dim = build_layout(n_pre, len(mg.batteries), n_br, len(mg.kinds), True).dim
    return {
        "case": case, "n_pre": n_pre, "n_br": n_br, "size": n_pre * n_br, "n_variables": dim,
        "median_iterations": float(np.median(its)) if its else None,
        "median_iter_time_s": float(np.median(t_it)) if t_it else None,
        "solver_failures": rep.solver_failures,
    }


def fit_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def complexity_sweep(cases=SWEEP_CASES, horizons=SWEEP_HORIZONS, seed: int = 7, jobs: int = 1,
                     timing_strict: bool = False, repeats: int | None = None) -> dict:
    """Median SOCP-MPC iterations and per-iteration time per (case, N_pre) cell.

    With ``timing_strict`` the cells run serially in ``repeats`` (default 3)
    round-robin passes and each cell keeps its fastest per-iteration time,
    so a slow spell on a shared machine does not skew one cell.
    """
    cells = [(c, h, seed) for c in cases for h in horizons]
    repeats = repeats or (3 if timing_strict else 1)
    rows = _map(_sweep_cell, 1 if timing_strict else jobs, cells)
    for _ in range(repeats - 1):
        for row, again in zip(rows, _map(_sweep_cell, 1 if timing_strict else jobs, cells)):
            if again["median_iter_time_s"] is not None and row["median_iter_time_s"] is not None:
                row["median_iter_time_s"] = min(row["median_iter_time_s"], again["median_iter_time_s"])
    ok = [r for r in rows if r["median_iterations"]]
    slopes = {"iterations": None, "iter_time": None}
    if len({r["size"] for r in ok}) >= 2:
        sz = [r["size"] for r in ok]
        slopes = {"iterations": fit_slope(sz, [r["median_iterations"] for r in ok]),
                  "iter_time": fit_slope(sz, [r["median_iter_time_s"] for r in ok])}
    return {"rows": rows, "slopes": slopes, "timing_strict": timing_strict, "repeats": repeats}


def cmd_sweep(args) -> int:
    cases = tuple(c.strip() for c in args.cases.split(","))
    try:
        horizons = tuple(int(h) for h in args.horizons.split(","))
    except ValueError:
        raise ConfigError(f"--horizons: expected integers, got {args.horizons!r}") from None
    for c in cases:
        builtin_case(c)
    if any(h < 1 for h in horizons):
        raise ConfigError("--horizons: must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 7
    rep = complexity_sweep(cases, horizons, seed, args.jobs, args.timing_strict)
    rep = {"command": "complexity-sweep", "version": __version__, **rep}
    (out / "complexity.json").write_text(json.dumps(rep, indent=2))
    with open(out / "complexity.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rep["rows"][0]))
        w.writeheader()
        w.writerows(rep["rows"])
    for r in rep["rows"]:
        print(f"{r['case']:6s} N_pre={r['n_pre']:3d} size={r['size']:4d} "
              f"iters={r['median_iterations']} t_iter={r['median_iter_time_s']}")
    print(f"slopes: iterations {rep['slopes']['iterations']}, iter_time {rep['slopes']['iter_time']}")
    failures = sum(r["solver_failures"] for r in rep["rows"])
    return EXIT_SOLVER if failures else EXIT_OK


def cmd_forecast_eval(args) -> int:
    cfg = resolve_config(args)
    if args.solar_day:
        cfg = cfg.with_changes(forecast=dataclasses.replace(cfg.forecast, solar_day=args.solar_day))
    ps = make_profile_set(cfg)
    if args.kind not in ps.realized:
        raise ConfigError(f"--kind: no profiles for {args.kind!r}")
    try:
        starts = [int(s) for s in args.starts.split(",")] if args.starts else list(range(0, ps.steps_per_day, 2))
    except ValueError:
        raise ConfigError(f"--starts: expected integers, got {args.starts!r}") from None
    hyper = tuple(args.hyper) if args.hyper else cfg.forecast.hyper.get(args.kind)
    try:
        rows = evaluate_forecasts(ps.history[args.kind], ps.realized[args.kind], starts, args.kind, hyper,
                                  cfg.forecast.lag, n_steps=args.steps)
    except ForecastError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = [{"start": r.start, "n_steps": r.n_steps, "nrmse_vanilla": r.nrmse_vanilla,
                "nrmse_dictionary": r.nrmse_dictionary, "nrmse_persistence": r.nrmse_persistence} for r in rows]
    (out / f"forecast_{args.kind}.json").write_text(json.dumps(
        {"command": "forecast-eval", "version": __version__, "kind": args.kind, "metrics": metrics}, indent=2))
    with open(out / f"forecast_{args.kind}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "step", "truth", "vanilla", "dictionary", "persistence"])
        for r in rows:
            for j in range(r.n_steps):
                d = "" if r.dictionary is None else r.dictionary[j]
                w.writerow([r.start, r.start + j, r.truth[j], r.vanilla[j], d, r.persistence[j]])
    for m in metrics:
        d = "-" if m["nrmse_dictionary"] is None else f"{m['nrmse_dictionary']:.4f}"
        print(f"start {m['start']:2d}: vanilla {m['nrmse_vanilla']:.4f}  dictionary {d}  "
              f"persistence {m['nrmse_persistence']:.4f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = resolve_config(args)
    net = cfg.network()
    print(f"{cfg.name}: {net.n_bus} buses, {net.n_br} branches, {len(cfg.batteries)} batteries, "
          f"{len(cfg.loads)} loads; ok")
    return EXIT_OK


def _scenario_args(p, dt=True):
    p.add_argument("--builtin", help="built-in case: 10bus, 18bus or 33bus")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--seed", type=int, help="override the scenario RNG seed")
    if dt:
        p.add_argument("--dt-d", help="decision step, e.g. 1h or 5min")
        p.add_argument("--n-pre", type=int, help="prediction horizon in steps")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mgems", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="simulate one day in the requested EMS modes")
    _scenario_args(p)
    p.add_argument("--modes", default="all", help="comma list of lp-da, lp-mpc, socp-da, socp-mpc or 'all'")
    p.add_argument("--without-dr", action="store_true", help="disable demand response")
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("complexity-sweep", help="SOCP-MPC telemetry over cases and horizons")
    p.add_argument("--cases", default=",".join(SWEEP_CASES))
    p.add_argument("--horizons", default=",".join(map(str, SWEEP_HORIZONS)))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing-strict", action="store_true", help="run cells serially for clean timings")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("forecast-eval", help="multi-step forecast errors per start time")
    _scenario_args(p, dt=False)
    p.add_argument("--kind", default="solar")
    p.add_argument("--solar-day", choices=("clear", "cloudy"))
    p.add_argument("--starts", help="comma list of start steps (default every 2 steps)")
    p.add_argument("--steps", type=int, help="forecast length (default: to the end of the day)")
    p.add_argument("--hyper", type=float, nargs=2, metavar=("SIGMA", "LAMBDA"),
                   help="fixed KRR hyperparameters instead of MSMS tuning")
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_forecast_eval)

    p = sub.add_parser("validate", help="lint a scenario")
    _scenario_args(p, dt=False)
    p.set_defaults(fn=cmd_validate)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("EMS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "fn", None):
            raise ConfigError("missing command (run, complexity-sweep, forecast-eval, validate)")
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs: must be >= 1")
        return args.fn(args)
    except (ConfigError, NetworkError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
