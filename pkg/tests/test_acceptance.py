"""Acceptance criteria, one PASS/FAIL line each (shown in the terminal summary).

The heavy criteria run full one-day simulations; expect a few minutes in total.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from mgems.assembler import build_layout
from mgems.cli import complexity_sweep
from mgems.ems import ALL_MODES, EmsMode, Microgrid, check_invariants, run_simulation
from mgems.forecast import bell_dictionary, evaluate_forecasts, fit_krr, msms_tune
from mgems.opf import solve_plant_powerflow
from mgems.scenario import builtin_case, historical_solar, load_scenario
from mgems.socp import OPTIMAL, OPTIMAL_INACCURATE, kkt_residuals, solve

from oracles import (
    ACCEPTANCE_LINES, chain_network, cvxpy_reference, newton_flow, random_program, ten_bus_matrix_check, two_bus_flow,
)

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "cloudy_18bus.json"
CASES = ("10bus", "18bus", "33bus")


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def tightness_runs():
    out = {}
    for case in CASES:
        _, cfg = builtin_case(case)
        t0 = time.perf_counter()
        trace, rep = run_simulation(cfg, EmsMode.parse("socp-mpc"))
        out[case] = (trace, rep, time.perf_counter() - t0, Microgrid(cfg))
    return out


@pytest.fixture(scope="module")
def ordering_runs():
    cfg = load_scenario(SCENARIO)
    t0 = time.perf_counter()
    runs = {}
    for dr, c in (("dr", cfg), ("no-dr", cfg.without_dr())):
        mg = Microgrid(c)
        for mode in ALL_MODES:
            trace, rep = run_simulation(c, mode, microgrid=mg)
            runs[mode.name, dr] = (trace, rep, mg)
    return runs, time.perf_counter() - t0


def test_relaxation_tightness(tightness_runs):
    parts, ok = [], True
    for case, (trace, rep, secs, _) in tightness_runs.items():
        g = np.array([r.gap for r in trace.records])
        good = bool(np.all(np.isfinite(g))) and g.mean() <= 5.0 and g.max() <= 10.0 and secs < 300
        ok &= good
        parts.append(f"{case} mean {g.mean():.2e}% max {g.max():.2e}% ({secs:.0f} s)")
    verdict("relaxation tightness", ok, "; ".join(parts))


@pytest.mark.parametrize("case,n_batt,n_br,socp", [("10bus", 2, 9, 840), ("18bus", 3, 17, 1464),
                                                   ("33bus", 4, 32, 2592)])
def test_problem_size_socp(case, n_batt, n_br, socp):
    _, cfg = builtin_case(case)
    dim = build_layout(24, len(cfg.batteries), cfg.network().n_br, len(cfg.load_kinds), True).dim
    verdict(f"problem size SOCP {case}", dim == socp, f"{dim} columns (expected {socp})")


@pytest.mark.parametrize("case", [
    pytest.param("10bus", marks=pytest.mark.xfail(strict=True, reason="LP layout gives 192 columns with two batteries")),
    "18bus",
    pytest.param("33bus", marks=pytest.mark.xfail(strict=True, reason="LP layout gives 288 columns with four batteries")),
])
def test_problem_size_lp(case):
    _, cfg = builtin_case(case)
    dim = build_layout(24, len(cfg.batteries), cfg.network().n_br, len(cfg.load_kinds), False).dim
    verdict(f"problem size LP {case}", dim == 240, f"{dim} columns (expected 240)")


def test_complexity_scaling():
    t0 = time.perf_counter()
    rep = complexity_sweep(timing_strict=True)
    secs = time.perf_counter() - t0
    s_it, s_t = rep["slopes"]["iterations"], rep["slopes"]["iter_time"]
    fails = sum(r["solver_failures"] for r in rep["rows"])
    ok = 0.15 <= s_it <= 0.85 and 0.5 <= s_t <= 1.5 and secs < 900
    verdict("complexity scaling", ok,
            f"N_iter slope {s_it:.3f}, t_iter slope {s_t:.3f}, {fails} solver failures ({secs:.0f} s)")


def test_solver_correctness():
    t0 = time.perf_counter()
    worst_obj = worst_kkt = 0.0
    bad = []
    for seed in range(50):
        p = random_program(1000 + seed, lp=seed % 5 == 0)
        r = solve(p)
        status, val, _ = cvxpy_reference(p)
        if r.status not in (OPTIMAL, OPTIMAL_INACCURATE) or status != "optimal":
            bad.append(seed)
            continue
        worst_obj = max(worst_obj, abs(r.objective - val))
        if r.status == OPTIMAL:
            k = kkt_residuals(p, r.u_star, r.duals)
            worst_kkt = max(worst_kkt, k["primal"], k["dual"], k["complementarity"])
    secs = time.perf_counter() - t0
    ok = not bad and worst_obj <= 1e-3 and worst_kkt <= 1e-8 and secs < 60
    verdict("solver correctness", ok,
            f"50 problems, max |obj - ref| {worst_obj:.1e}, max KKT {worst_kkt:.1e}, failed {bad} ({secs:.0f} s)")


def test_matrix_oracle():
    res = ten_bus_matrix_check()
    verdict("matrix-construction oracle", all(res.values()),
            ", ".join(f"{k} {'exact' if v else 'differs'}" for k, v in res.items()))


def test_plant_oracle():
    s = solve_plant_powerflow(chain_network([0.05]), [-0.2])
    P, l, v = two_bus_flow(0.05, -0.2)
    err2 = max(abs(s.branch_p[0] - P), abs(s.branch_l[0] - l), abs(s.bus_v[0] - v))
    errn = 0.0
    for n in (3, 4, 5):
        rng = np.random.default_rng(n)
        r = rng.uniform(0.005, 0.05, n - 1)
        inj = rng.uniform(-0.2, 0.15, n - 1)
        ends = [(i + 1, i + 2) for i in range(n - 1)]
        st = solve_plant_powerflow(chain_network(r), inj)
        Pn, ln, vn = newton_flow(ends, r, inj)
        errn = max(errn, np.abs(np.concatenate([st.branch_p - Pn, st.branch_l - ln, st.bus_v - vn])).max())
    verdict("plant oracle", err2 <= 1e-8 and errn <= 1e-8,
            f"2-bus closed form error {err2:.1e}, 3-5 bus Newton error {errn:.1e}")


def test_cost_orderings(ordering_runs):
    runs, secs = ordering_runs
    cost = {k: v[1].economic_cost for k, v in runs.items()}
    viol = {k: v[1].n_violations for k, v in runs.items()}
    checks = {
        "socp-mpc < socp-da": cost["socp-mpc", "dr"] < cost["socp-da", "dr"],
        "lp-mpc < lp-da": cost["lp-mpc", "dr"] < cost["lp-da", "dr"],
        "DR <= no-DR": all(cost[m.name, "dr"] <= cost[m.name, "no-dr"] for m in ALL_MODES),
        "LP violations >= 1": all(viol[m, "dr"] >= 1 for m in ("lp-da", "lp-mpc")),
        "SOCP violations 0": all(viol[m, "dr"] == 0 for m in ("socp-da", "socp-mpc")),
        "runtime < 10 min": secs < 600,
    }
    costs = ", ".join(f"{m.name} ${cost[m.name, 'dr']:.2f}/${cost[m.name, 'no-dr']:.2f}" for m in ALL_MODES)
    vio = ", ".join(f"{m.name} {viol[m.name, 'dr']}" for m in ALL_MODES)
    failed = [k for k, v in checks.items() if not v]
    verdict("cost orderings", not failed,
            f"cost DR/no-DR {costs}; violations {vio}; failed {failed or 'none'} ({secs:.0f} s)")


def test_ems_invariants(tightness_runs, ordering_runs):
    traces = [(f"{case} socp-mpc", t, mg) for case, (t, _, _, mg) in tightness_runs.items()]
    traces += [(f"{mode} {dr}", t, mg) for (mode, dr), (t, _, mg) in ordering_runs[0].items()]
    bad = {name: v for name, t, mg in traces if (v := check_invariants(t, mg))}
    verdict("EMS invariants", not bad, f"{len(traces)} traces, violations {bad or 'none'}")


def test_forecast_properties():
    rng = np.random.default_rng(0)
    interp = 0.0
    for _ in range(20):
        X = rng.uniform(0, 1, (10, 3))
        y = rng.normal(size=10)
        interp = max(interp, np.abs(fit_krr(X, y, 0.3, 0.0).predict(X) - y).max())
    days = [historical_solar(300 + d) for d in range(6)]
    dic = bell_dictionary(24)
    beats = all(r.nrmse_dictionary <= r.nrmse_vanilla
                for m in range(len(dic.profiles))
                for r in evaluate_forecasts(days, dic.profiles[m], range(8, 17), hyper=(0.5, 1e-4), dictionary=dic))
    grid = ([0.1, 0.5, 2.0], [1e-6, 1e-3])
    det = msms_tune(days, *grid) == msms_tune(days, *grid)
    verdict("forecast properties", interp <= 1e-8 and beats and det,
            f"interpolation error {interp:.1e}, dictionary beats vanilla {beats}, MSMS deterministic {det}")
