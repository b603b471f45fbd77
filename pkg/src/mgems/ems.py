"""Closed-loop simulation of day-ahead and receding-horizon EMS variants.

Decisions are taken every ``dt_d`` hours on a program grid of ``dt_p``
steps aligned to the hour grid; the first program step of every solve is
the current prediction step. The plant is the exact branch-flow model
driven by realized profiles, committed battery powers and the realized
demand response.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import assembler as asm
from .forecast import Forecaster, price_sensitivity, train_forecaster
from .netmodel import NetworkModel
from .opf import GridState, PowerFlowError, check_security, relaxation_gap, solve_plant_powerflow
from .scenario import LOAD_KINDS, ProfileSet, ScenarioConfig, make_profile_set
from .socp import SolverResult, solve

log = logging.getLogger(__name__)

EXCLUSIVITY_TOL = 1e-6
DAY_AHEAD = "day-ahead"
MPC = "mpc"


@dataclass(frozen=True)
class EmsMode:
    flow_model: str  # asm.LP or asm.SOCP
    policy: str  # DAY_AHEAD or MPC

    def __post_init__(self):
        if self.flow_model not in (asm.LP, asm.SOCP) or self.policy not in (DAY_AHEAD, MPC):
            raise ValueError(f"invalid mode {self.flow_model}/{self.policy}")

    @property
    def name(self) -> str:
        return f"{self.flow_model.lower()}-{'mpc' if self.policy == MPC else 'da'}"

    @classmethod
    def parse(cls, text: str) -> "EmsMode":
        t = text.strip().lower()
        try:
            flow, pol = t.split("-", 1)
        except ValueError:
            raise ValueError(f"unknown mode {text!r}") from None
        flows = {"lp": asm.LP, "socp": asm.SOCP}
        pols = {"mpc": MPC, "da": DAY_AHEAD, "day-ahead": DAY_AHEAD}
        if flow not in flows or pol not in pols:
            raise ValueError(f"unknown mode {text!r} (expected lp|socp - mpc|da)")
        return cls(flows[flow], pols[pol])


ALL_MODES = tuple(EmsMode.parse(m) for m in ("lp-da", "lp-mpc", "socp-da", "socp-mpc"))


@dataclass
class Controls:
    dis: np.ndarray
    ch: np.ndarray
    buy: float
    sell: float
    dC: np.ndarray  # per load type

    @classmethod
    def idle(cls, n_batt: int, n_tp: int) -> "Controls":
        return cls(np.zeros(n_batt), np.zeros(n_batt), 0.0, 0.0, np.zeros(n_tp))


@dataclass
class Plan:
    """Solution of one program, unpacked per step."""

    controls: list[Controls]
    result: SolverResult
    gap: list[float]  # relaxation gap per step (SOCP only)
    alpha_sum: np.ndarray  # (n_tp, n_pre) committed summed sensitivities
    energy_total: float  # history + planned energy change of this solve
    ok: bool


@dataclass
class StepRecord:
    step: int
    hour: float
    committed_dis: list[float]
    committed_ch: list[float]
    committed_buy: float
    committed_sell: float
    dis: list[float]
    ch: list[float]
    buy: float
    sell: float
    dC: list[float]
    soc: list[float]
    losses: float
    min_v: float
    max_v: float
    max_loading: float
    n_violations: int
    cost: float
    dr_cost: float
    diesel_cost: float
    gap: float
    energy_cap_value: float
    solver_status: str = ""
    iterations: int = 0
    solve_time: float = 0.0
    per_iteration_time: float = 0.0
    fallback: bool = False
    clamped: bool = False
    exclusivity_breach: bool = False
    plant_failed: bool = False


@dataclass
class SimulationTrace:
    mode: str
    records: list[StepRecord] = field(default_factory=list)
    states: list[GridState | None] = field(default_factory=list)
    eps: float = 0.0
    load_change_pct: list[float] = field(default_factory=list)
    sigma_0: list[float] = field(default_factory=list)
    solves: int = 0

    def __len__(self):
        return len(self.records)


@dataclass
class CostReport:
    mode: str
    economic_cost: float
    dr_cost_for_users: float
    load_energy_change_pct: tuple[float, float]
    diesel_cost: float
    security_constraints: str
    n_violations: int
    decision_time_per_step: float
    gap_mean: float | None = None
    gap_std: float | None = None
    gap_max: float | None = None
    solver_failures: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["load_energy_change_pct"] = list(self.load_energy_change_pct)
        return d


class Microgrid:
    """Scenario data resolved to per-bus arrays plus the forecaster."""

    def __init__(self, cfg: ScenarioConfig, profiles: ProfileSet | None = None,
                 forecaster: Forecaster | None = None):
        self.cfg = cfg
        self.net: NetworkModel = cfg.network()
        self.profiles = profiles or make_profile_set(cfg)
        nb = self.net.n_bus
        s_kw = cfg.bases[0] * 1000.0
        self.pv = np.zeros(nb)
        for s in cfg.pv:
            self.pv[s.bus - 1] += s.rated_kw / s_kw
        self.diesel = np.zeros(nb)
        for s in cfg.diesel:
            self.diesel[s.bus - 1] += s.rated_kw / s_kw
        self.kinds = cfg.load_kinds if cfg.dr.enabled else []
        self.load = {k: np.zeros(nb) for k in LOAD_KINDS}
        for ld in cfg.loads:
            self.load[ld.kind][ld.bus - 1] += ld.rated_kw / s_kw
        self.dr_buses = [sorted({ld.bus for ld in cfg.loads_of(k)}) for k in self.kinds]
        self.batteries = list(cfg.batteries)
        if forecaster is None:
            hist = {k: self.profiles.history[k] for k in ["solar", *LOAD_KINDS]}
            forecaster = train_forecaster(hist, cfg.horizon.k_d, cfg.forecast.hyper, cfg.forecast.lag,
                                          use_dictionary=cfg.forecast.use_dictionary,
                                          anchor=cfg.forecast.anchor)
        self.forecaster = forecaster
        gen = sum(b.p_rated for b in cfg.batteries) + self.pv.sum() + self.diesel.sum()
        self.p_br_max = 2.0 * max(gen, 0.1)

    @property
    def K(self) -> int:
        return self.cfg.horizon.k_d

    def hour_of(self, h: int) -> float:
        return (h % self.K) * self.cfg.horizon.dt_p

    def series(self, kind: str) -> np.ndarray:
        """Last historical day followed by the realized day."""
        return np.concatenate([self.profiles.history[kind][-1], self.profiles.realized[kind]])

    def realized_injection(self, h: int) -> np.ndarray:
        r = self.profiles.realized
        inj = self.pv * r["solar"][h] + self.diesel
        for k in LOAD_KINDS:
            inj = inj - self.load[k] * r[k][h]
        return inj

    def realized_consumption(self, kind: str, h: int) -> np.ndarray:
        return self.load[kind] * self.profiles.realized[kind][h]

    def elasticity(self, kind: str, hour: float) -> float:
        return self.cfg.dr.elasticity[kind][self.cfg.tariffs.period(hour)]

    def tariff(self, kind: str, hours) -> np.ndarray:
        t = self.cfg.tariffs
        return t.c_res(hours) if kind == "residential" else t.c_bus(hours)

    def forecast_profiles(self, h: int, sub: int, n: int) -> dict[str, np.ndarray]:
        """Normalized forecasts for prediction steps h..h+n-1.

        At a sub-step of an hour the current step is already measured and
        only later steps are forecast.
        """
        lag = self.cfg.forecast.lag
        T = self.K
        out = {}
        for kind in ["solar", *LOAD_KINDS]:
            s = self.series(kind)
            if sub > 0:
                last = T + h
                fc = self.forecaster.predict(kind, s[last - lag + 1:last + 1], h, n - 1) if n > 1 else np.zeros(0)
                out[kind] = np.concatenate([[s[last]], fc])
            else:
                last = T + h - 1
                out[kind] = self.forecaster.predict(kind, s[last - lag + 1:last + 1], h - 1, n)
        return out


@dataclass
class LoopState:
    soc: np.ndarray
    dr_offset: np.ndarray  # cumulative consumption change per bus, pu
    energy_history: float = 0.0  # committed sum alpha dC dt so far
    last: Controls | None = None


def _horizon_inputs(mg: Microgrid, st: LoopState, h: int, sub: int, n_pre: int, eps: float) -> tuple:
    cfg, net = mg.cfg, mg.net
    dt = cfg.horizon.dt_p
    fc = mg.forecast_profiles(h, sub, n_pre)
    hours = np.array([mg.hour_of(h + j) for j in range(n_pre)])
    p_inj = np.outer(mg.pv, fc["solar"]) + mg.diesel[:, None]
    cons = {k: np.outer(mg.load[k], fc[k]) for k in LOAD_KINDS}
    for k in LOAD_KINDS:
        p_inj -= cons[k]
    p_inj -= st.dr_offset[:, None]
    n_tp = len(mg.kinds)
    alpha = c_type = None
    if n_tp:
        alpha = np.zeros((n_tp, net.n_bus, n_pre))
        c_type = np.zeros((n_tp, n_pre))
        for t, kind in enumerate(mg.kinds):
            tar = mg.tariff(kind, hours)
            ela = np.array([mg.elasticity(kind, hr) for hr in hours])
            alpha[t] = price_sensitivity(ela[None, :], -cons[kind], tar[None, :])
            c_type[t] = tar
    terminal = mg.K - 1 - h
    sec = cfg.security
    inp = asm.HorizonInputs(
        network=net, batteries=mg.batteries, sigma=st.soc.copy(), dt=dt, p_inj=p_inj,
        c_buy=cfg.tariffs.c_buy(hours), c_sell=cfg.tariffs.c_sell(hours),
        alpha=alpha, c_type=c_type, dr_buses=mg.dr_buses, k_adj=cfg.dr.k_adj, eps=eps,
        history=st.energy_history, day_remaining=mg.K - h,
        terminal_row=terminal if 0 <= terminal < n_pre else None,
        v_limits=sec.decision_v_limits, current_margin=sec.current_margin,
        grid_limit=cfg.grid_limit, p_br_max=mg.p_br_max,
    )
    return inp, fc


def solve_horizon(mg: Microgrid, st: LoopState, h: int, sub: int, n_pre: int, flow_model: str,
                  eps: float, solver_opts: dict | None = None) -> Plan:
    inp, _ = _horizon_inputs(mg, st, h, sub, n_pre, eps)
    prog, lay = asm.assemble_program(inp, flow_model)
    res = solve(prog, **(solver_opts or {}))
    n_tp = len(mg.kinds)
    alpha_sum = np.zeros((n_tp, n_pre))
    for t in range(n_tp):
        alpha_sum[t] = inp.alpha[t][np.array(mg.dr_buses[t]) - 1].sum(0)
    u = res.u_star
    ctrls, gaps = [], []
    if res.ok:
        both = np.minimum(lay.buy_block(u), lay.sell_block(u))
        for b in range(lay.n_batt):
            both = np.maximum(both, np.minimum(lay.dis_block(u, b), lay.ch_block(u, b)))
        if both.max() > EXCLUSIVITY_TOL:
            log.warning("step %d: simultaneous buy/sell or charge/discharge up to %.2e pu in the plan",
                        h, both.max())
    for k in range(n_pre):
        dis = np.array([u[lay.dis(b, k)] for b in range(lay.n_batt)])
        ch = np.array([u[lay.ch(b, k)] for b in range(lay.n_batt)])
        buy, sell = u[lay.buy(k)], u[lay.sell(k)]
        net_flow = buy - sell
        dC = np.array([u[lay.dc(t, k)] for t in range(n_tp)])
        ctrls.append(Controls(np.clip(dis, 0, None), np.clip(ch, 0, None),
                              max(net_flow, 0.0), max(-net_flow, 0.0), dC))
        if lay.grid:
            P, l, v = lay.grid_step(u, k)
            v_send = np.array([1.0 if br.from_bus == 1 else v[br.from_bus - 2] for br in mg.net.branches])
            gaps.append(relaxation_gap(P, l, v_send))
    planned = 0.0
    if n_tp:
        last = min(mg.K - h, n_pre)
        planned = float(sum((alpha_sum[t, :last] * np.array([c.dC[t] for c in ctrls[:last]])).sum()
                            for t in range(n_tp)) * inp.dt)
    return Plan(ctrls, res, gaps, alpha_sum, st.energy_history + planned, res.ok)


def daily_energy_cap(mg: Microgrid) -> float:
    """epsilon from the t = 0 forecast of total daily load energy (pu h)."""
    if not mg.kinds:
        return 0.0
    fc = mg.forecast_profiles(0, 0, mg.K)
    energy = sum(float(np.outer(mg.load[k], fc[k]).sum()) for k in LOAD_KINDS) * mg.cfg.horizon.dt_p
    return mg.cfg.dr.cap_fraction * abs(energy)


def soc_update(soc: float, dis: float, ch: float, battery: asm.BatteryParams, dt: float) -> float:
    return soc + (ch * battery.eta_ch / battery.e_max - dis / (battery.e_max * battery.eta_dis)) * dt


def dr_step_payment(tariff: float, alpha, dC: float, dt: float) -> float:
    """Bill change of DR users over one step, tariff * alpha * dC * dt.

    With alpha in kW per ($/kWh) the result is in $; negative means users pay less.
    """
    return tariff * float(np.sum(alpha)) * dC * dt


def apply_step(mg: Microgrid, st: LoopState, ctl: Controls, m: int, plan_alpha: np.ndarray | None,
               state_log: list | None = None) -> StepRecord:
    """Advance the plant by one decision step and account its cost."""
    cfg, net = mg.cfg, mg.net
    hz = cfg.horizon
    dt = hz.dt_d
    h = m // hz.substeps
    hour = m * dt
    n_b = len(mg.batteries)
    dis, ch = ctl.dis.astype(float).copy(), ctl.ch.astype(float).copy()
    clamped = False
    soc_next = st.soc.copy()
    for i, b in enumerate(mg.batteries):
        nxt = soc_update(st.soc[i], dis[i], ch[i], b, dt)
        if nxt < b.sigma_min:
            # shave discharge so the state lands on its floor
            dis[i] = max(0.0, (st.soc[i] - b.sigma_min + ch[i] * b.eta_ch * dt / b.e_max) * b.e_max * b.eta_dis / dt)
            clamped = True
        elif nxt > b.sigma_max:
            ch[i] = max(0.0, (b.sigma_max - st.soc[i] + dis[i] * dt / (b.e_max * b.eta_dis)) * b.e_max / (b.eta_ch * dt))
            clamped = True
        soc_next[i] = soc_update(st.soc[i], dis[i], ch[i], b, dt)
        soc_next[i] = min(max(soc_next[i], b.sigma_min), b.sigma_max) if clamped else soc_next[i]
    breach = bool(np.any(np.minimum(dis, ch) > 1e-6))
    if breach:
        log.warning("step %d: simultaneous charge and discharge", m)

    # demand response realized with the realized base load
    hr = mg.hour_of(h)
    frac = dt / hz.dt_p
    dr_cost = 0.0
    for t, kind in enumerate(mg.kinds):
        tar = float(mg.tariff(kind, hr)[0])
        alpha_real = price_sensitivity(mg.elasticity(kind, hr), -mg.realized_consumption(kind, h), tar)
        mask = np.zeros(net.n_bus, dtype=bool)
        mask[np.array(mg.dr_buses[t]) - 1] = True
        alpha_dr = np.where(mask, alpha_real, 0.0)
        st.dr_offset += alpha_dr * ctl.dC[t] * frac
        dr_cost += dr_step_payment(tar, alpha_dr * 1000.0 * cfg.bases[0], ctl.dC[t], dt)
    if len(mg.kinds) and plan_alpha is not None:
        st.energy_history += float((plan_alpha[:, 0] * ctl.dC).sum()) * dt

    inj = mg.realized_injection(h) - st.dr_offset
    for i, b in enumerate(mg.batteries):
        inj[b.bus - 1] += dis[i] - ch[i]
    failed = False
    try:
        gs = solve_plant_powerflow(net, inj[1:])
        imp = gs.slack_import
        losses = gs.losses
        sec = check_security(gs, cfg.security.v_limits, net, step=m)
        n_viol, min_v, max_v, load_max = sec.n_violations, sec.min_v, sec.max_v, sec.max_loading
    except PowerFlowError as exc:
        log.warning("step %d: plant power flow failed (%s)", m, exc)
        gs, failed = None, True
        imp, losses = -float(inj[1:].sum()), 0.0
        n_viol, min_v, max_v, load_max = 1, float("nan"), float("nan"), float("nan")
    if state_log is not None:
        state_log.append(gs)
    buy, sell = max(imp, 0.0), max(-imp, 0.0)
    c_buy = float(cfg.tariffs.c_buy(hr)[0])
    c_sell = float(cfg.tariffs.c_sell(hr)[0])
    cost = step_cost(dt, c_buy, c_sell, buy, sell, losses, dis, ch, mg.batteries, cfg.bases[0])
    diesel_cost = dt * 1000.0 * cfg.bases[0] * float(mg.diesel.sum()) * float(cfg.tariffs.c_dg(hr)[0])
    st.soc = soc_next
    return StepRecord(
        step=m, hour=hour,
        committed_dis=ctl.dis.tolist(), committed_ch=ctl.ch.tolist(),
        committed_buy=float(ctl.buy), committed_sell=float(ctl.sell),
        dis=dis.tolist(), ch=ch.tolist(), buy=buy, sell=sell, dC=ctl.dC.tolist(),
        soc=st.soc.tolist(), losses=losses, min_v=min_v, max_v=max_v, max_loading=load_max,
        n_violations=n_viol, cost=cost, dr_cost=dr_cost, diesel_cost=diesel_cost,
        gap=float("nan"), energy_cap_value=st.energy_history,
        clamped=clamped, exclusivity_breach=breach, plant_failed=failed,
    )


def run_day_ahead(mg: Microgrid, flow_model: str, solver_opts: dict | None = None) -> Plan:
    st = LoopState(np.array([b.sigma_0 for b in mg.batteries]), np.zeros(mg.net.n_bus))
    return solve_horizon(mg, st, 0, 0, mg.K, flow_model, daily_energy_cap(mg), solver_opts)


def mpc_step(mg: Microgrid, st: LoopState, m: int, flow_model: str, eps: float,
             solver_opts: dict | None = None) -> tuple[Controls, Plan | None, bool]:
    """Controls for decision step m; falls back to idle batteries on solver failure."""
    hz = mg.cfg.horizon
    h, sub = divmod(m, hz.substeps)
    plan = solve_horizon(mg, st, h, sub, hz.n_pre, flow_model, eps, solver_opts)
    if plan.ok:
        return plan.controls[0], plan, False
    log.warning("step %d: solver returned %s, holding previous controls with batteries idle", m, plan.result.status)
    prev = st.last or Controls.idle(len(mg.batteries), len(mg.kinds))
    hold = Controls(np.zeros(len(mg.batteries)), np.zeros(len(mg.batteries)), prev.buy, prev.sell, prev.dC.copy())
    return hold, plan, True


def run_simulation(cfg: ScenarioConfig, mode: EmsMode, profiles: ProfileSet | None = None,
                   forecaster: Forecaster | None = None, solver_opts: dict | None = None,
                   microgrid: Microgrid | None = None) -> tuple[SimulationTrace, CostReport]:
    mg = microgrid or Microgrid(cfg, profiles, forecaster)
    hz = cfg.horizon
    st = LoopState(np.array([b.sigma_0 for b in mg.batteries]), np.zeros(mg.net.n_bus))
    eps = daily_energy_cap(mg)
    trace = SimulationTrace(mode.name, eps=eps, sigma_0=[b.sigma_0 for b in mg.batteries])
    base_cons = {k: np.array([mg.realized_consumption(k, m // hz.substeps) for m in range(hz.n_decisions)])
                 for k in LOAD_KINDS}
    da_plan = None
    if mode.policy == DAY_AHEAD:
        t0 = time.perf_counter()
        da_plan = run_day_ahead(mg, mode.flow_model, solver_opts)
        da_time = time.perf_counter() - t0
        trace.solves = 1
        if not da_plan.ok:
            log.warning("day-ahead solve returned %s; batteries stay idle", da_plan.result.status)
    offsets = []
    for m in range(hz.n_decisions):
        h = m // hz.substeps
        fallback = False
        if mode.policy == DAY_AHEAD:
            plan = da_plan
            if plan.ok:
                ctl = plan.controls[h]
            else:
                ctl, fallback = Controls.idle(len(mg.batteries), len(mg.kinds)), True
            col = h
            t_solve = da_time if m == 0 else 0.0
        else:
            t0 = time.perf_counter()
            ctl, plan, fallback = mpc_step(mg, st, m, mode.flow_model, eps, solver_opts)
            t_solve = time.perf_counter() - t0
            trace.solves += 1
            col = 0
        alpha_col = plan.alpha_sum[:, col:col + 1] if plan is not None and len(mg.kinds) else None
        rec = apply_step(mg, st, ctl, m, alpha_col, trace.states)
        st.last = ctl
        rec.fallback = fallback
        rec.solve_time = t_solve
        if plan is not None:
            rec.solver_status = plan.result.status
            rec.iterations = plan.result.iterations if (mode.policy == MPC or m == 0) else 0
            rec.per_iteration_time = plan.result.per_iteration_time if (mode.policy == MPC or m == 0) else 0.0
            if plan.gap and plan.ok:
                rec.gap = plan.gap[col]
            if mode.policy == MPC and plan.ok:
                rec.energy_cap_value = plan.energy_total
        trace.records.append(rec)
        offsets.append(st.dr_offset.copy())
    trace.load_change_pct = _load_change(mg, base_cons, offsets, hz.dt_d)
    return trace, cost_report(trace, mode, mg)


def _load_change(mg: Microgrid, base_cons, offsets, dt) -> list[float]:
    out = []
    offs = np.array(offsets)
    for ld_kind in LOAD_KINDS:
        for bus in sorted({ld.bus for ld in mg.cfg.loads_of(ld_kind)}):
            base = base_cons[ld_kind][:, bus - 1].sum() * dt
            if base <= 0:
                continue
            out.append(100.0 * float(offs[:, bus - 1].sum() * dt) / base)
    return out


def economic_cost(trace: SimulationTrace) -> float:
    return float(sum(r.cost for r in trace.records))


def dr_settlement(trace: SimulationTrace) -> tuple[float, list[float]]:
    return float(sum(r.dr_cost for r in trace.records)), list(trace.load_change_pct)


def step_cost(dt: float, c_buy: float, c_sell: float, buy: float, sell: float, loss: float,
              dis: Sequence[float] = (), ch: Sequence[float] = (), batteries: Sequence = (), s_base: float = 1.0) -> float:
    """Realized running cost of one step in $ (powers in pu of ``s_base`` MVA)."""
    batt = sum(c_buy * (c * (1 - b.eta_ch) + d * (1 - b.eta_dis)) + b.c_deg * (c + d)
               for d, c, b in zip(dis, ch, batteries))
    return dt * 1000.0 * s_base * (-c_sell * sell + c_buy * (buy + loss) + batt)


def cost_report(trace: SimulationTrace, mode: EmsMode, mg: Microgrid) -> CostReport:
    dr_cost, pct = dr_settlement(trace)
    gaps = [r.gap for r in trace.records if not math.isnan(r.gap)]
    n_viol = sum(r.n_violations for r in trace.records)
    solve_steps = [r.solve_time for r in trace.records if r.solve_time > 0]
    rep = CostReport(
        mode=mode.name,
        economic_cost=economic_cost(trace),
        dr_cost_for_users=dr_cost,
        load_energy_change_pct=(min(pct), max(pct)) if pct else (0.0, 0.0),
        diesel_cost=float(sum(r.diesel_cost for r in trace.records)),
        security_constraints="satisfied" if n_viol == 0 else "violated",
        n_violations=n_viol,
        decision_time_per_step=float(np.mean(solve_steps)) if solve_steps else 0.0,
        solver_failures=sum(1 for r in trace.records if r.fallback),
    )
    if mode.flow_model == asm.SOCP and gaps:
        rep.gap_mean, rep.gap_std, rep.gap_max = float(np.mean(gaps)), float(np.std(gaps)), float(np.max(gaps))
    return rep


def check_invariants(trace: SimulationTrace, mg: Microgrid, tol_soc: float = 1e-9) -> list[str]:
    """Names of the violated trace invariants (empty when all hold)."""
    bad = []
    for r in trace.records:
        for i, b in enumerate(mg.batteries):
            if not (b.sigma_min - tol_soc <= r.soc[i] <= b.sigma_max + tol_soc):
                bad.append(f"soc-bounds@{r.step}")
        if min(r.buy, r.sell) > 1e-6 or min(r.committed_buy, r.committed_sell) > 1e-6:
            bad.append(f"buy-sell@{r.step}")
        if abs(r.energy_cap_value) > trace.eps + 1e-9:
            bad.append(f"energy-cap@{r.step}")
    if trace.records:
        for i, s0 in enumerate(trace.sigma_0):
            if trace.records[-1].soc[i] < s0 - 1e-6:
                bad.append(f"terminal-soc[{i}]")
    return bad


def write_trace_csv(trace: SimulationTrace, path: str | Path) -> Path:
    path = Path(path)
    recs = trace.records
    if not recs:
        path.write_text("")
        return path
    nb = len(recs[0].soc)
    ntp = len(recs[0].dC)
    head = ["step", "hour", "buy_pu", "sell_pu", "losses_pu", "min_v", "max_v", "max_loading",
            "violations", "cost_usd", "dr_cost_usd", "gap_pct", "iterations", "solve_time_s"]
    head += [f"dis{i}" for i in range(nb)] + [f"ch{i}" for i in range(nb)] + [f"soc{i}" for i in range(nb)]
    head += [f"dC{t}" for t in range(ntp)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for r in recs:
            w.writerow([r.step, r.hour, r.buy, r.sell, r.losses, r.min_v, r.max_v, r.max_loading,
                        r.n_violations, r.cost, r.dr_cost, r.gap, r.iterations, r.solve_time]
                       + r.dis + r.ch + r.soc + r.dC)
    return path


def write_report_json(report: CostReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))
