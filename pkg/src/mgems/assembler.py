"""Decision layout, cost, bounds and constraint blocks of the EMS conic program.

Layout of the decision vector (every block has ``n_pre`` entries per
quantity, steps are contiguous)::

    [P_dis(b1) P_ch(b1) ... P_dis(bB) P_ch(bB)] P_buy P_sell
    [P_br(n_br) l(n_br) v(n_br)] x n_pre           (SOCP only)
    dC(type 1) ... dC(type n_tp)

``v`` entry ``j`` of a step belongs to bus ``j + 2``. Powers are in per
unit of the system base (MW at 1 MVA), prices in $/kWh and durations in
hours, so cost coefficients carry $/kWh * h * pu.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .netmodel import NetworkModel
from .socp import ConeSet, ConicProgram

SOCP = "SOCP"
LP = "LP"

PERIODS = ("valley", "offpeak", "peak")


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionLayout:
    n_pre: int
    n_batt: int
    n_br: int
    n_tp: int
    grid: bool = True  # False drops the per-step P_br/l/v blocks (LP mode)

    def __post_init__(self):
        if self.n_pre < 1 or self.n_batt < 0 or self.n_br < 1 or self.n_tp < 0:
            raise AssemblyError(f"invalid layout counts {self}")

    @property
    def dim(self) -> int:
        per = 2 * (1 + self.n_batt) + self.n_tp + (3 * self.n_br if self.grid else 0)
        return self.n_pre * per

    @property
    def grid_offset(self) -> int:
        return 2 * self.n_pre * (self.n_batt + 1)

    @property
    def dc_offset(self) -> int:
        return self.grid_offset + (3 * self.n_br * self.n_pre if self.grid else 0)

    def dis(self, b: int, k: int) -> int:
        return 2 * self.n_pre * b + k

    def ch(self, b: int, k: int) -> int:
        return 2 * self.n_pre * b + self.n_pre + k

    def buy(self, k: int) -> int:
        return 2 * self.n_pre * self.n_batt + k

    def sell(self, k: int) -> int:
        return 2 * self.n_pre * self.n_batt + self.n_pre + k

    def _grid(self, k: int, which: int, e: int) -> int:
        if not self.grid:
            raise AssemblyError("layout has no grid columns")
        return self.grid_offset + 3 * self.n_br * k + which * self.n_br + e

    def p_br(self, k: int, e: int) -> int:
        return self._grid(k, 0, e)

    def l_br(self, k: int, e: int) -> int:
        return self._grid(k, 1, e)

    def v_bus(self, k: int, bus: int) -> int:
        return self._grid(k, 2, bus - 2)

    def dc(self, t: int, k: int) -> int:
        return self.dc_offset + t * self.n_pre + k

    def offsets(self) -> dict[str, tuple[int, int]]:
        n = self.n_pre
        out = {}
        for b in range(self.n_batt):
            out[f"P_dis[{b}]"] = (self.dis(b, 0), self.dis(b, 0) + n)
            out[f"P_ch[{b}]"] = (self.ch(b, 0), self.ch(b, 0) + n)
        out["P_buy"] = (self.buy(0), self.buy(0) + n)
        out["P_sell"] = (self.sell(0), self.sell(0) + n)
        if self.grid:
            for k in range(n):
                out[f"P_br@{k}"] = (self.p_br(k, 0), self.p_br(k, 0) + self.n_br)
                out[f"l@{k}"] = (self.l_br(k, 0), self.l_br(k, 0) + self.n_br)
                out[f"v@{k}"] = (self.v_bus(k, 2), self.v_bus(k, 2) + self.n_br)
        for t in range(self.n_tp):
            out[f"dC[{t}]"] = (self.dc(t, 0), self.dc(t, 0) + n)
        return out

    # block views of a solution vector
    def dis_block(self, u, b):
        return u[self.dis(b, 0): self.dis(b, 0) + self.n_pre]

    def ch_block(self, u, b):
        return u[self.ch(b, 0): self.ch(b, 0) + self.n_pre]

    def buy_block(self, u):
        return u[self.buy(0): self.buy(0) + self.n_pre]

    def sell_block(self, u):
        return u[self.sell(0): self.sell(0) + self.n_pre]

    def dc_block(self, u, t):
        return u[self.dc(t, 0): self.dc(t, 0) + self.n_pre]

    def grid_step(self, u, k):
        """(P_br, l, v) arrays of step k."""
        s = self.p_br(k, 0)
        nb = self.n_br
        return u[s:s + nb], u[s + nb:s + 2 * nb], u[s + 2 * nb:s + 3 * nb]


def build_layout(n_pre: int, n_batt: int, n_br: int, n_tp: int, grid: bool = True) -> DecisionLayout:
    return DecisionLayout(n_pre, n_batt, n_br, n_tp, grid)


@dataclass(frozen=True)
class TariffSchedule:
    """Time-of-use prices in $/kWh keyed by period name."""

    buy_res: dict[str, float] = field(default_factory=lambda: {"valley": 0.12, "offpeak": 0.20, "peak": 0.35})
    buy_bus: dict[str, float] = field(default_factory=lambda: {"valley": 0.06, "offpeak": 0.12, "peak": 0.25})
    sell: dict[str, float] = field(default_factory=lambda: {"valley": 0.02, "offpeak": 0.05, "peak": 0.10})
    dg: dict[str, float] = field(default_factory=lambda: {"valley": 0.30, "offpeak": 0.30, "peak": 0.30})
    # (start_hour, end_hour, period) covering [0, 24)
    periods: tuple[tuple[float, float, str], ...] = (
        (0.0, 8.0, "valley"), (8.0, 16.0, "offpeak"), (16.0, 21.0, "peak"), (21.0, 24.0, "offpeak"),
    )
    grid_buy: str = "res"  # which load tariff prices slack imports

    def __post_init__(self):
        for table in (self.buy_res, self.buy_bus, self.sell, self.dg):
            if set(table) != set(PERIODS):
                raise AssemblyError(f"tariff table needs exactly {PERIODS}")
            if any(v < 0 for v in table.values()):
                raise AssemblyError("prices must be non-negative")
        spans = sorted(self.periods)
        if spans[0][0] != 0.0 or spans[-1][1] != 24.0 or any(a[1] != b[0] for a, b in zip(spans, spans[1:])):
            raise AssemblyError("tariff periods must tile [0, 24)")
        if self.grid_buy not in ("res", "bus"):
            raise AssemblyError("grid_buy must be 'res' or 'bus'")

    def period(self, hour: float) -> str:
        h = float(hour) % 24.0
        for a, b, name in self.periods:
            if a <= h < b:
                return name
        return self.periods[-1][2]

    def _series(self, table, hours):
        return np.array([table[self.period(h)] for h in np.atleast_1d(hours)])

    def c_buy(self, hours):
        return self._series(self.buy_res if self.grid_buy == "res" else self.buy_bus, hours)

    def c_sell(self, hours):
        return self._series(self.sell, hours)

    def c_res(self, hours):
        return self._series(self.buy_res, hours)

    def c_bus(self, hours):
        return self._series(self.buy_bus, hours)

    def c_dg(self, hours):
        return self._series(self.dg, hours)


def degradation_cost(capex_per_kwh: float = 300.0, cycles: float = 5000.0, depth: float = 0.5) -> float:
    """Per-kWh throughput cost, ``depth * capex / cycles``."""
    return depth * capex_per_kwh / cycles


@dataclass(frozen=True)
class BatteryParams:
    p_rated: float  # MW
    bus: int
    duration: float = 5.0  # h
    eta_ch: float = 0.95
    eta_dis: float = 0.95
    sigma_0: float = 0.3
    sigma_min: float = 0.2
    sigma_max: float = 0.9
    c_deg: float = degradation_cost()

    def __post_init__(self):
        if not 0 <= self.sigma_min < self.sigma_0 < self.sigma_max <= 1:
            raise AssemblyError("need 0 <= sigma_min < sigma_0 < sigma_max <= 1")
        if not (0 < self.eta_ch <= 1 and 0 < self.eta_dis <= 1):
            raise AssemblyError("efficiencies must lie in (0, 1]")
        if self.p_rated <= 0 or self.duration <= 0:
            raise AssemblyError("battery rating and duration must be positive")
        if self.c_deg < 0:
            raise AssemblyError("degradation cost must be non-negative")

    @property
    def e_max(self) -> float:
        return self.p_rated * self.duration


def build_cost_vector(layout: DecisionLayout, c_buy, c_sell, batteries: Sequence[BatteryParams],
                      r: Sequence[float] | None, dt: float) -> np.ndarray:
    """Linear objective: battery losses and wear, purchases, sales revenue, line losses."""
    c_buy = np.broadcast_to(np.asarray(c_buy, dtype=float), (layout.n_pre,))
    c_sell = np.broadcast_to(np.asarray(c_sell, dtype=float), (layout.n_pre,))
    f = np.zeros(layout.dim)
    for b, bat in enumerate(batteries):
        f[layout.dis(b, 0): layout.dis(b, 0) + layout.n_pre] = dt * ((1 - bat.eta_dis) * c_buy + bat.c_deg)
        f[layout.ch(b, 0): layout.ch(b, 0) + layout.n_pre] = dt * ((1 - bat.eta_ch) * c_buy + bat.c_deg)
    f[layout.buy(0): layout.buy(0) + layout.n_pre] = dt * c_buy
    f[layout.sell(0): layout.sell(0) + layout.n_pre] = -dt * c_sell
    if layout.grid:
        r = np.asarray(r, dtype=float)
        for k in range(layout.n_pre):
            s = layout.l_br(k, 0)
            f[s:s + layout.n_br] = dt * c_buy[k] * r
    return f


def build_bounds(layout: DecisionLayout, batteries: Sequence[BatteryParams], grid_limit: float,
                 v_limits=(0.9, 1.1), i_max=None, p_br_max: float | None = None,
                 k_adj: float = 0.0, c_type=None, current_margin: float = 1.0):
    """Box bounds ``(lb, ub)``.

    ``c_type`` holds the base tariff of each load type per step, shape
    (n_tp, n_pre); the incentive may move at most ``k_adj`` times it.
    ``current_margin`` scales the current rating used by the decision model.
    """
    n = layout.dim
    lb = np.zeros(n)
    ub = np.zeros(n)
    for b, bat in enumerate(batteries):
        ub[layout.dis(b, 0): layout.dis(b, 0) + layout.n_pre] = bat.p_rated
        ub[layout.ch(b, 0): layout.ch(b, 0) + layout.n_pre] = bat.p_rated
    ub[layout.buy(0): layout.sell(0) + layout.n_pre] = grid_limit
    if layout.grid:
        if i_max is None or p_br_max is None:
            raise AssemblyError("grid layout needs current limits and a branch power bound")
        imax2 = (current_margin * np.asarray(i_max, dtype=float)) ** 2
        vmin2, vmax2 = v_limits[0] ** 2, v_limits[1] ** 2
        nb = layout.n_br
        for k in range(layout.n_pre):
            s = layout.p_br(k, 0)
            lb[s:s + nb], ub[s:s + nb] = -p_br_max, p_br_max
            lb[s + nb:s + 2 * nb], ub[s + nb:s + 2 * nb] = 0.0, imax2
            lb[s + 2 * nb:s + 3 * nb], ub[s + 2 * nb:s + 3 * nb] = vmin2, vmax2
    if layout.n_tp:
        c_type = np.asarray(c_type, dtype=float).reshape(layout.n_tp, layout.n_pre)
        for t in range(layout.n_tp):
            s = layout.dc(t, 0)
            width = k_adj * c_type[t]
            lb[s:s + layout.n_pre] = -width
            ub[s:s + layout.n_pre] = width
    return lb, ub


def build_soc_block(layout: DecisionLayout, batteries: Sequence[BatteryParams], sigma_k, dt: float,
                    terminal_row: int | None):
    """Cumulative state-of-charge limits per battery.

    Rows per battery: ``n_pre`` upper-limit rows then ``n_pre`` lower-limit
    rows. ``terminal_row`` (0-based horizon step that ends the day, or
    None when the day end lies beyond the horizon) turns that lower-limit
    row into ``sigma_end >= sigma_0``.
    """
    K = layout.n_pre
    nb = len(batteries)
    sigma_k = np.broadcast_to(np.asarray(sigma_k, dtype=float), (nb,))
    tril = sp.tril(np.ones((K, K)), format="coo")
    rows, cols, vals = [], [], []
    b_vec = np.zeros(2 * K * nb)
    for i, bat in enumerate(batteries):
        r0 = 2 * K * i
        a_dis = dt / (bat.e_max * bat.eta_dis)
        a_ch = bat.eta_ch * dt / bat.e_max
        for sign, roff in ((1.0, 0), (-1.0, K)):
            rows += [r0 + roff + tril.row, r0 + roff + tril.row]
            cols += [layout.dis(i, 0) + tril.col, layout.ch(i, 0) + tril.col]
            vals += [np.full(tril.nnz, -sign * a_dis), np.full(tril.nnz, sign * a_ch)]
        b_vec[r0:r0 + K] = bat.sigma_max - sigma_k[i]
        b_vec[r0 + K:r0 + 2 * K] = sigma_k[i] - bat.sigma_min
        if terminal_row is not None and 0 <= terminal_row < K:
            b_vec[r0 + K + terminal_row] = sigma_k[i] - bat.sigma_0
    if not nb:
        return sp.csr_matrix((0, layout.dim)), b_vec
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * K * nb, layout.dim))
    return A, b_vec


def build_energy_block(layout: DecisionLayout, alpha_sum, dt: float, eps: float,
                       history: float = 0.0, day_remaining: int | None = None):
    """Two-sided cap on the aggregate incentive-driven energy change.

    ``alpha_sum`` has shape (n_tp, n_pre): summed price sensitivity of each
    load type at each horizon step. Steps at or beyond ``day_remaining``
    belong to the next day and get zero weight. ``history`` is the energy
    change already committed earlier in the day.
    """
    if layout.n_tp == 0:
        return sp.csr_matrix((0, layout.dim)), np.zeros(0)
    alpha_sum = np.asarray(alpha_sum, dtype=float).reshape(layout.n_tp, layout.n_pre)
    last = layout.n_pre if day_remaining is None else max(0, min(day_remaining, layout.n_pre))
    row = np.zeros(layout.dim)
    for t in range(layout.n_tp):
        s = layout.dc(t, 0)
        row[s:s + last] = alpha_sum[t, :last] * dt
    A = sp.csr_matrix(np.vstack([row, -row]))
    return A, np.array([eps - history, eps + history])


def build_cone_blocks(network: NetworkModel, layout: DecisionLayout) -> ConeSet:
    """One rotated-to-standard cone per branch and step: ||[2P, v_i - l]|| <= v_i + l."""
    n_br, K = network.n_br, layout.n_pre
    m = n_br * K
    a_rows, a_cols, a_vals = [], [], []
    d_rows, d_cols, d_vals = [], [], []
    b = np.zeros(2 * m)
    gamma = np.zeros(m)
    ind = 0
    for k in range(K):
        for e, br in enumerate(network.branches):
            a_rows.append(2 * ind)
            a_cols.append(layout.p_br(k, e))
            a_vals.append(2.0)
            if br.from_bus == 1:
                b[2 * ind + 1] = -1.0
                gamma[ind] = -1.0
            else:
                vi = layout.v_bus(k, br.from_bus)
                a_rows.append(2 * ind + 1)
                a_cols.append(vi)
                a_vals.append(1.0)
                d_rows.append(ind)
                d_cols.append(vi)
                d_vals.append(1.0)
            li = layout.l_br(k, e)
            a_rows.append(2 * ind + 1)
            a_cols.append(li)
            a_vals.append(-1.0)
            d_rows.append(ind)
            d_cols.append(li)
            d_vals.append(1.0)
            ind += 1
    A = sp.csr_matrix((a_vals, (a_rows, a_cols)), shape=(2 * m, layout.dim))
    D = sp.csr_matrix((d_vals, (d_rows, d_cols)), shape=(m, layout.dim))
    return ConeSet(A, b, D, gamma, np.full(m, 2, dtype=int))


def build_grid_block(network: NetworkModel, layout: DecisionLayout, p_inj, alpha, dr_buses,
                     battery_buses: Sequence[int]):
    """Branch power balance and voltage drop rows, two per branch and step.

    ``p_inj`` is the forecast net injection per bus (index bus-1) and step,
    batteries excluded. ``alpha[t]`` is the price sensitivity of type-t
    loads per bus and step; ``dr_buses[t]`` lists the buses whose loads
    respond. A bus listed under several types responds as the first one.
    """
    K, n_br = layout.n_pre, network.n_br
    p_inj = np.asarray(p_inj, dtype=float)
    if p_inj.shape != (network.n_bus, K):
        raise AssemblyError(f"p_inj must have shape {(network.n_bus, K)}, got {p_inj.shape}")
    if len(battery_buses) != layout.n_batt:
        raise AssemblyError("battery bus list does not match the layout")
    for bus in battery_buses:
        if not 2 <= bus <= network.n_bus:
            raise AssemblyError(f"unknown battery bus {bus}")
    alpha = np.asarray(alpha, dtype=float).reshape(layout.n_tp, network.n_bus, K) if layout.n_tp else None
    dr_type = {}
    for t in range(layout.n_tp):
        for bus in dr_buses[t]:
            dr_type.setdefault(int(bus), t)

    rows, cols, vals = [], [], []
    b = np.zeros(2 * n_br * K)

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for k in range(K):
        base = 2 * n_br * k
        for e, br in enumerate(network.branches):
            pr, vr = base + 2 * e, base + 2 * e + 1
            out, inb, r = br.to_bus, br.from_bus, br.r_pu
            put(pr, layout.p_br(k, e), 1.0)
            for c in network.child_branches(out):
                put(pr, layout.p_br(k, c), -1.0)
            put(pr, layout.l_br(k, e), -r)
            b[pr] = -p_inj[out - 1, k]
            put(vr, layout.v_bus(k, out), 1.0)
            if inb == 1:
                b[vr] = 1.0
            else:
                put(vr, layout.v_bus(k, inb), -1.0)
            put(vr, layout.l_br(k, e), -r * r)
            put(vr, layout.p_br(k, e), 2.0 * r)
            t = dr_type.get(out)
            if t is not None:
                for i in range(k + 1):
                    put(pr, layout.dc(t, i), -alpha[t, out - 1, i])
        for i, bus in enumerate(battery_buses):
            e = network.branch_to(bus)
            put(base + 2 * e, layout.dis(i, k), 1.0)
            put(base + 2 * e, layout.ch(i, k), -1.0)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n_br * K, layout.dim))
    return A, b


def build_slack_block(network: NetworkModel, layout: DecisionLayout):
    """Ties the slack branch flows to the purchase/sale split of each step."""
    rows, cols, vals = [], [], []
    for k in range(layout.n_pre):
        for e in network.slack_branches():
            rows.append(k)
            cols.append(layout.p_br(k, e))
            vals.append(1.0)
        rows += [k, k]
        cols += [layout.buy(k), layout.sell(k)]
        vals += [-1.0, 1.0]
    return sp.csr_matrix((vals, (rows, cols)), shape=(layout.n_pre, layout.dim)), np.zeros(layout.n_pre)


def build_balance_block(network: NetworkModel, layout: DecisionLayout, p_inj, alpha, dr_buses):
    """Single aggregate power balance per step (no network)."""
    K = layout.n_pre
    p_inj = np.asarray(p_inj, dtype=float)
    rows, cols, vals = [], [], []
    b = np.zeros(K)
    alpha = np.asarray(alpha, dtype=float).reshape(layout.n_tp, network.n_bus, K) if layout.n_tp else None
    seen = set()
    a_type = np.zeros((layout.n_tp, K))
    for t in range(layout.n_tp):
        for bus in dr_buses[t]:
            if int(bus) in seen:
                continue
            seen.add(int(bus))
            a_type[t] += alpha[t, int(bus) - 1]
    for k in range(K):
        rows += [k, k]
        cols += [layout.buy(k), layout.sell(k)]
        vals += [1.0, -1.0]
        for i in range(layout.n_batt):
            rows += [k, k]
            cols += [layout.dis(i, k), layout.ch(i, k)]
            vals += [1.0, -1.0]
        for t in range(layout.n_tp):
            for i in range(k + 1):
                rows.append(k)
                cols.append(layout.dc(t, i))
                vals.append(-a_type[t, i])
        b[k] = -p_inj[1:, k].sum()
    return sp.csr_matrix((vals, (rows, cols)), shape=(K, layout.dim)), b


@dataclass
class HorizonInputs:
    """Everything the program needs for one solve, on the program step grid."""

    network: NetworkModel
    batteries: Sequence[BatteryParams]
    sigma: np.ndarray  # current SoC per battery
    dt: float  # program step, h
    p_inj: np.ndarray  # (n_bus, n_pre) forecast injections without batteries, pu
    c_buy: np.ndarray  # (n_pre,)
    c_sell: np.ndarray  # (n_pre,)
    alpha: np.ndarray | None = None  # (n_tp, n_bus, n_pre)
    c_type: np.ndarray | None = None  # (n_tp, n_pre)
    dr_buses: Sequence[Sequence[int]] = ()
    k_adj: float = 0.0
    eps: float = 0.0
    history: float = 0.0
    day_remaining: int | None = None
    terminal_row: int | None = None
    v_limits: tuple[float, float] = (0.9, 1.1)
    current_margin: float = 1.0
    grid_limit: float = 10.0
    p_br_max: float | None = None

    @property
    def n_pre(self) -> int:
        return self.p_inj.shape[1]

    @property
    def n_tp(self) -> int:
        return 0 if self.alpha is None else self.alpha.shape[0]


def assemble_program(inp: HorizonInputs, mode: str = SOCP) -> tuple[ConicProgram, DecisionLayout]:
    if mode not in (SOCP, LP):
        raise AssemblyError(f"unknown mode {mode!r}")
    net = inp.network
    grid = mode == SOCP
    layout = build_layout(inp.n_pre, len(inp.batteries), net.n_br, inp.n_tp, grid=grid)
    f = build_cost_vector(layout, inp.c_buy, inp.c_sell, inp.batteries, net.r, inp.dt)
    p_br_max = inp.p_br_max
    if p_br_max is None:
        p_br_max = 2.0 * max(sum(b.p_rated for b in inp.batteries) + float(np.clip(inp.p_inj[1:], 0, None).sum(0).max()), 0.5)
    lb, ub = build_bounds(layout, inp.batteries, inp.grid_limit, inp.v_limits, net.i_max, p_br_max,
                          inp.k_adj, inp.c_type, inp.current_margin)
    A_soc, b_soc = build_soc_block(layout, inp.batteries, inp.sigma, inp.dt, inp.terminal_row)
    if layout.n_tp:
        alpha_sum = np.zeros((layout.n_tp, layout.n_pre))
        seen = set()
        for t in range(layout.n_tp):
            for bus in inp.dr_buses[t]:
                if int(bus) not in seen:
                    seen.add(int(bus))
                    alpha_sum[t] += inp.alpha[t, int(bus) - 1]
        A_en, b_en = build_energy_block(layout, alpha_sum, inp.dt, inp.eps, inp.history, inp.day_remaining)
    else:
        A_en, b_en = build_energy_block(layout, None, inp.dt, inp.eps)
    A_ineq = sp.vstack([A_soc, A_en], format="csr")
    b_ineq = np.concatenate([b_soc, b_en])
    ineq_groups = {"soc": slice(0, len(b_soc)), "energy": slice(len(b_soc), len(b_ineq))}
    if grid:
        battery_buses = [b.bus for b in inp.batteries]
        A_grid, b_grid = build_grid_block(net, layout, inp.p_inj, inp.alpha, inp.dr_buses, battery_buses)
        A_sl, b_sl = build_slack_block(net, layout)
        A_eq = sp.vstack([A_grid, A_sl], format="csr")
        b_eq = np.concatenate([b_grid, b_sl])
        eq_groups = {"grid": slice(0, len(b_grid)), "slack": slice(len(b_grid), len(b_eq))}
        cones = build_cone_blocks(net, layout)
    else:
        A_eq, b_eq = build_balance_block(net, layout, inp.p_inj, inp.alpha, inp.dr_buses)
        eq_groups = {"balance": slice(0, len(b_eq))}
        cones = ConeSet.empty(layout.dim)
    prog = ConicProgram(f, lb, ub, A_ineq, b_ineq, A_eq, b_eq, cones, ineq_groups, eq_groups)
    return prog, layout
