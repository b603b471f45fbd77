"""Exact active-power DistFlow plant, relaxation gap metric, security checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .netmodel import NetworkModel

CHECK_TOL = 1e-6


class PowerFlowError(RuntimeError):
    """Plant power flow failed: non-convergence or voltage collapse."""


@dataclass
class GridState:
    branch_p: np.ndarray  # sending-end active power per branch
    branch_l: np.ndarray  # squared current per branch
    bus_v: np.ndarray  # squared voltage, non-slack buses 2..N (index bus-2)
    injections: np.ndarray  # per bus 1..N (index bus-1); slack entry is the import
    losses: float
    sweeps: int = 0

    @property
    def slack_import(self) -> float:
        return float(self.injections[0])

    def sending_v(self, network: NetworkModel) -> np.ndarray:
        """Squared voltage at the sending end of every branch."""
        out = np.empty(network.n_br)
        for e, br in enumerate(network.branches):
            out[e] = 1.0 if br.from_bus == 1 else self.bus_v[br.from_bus - 2]
        return out


def solve_plant_powerflow(
    network: NetworkModel,
    injections: Sequence[float],
    tol: float = 1e-10,
    max_sweeps: int = 100,
) -> GridState:
    """Backward/forward sweep on the exact simplified branch flow equations.

    ``injections`` has one entry per non-slack bus (bus 2..N), positive
    for generation. The backward pass solves each branch's quadratic
    ``P = D + r P^2 / v_i`` for its small (high-voltage) root.
    """
    inj = np.asarray(injections, dtype=float)
    nb, nbr = network.n_bus, network.n_br
    if inj.shape != (nb - 1,):
        raise ValueError(f"expected {nb - 1} injections, got {inj.shape}")
    if not np.all(np.isfinite(inj)):
        raise ValueError("injections must be finite")

    r = np.array(network.r)
    frm = np.array([b.from_bus for b in network.branches])
    to = np.array([b.to_bus for b in network.branches])
    order = list(network.order)
    children = [network.children.get(int(to[e]), ()) for e in range(nbr)]

    v_bus = np.ones(nb + 1)  # 1-based, v_bus[1] is the slack
    P = np.zeros(nbr)
    ell = np.zeros(nbr)
    for sweep in range(1, max_sweeps + 1):
        for e in reversed(order):
            d = sum(P[c] for c in children[e]) - inj[to[e] - 2]
            vi = v_bus[frm[e]]
            a = r[e] / vi
            disc = 1.0 - 4.0 * a * d
            if disc < 0:
                raise PowerFlowError(f"voltage collapse on branch {frm[e]}-{to[e]}")
            P[e] = 2.0 * d / (1.0 + math.sqrt(disc))
            ell[e] = P[e] ** 2 / vi
        for e in order:
            v_new = v_bus[frm[e]] + ell[e] * r[e] ** 2 - 2.0 * P[e] * r[e]
            if v_new <= 0:
                raise PowerFlowError(f"negative squared voltage at bus {to[e]}")
            v_bus[to[e]] = v_new
        res = _residuals(P, ell, v_bus, inj, r, frm, to, children)
        if res <= tol:
            break
    else:
        raise PowerFlowError(f"sweep did not converge in {max_sweeps} sweeps (residual {res:.2e})")

    injections_all = np.empty(nb)
    injections_all[1:] = inj
    injections_all[0] = sum(P[e] for e in network.slack_branches())
    return GridState(P.copy(), ell.copy(), v_bus[2:].copy(), injections_all, float(np.dot(ell, r)), sweep)


def _residuals(P, ell, v_bus, inj, r, frm, to, children) -> float:
    worst = 0.0
    for e in range(len(P)):
        bal = sum(P[c] for c in children[e]) - P[e] + ell[e] * r[e] - inj[to[e] - 2]
        vdrop = v_bus[frm[e]] + ell[e] * r[e] ** 2 - 2 * P[e] * r[e] - v_bus[to[e]]
        cur = ell[e] * v_bus[frm[e]] - P[e] ** 2
        worst = max(worst, abs(bal), abs(vdrop), abs(cur))
    return worst


def model_residuals(network: NetworkModel, state: GridState) -> np.ndarray:
    """Per-branch residuals of (balance, voltage drop, l v = P^2) as an (N_br, 3) array."""
    out = np.zeros((network.n_br, 3))
    vs = state.sending_v(network)
    for e, br in enumerate(network.branches):
        kids = network.child_branches(br.to_bus)
        p_j = state.injections[br.to_bus - 1]
        out[e, 0] = sum(state.branch_p[c] for c in kids) - state.branch_p[e] + state.branch_l[e] * br.r_pu - p_j
        out[e, 1] = vs[e] + state.branch_l[e] * br.r_pu**2 - 2 * state.branch_p[e] * br.r_pu - state.bus_v[br.to_bus - 2]
        out[e, 2] = state.branch_l[e] * vs[e] - state.branch_p[e] ** 2
    return out


def relaxation_gap(p, l, v_send, floor: float = 1e-12) -> float:
    """Power-weighted relative mismatch between P^2 and v*l, in percent."""
    p = np.abs(np.asarray(p, dtype=float))
    sq = p**2
    vl = np.asarray(v_send, dtype=float) * np.asarray(l, dtype=float)
    keep = ~((sq < floor) & (np.abs(vl) < floor))
    total = p.sum()
    if total <= floor or not keep.any():
        return 0.0
    denom = np.maximum(sq[keep], vl[keep])
    terms = p[keep] / total * np.abs(sq[keep] - vl[keep]) / denom
    return float(terms.sum() * 100.0)


def state_gap(network: NetworkModel, state: GridState) -> float:
    return relaxation_gap(state.branch_p, state.branch_l, state.sending_v(network))


@dataclass
class SecurityReport:
    voltage_violations: list[tuple[int, int, float]] = field(default_factory=list)
    current_violations: list[tuple[int, int, float]] = field(default_factory=list)
    max_v: float = -math.inf
    min_v: float = math.inf
    max_loading: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.voltage_violations and not self.current_violations

    @property
    def n_violations(self) -> int:
        return len(self.voltage_violations) + len(self.current_violations)

    def merge(self, other: "SecurityReport") -> "SecurityReport":
        return SecurityReport(
            self.voltage_violations + other.voltage_violations,
            self.current_violations + other.current_violations,
            max(self.max_v, other.max_v),
            min(self.min_v, other.min_v),
            max(self.max_loading, other.max_loading),
        )


def check_security(
    state: GridState,
    v_limits: tuple[float, float],
    network: NetworkModel,
    step: int = 0,
    tol: float = CHECK_TOL,
) -> SecurityReport:
    vmin, vmax = v_limits
    rep = SecurityReport()
    mags = np.sqrt(np.maximum(state.bus_v, 0.0))
    for k, vm in enumerate(mags):
        if vm < vmin - tol or vm > vmax + tol:
            rep.voltage_violations.append((k + 2, step, float(vm)))
    if len(mags):
        rep.max_v, rep.min_v = float(mags.max()), float(mags.min())
    imag = np.sqrt(np.maximum(state.branch_l, 0.0))
    imax = np.array(network.i_max)
    for e in range(network.n_br):
        if imag[e] > imax[e] + tol:
            rep.current_violations.append((e, step, float(imag[e])))
    rep.max_loading = float((imag / imax).max()) if network.n_br else 0.0
    return rep


def write_state_csv(states: Sequence[GridState], prefix: str | Path) -> tuple[Path, Path]:
    """Writes ``<prefix>_branches.csv`` (step,branch,P_pu,l_pu) and ``<prefix>_buses.csv`` (step,bus,v_pu)."""
    prefix = Path(prefix)
    bpath = prefix.with_name(prefix.name + "_branches.csv")
    vpath = prefix.with_name(prefix.name + "_buses.csv")
    with open(bpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "branch", "P_pu", "l_pu"])
        for k, s in enumerate(states):
            if s is None:
                continue
            for e in range(len(s.branch_p)):
                w.writerow([k, e, repr(float(s.branch_p[e])), repr(float(s.branch_l[e]))])
    with open(vpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "bus", "v_pu"])
        for k, s in enumerate(states):
            if s is None:
                continue
            for j, v in enumerate(s.bus_v):
                w.writerow([k, j + 2, repr(float(v))])
    return bpath, vpath
