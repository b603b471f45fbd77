import csv
import dataclasses

import numpy as np
import pytest

from mgems import ems
from mgems.assembler import SOCP, BatteryParams
from mgems.ems import (
    ALL_MODES, Controls, EmsMode, LoopState, Microgrid, apply_step, check_invariants, daily_energy_cap,
    dr_step_payment, mpc_step, run_day_ahead, run_simulation, soc_update, step_cost, write_trace_csv,
)
from mgems.opf import PowerFlowError
from mgems.scenario import Horizon, builtin_case


def with_horizon(cfg, **kw):
    return dataclasses.replace(cfg, horizon=dataclasses.replace(cfg.horizon, **kw))


@pytest.fixture(scope="module")
def ten_bus():
    _, cfg = builtin_case("10bus")
    return Microgrid(cfg)


def fresh_state(mg):
    return LoopState(np.array([b.sigma_0 for b in mg.batteries]), np.zeros(mg.net.n_bus))


class TestSettlement:
    def test_purchase(self):
        assert step_cost(1.0, 0.35, 0.02, 0.1, 0.0, 0.001) == pytest.approx(35.35)

    def test_sale(self):
        assert step_cost(1.0, 0.35, 0.02, 0.0, 0.1, 0.0) == pytest.approx(-2.00)

    def test_battery_terms(self):
        b = BatteryParams(0.15, 2, c_deg=0.01)
        c = step_cost(1.0, 0.3, 0.0, 0.0, 0.0, 0.0, dis=[0.0], ch=[0.1], batteries=[b])
        assert c == pytest.approx(1000 * (0.3 * 0.1 * 0.05 + 0.01 * 0.1))

    def test_dr_payment(self):
        assert dr_step_payment(0.35, -20.0, 0.0007, 1.0) == pytest.approx(-0.0049)

    def test_soc_update(self):
        b = BatteryParams(0.15, 2)  # 0.75 MWh
        assert soc_update(0.3, 0.0, 0.1, b, 1.0) - 0.3 == pytest.approx(0.12667, abs=1e-5)
        assert soc_update(0.3, 0.1, 0.0, b, 1.0) - 0.3 == pytest.approx(-0.1 / (0.75 * 0.95))


class TestModes:
    def test_parse(self):
        assert EmsMode.parse("SOCP-MPC").name == "socp-mpc"
        assert EmsMode.parse("lp-day-ahead").name == "lp-da"
        assert [m.name for m in ALL_MODES] == ["lp-da", "lp-mpc", "socp-da", "socp-mpc"]

    @pytest.mark.parametrize("text", ["socp", "qp-mpc", "lp-weekly", ""])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            EmsMode.parse(text)


class TestPlantStep:
    def test_idle_leaves_state(self, ten_bus):
        st = fresh_state(ten_bus)
        soc0 = st.soc.copy()
        rec = apply_step(ten_bus, st, Controls.idle(2, len(ten_bus.kinds)), 0, None)
        assert np.array_equal(st.soc, soc0)
        assert np.all(st.dr_offset == 0)
        assert not (rec.clamped or rec.exclusivity_breach or rec.plant_failed)

    def test_charge_example(self, ten_bus):
        st = fresh_state(ten_bus)
        ctl = Controls(np.zeros(2), np.array([0.1, 0.0]), 0.0, 0.0, np.zeros(len(ten_bus.kinds)))
        rec = apply_step(ten_bus, st, ctl, 0, None)
        assert rec.soc[0] - 0.3 == pytest.approx(0.12667, abs=1e-5)
        assert rec.soc[1] == 0.3

    def test_simultaneous_flagged(self, ten_bus):
        st = fresh_state(ten_bus)
        ctl = Controls(np.full(2, 0.1), np.full(2, 0.1), 0.0, 0.0, np.zeros(len(ten_bus.kinds)))
        rec = apply_step(ten_bus, st, ctl, 0, None)
        assert rec.exclusivity_breach
        assert all(s < 0.3 for s in rec.soc)

    def test_clamped_to_floor(self, ten_bus):
        st = fresh_state(ten_bus)
        ctl = Controls(np.array([1.0, 0.0]), np.zeros(2), 0.0, 0.0, np.zeros(len(ten_bus.kinds)))
        rec = apply_step(ten_bus, st, ctl, 0, None)
        assert rec.clamped
        assert rec.soc[0] == pytest.approx(0.2)
        assert rec.dis[0] == pytest.approx(0.1 * 0.75 * 0.95)

    def test_dr_moves_load(self, ten_bus):
        st = fresh_state(ten_bus)
        ctl = Controls(np.zeros(2), np.zeros(2), 0.0, 0.0, np.full(len(ten_bus.kinds), 0.002))
        rec = apply_step(ten_bus, st, ctl, 12, None)
        assert rec.dr_cost < 0
        assert np.all(st.dr_offset <= 0) and st.dr_offset.min() < 0

    def test_plant_failure(self, ten_bus, monkeypatch):
        def boom(*a, **k):
            raise PowerFlowError("collapsed")
        monkeypatch.setattr(ems, "solve_plant_powerflow", boom)
        rec = apply_step(ten_bus, fresh_state(ten_bus), Controls.idle(2, len(ten_bus.kinds)), 3, None)
        assert rec.plant_failed and rec.n_violations == 1
        assert rec.losses == 0.0


class TestPolicies:
    def test_first_mpc_solve_is_day_ahead(self, ten_bus):
        da = run_day_ahead(ten_bus, SOCP)
        ctl, plan, fb = mpc_step(ten_bus, fresh_state(ten_bus), 0, SOCP, daily_energy_cap(ten_bus))
        assert not fb
        assert plan.result.objective == pytest.approx(da.result.objective, abs=1e-6)
        assert ctl.dis == pytest.approx(da.controls[0].dis, abs=1e-5)
        assert ctl.ch == pytest.approx(da.controls[0].ch, abs=1e-5)

    def test_dr_lowers_planned_cost(self, ten_bus):
        cfg = ten_bus.cfg
        off = Microgrid(dataclasses.replace(cfg, dr=dataclasses.replace(cfg.dr, enabled=False)),
                        ten_bus.profiles, ten_bus.forecaster)
        with_dr = run_day_ahead(ten_bus, SOCP).result.objective
        without = run_day_ahead(off, SOCP).result.objective
        assert with_dr <= without + 1e-6

    def test_deterministic(self, ten_bus):
        cfg = with_horizon(ten_bus.cfg, n_pre=6)
        mg = Microgrid(cfg, ten_bus.profiles, ten_bus.forecaster)
        a, ra = run_simulation(cfg, EmsMode.parse("socp-mpc"), microgrid=mg)
        b, rb = run_simulation(cfg, EmsMode.parse("socp-mpc"), microgrid=mg)
        for x, y in zip(a.records, b.records):
            assert (x.dis, x.ch, x.soc, x.cost, x.dC) == (y.dis, y.ch, y.soc, y.cost, y.dC)
        assert ra.economic_cost == rb.economic_cost

    @pytest.mark.parametrize("mode", ["lp-da", "socp-da"])
    def test_day_ahead_invariants(self, ten_bus, mode):
        trace, rep = run_simulation(ten_bus.cfg, EmsMode.parse(mode), microgrid=ten_bus)
        assert len(trace) == 24 and trace.solves == 1
        assert check_invariants(trace, ten_bus) == []
        assert rep.solver_failures == 0
        assert rep.economic_cost == pytest.approx(sum(r.cost for r in trace.records))
        if mode == "socp-da":
            assert rep.gap_mean is not None and rep.gap_max >= rep.gap_mean

    def test_solver_failure_falls_back(self, ten_bus):
        cfg = with_horizon(ten_bus.cfg, n_pre=4)
        mg = Microgrid(cfg, ten_bus.profiles, ten_bus.forecaster)
        trace, rep = run_simulation(cfg, EmsMode.parse("lp-mpc"), solver_opts={"max_iter": 2}, microgrid=mg)
        assert all(r.fallback for r in trace.records)
        assert rep.solver_failures == 24
        assert all(d == 0.0 for r in trace.records for d in r.dis + r.ch)
        assert all(r.soc == trace.sigma_0 for r in trace.records)

    def test_five_minute_decisions(self, ten_bus):
        cfg = with_horizon(ten_bus.cfg, dt_d=1 / 12, n_pre=3)
        mg = Microgrid(cfg, ten_bus.profiles, ten_bus.forecaster)
        assert cfg.horizon.n_decisions == 288
        trace, rep = run_simulation(cfg, EmsMode.parse("lp-mpc"), microgrid=mg)
        assert len(trace) == trace.solves == 288
        assert trace.records[-1].hour == pytest.approx(23 + 11 / 12)
        assert rep.solver_failures == 0
        assert [v for v in check_invariants(trace, mg) if not v.startswith("terminal")] == []


class TestInvariants:
    def test_detects_bad_soc(self, ten_bus):
        trace, _ = run_simulation(ten_bus.cfg, EmsMode.parse("lp-da"), microgrid=ten_bus)
        trace.records[5].soc = [0.95, 0.3]
        trace.records[6].buy = trace.records[6].sell = 0.1
        bad = check_invariants(trace, ten_bus)
        assert "soc-bounds@5" in bad and "buy-sell@6" in bad

    def test_trace_csv(self, ten_bus, tmp_path):
        trace, _ = run_simulation(ten_bus.cfg, EmsMode.parse("lp-da"), microgrid=ten_bus)
        p = write_trace_csv(trace, tmp_path / "t.csv")
        rows = list(csv.DictReader(open(p)))
        assert len(rows) == 24
        assert {"soc0", "soc1", "dC0", "dC1", "cost_usd"} <= set(rows[0])
        assert float(rows[3]["cost_usd"]) == pytest.approx(trace.records[3].cost)


def test_horizon_defaults():
    h = Horizon()
    assert (h.n_decisions, h.substeps) == (24, 1)
    assert Horizon(dt_d=0.25).n_decisions == 96
