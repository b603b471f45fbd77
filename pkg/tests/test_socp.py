import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from mgems.socp import (
    INFEASIBLE, OPTIMAL, UNBOUNDED, ConeSet, ConicProgram, dump_program, kkt_residuals, load_program, solve,
)

from oracles import cvxpy_reference, random_program

INF = np.inf


def box_lp(c, lb, ub, **kw):
    n = len(c)
    return ConicProgram(np.asarray(c, float), np.asarray(lb, float), np.asarray(ub, float),
                        kw.get("A_in", sp.csr_matrix((0, n))), kw.get("b_in", np.zeros(0)),
                        kw.get("A_eq", sp.csr_matrix((0, n))), kw.get("b_eq", np.zeros(0)),
                        kw.get("cones"))


class TestSolve:
    def test_box_lp(self):
        r = solve(box_lp([1.0], [1.0], [2.0]))
        assert r.status == OPTIMAL
        assert r.u_star[0] == pytest.approx(1.0, abs=1e-7)
        assert r.objective == pytest.approx(1.0, abs=1e-7)

    def test_projection_socp(self):
        # min t  s.t. |x - 3| <= t, x in [0, 2]
        cones = ConeSet.from_blocks([(np.array([[1.0, 0.0]]), np.array([3.0]), np.array([0.0, 1.0]), 0.0)], 2)
        r = solve(box_lp([0.0, 1.0], [0.0, -INF], [2.0, INF], cones=cones))
        assert r.status == OPTIMAL
        assert r.u_star == pytest.approx([2.0, 1.0], abs=1e-6)

    def test_rotated_cone(self):
        # max x s.t. x^2 <= y z with y = 1, z = 4 as a standard cone ||[2x, y - z]|| <= y + z
        A = np.array([[2.0, 0, 0], [0, 1.0, -1.0]])
        cones = ConeSet.from_blocks([(A, np.zeros(2), np.array([0, 1.0, 1.0]), 0.0)], 3)
        r = solve(box_lp([-1.0, 0, 0], [-10, 1, 4], [10, 1, 4], cones=cones))
        assert r.u_star[0] == pytest.approx(2.0, abs=1e-6)

    def test_equality(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0]]))
        r = solve(box_lp([1.0, 2.0], [0, 0], [INF, INF], A_eq=A, b_eq=np.array([1.0])))
        assert r.u_star == pytest.approx([1.0, 0.0], abs=1e-7)

    def test_infeasible(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0]]))
        r = solve(box_lp([1.0, 1.0], [0, 0], [1, 1], A_eq=A, b_eq=np.array([5.0])))
        assert r.status == INFEASIBLE
        assert not r.ok

    def test_unbounded(self):
        r = solve(box_lp([-1.0, 0.0], [0.0, 0.0], [INF, 1.0]))
        assert r.status == UNBOUNDED

    def test_telemetry(self):
        r = solve(random_program(3))
        assert r.iterations == len(r.iteration_times) > 0
        assert r.per_iteration_time > 0
        assert r.solve_time >= sum(r.iteration_times)

    @pytest.mark.parametrize("pc", [False, True])
    def test_mehrotra_agrees(self, pc):
        p = random_program(11)
        ref = solve(p)
        r = solve(p, predictor_corrector=pc)
        assert r.objective == pytest.approx(ref.objective, abs=1e-6)

    def test_brute_force_two_variable(self):
        # min c'x over a disc intersected with a box; 1e-3 grid scan
        cones = ConeSet.from_blocks([(np.eye(2), np.array([0.3, -0.2]), np.zeros(2), -1.0)], 2)
        c = np.array([0.7, -1.3])
        r = solve(box_lp(c, [-0.5, -1.0], [1.0, 0.6], cones=cones))
        g = np.arange(-1.0, 1.0 + 1e-9, 1e-3)
        X, Y = np.meshgrid(g, g)
        ok = (np.hypot(X - 0.3, Y + 0.2) <= 1.0) & (X >= -0.5) & (X <= 1.0) & (Y >= -1.0) & (Y <= 0.6)
        best = (c[0] * X + c[1] * Y)[ok].min()
        assert r.objective == pytest.approx(best, abs=2e-3)
        assert r.objective <= best + 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_reference(self, seed):
        p = random_program(seed, lp=seed % 3 == 0)
        r = solve(p)
        status, val, _ = cvxpy_reference(p)
        assert status == "optimal"
        assert r.status == OPTIMAL
        assert r.objective == pytest.approx(val, abs=1e-5)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_optimal_exits_satisfy_kkt(self, seed):
        p = random_program(seed)
        r = solve(p)
        assert r.status == OPTIMAL
        k = kkt_residuals(p, r.u_star, r.duals)
        assert k["primal"] <= 1e-8
        assert k["dual"] <= 1e-8
        assert k["complementarity"] <= 1e-8


class TestKKTResiduals:
    def test_box_perturbation(self):
        p = box_lp([1.0, 1.0], [1.0, 0.0], [2.0, 3.0])
        r = solve(p)
        u = r.u_star.copy()
        u[0] -= 1e-3
        k = kkt_residuals(p, u, r.duals)
        assert k["box"] == pytest.approx(1e-3, rel=1e-3)

    def test_zero_duals(self):
        c = np.array([0.5, -2.0, 1.0])
        p = box_lp(c, [-1] * 3, [1] * 3)
        k = kkt_residuals(p, np.zeros(3))
        assert k["dual"] == pytest.approx(np.abs(c).max())
        assert k["primal"] == 0.0

    def test_groups(self):
        A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        p = ConicProgram(np.zeros(2), -np.ones(2), np.ones(2), A, np.array([0.5, 0.5]),
                         sp.csr_matrix((0, 2)), np.zeros(0), None, ineq_groups={"a": slice(0, 1), "b": slice(1, 2)})
        k = kkt_residuals(p, np.array([0.7, 0.0]))
        assert k["ineq:a"] == pytest.approx(0.2)
        assert k["ineq:b"] == 0.0


class TestProgram:
    def test_shape_checks(self):
        with pytest.raises(ValueError):
            ConicProgram(np.zeros(2), np.zeros(2), np.ones(2), np.ones((1, 3)), np.zeros(1),
                         sp.csr_matrix((0, 2)), np.zeros(0), None)
        with pytest.raises(ValueError):
            ConicProgram(np.zeros(2), np.ones(2), np.zeros(2), sp.csr_matrix((0, 2)), np.zeros(0),
                         sp.csr_matrix((0, 2)), np.zeros(0), None)

    def test_cone_violation(self):
        cs = ConeSet.from_blocks([(np.eye(2), np.zeros(2), np.zeros(2), -1.0)], 2)
        assert cs.violation(np.array([3.0, 4.0]))[0] == pytest.approx(4.0)
        assert len(cs) == 1

    def test_dump_roundtrip(self, tmp_path):
        p = random_program(5)
        dump_program(p, tmp_path / "p.txt")
        q = load_program(tmp_path / "p.txt")
        assert np.array_equal(p.cost, q.cost)
        assert (p.A_eq != q.A_eq).nnz == 0
        assert (p.cones.A != q.cones.A).nnz == 0
        assert solve(q).objective == pytest.approx(solve(p).objective)
