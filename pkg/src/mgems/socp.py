"""Primal-dual interior-point solver for sparse second-order cone programs.

Problem form::

    minimize    f'u
    subject to  lb <= u <= ub
                A_ineq u <= b_ineq
                A_eq u == b_eq
                ||A_i u - b_i||_2 <= d_i'u - gamma_i      for every cone i

Internally everything is mapped to ``G x + s = h, s in K, A x = b`` with
K a product of a nonnegative orthant and second-order cones, and solved by
a path-following method with Nesterov-Todd scaling (optionally with a
Mehrotra predictor-corrector). The reduced KKT system is factored with a
sparse quasi-definite LDL' (qdldl, AMD ordering), with a dense LU fallback
for small systems.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"
# stopped on stall or numerical trouble with the best iterate inside the loose tolerances
OPTIMAL_INACCURATE = "optimal-inaccurate"


def _soc_det(blk: np.ndarray) -> np.ndarray:
    """x0^2 - ||x1||^2 per row, written as a product to avoid cancellation."""
    nrm = np.linalg.norm(blk[:, 1:], axis=1)
    return (blk[:, 0] - nrm) * (blk[:, 0] + nrm)


def _csr(a, shape=None) -> sp.csr_matrix:
    if a is None:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(a, dtype=float)


@dataclass
class ConeSet:
    """A batch of second-order cones ``||A_i u - b_i|| <= d_i'u - gamma_i``.

    ``A`` stacks the cone rows of all blocks; ``sizes[i]`` is the number of
    rows block ``i`` owns. ``D`` holds one ``d_i`` per row.
    """

    A: sp.csr_matrix
    b: np.ndarray
    D: sp.csr_matrix
    gamma: np.ndarray
    sizes: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "ConeSet":
        return cls(sp.csr_matrix((0, n)), np.zeros(0), sp.csr_matrix((0, n)), np.zeros(0), np.zeros(0, dtype=int))

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple], n: int) -> "ConeSet":
        if not blocks:
            return cls.empty(n)
        As, bs, ds, gs, sizes = [], [], [], [], []
        for A_sc, b_sc, d_sc, g in blocks:
            A_sc = _csr(A_sc)
            if A_sc.shape[0] < 1:
                raise ValueError("cone block needs at least one row")
            As.append(A_sc)
            bs.append(np.asarray(b_sc, dtype=float).ravel())
            ds.append(_csr(np.asarray(d_sc.todense() if sp.issparse(d_sc) else d_sc, dtype=float).reshape(1, -1)))
            gs.append(float(g))
            sizes.append(A_sc.shape[0])
        return cls(sp.vstack(As, format="csr"), np.concatenate(bs), sp.vstack(ds, format="csr"),
                   np.array(gs), np.array(sizes, dtype=int))

    def __len__(self) -> int:
        return len(self.sizes)

    def blocks(self) -> Iterator[tuple[sp.csr_matrix, np.ndarray, np.ndarray, float]]:
        start = 0
        for i, q in enumerate(self.sizes):
            yield (self.A[start:start + q], self.b[start:start + q],
                   np.asarray(self.D[i].todense()).ravel(), float(self.gamma[i]))
            start += q

    def violation(self, u: np.ndarray) -> np.ndarray:
        """Per-cone ``||A u - b|| - (d'u - gamma)`` (positive means violated)."""
        if not len(self):
            return np.zeros(0)
        r = self.A @ u - self.b
        starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        norms = np.sqrt(np.add.reduceat(r * r, starts))
        return norms - (self.D @ u - self.gamma)


@dataclass
class ConicProgram:
    cost: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A_ineq: sp.csr_matrix
    b_ineq: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    cones: ConeSet
    ineq_groups: dict[str, slice] = field(default_factory=dict)
    eq_groups: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.cost)
        self.cost = np.asarray(self.cost, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        self.A_ineq = _csr(self.A_ineq, (0, n))
        self.A_eq = _csr(self.A_eq, (0, n))
        self.b_ineq = np.asarray(self.b_ineq, dtype=float).ravel()
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.cones is None:
            self.cones = ConeSet.empty(n)
        for name, mat in (("A_ineq", self.A_ineq), ("A_eq", self.A_eq),
                          ("cone A", self.cones.A), ("cone d", self.cones.D)):
            if mat.shape[1] != n:
                raise ValueError(f"{name} has {mat.shape[1]} columns, expected {n}")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bound vectors must match the cost length")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")
        if self.A_ineq.shape[0] != len(self.b_ineq) or self.A_eq.shape[0] != len(self.b_eq):
            raise ValueError("row counts of matrices and right-hand sides disagree")

    @property
    def n(self) -> int:
        return len(self.cost)


@dataclass
class SolverResult:
    u_star: np.ndarray
    objective: float
    iterations: int
    duality_gap: float
    status: str
    per_iteration_time: float
    solve_time: float = 0.0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    duals: dict = field(default_factory=dict)
    iteration_times: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, OPTIMAL_INACCURATE)


class _Cones:
    """Index bookkeeping for R+^ml x prod Q^q, with SOCs grouped by size."""

    def __init__(self, ml: int, soc_dims: Sequence[int]):
        self.ml = ml
        self.dims = np.asarray(soc_dims, dtype=int)
        self.m = ml + int(self.dims.sum())
        starts = ml + np.concatenate([[0], np.cumsum(self.dims)[:-1]]).astype(int) if len(self.dims) else np.zeros(0, int)
        self.groups: list[np.ndarray] = []
        for q in np.unique(self.dims):
            st = starts[self.dims == q]
            self.groups.append(st[:, None] + np.arange(q)[None, :])
        self.degree = ml + len(self.dims)
        self.e = np.zeros(self.m)
        self.e[:ml] = 1.0
        for idx in self.groups:
            self.e[idx[:, 0]] = 1.0

    def min_eig(self, x):
        vals = [x[: self.ml]] if self.ml else []
        for idx in self.groups:
            blk = x[idx]
            vals.append(blk[:, 0] - np.linalg.norm(blk[:, 1:], axis=1))
        return min((v.min() for v in vals if len(v)), default=np.inf)

    def inner(self, x, y):
        return float(x @ y)

    def sprod(self, x, y):
        out = np.empty_like(x)
        out[: self.ml] = x[: self.ml] * y[: self.ml]
        for idx in self.groups:
            a, b = x[idx], y[idx]
            blk = np.empty_like(a)
            blk[:, 0] = np.einsum("ij,ij->i", a, b)
            blk[:, 1:] = a[:, :1] * b[:, 1:] + b[:, :1] * a[:, 1:]
            out[idx] = blk
        return out

    def sinv(self, lam, x):
        """Solve lam o y = x for y."""
        out = np.empty_like(x)
        out[: self.ml] = x[: self.ml] / lam[: self.ml]
        for idx in self.groups:
            l, v = lam[idx], x[idx]
            det = _soc_det(l)
            y0 = (l[:, 0] * v[:, 0] - np.einsum("ij,ij->i", l[:, 1:], v[:, 1:])) / det
            blk = np.empty_like(v)
            blk[:, 0] = y0
            blk[:, 1:] = (v[:, 1:] - y0[:, None] * l[:, 1:]) / l[:, :1]
            out[idx] = blk
        return out

    def max_step(self, x, dx):
        """Largest alpha with x + alpha dx in the cone (inf if unbounded)."""
        best = np.inf
        if self.ml:
            neg = dx[: self.ml] < 0
            if neg.any():
                best = float(np.min(-x[: self.ml][neg] / dx[: self.ml][neg]))
        for idx in self.groups:
            xb, db = x[idx], dx[idx]
            a = db[:, 0] ** 2 - np.einsum("ij,ij->i", db[:, 1:], db[:, 1:])
            b = xb[:, 0] * db[:, 0] - np.einsum("ij,ij->i", xb[:, 1:], db[:, 1:])
            c = np.maximum(_soc_det(xb), 0.0)
            disc = b * b - a * c
            hit = (a < 0) | ((b < 0) & (disc >= 0))
            if hit.any():
                root = c[hit] / (-b[hit] + np.sqrt(np.maximum(disc[hit], 0.0)))
                best = min(best, float(root.min()))
        return best


class _Scaling:
    """Nesterov-Todd scaling W (symmetric) with W z = W^{-1} s = lambda."""

    def __init__(self, cones: _Cones, s, z):
        self.c = cones
        ml = cones.ml
        self.dl = np.sqrt(s[:ml] / z[:ml])
        self.beta, self.v = [], []
        for idx in cones.groups:
            sb, zb = s[idx], z[idx]
            ds_, dz_ = _soc_det(sb), _soc_det(zb)
            if ds_.min() <= 0.0 or dz_.min() <= 0.0:
                raise np.linalg.LinAlgError("iterate left the cone interior")
            aa, bb = np.sqrt(ds_), np.sqrt(dz_)
            sn, zn = sb / aa[:, None], zb / bb[:, None]
            gam = np.sqrt(np.maximum(1.0 + np.einsum("ij,ij->i", sn, zn), 1e-300) / 2.0)
            wbar = sn.copy()
            wbar[:, 0] += zn[:, 0]
            wbar[:, 1:] -= zn[:, 1:]
            wbar /= 2.0 * gam[:, None]
            v = wbar.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (wbar[:, 0] + 1.0))[:, None]
            self.beta.append(np.sqrt(aa / bb))
            self.v.append(v)

    def apply(self, x, inverse=False):
        out = np.empty_like(x)
        ml = self.c.ml
        out[:ml] = x[:ml] / self.dl if inverse else x[:ml] * self.dl
        for idx, beta, v in zip(self.c.groups, self.beta, self.v):
            xb = x[idx]
            if inverse:
                # W^{-1} = (2 J v v' J - J) / beta
                jv = v.copy()
                jv[:, 1:] *= -1
                t = np.einsum("ij,ij->i", jv, xb)
                y = 2.0 * t[:, None] * jv
                y[:, 0] -= xb[:, 0]
                y[:, 1:] += xb[:, 1:]
                out[idx] = y / beta[:, None]
            else:
                t = np.einsum("ij,ij->i", v, xb)
                y = 2.0 * t[:, None] * v
                y[:, 0] -= xb[:, 0]
                y[:, 1:] += xb[:, 1:]
                out[idx] = y * beta[:, None]
        return out

    def inverse_entries(self) -> np.ndarray:
        """Entries of W^-1 in the order of ``_scaling_pattern``."""
        vals = [1.0 / self.dl]
        for idx, beta, v in zip(self.c.groups, self.beta, self.v):
            q = idx.shape[1]
            jv = v.copy()
            jv[:, 1:] *= -1
            blk = 2.0 * jv[:, :, None] * jv[:, None, :]
            blk[:, np.arange(q), np.arange(q)] += np.r_[-1.0, np.ones(q - 1)]
            blk /= beta[:, None, None]
            vals.append(blk.ravel())
        return np.concatenate(vals)


def _scaling_pattern(cones: _Cones) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the block-diagonal W^-1, diagonal part first."""
    rows = [np.arange(cones.ml)]
    cols = [np.arange(cones.ml)]
    for idx in cones.groups:
        q = idx.shape[1]
        rows.append(np.repeat(idx, q, axis=1).ravel())
        cols.append(np.tile(idx, (1, q)).ravel())
    return np.concatenate(rows), np.concatenate(cols)


def _row_pairs(indptr, rows, other_rows):
    """Flat positions (p, q) over all pairs of stored entries of rows[t] and other_rows[t]."""
    ca = np.diff(indptr)[rows]
    cb = np.diff(indptr)[other_rows]
    per = ca * cb
    t = np.repeat(np.arange(len(rows)), per)
    k = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
    cb_t = np.repeat(cb, per)
    return t, indptr[rows][t] + k // cb_t, indptr[other_rows][t] + k % cb_t


class _KKTSystem:
    """Upper triangle of [[Gt'Gt + reg I, A'], [A, -reg I]] with Gt = W^-1 G.

    W^-1 is block diagonal with a pattern fixed by the cone sizes, so the
    patterns of Gt and of the whole matrix are built once per solve. Each
    iteration maps the entries of W^-1 linearly to Gt and accumulates the
    Gram products row by row. The LDL' factor (qdldl, AMD ordering) is
    refactored numerically on later calls; systems with fewer than
    ``dense_below`` variables fall back to dense LU when that fails.
    """

    def __init__(self, G: sp.csr_matrix, A: sp.csr_matrix, cones: _Cones, dense_below: int, refine: int = 3):
        G = sp.csr_matrix(G)
        G.sum_duplicates()
        m, n, p = G.shape[0], G.shape[1], A.shape[0]
        N = n + p
        self.n, self.p, self.N = n, p, N
        self.dense_below = dense_below
        self.refine = refine
        ra, cb = _scaling_pattern(cones)
        # Gt[a, i] = sum_b Winv[a, b] G[b, i]
        cnt = np.diff(G.indptr)[cb]
        t = np.repeat(np.arange(len(ra)), cnt)
        pb = np.repeat(G.indptr[cb], cnt) + np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        gkeys, ginv = np.unique(ra[t].astype(np.int64) * n + G.indices[pb], return_inverse=True)
        self.Tg = sp.csr_matrix((G.data[pb], (ginv, t)), shape=(len(gkeys), len(ra)))
        g_rows = gkeys // n
        g_cols = gkeys % n
        g_indptr = np.searchsorted(g_rows, np.arange(m + 1))
        self._gt_pattern = (g_cols.astype(np.int32), g_indptr.astype(np.int32), (m, n))
        # H[i, j] = sum_a Gt[a, i] Gt[a, j], i <= j
        rr = np.arange(m)
        _, hp, hq = _row_pairs(g_indptr, rr, rr)
        keep = g_cols[hp] <= g_cols[hq]
        self.hp, self.hq = hp[keep], hq[keep]
        hi, hj = g_cols[self.hp], g_cols[self.hq]
        Ac = sp.coo_matrix(A)
        diag = np.arange(N)
        rows = np.concatenate([hi, Ac.col, diag])
        cols = np.concatenate([hj, n + Ac.row, diag])
        keys, inv = np.unique(cols.astype(np.int64) * N + rows, return_inverse=True)
        nh, na = len(hi), Ac.nnz
        self.nnz = len(keys)
        self.indices = (keys % N).astype(np.int32)
        self.indptr = np.searchsorted(keys // N, np.arange(N + 1)).astype(np.int32)
        self.hpos = inv[:nh]
        self.const = np.bincount(inv[nh:nh + na], weights=Ac.data, minlength=self.nnz)
        self.reg_sign = np.bincount(inv[nh + na:], weights=np.r_[np.ones(n), -np.ones(p)], minlength=self.nnz)
        self._ldl = None

    def _matrix(self, data) -> sp.csc_matrix:
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.N, self.N))

    def factor(self, m: np.ndarray, reg: float) -> None:
        import qdldl

        gt = self.Tg @ m
        cols, ptr, shape = self._gt_pattern
        self.Gt = sp.csr_matrix((gt, cols, ptr), shape=shape)
        base = np.bincount(self.hpos, weights=gt[self.hp] * gt[self.hq], minlength=self.nnz) + self.const
        self.K = self._matrix(base)
        self.Kdiag = self.K.diagonal()
        Kreg = self._matrix(base + reg * self.reg_sign)
        self.dense = False
        try:
            self._Kreg = Kreg
            if self._ldl is None:
                self._ldl = qdldl.Solver(Kreg, upper=True)
                self._updated = False
            else:
                self._ldl.update(Kreg, upper=True)
                self._updated = True
            return
        except Exception as exc:
            self._ldl = None
            if self.n >= self.dense_below:
                raise np.linalg.LinAlgError(f"sparse factorization failed: {exc}") from exc
        self.dense = True
        full = Kreg.toarray()
        full = full + np.triu(full, 1).T
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", la.LinAlgWarning)
            self._lu = la.lu_factor(full, check_finite=False)
        piv = np.abs(np.diag(self._lu[0]))
        if not np.all(np.isfinite(piv)) or piv.min() == 0.0:
            raise np.linalg.LinAlgError("singular KKT matrix")

    def _solve_reg(self, r):
        if self.dense:
            return la.lu_solve(self._lu, r, check_finite=False)
        return self._ldl.solve(r)

    def _mul(self, x):
        return self.K @ x + self.K.T @ x - self.Kdiag * x

    def solve(self, rx, ry):
        import qdldl

        rhs = np.concatenate([rx, ry])
        scale = 1.0 + np.max(np.abs(rhs))
        sol = self._refined(rhs, scale)
        if not self.dense and self._updated and not np.max(np.abs(rhs - self._mul(sol))) <= 1e-6 * scale:
            # numeric refactorization occasionally breaks down where a fresh one does not
            log.debug("updated LDL' factor inaccurate; refactoring from scratch")
            self._ldl = qdldl.Solver(self._Kreg, upper=True)
            self._updated = False
            sol = self._refined(rhs, scale)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite KKT solution")
        return sol[: self.n], sol[self.n:]

    def _refined(self, rhs, scale):
        sol = self._solve_reg(rhs)
        if not np.all(np.isfinite(sol)):
            return sol
        for _ in range(self.refine):
            res = rhs - self._mul(sol)
            if np.max(np.abs(res)) <= 1e-14 * scale:
                break
            sol += self._solve_reg(res)
        return sol


@dataclass
class _Standard:
    c: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    cones: _Cones
    rows_lower: np.ndarray  # variable index per lower-bound row
    rows_upper: np.ndarray
    n_ineq: int


def to_standard(prog: ConicProgram) -> _Standard:
    n = prog.n
    fixed = np.isfinite(prog.lb) & np.isfinite(prog.ub) & (prog.lb == prog.ub)
    lo = np.flatnonzero(np.isfinite(prog.lb) & ~fixed)
    up = np.flatnonzero(np.isfinite(prog.ub) & ~fixed)
    fx = np.flatnonzero(fixed)
    G_lo = sp.csr_matrix((-np.ones(len(lo)), (np.arange(len(lo)), lo)), shape=(len(lo), n))
    G_up = sp.csr_matrix((np.ones(len(up)), (np.arange(len(up)), up)), shape=(len(up), n))
    blocks = [G_lo, G_up, prog.A_ineq]
    hs = [-prog.lb[lo], prog.ub[up], prog.b_ineq]
    cs = prog.cones
    soc_dims = []
    if len(cs):
        # cone block i -> rows [-d_i'; -A_i], rhs [-gamma_i; -b_i]
        starts = np.concatenate([[0], np.cumsum(cs.sizes)[:-1]])
        order_rows = []
        pos = 0
        cone_rows = sp.vstack([cs.D, cs.A], format="csr")
        nd = cs.D.shape[0]
        for i, q in enumerate(cs.sizes):
            order_rows.append(i)
            order_rows.extend(nd + starts[i] + np.arange(q))
            soc_dims.append(q + 1)
            pos += q + 1
        order_rows = np.asarray(order_rows, dtype=int)
        blocks.append(-cone_rows[order_rows])
        hs.append(-np.concatenate([cs.gamma, cs.b])[order_rows])
    G = sp.vstack(blocks, format="csr")
    h = np.concatenate(hs)
    A = prog.A_eq
    b = prog.b_eq
    if len(fx):
        A = sp.vstack([A, sp.csr_matrix((np.ones(len(fx)), (np.arange(len(fx)), fx)), shape=(len(fx), n))], format="csr")
        b = np.concatenate([b, prog.lb[fx]])
    ml = len(lo) + len(up) + prog.A_ineq.shape[0]
    return _Standard(prog.cost, G, h, A, b, _Cones(ml, soc_dims), lo, up, prog.A_ineq.shape[0])


def solve(
    program: ConicProgram,
    feas_tol: float = 1e-8,
    gap_tol: float = 1e-9,
    max_iter: int = 200,
    predictor_corrector: bool = False,
    sigma: float = 0.1,
    step_fraction: float = 0.99,
    dense_below: int = 500,
    stall_iters: int = 20,
    reduced_tol: float = 1e-6,
) -> SolverResult:
    """Solve a ConicProgram; see module docstring for the problem form.

    The default is a plain path-following iteration with fixed centering
    ``sigma``; ``predictor_corrector=True`` switches to Mehrotra's scheme.
    If the iteration stalls or the KKT system becomes unusable, the best
    iterate is returned as OPTIMAL_INACCURATE when all residuals are within
    ``reduced_tol``.
    """
    t_start = time.perf_counter()
    st = to_standard(program)
    c, G, h, A, b, K = st.c, st.G, st.h, st.A, st.b, st.cones
    n, p, m = len(c), A.shape[0], K.m
    norm_b = 1.0 + (np.max(np.abs(b)) if p else 0.0)
    norm_h = 1.0 + (np.max(np.abs(h)) if m else 0.0)
    norm_c = 1.0 + np.max(np.abs(c))

    # Initial point from two least-squares solves with W = I.
    kkt = _KKTSystem(G, A, K, dense_below)
    ra, cb = _scaling_pattern(K)
    kkt.factor((ra == cb).astype(float), 1e-9)
    x, y = kkt.solve(G.T @ h, b)
    s = h - G @ x
    xd, y_d = kkt.solve(-c, np.zeros(p))
    z = G @ xd
    y = y_d
    for vec in (s, z):
        a = -K.min_eig(vec)
        if a >= -1e-8:
            vec += (1.0 + a) * K.e

    status = ITERATION_LIMIT
    iter_times: list[float] = []
    best_merit, best_iter = np.inf, 0
    best = None
    reg = 1e-9
    it = 0
    pres = dres = relgap = np.inf
    for it in range(max_iter + 1):
        t_it = time.perf_counter()
        rx = c + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        pcost = float(c @ x)
        pres = max(np.max(np.abs(ry)) / norm_b if p else 0.0, np.max(np.abs(rz)) / norm_h if m else 0.0)
        dres = np.max(np.abs(rx)) / norm_c
        relgap = gap / max(1.0, abs(pcost))
        if pres <= feas_tol and dres <= feas_tol and relgap <= gap_tol:
            status = OPTIMAL
            break
        # infeasibility / unboundedness certificates on the current iterate
        dual_ray = -(float(h @ z) + float(b @ y))
        if dual_ray > 0 and np.max(np.abs(A.T @ y + G.T @ z)) / dual_ray < 1e-9 and pres > feas_tol:
            status = INFEASIBLE
            break
        if pcost < 0 and m and np.max(np.abs(G @ x + s)) / -pcost < 1e-9 and (
            not p or np.max(np.abs(A @ x)) / -pcost < 1e-9
        ) and dres > feas_tol:
            status = UNBOUNDED
            break
        merit = max(pres, dres, relgap)
        if merit < best_merit:
            best = (x.copy(), y.copy(), z.copy(), s.copy(), pres, dres, relgap)
        if merit < 0.9 * best_merit:
            best_iter = it
        best_merit = min(best_merit, merit)
        if it - best_iter >= stall_iters:
            status = INFEASIBLE if pres > feas_tol else (UNBOUNDED if dres > feas_tol else INFEASIBLE)
            log.debug("residual stall at iteration %d", it)
            break
        if it == max_iter:
            break

        step = None
        while step is None and reg <= 1e-5:
            try:
                step = _newton_step(K, kkt, s, z, rx, ry, rz, gap, reg,
                                    predictor_corrector, sigma)
            except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
                log.debug("KKT solve failed with reg %.0e: %s", reg, exc)
                reg *= 100.0
        if step is None:
            status = INFEASIBLE
            break
        dx, dy, dz, ds = step
        alpha = min(1.0, step_fraction * K.max_step(s, ds), step_fraction * K.max_step(z, dz))
        x += alpha * dx
        y += alpha * dy
        z += alpha * dz
        s += alpha * ds
        iter_times.append(time.perf_counter() - t_it)

    if status != OPTIMAL and best is not None:
        bx, by, bz, bs, bp, bd, bg = best
        if bp <= reduced_tol and bd <= reduced_tol and bg <= reduced_tol:
            x, y, z, s, pres, dres, relgap = bx, by, bz, bs, bp, bd, bg
            status = OPTIMAL_INACCURATE

    n_iter = len(iter_times)
    duals = _split_duals(st, y, z, program)
    return SolverResult(
        u_star=x,
        objective=float(c @ x),
        iterations=n_iter,
        duality_gap=float(relgap),
        status=status,
        per_iteration_time=float(np.median(iter_times)) if iter_times else 0.0,
        solve_time=time.perf_counter() - t_start,
        primal_residual=float(pres),
        dual_residual=float(dres),
        duals=duals,
        iteration_times=iter_times,
    )


def _newton_step(K, kkt, s, z, rx, ry, rz, gap, reg, predictor_corrector, sigma):
    W = _Scaling(K, s, z)
    lam = W.apply(z)
    mu = gap / K.degree
    kkt.factor(W.inverse_entries(), reg)

    def direction(ds_rhs):
        # ds_rhs is the complementarity target lam o (W^-1 ds + W dz)
        xi = K.sinv(lam, ds_rhs)
        bz = -rz - W.apply(xi)
        wbz = W.apply(bz, inverse=True)
        dx, dy = kkt.solve(-rx + kkt.Gt.T @ wbz, -ry)
        dz = W.apply(kkt.Gt @ dx - wbz, inverse=True)
        ds = W.apply(xi - W.apply(dz))
        return dx, dy, dz, ds

    lamlam = K.sprod(lam, lam)
    if predictor_corrector:
        dxa, dya, dza, dsa = direction(-lamlam)
        aa = min(1.0, K.max_step(s, dsa), K.max_step(z, dza))
        sig = (1.0 - aa) ** 3
        corr = K.sprod(W.apply(dsa, inverse=True), W.apply(dza))
        out = direction(-lamlam + sig * mu * K.e - corr)
    else:
        out = direction(-lamlam + sigma * mu * K.e)
    if not all(np.all(np.isfinite(v)) for v in out):
        raise np.linalg.LinAlgError("non-finite search direction")
    return out


def _split_duals(st: _Standard, y, z, prog: ConicProgram) -> dict:
    n = len(st.c)
    nlo, nup = len(st.rows_lower), len(st.rows_upper)
    lower = np.zeros(n)
    upper = np.zeros(n)
    lower[st.rows_lower] = z[:nlo]
    upper[st.rows_upper] = z[nlo:nlo + nup]
    ineq = z[nlo + nup: st.cones.ml].copy()
    p0 = prog.A_eq.shape[0]
    eq = y[:p0].copy()
    # multipliers of fixed variables fold into the bound duals
    fixed = np.flatnonzero(np.isfinite(prog.lb) & (prog.lb == prog.ub))
    yf = y[p0:]
    lower[fixed] += np.maximum(-yf, 0.0)
    upper[fixed] += np.maximum(yf, 0.0)
    cones = z[st.cones.ml:].copy()
    return {"eq": eq, "ineq": ineq, "lower": lower, "upper": upper, "cones": cones}


def kkt_residuals(program: ConicProgram, u: np.ndarray, duals: dict | None = None) -> dict:
    """Primal residuals per constraint group, stationarity and complementarity.

    ``duals`` uses the layout returned in ``SolverResult.duals``; missing
    entries count as zero. Cone duals are stacked per block as
    ``(z0, z1)`` with ``z0`` pairing with ``d'u - gamma``.
    """
    u = np.asarray(u, dtype=float)
    n = program.n
    duals = duals or {}
    y = np.asarray(duals.get("eq", np.zeros(program.A_eq.shape[0])), dtype=float)
    zi = np.asarray(duals.get("ineq", np.zeros(program.A_ineq.shape[0])), dtype=float)
    zl = np.asarray(duals.get("lower", np.zeros(n)), dtype=float)
    zu = np.asarray(duals.get("upper", np.zeros(n)), dtype=float)
    cs = program.cones
    zc = np.asarray(duals.get("cones", np.zeros(int(cs.sizes.sum()) + len(cs))), dtype=float)

    out: dict = {}
    r_eq = program.A_eq @ u - program.b_eq
    out["eq"] = float(np.max(np.abs(r_eq))) if len(r_eq) else 0.0
    for name, sl in program.eq_groups.items():
        out[f"eq:{name}"] = float(np.max(np.abs(r_eq[sl]))) if len(r_eq[sl]) else 0.0
    r_in = program.A_ineq @ u - program.b_ineq
    out["ineq"] = float(max(np.max(r_in), 0.0)) if len(r_in) else 0.0
    for name, sl in program.ineq_groups.items():
        out[f"ineq:{name}"] = float(max(np.max(r_in[sl]), 0.0)) if len(r_in[sl]) else 0.0
    with np.errstate(invalid="ignore"):
        lo_v = np.where(np.isfinite(program.lb), program.lb - u, 0.0)
        up_v = np.where(np.isfinite(program.ub), u - program.ub, 0.0)
    out["lower"] = float(max(lo_v.max(initial=0.0), 0.0))
    out["upper"] = float(max(up_v.max(initial=0.0), 0.0))
    out["box"] = max(out["lower"], out["upper"])
    viol = cs.violation(u)
    out["cones"] = float(max(viol.max(initial=0.0), 0.0))

    grad = program.cost + program.A_eq.T @ y + program.A_ineq.T @ zi - zl + zu
    comp = []
    if len(cs):
        z0, z1 = _cone_dual_parts(cs, zc)
        grad = grad - cs.D.T @ z0 - cs.A.T @ z1
        t = cs.D @ u - cs.gamma
        w = cs.A @ u - cs.b
        starts = np.concatenate([[0], np.cumsum(cs.sizes)[:-1]])
        comp.append(np.abs(z0 * t + np.add.reduceat(z1 * w, starts)))
    out["dual"] = float(np.max(np.abs(grad)))
    if len(zi):
        comp.append(np.abs(zi * (program.b_ineq - program.A_ineq @ u)))
    fl, fu = np.isfinite(program.lb), np.isfinite(program.ub)
    comp.append(np.abs(zl[fl] * (u[fl] - program.lb[fl])))
    comp.append(np.abs(zu[fu] * (program.ub[fu] - u[fu])))
    total = sum(float(np.sum(cv)) for cv in comp)
    out["complementarity"] = total / max(1.0, abs(float(program.cost @ u)))
    out["primal"] = max(out["eq"], out["ineq"], out["box"], out["cones"])
    return out


def _cone_dual_parts(cs: ConeSet, zc: np.ndarray):
    z0 = np.empty(len(cs))
    z1 = np.empty(int(cs.sizes.sum()))
    pos = 0
    row = 0
    for i, q in enumerate(cs.sizes):
        z0[i] = zc[pos]
        z1[row:row + q] = zc[pos + 1:pos + 1 + q]
        pos += q + 1
        row += q
    return z0, z1


# --- sparse-triplet text dump -------------------------------------------------

def _write_matrix(fh, name, M):
    M = sp.coo_matrix(M)
    fh.write(f"section {name} {M.shape[0]} {M.shape[1]} {M.nnz}\n")
    for i, j, v in zip(M.row, M.col, M.data):
        fh.write(f"{i} {j} {float(v)!r}\n")


def _write_vector(fh, name, v):
    v = np.asarray(v, dtype=float)
    nz = np.flatnonzero(v != 0)
    fh.write(f"section {name} {len(v)} 1 {len(nz)}\n")
    for i in nz:
        fh.write(f"{i} 0 {float(v[i])!r}\n")


def dump_program(program: ConicProgram, path: str | Path) -> None:
    """Write ``section <name> <rows> <cols> <nnz>`` headers followed by ``i j value`` lines."""
    with open(path, "w") as fh:
        fh.write("# mgems conic program v1\n")
        _write_vector(fh, "cost", program.cost)
        _write_vector(fh, "lb", program.lb)
        _write_vector(fh, "ub", program.ub)
        _write_matrix(fh, "A_ineq", program.A_ineq)
        _write_vector(fh, "b_ineq", program.b_ineq)
        _write_matrix(fh, "A_eq", program.A_eq)
        _write_vector(fh, "b_eq", program.b_eq)
        _write_matrix(fh, "cone_A", program.cones.A)
        _write_vector(fh, "cone_b", program.cones.b)
        _write_matrix(fh, "cone_D", program.cones.D)
        _write_vector(fh, "cone_gamma", program.cones.gamma)
        _write_vector(fh, "cone_sizes", program.cones.sizes)
        for kind, groups in (("ineq", program.ineq_groups), ("eq", program.eq_groups)):
            for name, sl in groups.items():
                fh.write(f"group {kind} {name} {sl.start} {sl.stop}\n")


def load_program(path: str | Path) -> ConicProgram:
    sections: dict[str, object] = {}
    groups = {"ineq": {}, "eq": {}}
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        tok = lines[i]
        if tok[0] == "group":
            groups[tok[1]][tok[2]] = slice(int(tok[3]), int(tok[4]))
            i += 1
            continue
        if tok[0] != "section":
            raise ValueError(f"malformed program dump near line {i}: {tok}")
        name, rows, cols, nnz = tok[1], int(tok[2]), int(tok[3]), int(tok[4])
        body = lines[i + 1:i + 1 + nnz]
        r = np.array([int(t[0]) for t in body], dtype=int)
        c = np.array([int(t[1]) for t in body], dtype=int)
        v = np.array([float(t[2]) for t in body])
        M = sp.csr_matrix((v, (r, c)), shape=(rows, cols))
        sections[name] = np.asarray(M.todense()).ravel() if cols == 1 and name not in ("A_ineq", "A_eq", "cone_A", "cone_D") else M
        i += 1 + nnz
    # vectors were dumped sparsely; lb/ub default to zero, which is the stored value
    cones = ConeSet(sections["cone_A"], sections["cone_b"], sections["cone_D"],
                    sections["cone_gamma"], sections["cone_sizes"].astype(int))
    return ConicProgram(sections["cost"], sections["lb"], sections["ub"], sections["A_ineq"], sections["b_ineq"],
                        sections["A_eq"], sections["b_eq"], cones, groups["ineq"], groups["eq"])
