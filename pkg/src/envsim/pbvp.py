"""Coupled periodic boundary value problem on per-subcircuit spline grids.

Unknowns are the spline coefficients of every subcircuit, stacked
subcircuit by subcircuit with coefficient row-major layout: coefficient
(k, c) of subcircuit i lives at ``offset_i + k * m_i + c``.

Equations:

* for subcircuit i with test intervals I_1..I_n (one knot inside each) and
  MNA rows r_i = m_i - (connection ends), every interval contributes

      [ rate * (q(x(b)) - q(x(a))) + int_a^b g + sum_j gamma_j q_j dt ] / (b - a)

  for its first r_i components; the charge difference uses the fundamental
  theorem (exact), the algebraic part Gauss quadrature (exact for the
  spline part).  Dividing by the interval length keeps residual entries in
  signal units independently of the period.

* every connection contributes voltage-match rows integrated over the
  first subcircuit's intervals and current-match rows over the second's,
  which balances equations and unknowns exactly.

``rate`` is the fast-axis transport coefficient omega * P / (2 pi), so a
constant omega = 2 pi / P reduces the steady-state problem to the
conventional periodic problem d/dt q + g = s on (0, P].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import splu

from .errors import (
    ModelDomainError,
    NoConvergenceError,
    NonFiniteStateError,
    SingularMatrixError,
)
from .mna import build_layout, eval_stamps
from .netlist import PartitionedCircuit
from .spline import PeriodicSplineBasis, SplineWaveform, eval_waveform

_PIVOT_RTOL = 1e-14


@dataclass
class TestIntervals:
    """Split points tau_0 < ... < tau_n with tau_n = tau_0 + P."""

    points: np.ndarray

    @property
    def n(self):
        return self.points.size - 1

    def bounds(self, ell):
        return float(self.points[ell]), float(self.points[ell + 1])

    def lengths(self):
        return np.diff(self.points)


def choose_test_intervals(basis: PeriodicSplineBasis) -> TestIntervals:
    """Midpoints between consecutive knots; interval ell contains knot ell."""
    idx = np.arange(-1, basis.n + 1)
    mids = 0.5 * (basis.ext_knots(idx[:-1]) + basis.ext_knots(idx[1:]))
    return TestIntervals(points=mids)


@dataclass
class NewtonOptions:
    abstol: float = 1e-12
    reltol: float = 1e-10
    max_iter: int = 40
    damping_factor: float = 0.5
    damping_floor: float = 1.0 / 1024.0

    def __post_init__(self):
        if self.abstol <= 0 or self.reltol <= 0:
            raise ValueError("tolerances must be positive")
        if not (0.0 < self.damping_factor < 1.0):
            raise ValueError("damping factor must be in (0, 1)")


@dataclass
class NewtonReport:
    iterations: int = 0
    converged: bool = False
    norms: list = field(default_factory=list)
    final_norm: float = np.nan
    dim: int = 0
    nnz: int = 0
    assembly_time: float = 0.0
    solve_time: float = 0.0

    def to_keyvalues(self) -> str:
        return (
            f"newton_iterations={self.iterations}\n"
            f"converged={str(self.converged).lower()}\n"
            f"final_norm={self.final_norm!r}\n"
            f"dimension={self.dim}\nnnz={self.nnz}\n"
        )


@dataclass
class SparseSystem:
    """Assembled residual and Jacobian of the coupled Galerkin system."""

    residual: np.ndarray
    jacobian: csr_matrix
    dim: int
    nnz: int
    sub_slices: list  # per-subcircuit unknown slices

    def to_keyvalues(self) -> str:
        return f"dimension={self.dim}\nnnz={self.nnz}\n"


class DiscreteProblem:
    """Cached discretization for a fixed set of bases.

    Quadrature points, basis values, and the (linear) connection equation
    block depend only on the grids, so they are built once and reused by
    every Newton iteration.
    """

    def __init__(self, pcircuit: PartitionedCircuit, bases, source_dir: str = "."):
        self.pcircuit = pcircuit
        self.bases = list(bases)
        self.layouts = [
            build_layout(s, pcircuit.period, source_dir)
            for s in pcircuit.subcircuits
        ]
        self.intervals = [choose_test_intervals(b) for b in self.bases]
        self.m = [lay.m for lay in self.layouts]
        self.r = [lay.n_rows for lay in self.layouts]
        self.n = [b.n for b in self.bases]
        self.col_off = np.concatenate([[0], np.cumsum([n * m for n, m in zip(self.n, self.m)])])
        self.row_off = np.concatenate([[0], np.cumsum([n * r for n, r in zip(self.n, self.r)])])
        self.dim = int(self.col_off[-1])
        self._build_quadrature()
        self._conn_matrix = self._build_connection_block()
        self.n_conn_rows = self._conn_matrix.shape[0]
        if int(self.row_off[-1]) + self.n_conn_rows != self.dim:
            raise AssertionError("equation/unknown count mismatch")

    # -- static structure ---------------------------------------------------

    def _build_quadrature(self):
        self.quads = []
        for b, ti in zip(self.bases, self.intervals):
            nodes, weights, ids = [], [], []
            for ell in range(ti.n):
                a, bb = ti.bounds(ell)
                x, w = b.quadrature(a, bb)
                nodes.append(x)
                weights.append(w)
                ids.append(np.full(x.size, ell, dtype=int))
            nodes = np.concatenate(nodes)
            first, vals, _ = b.eval_active(nodes)
            ep = ti.points[:-1]
            ep_first, ep_vals, _ = b.eval_active(ep)
            self.quads.append(
                dict(
                    nodes=nodes,
                    weights=np.concatenate(weights),
                    ids=np.concatenate(ids),
                    first=first,
                    vals=vals,
                    ep=np.asarray(ep, dtype=float),
                    ep_first=ep_first,
                    ep_vals=ep_vals,
                    lens=ti.lengths(),
                )
            )

    def _build_connection_block(self):
        rows, cols, vals = [], [], []
        row = 0
        base = int(self.row_off[-1])
        for conn in self.pcircuit.connections:
            i, j = conn.sub_k, conn.sub_l
            mu, nu = conn.node_mu, conn.node_nu
            end_i = self.layouts[i].conn_end_index[conn.current_unknowns[0]]
            end_j = self.layouts[j].conn_end_index[conn.current_unknowns[1]]
            # voltage match on grid i
            for ell in range(self.intervals[i].n):
                a, b = self.intervals[i].bounds(ell)
                L = b - a
                wi = self.bases[i].integrate_basis(a, b) / L
                wj = self.bases[j].integrate_basis(a, b) / L
                r = base + row
                for kk in np.nonzero(wi)[0]:
                    rows.append(r)
                    cols.append(self.col_off[i] + kk * self.m[i] + mu)
                    vals.append(wi[kk])
                for kk in np.nonzero(wj)[0]:
                    rows.append(r)
                    cols.append(self.col_off[j] + kk * self.m[j] + nu)
                    vals.append(-wj[kk])
                row += 1
            # current match on grid j
            for ell in range(self.intervals[j].n):
                a, b = self.intervals[j].bounds(ell)
                L = b - a
                wi = self.bases[i].integrate_basis(a, b) / L
                wj = self.bases[j].integrate_basis(a, b) / L
                r = base + row
                for kk in np.nonzero(wi)[0]:
                    rows.append(r)
                    cols.append(self.col_off[i] + kk * self.m[i] + end_i)
                    vals.append(wi[kk])
                for kk in np.nonzero(wj)[0]:
                    rows.append(r)
                    cols.append(self.col_off[j] + kk * self.m[j] + end_j)
                    vals.append(wj[kk])
                row += 1
        shape = (row, self.dim)
        if row == 0:
            return csr_matrix(shape)
        rows = np.asarray(rows) - base
        return csr_matrix((vals, (rows, cols)), shape=shape)

    # -- waveform packing ----------------------------------------------------

    def pack(self, waveforms):
        return np.concatenate([wf.coeffs.ravel() for wf in waveforms])

    def unpack(self, u):
        out = []
        for i, b in enumerate(self.bases):
            blk = u[self.col_off[i] : self.col_off[i + 1]]
            out.append(SplineWaveform(b, blk.reshape(self.n[i], self.m[i]).copy()))
        return out

    # -- history caching -----------------------------------------------------

    def history_terms(self, rothe):
        """sum_j gamma_j q(X_{k-j}) at the quadrature nodes, per subcircuit."""
        gammas = np.asarray(getattr(rothe, "gammas", ()), dtype=float)
        hist = getattr(rothe, "history", ())
        out = []
        for i in range(len(self.bases)):
            acc = None
            for gj, wfs in zip(gammas[1:], hist):
                x = eval_waveform(wfs[i], self.quads[i]["nodes"])
                st = eval_stamps(self.layouts[i], x, rothe.tau, self.quads[i]["nodes"])
                acc = gj * st.q if acc is None else acc + gj * st.q
            out.append(acc)
        return out

    # -- assembly -------------------------------------------------------------

    def assemble(self, waveforms, rothe, need_jacobian=True, hist_cache=None):
        rate = rothe.rate
        tau = rothe.tau
        scale = getattr(rothe, "source_scale", 1.0)
        gammas = np.asarray(getattr(rothe, "gammas", ()), dtype=float)
        gamma0 = float(gammas[0]) if gammas.size else 0.0
        if hist_cache is None:
            hist_cache = self.history_terms(rothe)

        residual = np.empty(self.dim)
        trips_r, trips_c, trips_v = [], [], []

        for i, (b, lay, quad) in enumerate(zip(self.bases, self.layouts, self.quads)):
            n, m, r = self.n[i], self.m[i], self.r[i]
            nodes, w, ids = quad["nodes"], quad["weights"], quad["ids"]
            vals, first = quad["vals"], quad["first"]
            lens = quad["lens"]
            dp1 = b.degree + 1

            x = _waveform_values(waveforms[i], vals, first, m)
            st = eval_stamps(lay, x, tau, nodes, source_scale=scale)
            f = st.g + gamma0 * st.q
            if hist_cache[i] is not None:
                f = f + hist_cache[i]

            integ = np.zeros((n, m))
            np.add.at(integ, ids, w[:, None] * f)

            xe = _waveform_values(waveforms[i], quad["ep_vals"], quad["ep_first"], m)
            ste = eval_stamps(lay, xe, tau, quad["ep"], source_scale=scale)
            qdiff = ste.q[(np.arange(n) + 1) % n] - ste.q
            rows = (rate * qdiff + integ) / lens[:, None]
            residual[self.row_off[i] : self.row_off[i + 1]] = rows[:, :r].ravel()

            if not need_jacobian:
                continue

            #  d residual / d c[kb, c]
            M = (st.dg + gamma0 * st.dq)[:, :r, :] * w[:, None, None]
            inv_len = 1.0 / lens[ids]
            row_idx = (
                self.row_off[i]
                + ids[:, None, None] * r
                + np.arange(r)[None, :, None]
            )
            col_base = self.col_off[i] + np.arange(m)[None, None, :]
            for a in range(dp1):
                kb = (first + a) % n
                E = M * (vals[:, a] * inv_len)[:, None, None]
                cols = col_base + kb[:, None, None] * m
                trips_r.append(np.broadcast_to(row_idx, E.shape).ravel())
                trips_c.append(np.broadcast_to(cols, E.shape).ravel())
                trips_v.append(E.ravel())

            # charge endpoint terms: endpoint e is the left end of interval
            # e (sign -) and the right end of interval e-1 (sign +)
            dqe = ste.dq[:, :r, :]
            ep_first, ep_vals = quad["ep_first"], quad["ep_vals"]
            for a in range(dp1):
                kb = (ep_first + a) % n
                base_block = rate * dqe * ep_vals[:, a][:, None, None]
                cols = col_base + kb[:, None, None] * m
                for sign, which in ((-1.0, np.arange(n)), (1.0, (np.arange(n) - 1) % n)):
                    E = sign * base_block / lens[which][:, None, None]
                    rws = (
                        self.row_off[i]
                        + which[:, None, None] * r
                        + np.arange(r)[None, :, None]
                    )
                    trips_r.append(np.broadcast_to(rws, E.shape).ravel())
                    trips_c.append(np.broadcast_to(cols, E.shape).ravel())
                    trips_v.append(E.ravel())

        u = self.pack(waveforms)
        if self.n_conn_rows:
            residual[self.row_off[-1] :] = self._conn_matrix @ u

        if not need_jacobian:
            return residual, None

        J_dev = coo_matrix(
            (
                np.concatenate(trips_v) if trips_v else np.empty(0),
                (
                    np.concatenate(trips_r) if trips_r else np.empty(0, dtype=int),
                    np.concatenate(trips_c) if trips_c else np.empty(0, dtype=int),
                ),
            ),
            shape=(int(self.row_off[-1]), self.dim),
        ).tocsr()
        from scipy.sparse import vstack

        J = vstack([J_dev, self._conn_matrix], format="csr") if self.n_conn_rows else J_dev
        return residual, J


def _waveform_values(wf, vals, first, m):
    idx = (first[:, None] + np.arange(vals.shape[1])[None, :]) % wf.basis.n
    return np.einsum("nk,nkm->nm", vals, wf.coeffs[idx])


# -- public operations ---------------------------------------------------------


def assemble_residual(pcircuit, waveforms, rothe, source_dir: str = "."):
    """Residual of the coupled Galerkin + connection system."""
    prob = DiscreteProblem(pcircuit, [wf.basis for wf in waveforms], source_dir)
    res, _ = prob.assemble(waveforms, rothe, need_jacobian=False)
    return res


def assemble_jacobian(pcircuit, waveforms, rothe, source_dir: str = ".") -> SparseSystem:
    """Residual plus exact sparse Jacobian w.r.t. all spline coefficients."""
    prob = DiscreteProblem(pcircuit, [wf.basis for wf in waveforms], source_dir)
    res, J = prob.assemble(waveforms, rothe, need_jacobian=True)
    sl = [slice(int(prob.col_off[i]), int(prob.col_off[i + 1])) for i in range(len(prob.bases))]
    return SparseSystem(residual=res, jacobian=J, dim=prob.dim, nnz=J.nnz, sub_slices=sl)


def sparse_solve(system, rhs):
    """Direct sparse LU solve with singularity detection.

    ``system`` may be a SparseSystem or any scipy sparse matrix.
    """
    A = system.jacobian if isinstance(system, SparseSystem) else system
    A = A.tocsr()
    if A.shape[0] != A.shape[1]:
        raise SingularMatrixError(f"system is not square: {A.shape}")
    counts = np.diff(A.indptr)
    if np.any(counts == 0):
        raise SingularMatrixError("structurally singular: empty row")
    try:
        lu = splu(A.tocsc())
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    diag = np.abs(lu.U.diagonal())
    if diag.size and np.min(diag) <= _PIVOT_RTOL * max(np.max(diag), 1e-300):
        raise SingularMatrixError(
            f"numerically singular: pivot ratio {np.min(diag) / np.max(diag):.2e}"
        )
    x = lu.solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("solver produced non-finite solution")
    return x


def newton_solve(pcircuit, initial_waveforms, rothe, opts: NewtonOptions | None = None,
                 source_dir: str = "."):
    """Damped Newton with residual-norm backtracking.

    Returns (waveforms, NewtonReport); raises NoConvergenceError or
    SingularMatrixError on failure (the report rides on the exception).
    """
    opts = opts or NewtonOptions()
    prob = DiscreteProblem(pcircuit, [wf.basis for wf in initial_waveforms], source_dir)
    hist_cache = prob.history_terms(rothe)
    report = NewtonReport(dim=prob.dim)

    wfs = [wf.copy() for wf in initial_waveforms]
    t0 = time.perf_counter()
    res, _ = prob.assemble(wfs, rothe, need_jacobian=False, hist_cache=hist_cache)
    report.assembly_time += time.perf_counter() - t0
    norm = float(np.linalg.norm(res))
    norm0 = norm
    report.norms.append(norm)
    target = opts.abstol + opts.reltol * norm0

    while True:
        if norm <= target:
            report.converged = True
            report.final_norm = norm
            return prob.unpack(prob.pack(wfs)), report
        if report.iterations >= opts.max_iter:
            report.final_norm = norm
            raise NoConvergenceError(
                f"no convergence after {report.iterations} iterations "
                f"(|r| = {norm:.3e}, target {target:.3e})",
                report=report,
            )
        t0 = time.perf_counter()
        res, J = prob.assemble(wfs, rothe, need_jacobian=True, hist_cache=hist_cache)
        report.assembly_time += time.perf_counter() - t0
        report.nnz = J.nnz
        t0 = time.perf_counter()
        step = sparse_solve(J, -res)
        report.solve_time += time.perf_counter() - t0
        u = prob.pack(wfs)

        lam = 1.0
        while True:
            cand = prob.unpack(u + lam * step)
            t0 = time.perf_counter()
            try:
                res_new, _ = prob.assemble(
                    cand, rothe, need_jacobian=False, hist_cache=hist_cache
                )
                norm_new = float(np.linalg.norm(res_new))
            except (NonFiniteStateError, ModelDomainError):
                norm_new = np.inf
            report.assembly_time += time.perf_counter() - t0
            if np.isfinite(norm_new) and (norm_new < norm or norm_new <= target):
                break
            lam *= opts.damping_factor
            if lam < opts.damping_floor:
                report.final_norm = norm
                raise NoConvergenceError(
                    f"damping floor reached at iteration {report.iterations} "
                    f"(|r| = {norm:.3e})",
                    report=report,
                )
        wfs = cand
        norm = norm_new
        report.iterations += 1
        report.norms.append(norm)
