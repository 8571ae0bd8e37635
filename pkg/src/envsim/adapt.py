"""Adaptive knot-grid management for spline waveforms.

Detail indicators play the role of local wavelet coefficients:

* coarsening indicator of a knot = the error committed by a trial removal
  (local least-squares projection onto the one-knot-coarser space);
* refinement indicator of a span = deviation at the span midpoint between
  the spline and a degree-d polynomial least-squares re-fit through the
  2(d+1) nearest Greville-point samples.

Both are scaled by the per-column coefficient max-norm, so thresholds are
relative per unknown.  Coarsening is greedy smallest-error-first with
neighbor recomputation; refinement bisects flagged spans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .errors import PeriodMismatchError
from .spline import PeriodicSplineBasis, SplineWaveform, eval_waveform, insert_knot, remove_knot

_SCALE_FLOOR = 1e-30


@dataclass
class AdaptOptions:
    """Thresholds are relative to each column's coefficient max-norm."""

    tol_refine: float = 1e-3
    tol_coarsen: float = 1e-4
    max_knots: int = 1024
    min_knots: int = 0  # 0 resolves to degree + 1
    max_passes: int = 10

    def __post_init__(self):
        if not (0.0 <= self.tol_coarsen < self.tol_refine):
            raise ValueError("need 0 <= tol_coarsen < tol_refine")

    def resolved_min(self, degree: int) -> int:
        return max(self.min_knots, degree + 1)


@dataclass
class DetailProfile:
    removal_errors: np.ndarray  # per knot, scaled max over columns
    refine_indicators: np.ndarray  # per span (span k starts at knot k)


@dataclass
class AdaptReport:
    knots_before: int
    knots_after: int
    inserted: int = 0
    removed: int = 0
    passes: int = 0
    bound_hit: bool = False

    def to_keyvalues(self) -> str:
        return (
            f"knots_before={self.knots_before}\nknots_after={self.knots_after}\n"
            f"inserted={self.inserted}\nremoved={self.removed}\n"
            f"passes={self.passes}\nbound_hit={str(self.bound_hit).lower()}\n"
        )


def _column_scales(wf: SplineWaveform):
    s = np.max(np.abs(wf.coeffs), axis=0)
    return np.where(s < _SCALE_FLOOR, 1.0, s)


def _removal_error(wf: SplineWaveform, k: int, scales) -> float:
    if wf.basis.n - 1 < wf.basis.degree + 1:
        return np.inf  # minimal grid: nothing can be removed
    _, _, err = remove_knot(wf.basis, k, wf)
    return float(np.max(err / scales))


def _refine_indicator(wf: SplineWaveform, span: int, scales) -> float:
    """Midpoint deviation from a local polynomial re-fit."""
    basis = wf.basis
    d, n = basis.degree, basis.n
    a = float(basis.ext_knots(span))
    b = float(basis.ext_knots(span + 1))
    tm = 0.5 * (a + b)
    half = d + 1
    cand = np.arange(span - d - half, span + half + 1)
    sites = basis.greville(cand)
    order = np.argsort(np.abs(sites - tm), kind="stable")[: 2 * (d + 1)]
    sites = sites[order]
    width = max(np.max(sites) - np.min(sites), 1e-300)
    u = (sites - tm) / width
    V = np.vander(u, d + 1, increasing=True)
    samples = eval_waveform(wf, sites)
    coef, *_ = np.linalg.lstsq(V, samples, rcond=None)
    pred = coef[0]  # fit value at the midpoint (u = 0)
    actual = eval_waveform(wf, tm)
    return float(np.max(np.abs(actual - pred) / scales))


def detail_profile(wf: SplineWaveform) -> DetailProfile:
    """Per-knot removal errors and per-span refinement indicators."""
    scales = _column_scales(wf)
    n = wf.basis.n
    rem = np.array([_removal_error(wf, k, scales) for k in range(n)])
    ref = np.array([_refine_indicator(wf, k, scales) for k in range(n)])
    return DetailProfile(rem, ref)


def adapt_grid(wf: SplineWaveform, opts: AdaptOptions):
    """Coarsen/refine the grid until detail thresholds are met.

    Returns (new_basis, new_waveform, AdaptReport).  Grid-size bounds clip
    silently; hitting one is flagged in the report.
    """
    basis = wf.basis
    d = basis.degree
    min_knots = opts.resolved_min(d)
    report = AdaptReport(knots_before=basis.n, knots_after=basis.n)
    wf = wf.copy()

    for _ in range(opts.max_passes):
        report.passes += 1
        changed = False
        scales = _column_scales(wf)

        # --- coarsening: greedy smallest error, neighbors recomputed.
        # A removal is committed only if the spans it leaves behind stay
        # below the refinement threshold; otherwise coarsening and
        # refinement would undo each other forever.
        errs = np.array(
            [_removal_error(wf, k, scales) for k in range(wf.basis.n)]
        )
        blocked = np.zeros(wf.basis.n, dtype=bool)
        while wf.basis.n > min_knots:
            order = np.where(blocked, np.inf, errs)
            k = int(np.argmin(order))
            if order[k] >= opts.tol_coarsen:
                break
            new_basis, new_coeffs, _ = remove_knot(wf.basis, k, wf)
            trial = SplineWaveform(new_basis, new_coeffs)
            nn = new_basis.n
            near = [(k + off) % nn for off in range(-(d + 2), d + 2)]
            if any(
                _refine_indicator(trial, j, scales) > opts.tol_refine for j in near
            ):
                blocked[k] = True
                continue
            wf = trial
            report.removed += 1
            changed = True
            errs = np.delete(errs, k)
            blocked = np.delete(blocked, k)
            for off in range(-(d + 1), d + 2):
                j = (k + off) % nn
                errs[j] = _removal_error(wf, j, scales)
                blocked[j] = False
        if wf.basis.n <= min_knots and np.any(errs < opts.tol_coarsen):
            report.bound_hit = True

        # --- refinement: bisect the worst span, recompute, repeat
        while True:
            inds = np.array(
                [_refine_indicator(wf, k, scales) for k in range(wf.basis.n)]
            )
            span = int(np.argmax(inds))
            if inds[span] <= opts.tol_refine:
                break
            if wf.basis.n >= opts.max_knots:
                report.bound_hit = True
                break
            a = float(wf.basis.ext_knots(span))
            b = float(wf.basis.ext_knots(span + 1))
            tm = wf.basis.wrap(0.5 * (a + b))
            new_basis, prol = insert_knot(wf.basis, float(tm))
            wf = SplineWaveform(new_basis, prol @ wf.coeffs)
            report.inserted += 1
            changed = True

        if not changed:
            break

    report.knots_after = wf.basis.n
    return wf.basis, wf, report


def transfer_waveform(wf: SplineWaveform, target: PeriodicSplineBasis) -> SplineWaveform:
    """Re-express a waveform on another basis of the same period.

    Nested refinements (source knots a subset of the target's) transfer
    exactly through knot insertion; anything else is an L2 projection with
    exact Gram integrals.
    """
    src = wf.basis
    if not np.isclose(src.period, target.period, rtol=1e-12, atol=0.0):
        raise PeriodMismatchError(
            f"source period {src.period} != target period {target.period}"
        )
    if src.degree == target.degree and np.array_equal(src.knots, target.knots):
        return SplineWaveform(target, wf.coeffs.copy())

    tol = 1e-12 * src.period
    if src.degree == target.degree:
        missing = [
            float(t)
            for t in target.knots
            if np.min(np.abs(src.knots - t)) > tol
        ]
        covered = all(np.min(np.abs(target.knots - t)) <= tol for t in src.knots)
        if covered and len(missing) == target.n - src.n:
            basis, coeffs = src, wf.coeffs
            for t_new in missing:
                basis, prol = insert_knot(basis, t_new)
                coeffs = prol @ coeffs
            return SplineWaveform(target, coeffs)

    return _project_waveform(wf, target)


def _project_waveform(wf: SplineWaveform, target: PeriodicSplineBasis) -> SplineWaveform:
    """L2 projection via exact Gram integrals on union-knot segments."""
    src = wf.basis
    P = target.period
    pts = np.concatenate([src.wrap(src.knots), target.wrap(target.knots)])
    pts = np.unique(pts)
    keep = np.concatenate([[True], np.diff(pts) > 1e-13 * P])
    pts = pts[keep]
    segs = list(zip(pts[:-1], pts[1:])) + [(pts[-1], pts[0] + P)]

    deg = max(src.degree, target.degree)
    npts = deg + 1  # exact for products of degree <= 2*deg + 1
    xg, wg = np.polynomial.legendre.leggauss(npts)
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg

    nt = target.n
    m = wf.ncols
    rhs = np.zeros((nt, m))
    ii, jj, vv = [], [], []
    dp1 = target.degree + 1
    for a, b in segs:
        if b - a <= 1e-13 * P:
            continue
        nodes = a + (b - a) * xg
        w = (b - a) * wg
        first, vals, _ = target.eval_active(nodes)
        idx = (first[:, None] + np.arange(dp1)[None, :]) % nt
        x = eval_waveform(wf, nodes)
        rhs_contrib = np.einsum("q,qk,qm->qkm", w, vals, x)
        np.add.at(rhs, idx, rhs_contrib)
        gram = np.einsum("q,qk,ql->qkl", w, vals, vals)
        ii.append(np.repeat(idx, dp1, axis=1).ravel())
        jj.append(np.tile(idx, (1, dp1)).ravel())
        vv.append(gram.ravel())
    G = coo_matrix(
        (np.concatenate(vv), (np.concatenate(ii), np.concatenate(jj))),
        shape=(nt, nt),
    ).tocsc()
    coeffs = splu(G).solve(rhs)
    return SplineWaveform(target, coeffs)
