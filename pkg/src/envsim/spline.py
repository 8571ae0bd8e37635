"""Periodic B-spline bases over arbitrary knot grids on (0, P].

A basis is determined by ``n`` strictly increasing simple knots in (0, P],
a degree ``d`` and the period ``P``.  The periodic spline space has
dimension exactly ``n``; basis function ``k`` is the classical B-spline
whose support starts at knot ``k`` of the bi-infinite periodized knot
sequence ``t[i % n] + P * (i // n)``.  All functions sum to one
(partition of unity) and every point has exactly ``d + 1`` active basis
functions.

Waveforms are coefficient arrays of shape (n, m): one column per circuit
unknown, one row per basis function.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    DuplicateKnotError,
    InvalidIntervalError,
    KnotOutOfDomainError,
    MinimalGridError,
    NonIncreasingKnotsError,
    TooFewKnotsError,
)

#: knots closer than _KNOT_TOL * period are considered coincident
_KNOT_TOL = 1e-12


@lru_cache(maxsize=16)
def _gauss_rule(npts: int):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


class PeriodicSplineBasis:
    """Periodized B-spline basis of degree ``d`` over knots in (0, P]."""

    def __init__(self, knots, degree: int, period: float):
        knots = np.asarray(knots, dtype=float)
        if not (1 <= int(degree) <= 5):
            raise ValueError(f"degree must be in 1..5, got {degree}")
        if period <= 0.0:
            raise ValueError(f"period must be positive, got {period}")
        if knots.ndim != 1 or knots.size < degree + 1:
            raise TooFewKnotsError(
                f"need at least degree+1 = {degree + 1} knots, got {knots.size}"
            )
        if np.any(np.diff(knots) <= 0.0):
            raise NonIncreasingKnotsError("knots must be strictly increasing")
        if knots[0] <= 0.0 or knots[-1] > period * (1.0 + 1e-15):
            raise KnotOutOfDomainError("knots must lie in (0, P]")
        if np.min(np.diff(knots)) < _KNOT_TOL * period:
            raise NonIncreasingKnotsError("coincident knots are not supported")
        self.knots = knots
        self.knots.setflags(write=False)
        self.degree = int(degree)
        self.period = float(period)

    @property
    def n(self) -> int:
        """Dimension of the periodic spline space (= number of knots)."""
        return self.knots.size

    def __repr__(self):
        return (
            f"PeriodicSplineBasis(n={self.n}, degree={self.degree}, "
            f"period={self.period})"
        )

    def __eq__(self, other):
        return (
            isinstance(other, PeriodicSplineBasis)
            and self.degree == other.degree
            and self.period == other.period
            and self.n == other.n
            and bool(np.all(self.knots == other.knots))
        )

    def __hash__(self):
        return hash((self.degree, self.period, self.knots.tobytes()))

    # -- bi-infinite knot access -------------------------------------------

    def ext_knots(self, idx):
        """Knots of the periodized bi-infinite sequence at integer indices."""
        idx = np.asarray(idx)
        return self.knots[idx % self.n] + self.period * (idx // self.n)

    def wrap(self, t):
        """Map times onto the fundamental domain (0, P]."""
        u = np.mod(np.asarray(t, dtype=float), self.period)
        return np.where(u == 0.0, self.period, u)

    def span(self, t):
        """Left bi-infinite knot index of the span containing wrap(t).

        The span convention is half open from the left: ``t`` lies in
        (ext_knots(i), ext_knots(i+1)] for the returned index ``i``.
        """
        u = self.wrap(t)
        j = np.searchsorted(self.knots, u, side="left")
        return j - 1

    # -- evaluation --------------------------------------------------------

    def eval_active(self, t):
        """Values and first derivatives of the d+1 active basis functions.

        Returns ``(first_index, values, derivs)`` where ``first_index`` is
        the periodic index of the first active function; active function
        ``i`` has periodic index ``(first_index + i) % n``.  Scalar ``t``
        gives 1-D values/derivs; array ``t`` gives (len(t), d+1) arrays.
        """
        scalar = np.isscalar(t) or np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        left = np.atleast_1d(self.span(tt))
        # wrap(t) in (0, P] always lies in (ext(left), ext(left+1)]
        u = self.wrap(tt)
        vals, ders = _ders_basis(u, left, self)
        first = (left - self.degree) % self.n
        if scalar:
            return int(first[0]), vals[0], ders[0]
        return first, vals, ders

    def greville(self, k):
        """Greville abscissa of basis function(s) ``k`` (bi-infinite index)."""
        k = np.asarray(k)
        offs = np.arange(1, self.degree + 1)
        return self.ext_knots(k[..., None] + offs).mean(axis=-1)

    # -- spans and quadrature segments --------------------------------------

    def segment_points(self, a: float, b: float):
        """Splitting points a = s_0 < ... < s_k = b at interior knot images."""
        tol = 1e-14 * self.period
        if b - a < -tol or b - a > self.period * (1.0 + 1e-12):
            raise InvalidIntervalError(f"invalid interval [{a}, {b}]")
        # a - wrap(a) is an integer multiple of P; shift bi-infinite knots by it
        delta = a - float(self.wrap(a))
        j = int(self.span(a))
        pts = [a]
        while True:
            j += 1
            v = float(self.ext_knots(j)) + delta
            if v >= b - tol:
                break
            if v > a + tol:
                pts.append(v)
        pts.append(b)
        return np.array(pts)

    def quadrature(self, a: float, b: float, npts: int | None = None):
        """Gauss nodes/weights exact for splines of this degree on [a, b]."""
        if npts is None:
            npts = (self.degree + 2) // 2
        xg, wg = _gauss_rule(npts)
        pts = self.segment_points(a, b)
        lens = np.diff(pts)
        nodes = (pts[:-1, None] + lens[:, None] * xg[None, :]).ravel()
        weights = (lens[:, None] * wg[None, :]).ravel()
        return nodes, weights

    def integrate_basis(self, a: float, b: float):
        """Exact integrals of every periodic basis function over [a, b]."""
        out = np.zeros(self.n)
        if b == a:
            return out
        nodes, weights = self.quadrature(a, b)
        first, vals, _ = self.eval_active(nodes)
        idx = (first[:, None] + np.arange(self.degree + 1)[None, :]) % self.n
        np.add.at(out, idx, vals * weights[:, None])
        return out


def _ders_basis(u, left, basis: PeriodicSplineBasis):
    """Vectorized Cox-de Boor values and first derivatives.

    ``u`` must already sit inside its bi-infinite span ``left``:
    ext_knots(left) < u <= ext_knots(left+1) (up to the periodic lift done
    by the caller).
    """
    p = basis.degree
    npts = u.size
    lft = np.empty((npts, p + 1))
    rgt = np.empty((npts, p + 1))
    vals = np.ones((npts, 1))
    vals_pm1 = vals
    for j in range(1, p + 1):
        lft[:, j] = u - basis.ext_knots(left + 1 - j)
        rgt[:, j] = basis.ext_knots(left + j) - u
        if j == p:
            vals_pm1 = vals
        new = np.empty((npts, j + 1))
        saved = np.zeros(npts)
        for r in range(j):
            temp = vals[:, r] / (rgt[:, r + 1] + lft[:, j - r])
            new[:, r] = saved + rgt[:, r + 1] * temp
            saved = lft[:, j - r] * temp
        new[:, j] = saved
        vals = new
    # N'_{i,p} = p * (N_{i,p-1}/(U_{i+p}-U_i) - N_{i+1,p-1}/(U_{i+p+1}-U_{i+1}))
    A = np.zeros((npts, p + 2))
    for r in range(1, p + 1):
        den = basis.ext_knots(left + r) - basis.ext_knots(left - p + r)
        A[:, r] = vals_pm1[:, r - 1] / den
    ders = p * (A[:, : p + 1] - A[:, 1:])
    return vals, ders


@dataclass
class SplineWaveform:
    """All unknowns of one subcircuit expanded in a periodic spline basis.

    ``coeffs`` has shape (basis.n, m); column ``j`` holds the coefficients
    of unknown ``j``.
    """

    basis: PeriodicSplineBasis
    coeffs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        self.coeffs = arr
        if self.coeffs.shape[0] != self.basis.n:
            raise ValueError(
                f"coefficient rows {self.coeffs.shape[0]} != basis dim {self.basis.n}"
            )

    @property
    def ncols(self) -> int:
        return self.coeffs.shape[1]

    def copy(self) -> "SplineWaveform":
        return SplineWaveform(self.basis, self.coeffs.copy())


def build_basis(knots, degree: int, period: float) -> PeriodicSplineBasis:
    """Validate knots and build a periodic basis (see PeriodicSplineBasis)."""
    return PeriodicSplineBasis(knots, degree, period)


def uniform_basis(n: int, degree: int, period: float) -> PeriodicSplineBasis:
    """Uniform grid with knots at period * (i+1)/n, i = 0..n-1."""
    return PeriodicSplineBasis(period * (np.arange(n) + 1.0) / n, degree, period)


def eval_active(basis: PeriodicSplineBasis, t):
    """Module-level alias for PeriodicSplineBasis.eval_active."""
    return basis.eval_active(t)


def eval_waveform(wf: SplineWaveform, t, with_deriv: bool = False):
    """Evaluate x(t) = sum_k c_k phi_k(t) (and optionally x'(t))."""
    scalar = np.isscalar(t) or np.ndim(t) == 0
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    basis = wf.basis
    first, vals, ders = basis.eval_active(tt)
    first = np.atleast_1d(first)
    idx = (first[:, None] + np.arange(basis.degree + 1)[None, :]) % basis.n
    c = wf.coeffs[idx]  # (N, d+1, m)
    x = np.einsum("nk,nkm->nm", np.atleast_2d(vals), c)
    if scalar:
        x = x[0]
    if not with_deriv:
        return x
    dx = np.einsum("nk,nkm->nm", np.atleast_2d(ders), c)
    if scalar:
        dx = dx[0]
    return x, dx


def integrate_waveform(wf: SplineWaveform, a: float, b: float):
    """Exact integral of the waveform over [a, b] (0 <= b - a <= P)."""
    nodes, weights = wf.basis.quadrature(a, b)
    if nodes.size == 0:
        return np.zeros(wf.ncols)
    x = eval_waveform(wf, nodes)
    return weights @ x


def _insertion_rows(knots, degree: int, period: float, t_new: float, pos: int):
    """Boehm insertion: row triples (new_row, old_cols, weights).

    ``knots`` is the basis being refined (n entries) and ``t_new`` is
    inserted at sorted position ``pos``.  Returns, for each of the n+1 new
    basis functions, the one or two old coefficients it blends.
    """
    n = knots.size
    rows = []

    def ext(i):
        return knots[i % n] + period * (i // n)

    for j in range(pos - degree, pos + n - degree + 1):
        new_row = j % (n + 1)
        if j <= pos - 1:
            alpha = (t_new - ext(j)) / (ext(j + degree) - ext(j))
            rows.append((new_row, [j % n, (j - 1) % n], [alpha, 1.0 - alpha]))
        else:
            rows.append((new_row, [(j - 1) % n], [1.0]))
    return rows


def insert_knot(basis: PeriodicSplineBasis, t_new: float):
    """Insert a knot; returns (refined_basis, prolongation).

    The prolongation is a sparse (n+1, n) matrix mapping old coefficients
    to coefficients of the identical spline in the refined space.
    """
    from scipy.sparse import csr_matrix

    if not (0.0 < t_new <= basis.period):
        raise KnotOutOfDomainError(f"new knot {t_new} outside (0, {basis.period}]")
    dist = np.abs(basis.knots - t_new)
    dist = np.minimum(dist, basis.period - dist)
    if np.min(dist) < _KNOT_TOL * basis.period:
        raise DuplicateKnotError(f"knot at {t_new} already present")
    n = basis.n
    pos = int(np.searchsorted(basis.knots, t_new))
    new_knots = np.insert(basis.knots, pos, t_new)
    rows = _insertion_rows(basis.knots, basis.degree, basis.period, t_new, pos)
    ii, jj, vv = [], [], []
    for r, cols, wts in rows:
        ii.extend([r] * len(cols))
        jj.extend(cols)
        vv.extend(wts)
    prol = csr_matrix((vv, (ii, jj)), shape=(n + 1, n))
    return PeriodicSplineBasis(new_knots, basis.degree, basis.period), prol


def remove_knot(basis: PeriodicSplineBasis, k: int, wf: SplineWaveform):
    """Remove knot ``k``; returns (coarse_basis, coarse_coeffs, local_error).

    The coarse coefficients minimize the coefficient-space residual of the
    Boehm refinement relation on the d+1 functions whose support touches
    the removed knot; all other coefficients carry over unchanged.
    ``local_error`` is the per-column max-norm of (wf - coarsened wf)
    sampled at d+2 points on each affected span.
    """
    n, d, P = basis.n, basis.degree, basis.period
    if n - 1 < d + 1:
        raise MinimalGridError(f"cannot go below {d + 1} knots")
    k = int(k) % n
    coarse_knots = np.delete(basis.knots, k)
    coarse = PeriodicSplineBasis(coarse_knots, d, P)
    nc = n - 1
    t_k = float(basis.knots[k])
    rows = _insertion_rows(coarse_knots, d, P, t_k, k)

    c = wf.coeffs
    m = c.shape[1]
    new_coeffs = np.zeros((nc, m))
    # free coarse coefficients: those appearing in blended rows
    free = sorted({col for _, cols, _ in rows if len(cols) == 2 for col in cols})
    free_pos = {col: i for i, col in enumerate(free)}
    eqs, rhs = [], []
    for r, cols, wts in rows:
        fine = c[r]
        if len(cols) == 1 and cols[0] not in free_pos:
            new_coeffs[cols[0]] = fine
        else:
            row = np.zeros(len(free))
            for col, w in zip(cols, wts):
                row[free_pos[col]] = w
            eqs.append(row)
            rhs.append(fine)
    sol, *_ = np.linalg.lstsq(np.array(eqs), np.array(rhs), rcond=None)
    for col, i in free_pos.items():
        new_coeffs[col] = sol[i]

    coarse_wf = SplineWaveform(coarse, new_coeffs)
    # sample the difference on spans whose shape can have changed
    samples = []
    for left in range(k - d - 1, k + d + 1):
        a, b = float(basis.ext_knots(left)), float(basis.ext_knots(left + 1))
        samples.append(np.linspace(a, b, d + 2))
    ts = np.concatenate(samples)
    diff = eval_waveform(wf, ts) - eval_waveform(coarse_wf, ts)
    local_error = np.max(np.abs(diff), axis=0)
    return coarse, new_coeffs, local_error
