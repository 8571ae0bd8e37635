"""Slow-time envelope marching of the multirate periodic problem.

The slow axis tau is discretized by BDF1/BDF2 (variable step); each step
leaves a periodic boundary value problem in fast time t that the pbvp
module solves on per-subcircuit spline grids.  Waveforms change slowly
with tau, so the previous step's grids and solution provide the Newton
warm start; after each accepted step the grids are re-adapted and the
step is re-solved if they changed materially.

Normalization of the fast axis: user-supplied omega(tau) is an angular
frequency in rad/s, while t parameterizes one period (0, P].  The fast
transport coefficient of the discretized equation is therefore
``rate = omega * P / (2 pi)``; with omega = 2 pi / P the tau-independent
problem is the conventional periodic steady state.  The characteristic
line through (0, t0) advances its fast phase as Theta'(tau) = rate(tau),
so the univariate solution is x(tau) = X_k(Theta(tau)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import pbvp
from .adapt import AdaptOptions, adapt_grid, transfer_waveform
from .errors import (
    InsufficientHistoryError,
    NoConvergenceError,
    StepSizeUnderflowError,
)
from .mna import build_layout, build_omega, eval_stamps
from .netlist import PartitionedCircuit
from .spline import SplineWaveform, build_basis, eval_waveform, uniform_basis

_SAFETY = 0.9
_GROW_MAX = 5.0
_SHRINK_MIN = 0.2


@dataclass
class RotheContext:
    """One slow-time step of the multistep-discretized problem.

    ``gammas[0]`` multiplies q of the unknown waveform, ``gammas[j]`` the
    j-th history waveform; an empty ``gammas`` is the steady-state problem
    (no tau derivative).  ``rate`` is omega * P / (2 pi).
    """

    k: int
    tau: float
    omega: float
    rate: float
    gammas: np.ndarray
    steps: tuple
    history: tuple  # ((waveforms of tau_{k-1}), (waveforms of tau_{k-2}), ...)
    source_scale: float = 1.0


def pss_context(pcircuit, tau: float = 0.0, source_scale: float = 1.0,
                omega_fn=None, source_dir: str = ".") -> RotheContext:
    """Steady-state context: the tau-derivative term is absent."""
    if omega_fn is None:
        omega_fn = build_omega(pcircuit.omega, source_dir)
    w = float(omega_fn(tau))
    return RotheContext(
        k=0,
        tau=tau,
        omega=w,
        rate=w * pcircuit.period / (2.0 * math.pi),
        gammas=np.empty(0),
        steps=(),
        history=(),
        source_scale=source_scale,
    )


def rothe_terms(history, tau_k: float, dtau: float, method: str = "bdf2",
                *, omega_fn=None, period: float = 1.0, k: int = 0,
                source_scale: float = 1.0) -> RotheContext:
    """Multistep context at tau_k from the history [(tau, waveforms), ...].

    ``history`` is ordered newest first.  BDF2 falls back to BDF1 when only
    one entry is available; variable steps use the divided-difference
    coefficients of the interpolating quadratic.
    """
    if not history:
        raise InsufficientHistoryError("multistep context needs history")
    order = {"bdf1": 1, "bdf2": 2}[method]
    order = min(order, len(history))
    tau_1 = history[0][0]
    d1 = tau_k - tau_1
    if d1 <= 0:
        raise ValueError("tau_k must exceed the newest history time")
    if order == 1:
        gammas = np.array([1.0 / d1, -1.0 / d1])
        steps = (d1,)
    else:
        tau_2 = history[1][0]
        d2 = tau_1 - tau_2
        g0 = 1.0 / d1 + 1.0 / (d1 + d2)
        g1 = -(d1 + d2) / (d1 * d2)
        g2 = d1 / ((d1 + d2) * d2)
        gammas = np.array([g0, g1, g2])
        steps = (d1, d2)
    w = float(omega_fn(tau_k)) if omega_fn is not None else 2.0 * math.pi / period
    return RotheContext(
        k=k,
        tau=tau_k,
        omega=w,
        rate=w * period / (2.0 * math.pi),
        gammas=gammas,
        steps=steps,
        history=tuple(wfs for _, wfs in history[:order]),
        source_scale=source_scale,
    )


@dataclass
class EnvelopeOptions:
    degree: int = 3
    initial_knots: int = 32
    method: str = "bdf2"
    dtau_init: float = 0.0  # 0 resolves to tau_end / 16
    dtau_min: float = 0.0  # 0 resolves to dtau_init * 1e-6
    dtau_max: float = np.inf
    envtol: float = 1e-4
    adaptive: bool = True  # step-size control by step doubling
    adapt: AdaptOptions | None = None  # grid adaptation; None disables
    single_grid: bool = False  # force the union grid on every subcircuit
    regrid_threshold: float = 0.10
    newton: pbvp.NewtonOptions = field(default_factory=pbvp.NewtonOptions)
    max_steps: int = 10000
    source_dir: str = "."


@dataclass
class StepRecord:
    k: int
    tau: float
    dtau: float
    omega: float
    waveforms: list
    knot_counts: list
    newton_iters: int
    unknowns: int
    nnz: int
    assembly_time: float
    solve_time: float
    err_est: float = 0.0
    adapt_reports: list | None = None


@dataclass
class StepOutcome:
    accepted: bool
    dtau_used: float
    dtau_next: float
    err_est: float
    rejections: int


@dataclass
class EnvelopeRun:
    pcircuit: PartitionedCircuit
    options: EnvelopeOptions
    records: list = field(default_factory=list)
    omega_fn: object = None

    @property
    def taus(self):
        return np.array([r.tau for r in self.records])

    def current_bases(self):
        return [wf.basis for wf in self.records[-1].waveforms]

    def history(self, depth: int = 2):
        out = []
        for rec in reversed(self.records[-depth:]):
            out.append((rec.tau, rec.waveforms))
        return out


def _zero_waveforms(pcircuit, bases, source_dir):
    out = []
    for sub, b in zip(pcircuit.subcircuits, bases):
        lay = build_layout(sub, pcircuit.period, source_dir)
        out.append(SplineWaveform(b, np.zeros((b.n, lay.m))))
    return out


def solve_initial_waveform(pcircuit, bases, opts: EnvelopeOptions):
    """Periodic steady state at tau = 0 (the envelope initial condition).

    Plain Newton from zero first; on failure a 4-stage source-ramp
    homotopy, each stage warm-started from the previous.
    Returns (waveforms, NewtonReport of the final solve).
    """
    ctx = pss_context(pcircuit, source_dir=opts.source_dir)
    wfs = _zero_waveforms(pcircuit, bases, opts.source_dir)
    try:
        return pbvp.newton_solve(pcircuit, wfs, ctx, opts.newton, opts.source_dir)
    except NoConvergenceError:
        pass
    report = None
    for scale in (0.25, 0.5, 0.75, 1.0):
        ctx = pss_context(pcircuit, source_scale=scale, source_dir=opts.source_dir)
        wfs, report = pbvp.newton_solve(
            pcircuit, wfs, ctx, opts.newton, opts.source_dir
        )
    return wfs, report


def _charge_moments(pcircuit, waveforms, layouts):
    """Per-subcircuit mean charges over one period, concatenated."""
    out = []
    for wf, lay in zip(waveforms, layouts):
        nodes, w = wf.basis.quadrature(0.0, wf.basis.period)
        x = eval_waveform(wf, nodes)
        st = eval_stamps(lay, x, 0.0, nodes)
        out.append((w @ st.q) / wf.basis.period)
    return np.concatenate(out)


def _solve_at(pcircuit, tau_k, history, bases, opts, k, guess=None):
    """Warm-started multistep solve at tau_k on the given bases."""
    omega_fn = build_omega(pcircuit.omega, opts.source_dir)
    ctx = rothe_terms(
        history, tau_k, tau_k - history[0][0], opts.method,
        omega_fn=omega_fn, period=pcircuit.period, k=k,
    )
    start = guess if guess is not None else history[0][1]
    start = [transfer_waveform(wf, b) for wf, b in zip(start, bases)]
    return pbvp.newton_solve(pcircuit, start, ctx, opts.newton, opts.source_dir)


def _union_bases(bases, period, degree):
    """One shared grid: the union refinement of all subcircuit grids."""
    knots = np.unique(np.concatenate([b.wrap(b.knots) for b in bases]))
    keep = np.concatenate([[True], np.diff(knots) > 1e-12 * period])
    union = build_basis(knots[keep], degree, period)
    return [union] * len(bases)


def _adapt_all(pcircuit, waveforms, opts):
    """Adapt every subcircuit grid; under single_grid force the union."""
    if opts.adapt is None:
        return waveforms, [], False
    new_wfs, reports = [], []
    for wf in waveforms:
        _, nwf, rep = adapt_grid(wf, opts.adapt)
        new_wfs.append(nwf)
        reports.append(rep)
    if opts.single_grid:
        bases = _union_bases(
            [w.basis for w in new_wfs], pcircuit.period, opts.degree
        )
        new_wfs = [transfer_waveform(w, b) for w, b in zip(new_wfs, bases)]
    changed = any(
        abs(nw.basis.n - ow.basis.n) > opts.regrid_threshold * ow.basis.n
        for nw, ow in zip(new_wfs, waveforms)
    )
    return new_wfs, reports, changed


def envelope_step(run: EnvelopeRun, dtau: float, opts: EnvelopeOptions) -> StepOutcome:
    """Advance the run by one accepted step (retrying/halving on failure).

    With step control on, the local error is the step-doubling estimate on
    the charge moments; the accepted solution is the two-half-steps one.
    Rejected attempts never enter the run record.
    """
    pc = run.pcircuit
    layouts = [build_layout(s, pc.period, opts.source_dir) for s in pc.subcircuits]
    dtau_min = opts.dtau_min if opts.dtau_min > 0 else 1e-12
    rejections = 0
    order = {"bdf1": 1, "bdf2": 2}[opts.method]

    while True:
        if dtau < dtau_min:
            raise StepSizeUnderflowError(
                f"envelope step fell below {dtau_min:.3e} at tau = "
                f"{run.records[-1].tau:.6e}"
            )
        tau_prev = run.records[-1].tau
        tau_k = tau_prev + dtau
        bases = run.current_bases()
        history = run.history()
        try:
            wfs_full, rep_full = _solve_at(pc, tau_k, history, bases, opts, len(run.records))
            if opts.adaptive:
                tau_half = tau_prev + 0.5 * dtau
                wfs_h1, rep_h1 = _solve_at(pc, tau_half, history, bases, opts, -1)
                hist_half = [(tau_half, wfs_h1)] + history
                wfs_h2, rep_h2 = _solve_at(pc, tau_k, hist_half, bases, opts, -1)
            else:
                wfs_h2 = wfs_full
                rep_h1 = rep_h2 = None
        except NoConvergenceError:
            rejections += 1
            dtau *= 0.5
            continue

        if opts.adaptive:
            m_full = _charge_moments(pc, wfs_full, layouts)
            m_half = _charge_moments(pc, wfs_h2, layouts)
            scale = float(np.max(np.abs(m_half))) + 1e-300
            err = float(np.max(np.abs(m_full - m_half))) / scale / (2**order - 1)
            if err > opts.envtol:
                rejections += 1
                shrink = max(
                    _SHRINK_MIN, _SAFETY * (opts.envtol / err) ** (1.0 / (order + 1))
                )
                dtau *= min(shrink, 0.5)
                continue
            grow = (
                _GROW_MAX
                if err == 0.0
                else min(_GROW_MAX, _SAFETY * (opts.envtol / err) ** (1.0 / (order + 1)))
            )
            dtau_next = float(np.clip(dtau * max(grow, _SHRINK_MIN), dtau_min, opts.dtau_max))
        else:
            err = 0.0
            dtau_next = float(min(dtau, opts.dtau_max))

        accepted = wfs_h2
        iters = rep_full.iterations + sum(
            r.iterations for r in (rep_h1, rep_h2) if r is not None
        )
        at = rep_full.assembly_time + sum(
            r.assembly_time for r in (rep_h1, rep_h2) if r is not None
        )
        st = rep_full.solve_time + sum(
            r.solve_time for r in (rep_h1, rep_h2) if r is not None
        )
        nnz = rep_full.nnz

        accepted, adapt_reports, regrid = _adapt_all(pc, accepted, opts)
        if regrid:
            try:
                accepted, rep3 = _solve_at(
                    pc, tau_k, history, [w.basis for w in accepted], opts,
                    len(run.records), guess=accepted,
                )
            except NoConvergenceError:
                rejections += 1
                dtau *= 0.5
                continue
            iters += rep3.iterations
            at += rep3.assembly_time
            st += rep3.solve_time
            nnz = rep3.nnz or nnz

        omega_fn = run.omega_fn or build_omega(pc.omega, opts.source_dir)
        rec = StepRecord(
            k=len(run.records),
            tau=tau_k,
            dtau=dtau,
            omega=float(omega_fn(tau_k)),
            waveforms=accepted,
            knot_counts=[w.basis.n for w in accepted],
            newton_iters=iters,
            unknowns=sum(w.basis.n * w.coeffs.shape[1] for w in accepted),
            nnz=nnz,
            assembly_time=at,
            solve_time=st,
            err_est=err,
            adapt_reports=adapt_reports or None,
        )
        run.records.append(rec)
        return StepOutcome(True, dtau, dtau_next, err, rejections)


def run_envelope(pcircuit, tau_end: float, opts: EnvelopeOptions) -> EnvelopeRun:
    """X_0 then repeated envelope steps until tau >= tau_end."""
    if tau_end <= 0:
        raise ValueError("tau_end must be positive")
    omega_fn = build_omega(pcircuit.omega, opts.source_dir)
    run = EnvelopeRun(pcircuit=pcircuit, options=opts, omega_fn=omega_fn)

    bases = [
        uniform_basis(opts.initial_knots, opts.degree, pcircuit.period)
        for _ in pcircuit.subcircuits
    ]
    if opts.single_grid:
        bases = _union_bases(bases, pcircuit.period, opts.degree)
    wfs, rep0 = solve_initial_waveform(pcircuit, bases, opts)
    wfs, adapt_reports, regrid = _adapt_all(pcircuit, wfs, opts)
    if regrid:
        ctx = pss_context(pcircuit, source_dir=opts.source_dir)
        wfs, rep0 = pbvp.newton_solve(pcircuit, wfs, ctx, opts.newton, opts.source_dir)
    run.records.append(
        StepRecord(
            k=0,
            tau=0.0,
            dtau=0.0,
            omega=float(omega_fn(0.0)),
            waveforms=wfs,
            knot_counts=[w.basis.n for w in wfs],
            newton_iters=rep0.iterations,
            unknowns=sum(w.basis.n * w.coeffs.shape[1] for w in wfs),
            nnz=rep0.nnz,
            assembly_time=rep0.assembly_time,
            solve_time=rep0.solve_time,
            adapt_reports=adapt_reports or None,
        )
    )

    dtau = opts.dtau_init if opts.dtau_init > 0 else tau_end / 16.0
    dtau = min(dtau, opts.dtau_max)
    steps = 0
    while run.records[-1].tau < tau_end * (1.0 - 1e-12):
        steps += 1
        if steps > opts.max_steps:
            raise StepSizeUnderflowError(f"exceeded {opts.max_steps} envelope steps")
        remaining = tau_end - run.records[-1].tau
        outcome = envelope_step(run, min(dtau, remaining), opts)
        dtau = min(outcome.dtau_next, opts.dtau_max)
    return run


def reconstruct_characteristic(run: EnvelopeRun, t0: float = 0.0):
    """Univariate samples x(tau_k) = X_k(Theta(tau_k)) along a characteristic.

    Theta'(tau) = omega(tau) * P / (2 pi), integrated by the trapezoidal
    rule over the run's tau grid, wrapped modulo P.
    Returns (taus, thetas, values) with values[i] of shape (K, m_i).
    """
    P = run.pcircuit.period
    taus = run.taus
    omegas = np.array([r.omega for r in run.records]) * P / (2.0 * math.pi)
    thetas = np.empty_like(taus)
    thetas[0] = t0
    if taus.size > 1:
        increments = 0.5 * (omegas[1:] + omegas[:-1]) * np.diff(taus)
        thetas[1:] = t0 + np.cumsum(increments)
    values = []
    for i in range(run.pcircuit.n_subcircuits):
        vals = np.vstack(
            [eval_waveform(rec.waveforms[i], th) for rec, th in zip(run.records, thetas)]
        )
        values.append(vals)
    return taus, np.mod(thetas, P), values
