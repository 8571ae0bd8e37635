"""Charge/flux-oriented MNA evaluation for one subcircuit.

The unknown vector of a subcircuit is ordered as: node voltages (non
ground, local declaration order), then branch currents of voltage sources,
then inductors, then connection ends.  Equation rows align with unknowns:
KCL at row of each node voltage, branch equations at the rows of voltage
source and inductor currents.  Connection currents enter the KCL rows of
their nodes but own no row here; their defining equations are assembled by
the periodic BVP solver.

The residual convention is ``d/dt q(x) + g(x, tau, t) = 0`` with sources
folded into ``g`` (a source contributes ``-s(tau, t)``).  Current sources
follow the SPICE sign convention: positive current flows from the first
terminal through the source to the second.

Jacobian blocks dq/dx and dg/dx are dense (m, m) arrays; subcircuit
dimensions are small and the global system is assembled sparse downstream.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    ModelDomainError,
    NonFiniteStateError,
    TableOutOfRangeError,
)
from .netlist import Device, SourceSpec, Subcircuit, is_ground

#: diode exponent cap; above v = 40*Vt the exponential continues linearly
DIODE_EXP_LIMIT = 40.0


# --- bivariate sources ------------------------------------------------------

def _load_table(path: str):
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns tau,value")
    return data[:, 0], data[:, 1]


class _TableFunction:
    """Linear interpolation over a two-column CSV, strict on the domain."""

    def __init__(self, path: str):
        self.path = path
        self.x, self.y = _load_table(path)

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < self.x[0] - 1e-12) or np.any(tau > self.x[-1] + 1e-12):
            raise TableOutOfRangeError(
                f"{self.path}: tau outside [{self.x[0]}, {self.x[-1]}]"
            )
        return np.interp(tau, self.x, self.y)


def build_envelope(descriptor: str, base_dir: str = "."):
    """Slow modulation e(tau) from its netlist descriptor."""
    if descriptor == "unit":
        return lambda tau: np.ones_like(np.asarray(tau, dtype=float))
    if descriptor.startswith("ramp:"):
        a = float(descriptor.split(":", 1)[1])
        return lambda tau: 1.0 + a * np.asarray(tau, dtype=float)
    if descriptor.startswith("sinmod:"):
        _, f, m = descriptor.split(":")
        f, m = float(f), float(m)
        return lambda tau: 1.0 + m * np.sin(2.0 * np.pi * f * np.asarray(tau, float))
    if descriptor.endswith(".csv"):
        return _TableFunction(os.path.join(base_dir, descriptor))
    raise ValueError(f"unknown envelope descriptor {descriptor!r}")


def build_omega(omega_spec, base_dir: str = "."):
    """Angular frequency omega(tau) in rad/s from its descriptor."""
    if omega_spec.kind == "const":
        w = float(omega_spec.value)
        return lambda tau: np.full_like(np.asarray(tau, dtype=float), w, dtype=float)
    return _TableFunction(os.path.join(base_dir, omega_spec.path))


@dataclass
class BivariateSource:
    """s(tau, t) = offset + amplitude * e(tau) * w(t) with P-periodic w."""

    spec: SourceSpec
    period: float
    envelope: object  # callable e(tau)

    @classmethod
    def from_spec(cls, spec: SourceSpec, period: float, base_dir: str = "."):
        env = build_envelope(spec.envelope, base_dir) if spec.kind == "am" else None
        return cls(spec, period, env)

    def fast_waveform(self, t):
        """w(t), evaluated with period-P wrapping built into sin."""
        t = np.asarray(t, dtype=float)
        if self.spec.kind == "dc":
            return np.ones_like(t)
        h = self.spec.harmonic if self.spec.kind == "sin" else 1
        return np.sin(2.0 * np.pi * h * t / self.period)

    def eval(self, tau, t):
        spec = self.spec
        if spec.kind == "dc":
            return spec.v0 * np.ones_like(np.asarray(t, dtype=float))
        e = 1.0 if self.envelope is None else self.envelope(tau)
        return spec.v0 + spec.va * e * self.fast_waveform(t)


def eval_source(src: BivariateSource, tau, t):
    """s(tau, t): slow envelope times the P-periodic fast waveform."""
    return src.eval(tau, t)


# --- system layout ----------------------------------------------------------

@dataclass
class SystemLayout:
    """Unknown ordering and compiled device index maps for one subcircuit."""

    subcircuit: Subcircuit
    period: float
    names: tuple
    m: int
    n_rows: int
    conn_end_index: tuple  # absolute unknown index of each connection end
    _stamps: list = None
    source_dir: str = "."

    def index_of(self, name: str) -> int:
        return self.names.index(name)


def build_layout(
    subcircuit: Subcircuit, period: float, source_dir: str = "."
) -> SystemLayout:
    """Deterministic unknown layout: voltages, V currents, L currents, ends."""
    node_idx = {nd: i for i, nd in enumerate(subcircuit.nodes)}
    names = [f"v_{nd}" for nd in subcircuit.nodes]

    def nidx(term):
        return -1 if is_ground(term) else node_idx[term]

    vsources = [d for d in subcircuit.devices if d.kind == "vsource"]
    inductors = [d for d in subcircuit.devices if d.kind == "inductor"]
    branch_index = {}
    for d in vsources + inductors:
        branch_index[d.name] = len(names)
        names.append(f"i_{d.name}")
    n_rows = len(names)
    conn_end_index = []
    for ci, node_local in subcircuit.conn_ends:
        conn_end_index.append(len(names))
        names.append(f"i_conn{ci}_{subcircuit.name}")
    m = len(names)

    stamps = []
    for d in subcircuit.devices:
        idx = tuple(nidx(t) for t in d.terminals)
        if d.kind in ("vsource", "inductor"):
            stamps.append((d.kind, idx, d.params, branch_index[d.name], d.source))
        else:
            stamps.append((d.kind, idx, d.params, -1, d.source))
    for end_abs, (ci, node_local) in zip(conn_end_index, subcircuit.conn_ends):
        stamps.append(("conn_end", (node_local,), (), end_abs, None))

    layout = SystemLayout(
        subcircuit=subcircuit,
        period=period,
        names=tuple(names),
        m=m,
        n_rows=n_rows,
        conn_end_index=tuple(conn_end_index),
        source_dir=source_dir,
    )
    layout._stamps = _compile_sources(stamps, period, source_dir)
    return layout


def _compile_sources(stamps, period, source_dir):
    compiled = []
    for kind, idx, params, aux, source in stamps:
        src = (
            BivariateSource.from_spec(source, period, source_dir)
            if source is not None
            else None
        )
        compiled.append((kind, idx, params, aux, src))
    return compiled


# --- stamp evaluation -------------------------------------------------------

@dataclass
class StampResult:
    """q, g vectors and their state Jacobians for one or many states."""

    q: np.ndarray
    g: np.ndarray
    dq: np.ndarray
    dg: np.ndarray


def _col(x, i):
    if i < 0:
        return np.zeros(x.shape[0])
    return x[:, i]


def eval_stamps(layout: SystemLayout, x, tau, t, source_scale: float = 1.0):
    """Superpose all device stamps of the subcircuit at states ``x``.

    ``x`` may be a single state (m,) or a batch (N, m) with ``t`` scalar or
    (N,).  Results follow the input shape; Jacobians are (N, m, m).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != layout.m:
        raise ValueError(f"state length {X.shape[1]} != layout dimension {layout.m}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteStateError("state vector contains non-finite entries")
    N, m = X.shape
    tvec = np.broadcast_to(np.asarray(t, dtype=float), (N,))

    q = np.zeros((N, m))
    g = np.zeros((N, m))
    dq = np.zeros((N, m, m))
    dg = np.zeros((N, m, m))

    def add_pair(vec, a, b, val):
        if a >= 0:
            vec[:, a] += val
        if b >= 0:
            vec[:, b] -= val

    def add_jac(mat, a, b, c, dd, val):
        # d(current a->b)/d(v_c - v_d) = val
        for row, rs in ((a, 1.0), (b, -1.0)):
            if row < 0:
                continue
            if c >= 0:
                mat[:, row, c] += rs * val
            if dd >= 0:
                mat[:, row, dd] -= rs * val

    for kind, idx, params, aux, src in layout._stamps:
        if kind == "resistor":
            a, b = idx
            G = 1.0 / params[0]
            v = _col(X, a) - _col(X, b)
            add_pair(g, a, b, G * v)
            add_jac(dg, a, b, a, b, G)
        elif kind == "capacitor":
            a, b = idx
            C = params[0]
            v = _col(X, a) - _col(X, b)
            add_pair(q, a, b, C * v)
            add_jac(dq, a, b, a, b, C)
        elif kind == "inductor":
            a, b = idx
            L = params[0]
            j = aux
            i_l = X[:, j]
            add_pair(g, a, b, i_l)
            if a >= 0:
                dg[:, a, j] += 1.0
            if b >= 0:
                dg[:, b, j] -= 1.0
            q[:, j] += L * i_l
            dq[:, j, j] += L
            g[:, j] -= _col(X, a) - _col(X, b)
            if a >= 0:
                dg[:, j, a] -= 1.0
            if b >= 0:
                dg[:, j, b] += 1.0
        elif kind == "vsource":
            a, b = idx
            j = aux
            i_v = X[:, j]
            add_pair(g, a, b, i_v)
            if a >= 0:
                dg[:, a, j] += 1.0
            if b >= 0:
                dg[:, b, j] -= 1.0
            s = src.eval(tau, tvec) * source_scale
            g[:, j] += (_col(X, a) - _col(X, b)) - s
            if a >= 0:
                dg[:, j, a] += 1.0
            if b >= 0:
                dg[:, j, b] -= 1.0
        elif kind == "isource":
            a, b = idx
            s = src.eval(tau, tvec) * source_scale
            add_pair(g, a, b, s)
        elif kind == "diode":
            a, b = idx
            Is, Vt = params
            v = _col(X, a) - _col(X, b)
            z = v / Vt
            zc = np.minimum(z, DIODE_EXP_LIMIT)
            e = np.exp(zc)
            over = z > DIODE_EXP_LIMIT
            i_d = np.where(over, Is * (e * (1.0 + (z - DIODE_EXP_LIMIT)) - 1.0),
                           Is * (e - 1.0))
            gd = Is / Vt * e
            add_pair(g, a, b, i_d)
            add_jac(dg, a, b, a, b, gd)
        elif kind == "mosfet":
            _stamp_mosfet(X, g, dg, idx, params)
        elif kind == "conn_end":
            (node_local,) = idx
            j = aux
            g[:, node_local] += X[:, j]
            dg[:, node_local, j] += 1.0
        else:  # pragma: no cover
            raise ModelDomainError(f"unknown stamp kind {kind!r}")

    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(g))):
        raise ModelDomainError("device evaluation produced non-finite values")
    if single:
        return StampResult(q[0], g[0], dq[0], dg[0])
    return StampResult(q, g, dq, dg)


def _stamp_mosfet(X, g, dg, idx, params):
    """Square-law level-1 model, symmetric in drain/source for vds < 0."""
    d, gt, s = idx
    K, VT, lam = params
    N = X.shape[0]
    vg = _col(X, gt)
    vd = _col(X, d)
    vs = _col(X, s)
    fwd = (vd - vs) >= 0.0
    # effective gate overdrive and drain-source voltage after swapping
    vov = np.where(fwd, vg - vs, vg - vd) - VT
    vdsx = np.abs(vd - vs)
    cutoff = vov <= 0.0
    triode = (~cutoff) & (vdsx < vov)
    lamf = 1.0 + lam * vdsx
    i_tri = K * (vov * vdsx - 0.5 * vdsx**2) * lamf
    i_sat = 0.5 * K * vov**2 * lamf
    f = np.where(cutoff, 0.0, np.where(triode, i_tri, i_sat))
    # partials of f w.r.t. (vov, vdsx)
    fu_tri = K * vdsx * lamf
    fw_tri = K * (vov - vdsx) * lamf + lam * K * (vov * vdsx - 0.5 * vdsx**2)
    fu_sat = K * vov * lamf
    fw_sat = lam * 0.5 * K * vov**2
    fu = np.where(cutoff, 0.0, np.where(triode, fu_tri, fu_sat))
    fw = np.where(cutoff, 0.0, np.where(triode, fw_tri, fw_sat))

    i_ds = np.where(fwd, f, -f)
    # forward: vov = vg - vs - VT, vdsx = vd - vs
    # reverse: vov = vg - vd - VT, vdsx = vs - vd, current negated
    di_dg = np.where(fwd, fu, -fu)
    di_dd = np.where(fwd, fw, fu + fw)
    di_ds_ = np.where(fwd, -(fu + fw), -fw)

    if d >= 0:
        g[:, d] += i_ds
    if s >= 0:
        g[:, s] -= i_ds
    for col, val in ((d, di_dd), (gt, di_dg), (s, di_ds_)):
        if col < 0:
            continue
        if d >= 0:
            dg[:, d, col] += val
        if s >= 0:
            dg[:, s, col] -= val
