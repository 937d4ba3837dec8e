"""Nonlinear time-domain model of the inverter microgrid.

State layout (flat float vector)::

    per DG k (15):  delta, P_o, Q_o, phi_d, phi_q, gamma_d, gamma_q,
                    ii_d, ii_q, vo_d, vo_q, io_d, io_q, omega_nl, V_nl
    per line (2):   il_D, il_Q        (current from ``from_bus`` to ``to_bus``)
    per load (2):   iload_D, iload_Q  (current drawn from the bus)

DG quantities live in each inverter's own d-q frame; line and load currents
in the common D-Q frame, which is the reference DG's frame. Inductances and
capacitances are per-unit reactances/susceptances at nominal frequency, so
every ``L di/dt`` carries a ``1/omega_b`` factor and frequencies are p.u.

Inside this module a d-q pair is handled as one complex number ``d + jq``.
A rotating-frame inductor then reads ``(L/omega_b) di/dt = v - (R + j omega L) i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .control import ControlGains, secondary_derivs
from .cybergraph import CommGraph
from .netmodel import NetworkModel, check_model
from .powerflow import PowerFlowSolution

DG_FIELDS = (
    "delta", "P", "Q", "phi_d", "phi_q", "gamma_d", "gamma_q",
    "ii_d", "ii_q", "vo_d", "vo_q", "io_d", "io_q", "omega_nl", "V_nl",
)  # fmt: skip
DG_WIDTH = len(DG_FIELDS)
F = {name: i for i, name in enumerate(DG_FIELDS)}

# nominal frequency used by the decoupling terms of the inner controllers
OMEGA_NOMINAL = 1.0


class DynamicsError(RuntimeError):
    pass


@dataclass(frozen=True)
class StateLayout:
    m: int
    n_lines: int
    n_loads: int

    @property
    def size(self) -> int:
        return DG_WIDTH * self.m + 2 * self.n_lines + 2 * self.n_loads

    @property
    def line_offset(self) -> int:
        return DG_WIDTH * self.m

    @property
    def load_offset(self) -> int:
        return DG_WIDTH * self.m + 2 * self.n_lines

    def dg(self, x: np.ndarray) -> np.ndarray:
        return x[: self.line_offset].reshape(self.m, DG_WIDTH)

    def lines(self, x: np.ndarray) -> np.ndarray:
        return x[self.line_offset : self.load_offset].reshape(self.n_lines, 2)

    def loads(self, x: np.ndarray) -> np.ndarray:
        return x[self.load_offset :].reshape(self.n_loads, 2)

    def index(self, k: int, name: str) -> int:
        return DG_WIDTH * k + F[name]

    def names(self) -> list[str]:
        out = [f"dg{k + 1}.{f}" for k in range(self.m) for f in DG_FIELDS]
        out += [f"line{i + 1}.{a}" for i in range(self.n_lines) for a in "DQ"]
        out += [f"load{i + 1}.{a}" for i in range(self.n_loads) for a in "DQ"]
        return out

    @classmethod
    def of(cls, network: NetworkModel) -> "StateLayout":
        return cls(network.m, len(network.lines), len(network.loads))


def cplx(a: np.ndarray) -> np.ndarray:
    """(..., 2) real pairs -> complex."""
    return a[..., 0] + 1j * a[..., 1]


# --------------------------------------------------------------------------
# per-block equations; DG arguments may be scalars or length-m arrays


def power_controller_derivs(vo, io, P, Q, omega_nl, V_nl, vb, mp, nq, omega_c, rc, Lc):
    """Power measurement filter, droop and capacitor-voltage reference.

    ``vo``, ``io``, ``vb`` are complex d-q quantities in the DG frame.
    Returns ``(dP, dQ, omega, V_cmd, vo_ref)`` with ``vo_ref`` complex and
    purely real (q component zero).

    The droop voltage ``V_cmd`` is a bus-voltage magnitude; the reference
    for the capacitor voltage adds the coupling-branch drop at the measured
    bus angle. The q-axis drop uses ``+r_c i_oq``: that sign makes a
    steady-state phasor solution an exact fixed point.
    """
    p = (vo * np.conj(io)).real  # i_d v_d + i_q v_q
    q = (vo * np.conj(io)).imag  # i_d v_q - i_q v_d
    dP = omega_c * (p - P)
    dQ = omega_c * (q - Q)
    omega = omega_nl - mp * P
    V_cmd = V_nl - nq * Q
    mag = np.abs(vb)
    unit = np.where(mag > 0.0, vb / np.where(mag > 0.0, mag, 1.0), 1.0)
    vo_ref = np.abs(V_cmd * unit + (rc + 1j * omega * Lc) * io) + 0j
    return dP, dQ, omega, V_cmd, vo_ref


def inner_controllers(vo, vo_ref, io, ii, phi, gamma, Kpv, Kiv, Kpc, Kic, KF, Cf, Lf, decouple=True):
    """Voltage and current PI loops.

    Returns ``(dphi, dgamma, vi)``; ``vi`` is taken as the applied inverter
    voltage (ideal modulation).
    """
    dv = vo_ref - vo
    xc = np.where(decouple, 1.0, 0.0)
    ii_ref = KF * io + xc * 1j * OMEGA_NOMINAL * Cf * vo + Kpv * dv + Kiv * phi
    di = ii_ref - ii
    vi = xc * 1j * OMEGA_NOMINAL * Lf * ii + Kpc * di + Kic * gamma
    return dv, di, vi


def lcl_derivs(ii, vo, io, vi, vb, omega, Lf, rf, Cf, Lc, rc, omega_b):
    """Filter inductor, capacitor and coupling inductor in the DG frame."""
    dii = omega_b / Lf * (vi - vo - rf * ii) - 1j * omega_b * omega * ii
    dvo = omega_b / Cf * (ii - io) - 1j * omega_b * omega * vo
    dio = omega_b / Lc * (vo - vb - rc * io) - 1j * omega_b * omega * io
    return dii, dvo, dio


def branch_load_derivs(i_line, i_load, v_bus, line_from, line_to, R_l, L_l, load_bus, R_load, L_load, omega_com, omega_b):
    """Line and load current derivatives in the common frame (complex arrays)."""
    dl = omega_b / L_l * (v_bus[line_from] - v_bus[line_to] - R_l * i_line) - 1j * omega_b * omega_com * i_line
    dld = omega_b / L_load * (v_bus[load_bus] - R_load * i_load) - 1j * omega_b * omega_com * i_load
    return dl, dld


def node_voltages(io_DQ, dg_bus, i_line, line_from, line_to, i_load, load_bus, n_bus, R_N):
    """Bus voltages from the virtual resistance: ``v = R_N * (net injected current)``."""
    if not math.isfinite(R_N):
        raise DynamicsError("time-domain model needs a finite virtual resistance")
    inj = np.zeros(n_bus, dtype=complex)
    np.add.at(inj, dg_bus, io_DQ)
    np.add.at(inj, load_bus, -i_load)
    np.add.at(inj, line_from, -i_line)
    np.add.at(inj, line_to, i_line)
    return R_N * inj


# --------------------------------------------------------------------------
# assembled right-hand side


@dataclass
class RhsData:
    """Flat arrays describing one microgrid configuration for the RHS kernels."""

    n_bus: int
    ref_dg: int
    R_N: float
    omega_b: float
    dg_bus: np.ndarray  # int (m,)
    dgp: np.ndarray  # (m, 14): mp nq Lf rf Cf Lc rc wc Kpv Kiv Kpc Kic KF decouple
    line_ends: np.ndarray  # int (n_lines, 2)
    line_par: np.ndarray  # (n_lines, 2): R, L
    load_bus: np.ndarray  # int (n_loads,)
    load_par: np.ndarray  # (n_loads, 2): R, L
    adjacency: np.ndarray  # (m, m)
    pins: np.ndarray  # float (m,) 0/1
    ctrl: np.ndarray  # C_v C_omega C_P c_gv c_gomega omega_ref V_ref

    @classmethod
    def build(cls, network: NetworkModel, graph: CommGraph, pins, gains: ControlGains) -> "RhsData":
        check_model(network)
        if graph.m != network.m:
            raise DynamicsError(f"cyber graph has {graph.m} nodes for {network.m} DGs")
        pins = np.asarray(pins, dtype=float)
        if pins.shape != (network.m,):
            raise DynamicsError("pin vector length does not match DG count")
        if not math.isfinite(network.virtual_resistance):
            raise DynamicsError("time-domain model needs a finite virtual resistance")
        dgp = np.array(
            [
                [d.mp, d.nq, d.Lf, d.rf, d.Cf, d.Lc, d.rc, d.omega_c, d.Kpv, d.Kiv, d.Kpc, d.Kic, d.KF, float(d.decouple)]
                for d in network.dgs
            ]
        )
        lb = network.load_buses
        return cls(
            n_bus=network.n_bus,
            ref_dg=network.reference_dg,
            R_N=float(network.virtual_resistance),
            omega_b=float(network.base_frequency),
            dg_bus=np.array(network.dg_buses, dtype=np.intp),
            dgp=dgp,
            line_ends=np.array([[ln.from_bus, ln.to_bus] for ln in network.lines], dtype=np.intp).reshape(-1, 2),
            line_par=np.array([[ln.R, ln.L] for ln in network.lines], dtype=float).reshape(-1, 2),
            load_bus=np.array(lb, dtype=np.intp),
            load_par=np.array([[network.loads[b].R, network.loads[b].L] for b in lb], dtype=float).reshape(-1, 2),
            adjacency=graph.adjacency(),
            pins=pins,
            ctrl=np.array(
                [gains.C_v, gains.C_omega, gains.C_P, gains.c_gv, gains.c_gomega, gains.omega_ref, gains.V_ref]
            ),
        )

    @property
    def layout(self) -> StateLayout:
        return StateLayout(len(self.dg_bus), len(self.line_ends), len(self.load_bus))


@dataclass
class Outputs:
    """Algebraic quantities of one state: frequencies, voltages, bus phasors."""

    omega: np.ndarray
    V_cmd: np.ndarray
    V_bus: np.ndarray  # |v| at DG buses
    P: np.ndarray
    Q: np.ndarray
    mpP: np.ndarray
    v_bus: np.ndarray  # complex, common frame, all buses


def _evaluate(x: np.ndarray, d: RhsData, want_outputs: bool = False):
    lay = d.layout
    g = lay.dg(x)
    p = d.dgp
    mp, nq, Lf, rf, Cf, Lc, rc, wc, Kpv, Kiv, Kpc, Kic, KF, dec = p.T
    delta = g[:, F["delta"]]
    rot = np.exp(1j * delta)
    ii = g[:, F["ii_d"]] + 1j * g[:, F["ii_q"]]
    vo = g[:, F["vo_d"]] + 1j * g[:, F["vo_q"]]
    io = g[:, F["io_d"]] + 1j * g[:, F["io_q"]]
    phi = g[:, F["phi_d"]] + 1j * g[:, F["phi_q"]]
    gam = g[:, F["gamma_d"]] + 1j * g[:, F["gamma_q"]]
    il = cplx(lay.lines(x))
    ild = cplx(lay.loads(x))
    lf, lt = d.line_ends[:, 0], d.line_ends[:, 1]

    v_bus = node_voltages(io * rot, d.dg_bus, il, lf, lt, ild, d.load_bus, d.n_bus, d.R_N)
    vb = v_bus[d.dg_bus] * np.conj(rot)

    dP, dQ, omega, V_cmd, vo_ref = power_controller_derivs(
        vo, io, g[:, F["P"]], g[:, F["Q"]], g[:, F["omega_nl"]], g[:, F["V_nl"]], vb, mp, nq, wc, rc, Lc
    )
    dphi, dgam, vi = inner_controllers(vo, vo_ref, io, ii, phi, gam, Kpv, Kiv, Kpc, Kic, KF, Cf, Lf, dec > 0.5)
    dii, dvo, dio = lcl_derivs(ii, vo, io, vi, vb, omega, Lf, rf, Cf, Lc, rc, d.omega_b)
    w_com = omega[d.ref_dg]
    ddelta = d.omega_b * (omega - w_com)
    ddelta[d.ref_dg] = 0.0

    dl, dld = branch_load_derivs(
        il, ild, v_bus, lf, lt, d.line_par[:, 0], d.line_par[:, 1],
        d.load_bus, d.load_par[:, 0], d.load_par[:, 1], w_com, d.omega_b,
    )  # fmt: skip

    c = d.ctrl
    gains = ControlGains(c[0], c[1], c[2], c[3], c[4], c[5], c[6])
    dwnl, dVnl = secondary_derivs(omega, V_cmd, g[:, F["P"]], d.adjacency, d.pins, gains, mp)

    dx = np.empty_like(x)
    dg = lay.dg(dx)
    dg[:, F["delta"]] = ddelta
    dg[:, F["P"]] = dP
    dg[:, F["Q"]] = dQ
    dg[:, F["phi_d"]], dg[:, F["phi_q"]] = dphi.real, dphi.imag
    dg[:, F["gamma_d"]], dg[:, F["gamma_q"]] = dgam.real, dgam.imag
    dg[:, F["ii_d"]], dg[:, F["ii_q"]] = dii.real, dii.imag
    dg[:, F["vo_d"]], dg[:, F["vo_q"]] = dvo.real, dvo.imag
    dg[:, F["io_d"]], dg[:, F["io_q"]] = dio.real, dio.imag
    dg[:, F["omega_nl"]] = dwnl
    dg[:, F["V_nl"]] = dVnl
    lay.lines(dx)[:] = np.stack([dl.real, dl.imag], axis=-1)
    lay.loads(dx)[:] = np.stack([dld.real, dld.imag], axis=-1)
    if want_outputs:
        P = g[:, F["P"]]
        return dx, Outputs(omega, V_cmd, np.abs(vb), P.copy(), g[:, F["Q"]].copy(), mp * P, v_bus)
    return dx


def rhs_numpy(t: float, x: np.ndarray, d: RhsData) -> np.ndarray:
    return _evaluate(np.asarray(x, dtype=float), d)


def outputs(x: np.ndarray, d: RhsData) -> Outputs:
    return _evaluate(np.asarray(x, dtype=float), d, want_outputs=True)[1]


class RhsModel:
    """Callable ``f(t, x)`` for one configuration, on the selected backend."""

    def __init__(self, data: RhsData, backend: str | None = None):
        self.data = data
        self.layout = data.layout
        self.backend = backend or _backend.default_backend()
        if self.backend == "compiled":
            if not _backend.HAVE_COMPILED:
                raise DynamicsError("compiled RHS kernel is not available")
            self._kernel = _backend.compiled_kernel(data)
        elif self.backend != "numpy":
            raise ValueError(f"unknown backend {self.backend!r}")

    @classmethod
    def build(cls, network, graph, pins, gains, backend: str | None = None) -> "RhsModel":
        return cls(RhsData.build(network, graph, pins, gains), backend)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.backend == "compiled":
            return self._kernel(np.ascontiguousarray(x, dtype=float))
        return rhs_numpy(t, x, self.data)

    def outputs(self, x: np.ndarray) -> Outputs:
        return outputs(x, self.data)

    def sparsity(self) -> np.ndarray:
        return jacobian_sparsity(self.data)


def system_derivs(t, state, network, graph, pins, gains, backend: str | None = None) -> np.ndarray:
    """Full-model time derivative at ``state`` (convenience; builds the model each call)."""
    state = np.asarray(state, dtype=float)
    lay = StateLayout.of(network)
    if state.shape != (lay.size,):
        raise DynamicsError(f"state has shape {state.shape}, expected ({lay.size},)")
    return RhsModel.build(network, graph, pins, gains, backend)(t, state)


def jacobian_sparsity(d: RhsData) -> np.ndarray:
    """Structural non-zero pattern of the RHS Jacobian (Boolean, n x n)."""
    lay = d.layout
    n = lay.size
    S = np.zeros((n, n), dtype=bool)
    m = lay.m
    bus_sources: dict[int, list[int]] = {b: [] for b in range(d.n_bus)}
    for k in range(m):
        b = int(d.dg_bus[k])
        base = DG_WIDTH * k
        bus_sources[b] += [base + F["delta"], base + F["io_d"], base + F["io_q"]]
    for i, (a, b) in enumerate(d.line_ends):
        cols = [lay.line_offset + 2 * i, lay.line_offset + 2 * i + 1]
        bus_sources[int(a)] += cols
        bus_sources[int(b)] += cols
    for i, b in enumerate(d.load_bus):
        bus_sources[int(b)] += [lay.load_offset + 2 * i, lay.load_offset + 2 * i + 1]

    ref = d.ref_dg
    ref_base = DG_WIDTH * ref
    ref_freq = [ref_base + F["omega_nl"], ref_base + F["P"]]
    for k in range(m):
        base = DG_WIDTH * k
        rows = list(range(base, base + DG_WIDTH))
        local = list(range(base, base + DG_WIDTH)) + bus_sources[int(d.dg_bus[k])]
        for r in rows:
            S[r, local] = True
        S[base + F["delta"], ref_freq] = True
        # secondary control couples to neighbours' frequency, voltage and power
        for j in range(m):
            if d.adjacency[j, k] or j == k:
                jb = DG_WIDTH * j
                nb = bus_sources[int(d.dg_bus[j])]
                for r in (base + F["omega_nl"], base + F["V_nl"]):
                    S[r, list(range(jb, jb + DG_WIDTH)) + nb] = True
    for i, (a, b) in enumerate(d.line_ends):
        r = [lay.line_offset + 2 * i, lay.line_offset + 2 * i + 1]
        cols = bus_sources[int(a)] + bus_sources[int(b)] + r + ref_freq
        for rr in r:
            S[rr, cols] = True
    for i, b in enumerate(d.load_bus):
        r = [lay.load_offset + 2 * i, lay.load_offset + 2 * i + 1]
        cols = bus_sources[int(b)] + r + ref_freq
        for rr in r:
            S[rr, cols] = True
    return S


# --------------------------------------------------------------------------
# equilibrium from a load-flow solution


def extract_steady_state(sol: PowerFlowSolution, network: NetworkModel) -> np.ndarray:
    """Dynamic state consistent with a converged load flow.

    DG output currents come from Kirchhoff's law at the load-flow voltages.
    Line and load currents are then re-solved in the virtual-resistance
    formulation itself, because ``v = R_N * (sum of currents)`` multiplies
    any load-flow round-off by ``R_N``.
    """
    s = sol.settings
    if not sol.final_mismatch_norm <= s.tolerance:
        raise DynamicsError("load flow did not converge; refusing to build a steady state")
    check_model(network)
    R_N = network.virtual_resistance
    if not math.isfinite(R_N):
        raise DynamicsError("time-domain model needs a finite virtual resistance")
    w = s.omega_ref
    V = np.asarray(sol.voltages, dtype=complex)
    lay = StateLayout.of(network)
    n = network.n_bus
    lines = network.lines
    lb = network.load_buses
    dg_bus = list(network.dg_buses)

    i_line = np.array([(V[ln.from_bus] - V[ln.to_bus]) / ln.impedance(w) for ln in lines], dtype=complex)
    i_load = np.array([V[b] / network.loads[b].impedance(w) for b in lb], dtype=complex)
    net_out = np.zeros(n, dtype=complex)
    np.add.at(net_out, [ln.from_bus for ln in lines], i_line)
    np.add.at(net_out, [ln.to_bus for ln in lines], -i_line)
    np.add.at(net_out, list(lb), i_load)
    io_pf = V[dg_bus] / R_N + net_out[dg_bus]

    # branch-bus incidence: line rows e_from - e_to, load rows e_bus
    nb = len(lines) + len(lb)
    C = np.zeros((nb, n))
    Z = np.empty(nb, dtype=complex)
    for i, ln in enumerate(lines):
        C[i, ln.from_bus], C[i, ln.to_bus] = 1.0, -1.0
        Z[i] = ln.impedance(w)
    for i, b in enumerate(lb):
        C[len(lines) + i, b] = 1.0
        Z[len(lines) + i] = network.loads[b].impedance(w)
    inj = np.zeros(n, dtype=complex)
    np.add.at(inj, dg_bus, io_pf)
    M = np.diag(Z) + R_N * (C @ C.T)
    rhs = R_N * (C @ inj)
    y = np.linalg.solve(M, rhs)
    y = y + np.linalg.solve(M, rhs - M @ y)  # one refinement step
    i_line, i_load = y[: len(lines)], y[len(lines) :]
    v_bus = R_N * (inj - C.T @ y)

    rc = np.array([d.rc for d in network.dgs])
    Lc = np.array([d.Lc for d in network.dgs])
    vo_pf = v_bus[dg_bus] + (rc + 1j * w * Lc) * io_pf

    # common frame: the reference DG's capacitor voltage lies on the D axis
    ang = np.angle(vo_pf)
    alpha = ang[network.reference_dg]
    to_common = np.exp(-1j * alpha)
    delta = ang - alpha
    delta[network.reference_dg] = 0.0
    to_dg = np.exp(-1j * ang)

    io = io_pf * to_dg
    vo = vo_pf * to_dg
    vb = v_bus[dg_bus] * to_dg
    x = np.zeros(lay.size)
    g = lay.dg(x)
    for k, d in enumerate(network.dgs):
        P = (vo[k] * np.conj(io[k])).real
        Q = (vo[k] * np.conj(io[k])).imag
        ii = io[k] + 1j * w * d.Cf * vo[k]
        vi = vo[k] + (d.rf + 1j * w * d.Lf) * ii
        xc = 1.0 if d.decouple else 0.0
        phi = (ii - d.KF * io[k] - xc * 1j * OMEGA_NOMINAL * d.Cf * vo[k]) / d.Kiv
        gam = (vi - xc * 1j * OMEGA_NOMINAL * d.Lf * ii) / d.Kic
        g[k] = [
            delta[k], P, Q, phi.real, phi.imag, gam.real, gam.imag,
            ii.real, ii.imag, vo[k].real, 0.0, io[k].real, io[k].imag,
            w + d.mp * P, abs(vb[k]) + d.nq * Q,
        ]  # fmt: skip
    il = i_line * to_common
    ild = i_load * to_common
    lay.lines(x)[:] = np.stack([il.real, il.imag], axis=-1).reshape(-1, 2)
    lay.loads(x)[:] = np.stack([ild.real, ild.imag], axis=-1).reshape(-1, 2)
    return x


def rotate_frame(x: np.ndarray, layout: StateLayout, angle: float) -> np.ndarray:
    """Rotate every common-frame quantity and every DG angle by ``angle``."""
    y = np.array(x, dtype=float)
    y[: layout.line_offset].reshape(layout.m, DG_WIDTH)[:, F["delta"]] += angle
    r = np.exp(1j * angle)
    for view in (layout.lines(y), layout.loads(y)):
        c = cplx(view) * r
        view[:, 0], view[:, 1] = c.real, c.imag
    return y
