"""Newton-Raphson load flow for an islanded droop microgrid under secondary control.

Secondary control pins the system frequency and every DG bus voltage to
known set-points, so the unknowns are the DG no-load set-points instead of a
slack injection::

    W = [omega_nl (m) | V_nl (m) | theta (N-1) | |V_load| (N-m)]

and the mismatch vector is::

    [P_a | Q_a | dP (N-1) | dQ (N-1) | dTheta (m-1)]

``P_a``/``Q_a`` balance total generation against load plus losses; ``dP``,
``dQ`` are bus balances for every bus except the reference; ``dTheta`` forces
equal ``m_p * P_G`` on every DG (proportional sharing).

Each DG generates ``P_G + jQ_G`` at its filter-capacitor terminal; the
coupling inductor ``r_c + j omega L_c`` sits between that terminal and the
bus, and its losses are booked with the network losses. This keeps the
solution an exact equilibrium of the time-domain model, whose droop acts on
power measured at the capacitor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import NetworkModel, build_admittance, check_model


class PowerFlowError(RuntimeError):
    """Base class for load-flow failures."""


class NumericFailure(PowerFlowError):
    pass


class MaxIterationsExceeded(PowerFlowError):
    pass


class SingularJacobian(PowerFlowError):
    def __init__(self, msg: str, condition: float):
        super().__init__(msg)
        self.condition = condition


class Diverged(PowerFlowError):
    pass


@dataclass(frozen=True)
class PfSettings:
    tolerance: float = 1e-8
    max_iterations: int = 50
    fd_step: float = 1e-6
    omega_ref: float = 1.0
    V_ref: float = 1.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class PfUnknowns:
    omega_nl: np.ndarray
    V_nl: np.ndarray
    theta: np.ndarray
    V_load: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.omega_nl, self.V_nl, self.theta, self.V_load]).astype(float)

    @classmethod
    def unpack(cls, w: np.ndarray, m: int, n_bus: int) -> "PfUnknowns":
        w = np.asarray(w, dtype=float)
        if w.shape != (2 * n_bus + m - 1,):
            raise ValueError(f"expected {2 * n_bus + m - 1} unknowns for m={m}, N={n_bus}, got {w.shape}")
        a, b, c = m, 2 * m, 2 * m + n_bus - 1
        return cls(w[:a].copy(), w[a:b].copy(), w[b:c].copy(), w[c:].copy())

    @classmethod
    def flat_start(cls, network: NetworkModel, settings: PfSettings) -> "PfUnknowns":
        m, n = network.m, network.n_bus
        return cls(
            np.full(m, settings.omega_ref),
            np.full(m, settings.V_ref),
            np.zeros(n - 1),
            np.full(n - m, settings.V_ref),
        )


def pack_unknowns(u: PfUnknowns) -> np.ndarray:
    return u.pack()


def unpack_unknowns(w: np.ndarray, m: int, n_bus: int) -> PfUnknowns:
    return PfUnknowns.unpack(w, m, n_bus)


@dataclass
class PowerFlowSolution:
    unknowns: PfUnknowns
    P_G: np.ndarray
    Q_G: np.ndarray
    P_loss: float
    Q_loss: float
    P_load: float
    Q_load: float
    iterations: int
    final_mismatch_norm: float
    voltages: np.ndarray  # complex bus voltages, reference angle 0
    settings: PfSettings = field(default_factory=PfSettings)
    history: list[float] = field(default_factory=list)

    @property
    def omega_nl(self) -> np.ndarray:
        return self.unknowns.omega_nl

    @property
    def V_nl(self) -> np.ndarray:
        return self.unknowns.V_nl


@dataclass
class _Evaluation:
    mismatch: np.ndarray
    V: np.ndarray
    P_G: np.ndarray
    Q_G: np.ndarray
    P_load: float
    Q_load: float
    P_loss: float
    Q_loss: float


class _Context:
    """Index bookkeeping and the admittance matrix for one network."""

    def __init__(self, network: NetworkModel, settings: PfSettings):
        check_model(network)
        self.network = network
        self.settings = settings
        self.Y = build_admittance(network, settings.omega_ref)
        n = network.n_bus
        self.dg = np.array(network.dg_buses)
        self.non_dg = np.array(network.non_dg_buses, dtype=int)
        self.non_ref = np.array([b for b in range(n) if b != network.reference_bus], dtype=int)
        self.mp = network.mp()
        self.nq = network.nq()
        self.rc = np.array([d.rc for d in network.dgs])
        self.Lc = np.array([d.Lc for d in network.dgs])
        self.load_bus = np.array(network.load_buses, dtype=int)
        self.load_y = np.array([1.0 / network.loads[b].impedance(settings.omega_ref) for b in network.load_buses])


def _evaluate(w: np.ndarray, ctx: _Context) -> _Evaluation:
    net, s = ctx.network, ctx.settings
    m, n = net.m, net.n_bus
    u = PfUnknowns.unpack(w, m, n)

    vm = np.empty(n)
    vm[ctx.dg] = s.V_ref
    vm[ctx.non_dg] = u.V_load
    th = np.zeros(n)
    th[ctx.non_ref] = u.theta
    V = vm * np.exp(1j * th)

    S_cal = V * np.conj(ctx.Y @ V)

    S_load_bus = np.zeros(n, dtype=complex)
    if len(ctx.load_bus):
        S_load_bus[ctx.load_bus] = vm[ctx.load_bus] ** 2 * np.conj(ctx.load_y)

    P_G = (u.omega_nl - s.omega_ref) / ctx.mp
    Q_G = (u.V_nl - s.V_ref) / ctx.nq

    # DG current through the coupling branch follows from the bus injection
    S_dg_bus = S_cal[ctx.dg] + S_load_bus[ctx.dg]
    i2 = np.abs(S_dg_bus) ** 2 / s.V_ref**2
    S_coupling = (ctx.rc + 1j * s.omega_ref * ctx.Lc) * i2

    S_spec = -S_load_bus
    S_spec[ctx.dg] += P_G + 1j * Q_G - S_coupling

    dS = S_spec - S_cal

    S_net_loss = np.sum(V * np.conj(ctx.Y @ V))  # line and shunt losses
    P_loss = S_net_loss.real + S_coupling.real.sum()
    Q_loss = S_net_loss.imag + S_coupling.imag.sum()
    P_load = S_load_bus.real.sum()
    Q_load = S_load_bus.imag.sum()

    P_a = (P_load + P_loss) - P_G.sum()
    Q_a = (Q_load + Q_loss) - Q_G.sum()
    share = ctx.mp * P_G
    d_theta = share[0] - share[1:]

    mis = np.concatenate([[P_a, Q_a], dS.real[ctx.non_ref], dS.imag[ctx.non_ref], d_theta])
    if not np.all(np.isfinite(mis)):
        raise NumericFailure("non-finite power mismatch")
    return _Evaluation(mis, V, P_G, Q_G, P_load, Q_load, P_loss, Q_loss)


def mismatch(u: PfUnknowns | np.ndarray, network: NetworkModel, settings: PfSettings | None = None) -> np.ndarray:
    """Power mismatch vector ``[P_a, Q_a, dP, dQ, dTheta]`` at unknowns ``u``."""
    settings = settings or PfSettings()
    w = u.pack() if isinstance(u, PfUnknowns) else np.asarray(u, dtype=float)
    return _evaluate(w, _Context(network, settings)).mismatch


def fd_jacobian(f, w: np.ndarray, h: float) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``w`` with step ``h``."""
    f0 = f(w)
    J = np.empty((f0.size, w.size))
    for j in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[j] += h
        wm[j] -= h
        J[:, j] = (f(wp) - f(wm)) / (2.0 * h)
    return J


def solve_power_flow(
    network: NetworkModel,
    settings: PfSettings | None = None,
    initial: PfUnknowns | None = None,
) -> PowerFlowSolution:
    settings = settings or PfSettings()
    ctx = _Context(network, settings)
    w = (initial or PfUnknowns.flat_start(network, settings)).pack()
    if w.size != 2 * network.n_bus + network.m - 1:
        raise ValueError("initial unknowns do not match the network dimensions")

    def f(x):
        return _evaluate(x, ctx).mismatch

    ev = _evaluate(w, ctx)
    norm = float(np.max(np.abs(ev.mismatch)))
    history = [norm]
    growth = 0
    it = 0
    while norm > settings.tolerance:
        if it >= settings.max_iterations:
            raise MaxIterationsExceeded(f"no convergence after {it} iterations, |dP|_inf = {norm:.3e}")
        J = fd_jacobian(f, w, settings.fd_step)
        try:
            cond = np.linalg.cond(J)
        except np.linalg.LinAlgError:
            cond = math.inf
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularJacobian(f"singular load-flow Jacobian at iteration {it} (cond ~ {cond:.2e})", cond)
        # mismatch is spec - calc, so J = d(mismatch)/dW and the step solves J dW = -mismatch
        w = w - np.linalg.solve(J, ev.mismatch)
        it += 1
        ev = _evaluate(w, ctx)
        new = float(np.max(np.abs(ev.mismatch)))
        growth = growth + 1 if new > norm else 0
        norm = new
        history.append(norm)
        if growth >= 5:
            raise Diverged(f"mismatch grew for 5 consecutive iterations (|dP|_inf = {norm:.3e})")

    return PowerFlowSolution(
        unknowns=PfUnknowns.unpack(w, network.m, network.n_bus),
        P_G=ev.P_G,
        Q_G=ev.Q_G,
        P_loss=ev.P_loss,
        Q_loss=ev.Q_loss,
        P_load=ev.P_load,
        Q_load=ev.Q_load,
        iterations=it,
        final_mismatch_norm=norm,
        voltages=ev.V,
        settings=settings,
        history=history,
    )


# --------------------------------------------------------------------------
# reports


def report_rows(sol: PowerFlowSolution, network: NetworkModel) -> list[tuple]:
    """Rows ``(bus, V, theta_deg, P, Q, V_nl)``; generation negative, load positive."""
    V = sol.voltages
    rows = []
    dg_index = {b: k for k, b in enumerate(network.dg_buses)}
    om = sol.settings.omega_ref
    for b in range(network.n_bus):
        p = q = math.nan
        vnl = math.nan
        if b in network.loads:
            s = network.loads[b].power(abs(V[b]), om)
            p, q = s.real, s.imag
        if b in dg_index:
            k = dg_index[b]
            p = (0.0 if math.isnan(p) else p) - sol.P_G[k]
            q = (0.0 if math.isnan(q) else q) - sol.Q_G[k]
            vnl = sol.V_nl[k]
        rows.append((b + 1, abs(V[b]), math.degrees(np.angle(V[b])), p, q, vnl))
    return rows


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.10f}"


def report_csv(sol: PowerFlowSolution, network: NetworkModel, rows=None) -> str:
    rows = rows or report_rows(sol, network)
    out = ["bus,V,theta_deg,P,Q,V_nl"]
    out += [",".join([str(r[0])] + [_fmt(x) for x in r[1:]]) for r in rows]
    return "\n".join(out) + "\n"


def write_report(sol: PowerFlowSolution, network: NetworkModel, csv_path, text_path=None) -> None:
    rows = report_rows(sol, network)
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(report_csv(sol, network, rows))
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(format_report(sol, network, rows))


def format_report(sol: PowerFlowSolution, network: NetworkModel, rows=None) -> str:
    rows = rows or report_rows(sol, network)
    lines = [
        f"{'bus':>4} {'V (pu)':>9} {'theta (deg)':>12} {'P (pu)':>10} {'Q (pu)':>10} {'V_nl (pu)':>10}",
    ]
    for b, v, th, p, q, vnl in rows:
        cell = lambda x: f"{'---':>10}" if math.isnan(x) else f"{x:10.4f}"
        lines.append(f"{b:4d} {v:9.4f} {th:12.2f} {cell(p)} {cell(q)} {cell(vnl)}")
    onl = sol.omega_nl
    lines += [
        "",
        f"system frequency omega: {sol.settings.omega_ref:.4f} pu",
        f"no-load frequency omega_nl: {onl.mean():.6f} pu (spread {onl.max() - onl.min():.2e})",
        f"generation P/Q: {sol.P_G.sum():.6f} / {sol.Q_G.sum():.6f} pu",
        f"load P/Q: {sol.P_load:.6f} / {sol.Q_load:.6f} pu",
        f"loss P/Q: {sol.P_loss:.6f} / {sol.Q_loss:.6f} pu",
        f"iterations: {sol.iterations}, final |mismatch|_inf: {sol.final_mismatch_norm:.3e}",
    ]
    return "\n".join(lines) + "\n"
