"""Pinning-based distributed secondary control and its reduced error model.

The no-load set-points ``omega_nl`` and ``V_nl`` are integrator states: their
time derivatives are the consensus + pinning terms scaled by the control
gains. With that form the tracking errors obey
``d eps/dt = -G_c (L + c Psi) eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .cybergraph import CommGraph


@dataclass(frozen=True)
class ControlGains:
    C_v: float = 30.0
    C_omega: float = 30.0
    C_P: float = 30.0
    c_gv: float = 1.0
    c_gomega: float = 1.0
    omega_ref: float = 1.0
    V_ref: float = 1.0

    def __post_init__(self):
        for name in ("C_v", "C_omega", "C_P", "c_gv", "c_gomega"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def uniform(cls, C: float = 30.0, c_pin: float = 1.0, omega_ref: float = 1.0, V_ref: float = 1.0):
        return cls(C, C, C, c_pin, c_pin, omega_ref, V_ref)


def _adjacency(graph) -> np.ndarray:
    return graph.adjacency() if isinstance(graph, CommGraph) else np.asarray(graph, dtype=float)


def secondary_derivs(omega, V, P, graph, pins, gains: ControlGains, mp):
    """Rates of change of the DG no-load set-points.

    Returns ``(d omega_nl, d V_nl)``. ``P`` is the measured (filtered) active
    power and ``mp`` the droop slopes; ``graph`` may be a CommGraph or an
    adjacency matrix.
    """
    A = _adjacency(graph)
    omega = np.asarray(omega, dtype=float)
    V = np.asarray(V, dtype=float)
    psi = np.asarray(pins, dtype=float)
    share = np.asarray(mp, dtype=float) * np.asarray(P, dtype=float)

    # sum_j A_jk (x_j - x_k) = (A^T x)_k - deg_k x_k
    def consensus(x):
        return A.T @ x - A.sum(axis=0) * x

    dV = gains.C_v * (consensus(V) + psi * gains.c_gv * (gains.V_ref - V))
    dw = gains.C_omega * (consensus(omega) + psi * gains.c_gomega * (gains.omega_ref - omega))
    dw = dw + gains.C_P * consensus(share)
    return dw, dV


def reduced_error_derivs(eps, L, pins, G_c: float, c_pin: float) -> np.ndarray:
    """``d eps/dt = -G_c (L + c_pin Psi) eps``."""
    M = np.asarray(L, dtype=float) + c_pin * np.diag(np.asarray(pins, dtype=float))
    return -G_c * (M @ np.asarray(eps, dtype=float))


def integrate_reduced(eps0, L, pins, G_c: float, c_pin: float, t_eval, rtol: float = 1e-12, atol: float = 1e-14):
    """Integrate the reduced error model; returns an array of shape (len(t_eval), m)."""
    t_eval = np.asarray(t_eval, dtype=float)
    M = np.asarray(L, dtype=float) + c_pin * np.diag(np.asarray(pins, dtype=float))
    A = -G_c * M
    sol = solve_ivp(
        lambda t, e: A @ e,
        (0.0, float(t_eval[-1])),
        np.asarray(eps0, dtype=float),
        method="DOP853",
        t_eval=t_eval,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y.T


@dataclass(frozen=True)
class LyapunovReport:
    monotone: bool
    max_violation: float
    values: np.ndarray


def lyapunov_check(trajectory, tol: float = 1e-12) -> LyapunovReport:
    """Check that ``0.5 * eps^T eps`` never increases between samples."""
    eps = np.atleast_2d(np.asarray(trajectory, dtype=float))
    V = 0.5 * np.einsum("ij,ij->i", eps, eps)
    inc = np.diff(V)
    worst = float(inc.max()) if inc.size else 0.0
    return LyapunovReport(monotone=worst <= tol, max_violation=max(worst, 0.0), values=V)
