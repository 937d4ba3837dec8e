"""Stiff time integration with timed events, and numerical linearization.

The integrator is scipy's variable-order BDF. Each event splits the run into
segments: the solver stops exactly at the event time, the caller mutates the
model, and a fresh solve starts from the carried-over state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp


class SimulationError(RuntimeError):
    pass


class StepUnderflow(SimulationError):
    def __init__(self, t: float, state_norm: float, message: str = ""):
        super().__init__(f"step size underflow at t={t:.9g} s (|x|_inf={state_norm:.6g}) {message}".rstrip())
        self.t = t
        self.state_norm = state_norm


class NonFiniteState(SimulationError):
    def __init__(self, t: float):
        super().__init__(f"non-finite state at t={t:.9g} s")
        self.t = t


class NotAnEquilibrium(ValueError):
    def __init__(self, residual: float, worst: int):
        super().__init__(f"state is not an equilibrium: |f(x)|_inf={residual:.3e} at index {worst}")
        self.residual = residual
        self.worst = worst


@dataclass(frozen=True)
class SimSettings:
    t_end: float
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    max_step: float = math.inf
    report_step: float = 1e-3
    event_times: tuple[float, ...] = ()

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if not self.report_step > 0:
            raise ValueError("report_step must be positive")
        ev = tuple(float(t) for t in self.event_times)
        if list(ev) != sorted(ev):
            raise ValueError("event times must be sorted")
        if ev and (ev[0] < 0 or ev[-1] > self.t_end):
            raise ValueError("event times must lie in [0, t_end]")
        object.__setattr__(self, "event_times", ev)

    def grid(self) -> np.ndarray:
        """Uniform reporting instants plus event instants, sorted and unique."""
        n = int(math.floor(self.t_end / self.report_step + 1e-9))
        base = np.arange(n + 1) * self.report_step
        pts = np.concatenate([base, [self.t_end], self.event_times])
        return np.unique(np.round(pts, 12))


@dataclass
class Segment:
    """What the integrator needs between two events."""

    f: Callable[[float, np.ndarray], np.ndarray]
    jac_sparsity: np.ndarray | None = None


@dataclass
class TimeSeries:
    t: np.ndarray
    x: np.ndarray  # (len(t), n)
    n_rhs: int = 0
    segments: list[tuple[float, float]] = field(default_factory=list)

    def final(self) -> np.ndarray:
        return self.x[-1]


def _check_finite(t: float, y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)):
        raise NonFiniteState(t)


def integrate(
    segment: Segment,
    x0: np.ndarray,
    settings: SimSettings,
    on_event: Callable[[int, float, np.ndarray], tuple[Segment, np.ndarray]] | None = None,
) -> TimeSeries:
    """Integrate from t=0 to ``settings.t_end``.

    At each of ``settings.event_times`` the solver stops and
    ``on_event(index, t, x)`` returns the segment and state to restart with.
    The reported sample at an event instant is the pre-event state.
    """
    x = np.array(x0, dtype=float)
    _check_finite(0.0, x)
    grid = settings.grid()
    stops = [t for t in settings.event_times if 0.0 < t < settings.t_end]
    bounds = [0.0, *stops, settings.t_end]
    ts: list[float] = [0.0]
    xs: list[np.ndarray] = [x.copy()]
    n_rhs = 0
    seg = segment
    spans = []
    pending = [i for i, t in enumerate(settings.event_times) if t == 0.0]
    for i in pending:
        if on_event is None:
            break
        seg, x = on_event(i, 0.0, x)
    next_event = len(pending)

    for t0, t1 in zip(bounds[:-1], bounds[1:]):
        if t1 > t0:
            sel = grid[(grid > t0 + 1e-12) & (grid <= t1 + 1e-12)]
            sel[-1] = t1 if len(sel) else t1
            kw = {}
            if seg.jac_sparsity is not None:
                kw["jac_sparsity"] = seg.jac_sparsity
            sol = solve_ivp(
                seg.f,
                (t0, t1),
                x,
                method="BDF",
                t_eval=sel if len(sel) else [t1],
                rtol=settings.rel_tol,
                atol=settings.abs_tol,
                max_step=settings.max_step,
                **kw,
            )
            n_rhs += sol.nfev
            if sol.status != 0:
                t_fail = float(sol.t[-1]) if sol.t.size else t0
                y_fail = sol.y[:, -1] if sol.y.size else x
                if not np.all(np.isfinite(y_fail)):
                    raise NonFiniteState(t_fail)
                raise StepUnderflow(t_fail, float(np.max(np.abs(y_fail))), sol.message)
            _check_finite(t1, sol.y)
            ts.extend(sol.t.tolist())
            xs.extend(sol.y.T)
            x = sol.y[:, -1].copy()
            spans.append((t0, t1))
        # events at t1 (several may share an instant)
        while next_event < len(settings.event_times) and settings.event_times[next_event] <= t1:
            if on_event is not None and settings.event_times[next_event] < settings.t_end:
                seg, x = on_event(next_event, t1, x)
                _check_finite(t1, x)
            next_event += 1

    return TimeSeries(np.array(ts), np.array(xs), n_rhs, spans)


# --------------------------------------------------------------------------
# linearization


@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    eigenvalues: np.ndarray  # sorted by real part, descending
    residual: float
    kept: np.ndarray  # indices of the states kept in A


def fd_state_matrix(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; the perturbation scales with ``1 + |x_j|``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    f0 = np.asarray(f(x))
    A = np.empty((f0.size, n))
    for j in range(n):
        h = step * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        A[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return A


def linearize(
    f: Callable[[float, np.ndarray], np.ndarray],
    x_eq: np.ndarray,
    step: float = 1e-6,
    drop: Sequence[int] = (),
    tol: float = 1e-5,
) -> Linearization:
    """State matrix and spectrum at an equilibrium.

    ``drop`` removes states from A (rows and columns), e.g. the reference
    DG's frame angle, whose derivative is identically zero.
    """
    x_eq = np.asarray(x_eq, dtype=float)
    r = np.abs(np.asarray(f(0.0, x_eq)))
    if r.size and r.max() > tol:
        raise NotAnEquilibrium(float(r.max()), int(np.argmax(r)))
    kept = np.array([i for i in range(x_eq.size) if i not in set(drop)], dtype=int)

    def g(z):
        x = x_eq.copy()
        x[kept] = z
        return np.asarray(f(0.0, x))[kept]

    A = fd_state_matrix(g, x_eq[kept], step)
    ev = np.linalg.eigvals(A)
    ev = ev[np.lexsort((ev.imag, -ev.real))]
    return Linearization(A, ev, float(r.max()) if r.size else 0.0, kept)
