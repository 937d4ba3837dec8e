"""Selects the RHS implementation at import time.

``compiled`` uses the Cython extension ``pinmg._rhs`` when it was built;
``numpy`` is the pure-Python path in :mod:`pinmg.dynamics`. The environment
variable ``PINMG_BACKEND`` (``compiled`` or ``numpy``) overrides the choice.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _rhs  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:  # extension not built
    _rhs = None
    HAVE_COMPILED = False


def default_backend() -> str:
    forced = os.environ.get("PINMG_BACKEND", "").strip().lower()
    if forced in ("numpy", "python"):
        return "numpy"
    if forced == "compiled":
        return "compiled"
    return "compiled" if HAVE_COMPILED else "numpy"


def compiled_kernel(d):
    """Bind the flat model arrays to the compiled RHS; returns ``f(x) -> dx``."""
    if _rhs is None:
        raise ImportError("pinmg._rhs is not built")
    dg_bus = np.ascontiguousarray(d.dg_bus, dtype=np.intp)
    dgp = np.ascontiguousarray(d.dgp, dtype=float)
    ends = np.ascontiguousarray(d.line_ends, dtype=np.intp).reshape(-1, 2)
    lpar = np.ascontiguousarray(d.line_par, dtype=float).reshape(-1, 2)
    lbus = np.ascontiguousarray(d.load_bus, dtype=np.intp)
    ldpar = np.ascontiguousarray(d.load_par, dtype=float).reshape(-1, 2)
    adj = np.ascontiguousarray(d.adjacency, dtype=float)
    pins = np.ascontiguousarray(d.pins, dtype=float)
    ctrl = np.ascontiguousarray(d.ctrl, dtype=float)
    work = np.zeros(2 * d.n_bus + 6 * len(dg_bus))
    n_bus, ref, rn, wb = int(d.n_bus), int(d.ref_dg), float(d.R_N), float(d.omega_b)

    def f(x):
        dx = np.empty_like(x)
        _rhs.rhs(x, dx, dg_bus, dgp, ends, lpar, lbus, ldpar, adj, pins, ctrl, n_bus, ref, rn, wb, work)
        return dx

    return f
