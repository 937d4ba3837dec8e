"""Physical layer of the islanded microgrid.

Buses, R-L lines and loads, inverter (DG) parameters, per-unit bases and the
bus admittance matrix. Everything crossing a module boundary is per-unit;
only the network file carries SI bases.

Bus and DG indices are 0-based in memory. Network files number buses from 1
so that they line up with the usual test-system drawings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class ModelError(ValueError):
    """Raised when a network model is structurally invalid."""

    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        msg = "; ".join(str(d) for d in diagnostics) or "invalid network model"
        super().__init__(msg)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.where}: {self.message}"


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    R: float
    L: float

    def impedance(self, omega: float) -> complex:
        return complex(self.R, omega * self.L)


@dataclass(frozen=True)
class LoadRL:
    """Series R-L load. ``L`` is the reactance at nominal frequency (p.u.)."""

    R: float
    L: float

    @classmethod
    def from_rated(cls, p: float, q: float) -> "LoadRL":
        """Impedance drawing ``p + jq`` at |V| = 1 p.u. and omega = 1 p.u."""
        s2 = p * p + q * q
        if s2 <= 0.0:
            raise ValueError("rated load power must be non-zero")
        return cls(R=p / s2, L=q / s2)

    def impedance(self, omega: float) -> complex:
        return complex(self.R, omega * self.L)

    def power(self, voltage: float = 1.0, omega: float = 1.0) -> complex:
        """Complex power drawn at bus voltage magnitude ``voltage``."""
        z = self.impedance(omega)
        return voltage * voltage / z.conjugate()

    def scaled(self, factor: float) -> "LoadRL":
        """Same load with its power demand multiplied by ``factor``."""
        if factor <= 0.0:
            raise ValueError("load scale factor must be positive")
        return LoadRL(R=self.R / factor, L=self.L / factor)


@dataclass(frozen=True)
class DgParams:
    """Inverter, LCL filter and inner-loop parameters of one DG (p.u.).

    ``Lf``, ``Lc`` are reactances and ``Cf`` a susceptance at nominal
    frequency. ``omega_c`` is in rad/s; the integral gains are per second.
    ``decouple`` switches the ``omega*L`` / ``omega*C`` cross-coupling
    compensation in the voltage and current controllers.
    """

    mp: float
    nq: float
    Lf: float = 0.0292
    rf: float = 0.0069
    Cf: float = 0.228
    Lc: float = 0.0076
    rc: float = 0.0021
    omega_c: float = 31.41
    Kpv: float = 0.726
    Kiv: float = 5660.0
    Kpc: float = 0.724
    Kic: float = 1103.0
    KF: float = 0.75
    decouple: bool = True


@dataclass(frozen=True)
class NetworkModel:
    n_bus: int
    dg_buses: tuple[int, ...]
    dgs: tuple[DgParams, ...]
    lines: tuple[Line, ...]
    loads: Mapping[int, LoadRL] = field(default_factory=dict, hash=False)
    reference_bus: int = 0
    virtual_resistance: float = 1000.0
    base_power: float = 10e3
    base_voltage: float = 381.0
    base_frequency: float = 2 * math.pi * 50

    @property
    def m(self) -> int:
        return len(self.dg_buses)

    @property
    def reference_dg(self) -> int:
        return self.dg_buses.index(self.reference_bus)

    @property
    def load_buses(self) -> tuple[int, ...]:
        return tuple(sorted(self.loads))

    @property
    def non_dg_buses(self) -> tuple[int, ...]:
        dg = set(self.dg_buses)
        return tuple(b for b in range(self.n_bus) if b not in dg)

    def mp(self) -> np.ndarray:
        return np.array([d.mp for d in self.dgs])

    def nq(self) -> np.ndarray:
        return np.array([d.nq for d in self.dgs])

    def with_loads(self, loads: Mapping[int, LoadRL]) -> "NetworkModel":
        return replace(self, loads=dict(loads))

    def scale_loads(self, buses: Iterable[int], factor: float) -> "NetworkModel":
        """Multiply the demand of ``buses`` by ``factor`` (relative to this model)."""
        loads = dict(self.loads)
        for b in buses:
            if b not in loads:
                raise KeyError(f"bus {b + 1} has no load")
            loads[b] = loads[b].scaled(factor)
        return replace(self, loads=loads)


def validate_model(network: NetworkModel) -> list[Diagnostic]:
    """Check every structural invariant; an empty list means the model is valid."""
    out: list[Diagnostic] = []
    n = network.n_bus
    if n < 1:
        out.append(Diagnostic("bus-count", "buses", f"bus count {n} < 1"))
    if len(network.dgs) != len(network.dg_buses):
        out.append(
            Diagnostic("dg-count", "dgs", f"{len(network.dgs)} parameter sets for {len(network.dg_buses)} DG buses")
        )
    seen: set[int] = set()
    for b in network.dg_buses:
        if not 0 <= b < n:
            out.append(Diagnostic("dg-bus-range", f"dg bus {b + 1}", "outside [1, N]"))
        if b in seen:
            out.append(Diagnostic("dg-duplicate", f"dg bus {b + 1}", "listed more than once"))
        seen.add(b)
    if network.reference_bus not in network.dg_buses:
        out.append(Diagnostic("reference", f"bus {network.reference_bus + 1}", "reference bus is not a DG bus"))
    for i, ln in enumerate(network.lines):
        where = f"line {i + 1} ({ln.from_bus + 1}-{ln.to_bus + 1})"
        if ln.from_bus == ln.to_bus:
            out.append(Diagnostic("line-self", where, "endpoints coincide"))
        if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
            out.append(Diagnostic("line-range", where, "endpoint outside [1, N]"))
        if not ln.R >= 0.0:
            out.append(Diagnostic("line-R", where, f"R_l = {ln.R} < 0"))
        if not ln.L > 0.0:
            out.append(Diagnostic("line-L", where, f"L_l = {ln.L} must be > 0"))
    for b, ld in network.loads.items():
        where = f"load at bus {b + 1}"
        if not 0 <= b < n:
            out.append(Diagnostic("load-range", where, "bus outside [1, N]"))
        if not ld.R > 0.0:
            out.append(Diagnostic("load-R", where, f"R_load = {ld.R} must be > 0"))
        if not ld.L > 0.0:
            out.append(Diagnostic("load-L", where, f"L_load = {ld.L} must be > 0"))
    for k, d in enumerate(network.dgs):
        where = f"dg {k + 1}"
        for name in ("mp", "nq", "Lf", "rf", "Cf", "Lc", "rc", "omega_c"):
            v = getattr(d, name)
            if not v > 0.0:
                out.append(Diagnostic(f"dg-{name}", where, f"{name} = {v} must be > 0"))
    if not network.virtual_resistance > 0.0:
        out.append(Diagnostic("virtual-resistance", "buses", "R_N must be > 0"))
    for name in ("base_power", "base_voltage", "base_frequency"):
        if not getattr(network, name) > 0.0:
            out.append(Diagnostic("base", "bases", f"{name} must be > 0"))
    if n >= 1 and not any(d.code in ("line-range",) for d in out):
        if _component_count(n, network.lines) > 1:
            out.append(Diagnostic("disconnected", "lines", "electrical graph is not connected"))
    return out


def check_model(network: NetworkModel) -> None:
    diags = validate_model(network)
    if diags:
        raise ModelError(diags)


def _component_count(n: int, lines: Iterable[Line]) -> int:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ln in lines:
        ra, rb = find(ln.from_bus), find(ln.to_bus)
        if ra != rb:
            parent[ra] = rb
    return len({find(a) for a in range(n)})


def build_admittance(network: NetworkModel, omega: float, shunt: bool = True) -> np.ndarray:
    """Bus admittance matrix at per-unit frequency ``omega``.

    Loads are not stamped; they enter the power flow as demand. The virtual
    resistance adds ``1/R_N`` to every diagonal entry unless ``R_N`` is
    infinite or ``shunt`` is False.
    """
    if not omega > 0.0:
        raise ValueError(f"omega must be positive, got {omega}")
    n = network.n_bus
    if _component_count(n, network.lines) > 1:
        raise ModelError([Diagnostic("disconnected", "lines", "electrical graph is not connected")])
    Y = np.zeros((n, n), dtype=complex)
    for ln in network.lines:
        y = 1.0 / ln.impedance(omega)
        a, b = ln.from_bus, ln.to_bus
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    rn = network.virtual_resistance
    if shunt and math.isfinite(rn):
        Y[np.diag_indices(n)] += 1.0 / rn
    return Y


def aggregate_load(network: NetworkModel) -> tuple[float, float]:
    """Total rated (P, Q) of all loads at nominal voltage and frequency."""
    s = sum((ld.power(1.0, 1.0) for ld in network.loads.values()), 0j)
    return s.real, s.imag


# --------------------------------------------------------------------------
# network file I/O


def _dg_from_row(row, common: dict, mp_scale: float) -> DgParams:
    bus, mp, nq = row[:3]
    params = dict(common)
    return DgParams(mp=float(mp) * mp_scale, nq=float(nq), **params)


def load_network(path: str | Path) -> NetworkModel:
    """Read a network description file (TOML with bases/buses/lines/loads/dgs)."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return network_from_dict(doc)


def network_from_dict(doc: dict) -> NetworkModel:
    bases = doc.get("bases", {})
    buses = doc["buses"]
    n = int(buses["count"])
    rn = buses.get("virtual_resistance", 1000.0)
    rn = math.inf if isinstance(rn, str) and rn.lower() in ("inf", "infinity") else float(rn)
    mp_scale = float(bases.get("mp_scale", 1.0))

    lines = tuple(Line(int(r[0]) - 1, int(r[1]) - 1, float(r[2]), float(r[3])) for r in doc["lines"]["rows"])

    loads: dict[int, LoadRL] = {}
    ld = doc.get("loads", {})
    for r in ld.get("rated", []):
        loads[int(r[0]) - 1] = LoadRL.from_rated(float(r[1]), float(r[2]))
    for r in ld.get("rl", []):
        loads[int(r[0]) - 1] = LoadRL(float(r[1]), float(r[2]))

    dg = doc["dgs"]
    common = {k: (bool(v) if k == "decouple" else float(v)) for k, v in dg.get("common", {}).items()}
    rows = dg["rows"]
    dg_buses = tuple(int(r[0]) - 1 for r in rows)
    dgs = tuple(_dg_from_row(r, common, mp_scale) for r in rows)

    return NetworkModel(
        n_bus=n,
        dg_buses=dg_buses,
        dgs=dgs,
        lines=lines,
        loads=loads,
        reference_bus=int(buses.get("reference", rows[0][0])) - 1,
        virtual_resistance=rn,
        base_power=float(bases.get("power", 10e3)),
        base_voltage=float(bases.get("voltage", 381.0)),
        base_frequency=float(bases.get("frequency", 2 * math.pi * 50)),
    )


def packaged_network(name: str) -> NetworkModel:
    """Load one of the bundled networks: ``"bus4"`` or ``"bus38"``."""
    return load_network(data_path(f"network_{name}.toml"))


def data_path(name: str) -> Path:
    return Path(__file__).resolve().parent / "data" / name
