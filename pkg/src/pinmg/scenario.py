"""Scenario files, closed-loop runs with timed events, and run summaries.

A scenario is a TOML file::

    seed = 1
    [network]   file = "bus38"            # packaged name or path
    [cyber]     file = "cyber_ga.txt"
    [gains]     C = 30.0, c_pin = 1.0     # or C_v / C_omega / C_P / c_gv / c_gomega;
                                          # rho_star may sit here or in [pinning]
    [pinning]   mode = "ga", rho_star = 10.0, pins = [...], model = "model.txt"
    [sim]       t_end = 6.5, rel_tol = 1e-6, abs_tol = 1e-8, report_step = 1e-3
    [[events]]  t = 0.5, kind = "load_scale", buses = [2, 3], factor = 0.5

Buses, DGs and edges are 1-based in files and 0-based in memory. Load
factors are relative to the rated loads of the network file, so a later
``factor = 1.0`` restores the original demand.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _backend
from .control import ControlGains
from .cybergraph import CommGraph, read_graph, remove_edges
from .dynamics import RhsData, RhsModel, extract_steady_state, outputs
from .netmodel import NetworkModel, data_path, load_network, packaged_network
from .pindecide import DecisionReport, GaParams, PinningProblem, PinningResult, ga_pinning, verify
from .powerflow import PfSettings, format_report, report_csv, solve_power_flow
from .simulate import Segment, SimSettings, integrate

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EVENT_KINDS = ("load_scale", "cut_edges", "repin")
PIN_MODES = ("fixed", "ga", "learned")


class ScenarioError(ValueError):
    pass


class InfeasiblePinning(RuntimeError):
    pass


def sub_seed(master: int, label: str) -> int:
    """Derive an independent seed for one consumer of randomness.

    ``SeedSequence([master, crc32(label)])`` keeps streams apart across
    labels and stable across runs and platforms.
    """
    ss = np.random.SeedSequence([int(master), zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class ScenarioEvent:
    t: float
    kind: str
    buses: tuple[int, ...] = ()
    factor: float = 1.0
    edges: tuple[tuple[int, int], ...] = ()
    pins: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Scenario:
    network: str
    cyber: str
    gains: ControlGains = ControlGains()
    pin_mode: str = "fixed"
    pins: tuple[int, ...] = (0,)
    rho_star: float = 0.0
    model: str | None = None
    ga: GaParams = GaParams()
    events: tuple[ScenarioEvent, ...] = ()
    t_end: float = 1.0
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    report_step: float = 1e-3
    max_step: float = math.inf
    seed: int = 0
    backend: str | None = None
    name: str = "scenario"

    @property
    def G_c(self) -> float:
        return self.gains.C_omega

    def sim_settings(self) -> SimSettings:
        return SimSettings(
            t_end=self.t_end,
            rel_tol=self.rel_tol,
            abs_tol=self.abs_tol,
            max_step=self.max_step,
            report_step=self.report_step,
            event_times=tuple(e.t for e in self.events),
        )


def _resolve(name: str, base: Path | None) -> str:
    p = Path(name)
    if base is not None and not p.is_absolute() and (base / p).exists():
        return str(base / p)
    if p.exists():
        return str(p)
    for cand in (data_path(name), data_path(name + ".toml")):
        if cand.exists():
            return str(cand)
    raise ScenarioError(f"cannot find {name!r}")


def load_network_ref(ref: str) -> NetworkModel:
    if ref in ("bus4", "bus38"):
        return packaged_network(ref)
    return load_network(ref)


def scenario_from_dict(doc: dict, base: Path | None = None) -> Scenario:
    try:
        net = doc["network"]["file"]
        cyber = _resolve(doc["cyber"]["file"], base)
    except KeyError as e:
        raise ScenarioError(f"missing scenario entry {e}") from None
    if net not in ("bus4", "bus38"):
        net = _resolve(net, base)
    g = dict(doc.get("gains", {}))
    C, c = g.pop("C", None), g.pop("c_pin", None)
    rho_gains = g.pop("rho_star", None)
    kw = {}
    if C is not None:
        kw.update(C_v=C, C_omega=C, C_P=C)
    if c is not None:
        kw.update(c_gv=c, c_gomega=c)
    kw.update(g)
    try:
        gains = ControlGains(**kw)
    except TypeError as e:
        raise ScenarioError(f"bad [gains]: {e}") from None

    pin = doc.get("pinning", {})
    mode = pin.get("mode", "fixed")
    if mode not in PIN_MODES:
        raise ScenarioError(f"pinning mode must be one of {PIN_MODES}")
    model = pin.get("model")
    if mode == "learned":
        if model is None:
            raise ScenarioError("learned pinning needs a model file")
        model = _resolve(model, base)
    ga = GaParams(**pin.get("ga", {}))

    events = []
    for i, e in enumerate(doc.get("events", [])):
        kind = e.get("kind")
        if kind not in EVENT_KINDS:
            raise ScenarioError(f"event {i + 1}: kind must be one of {EVENT_KINDS}")
        events.append(
            ScenarioEvent(
                t=float(e["t"]),
                kind=kind,
                buses=tuple(int(b) - 1 for b in e.get("buses", [])),
                factor=float(e.get("factor", 1.0)),
                edges=tuple((int(u) - 1, int(v) - 1) for u, v in e.get("edges", [])),
                pins=tuple(int(p) - 1 for p in e["pins"]) if "pins" in e else None,
            )
        )
    ts = [e.t for e in events]
    if ts != sorted(ts):
        raise ScenarioError("events must be sorted by time")
    sim = doc.get("sim", {})
    return Scenario(
        network=net,
        cyber=cyber,
        gains=gains,
        pin_mode=mode,
        pins=tuple(int(p) - 1 for p in pin.get("pins", [1])),
        rho_star=float(pin.get("rho_star", rho_gains if rho_gains is not None else 0.0)),
        model=model,
        ga=ga,
        events=tuple(events),
        t_end=float(sim.get("t_end", 1.0)),
        rel_tol=float(sim.get("rel_tol", 1e-6)),
        abs_tol=float(sim.get("abs_tol", 1e-8)),
        report_step=float(sim.get("report_step", 1e-3)),
        max_step=float(sim.get("max_step", math.inf)),
        seed=int(doc.get("seed", 0)),
        backend=sim.get("backend"),
        name=str(doc.get("name", "scenario")),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(_resolve(str(path), None))
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return scenario_from_dict(doc, path.parent)


# --------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    out_dir: Path
    files: dict[str, Path]
    t: np.ndarray
    x: np.ndarray
    columns: list[str]
    table: np.ndarray  # (len(t), 5 m) reporting columns
    decisions: list[DecisionReport]
    event_log: list[tuple[float, str, str]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return self.table[:, self.columns.index(name)]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v: float) -> str:
    return f"{v:.12g}"


def _pins_text(pins) -> str:
    return " ".join(str(p + 1) for p in pins)


class _Decider:
    """Pinning decisions for one run; each call gets its own derived seed."""

    def __init__(self, s: Scenario):
        self.s = s
        self.count = 0
        self.reports: list[DecisionReport] = []
        self._model = None
        if s.pin_mode == "learned":
            from .pinlearn import MlpModel

            self._model = MlpModel.load(s.model)

    def problem(self, graph: CommGraph) -> PinningProblem:
        return PinningProblem(graph, self.s.G_c, self.s.gains.c_gomega, self.s.rho_star)

    def decide(self, graph: CommGraph, mode: str) -> PinningResult:
        prob = self.problem(graph)
        seed = sub_seed(self.s.seed, f"decision:{self.count}")
        self.count += 1
        if mode == "fixed":
            mask = np.zeros(graph.m, dtype=bool)
            mask[list(self.s.pins)] = True
            v = verify(prob, mask)
            res = PinningResult(tuple(self.s.pins), v.feasible, v.rate, "fixed")
        elif mode == "ga":
            res = ga_pinning(prob, replace(self.s.ga, seed=seed))
        else:
            from .pinlearn import decide

            d = decide(self._model, prob, replace(self.s.ga, seed=seed))
            res = PinningResult(d.pins, d.feasible, d.rate, f"learned/{d.source}", seed, d.wall_time)
        if mode != "fixed" and not res.feasible:
            raise InfeasiblePinning(
                f"no pinning set reaches rate {self.s.rho_star:g} (best {res.rate:.6g} with all DGs)"
            )
        self.reports.append(DecisionReport.of(prob, res))
        return res


def run_scenario(s: Scenario, out_dir: str | Path, seed: int | None = None) -> RunResult:
    """Load flow, steady state, then integration through the scenario's events."""
    if seed is not None:
        s = replace(s, seed=int(seed))
    out = Path(out_dir)
    base = load_network_ref(s.network)
    graph = read_graph(s.cyber)
    if graph.m != base.m:
        raise ScenarioError(f"cyber graph has {graph.m} nodes for {base.m} DGs")
    for e in s.events:
        for b in e.buses:
            if b not in base.loads:
                raise ScenarioError(f"event at t={e.t}: bus {b + 1} has no load")

    pf = solve_power_flow(base, PfSettings(omega_ref=s.gains.omega_ref, V_ref=s.gains.V_ref))
    x0 = extract_steady_state(pf, base)

    decider = _Decider(s)
    first = decider.decide(graph, s.pin_mode)
    state = {"graph": graph, "pins": first.mask(base.m), "factors": {}, "net": base}
    backend = s.backend or _backend.default_backend()
    log: list[tuple[float, str, str]] = [
        (0.0, "start", f"pins={_pins_text(first.pins)};rate={_num(first.rate)};method={first.method}")
    ]

    def segment() -> Segment:
        model = RhsModel.build(state["net"], state["graph"], state["pins"], s.gains, backend)
        return Segment(model, model.sparsity())

    def on_event(i: int, t: float, x: np.ndarray):
        e = s.events[i]
        if e.kind == "load_scale":
            for b in e.buses:
                state["factors"][b] = e.factor
            loads = {b: ld.scaled(state["factors"].get(b, 1.0)) for b, ld in base.loads.items()}
            state["net"] = base.with_loads(loads)
            log.append((t, "load_scale", f"buses={_pins_text(e.buses)};factor={_num(e.factor)}"))
        elif e.kind == "cut_edges":
            before = verify(decider.problem(state["graph"]), state["pins"]).rate
            state["graph"] = remove_edges(state["graph"], e.edges)
            after = verify(decider.problem(state["graph"]), state["pins"]).rate
            edges = " ".join(f"{u + 1}-{v + 1}" for u, v in e.edges)
            log.append((t, "cut_edges", f"edges={edges};rate_before={_num(before)};rate_after={_num(after)}"))
            if after < s.rho_star and s.pin_mode in ("ga", "learned"):
                _repin(t, s.pin_mode)
        else:
            if e.pins is not None:
                old = np.flatnonzero(state["pins"])
                state["pins"] = np.zeros(base.m, dtype=bool)
                state["pins"][list(e.pins)] = True
                rate = verify(decider.problem(state["graph"]), state["pins"]).rate
                log.append(
                    (t, "repin", f"pins_before={_pins_text(old)};pins_after={_pins_text(e.pins)};rate={_num(rate)}")
                )
            else:
                _repin(t, "ga" if s.pin_mode == "fixed" else s.pin_mode)
        return segment(), x

    def _repin(t: float, mode: str):
        old = np.flatnonzero(state["pins"])
        res = decider.decide(state["graph"], mode)
        state["pins"] = res.mask(base.m)
        log.append(
            (
                t,
                "repin",
                f"pins_before={_pins_text(old)};pins_after={_pins_text(res.pins)};"
                f"rate={_num(res.rate)};method={res.method}",
            )
        )

    ts = integrate(segment(), x0, s.sim_settings(), on_event)

    # reporting quantities depend only on DG parameters, not on loads or graph
    d = RhsData.build(base, graph, np.zeros(base.m), s.gains)
    cols = [f"dg{k + 1}.{q}" for k in range(base.m) for q in ("omega", "V", "P", "Q", "mpP")]
    table = np.empty((len(ts.t), 5 * base.m))
    for i, x in enumerate(ts.x):
        o = outputs(x, d)
        table[i] = np.stack([o.omega, o.V_bus, o.P, o.Q, o.mpP], axis=1).reshape(-1)

    buf = io.StringIO()
    buf.write(",".join(["t"] + cols) + "\n")
    for t, row in zip(ts.t, table):
        buf.write(",".join([f"{t:.6f}"] + [_num(v) for v in row]) + "\n")
    ev = io.StringIO()
    w = csv.writer(ev, lineterminator="\n")
    w.writerow(["t", "kind", "payload"])
    for t, kind, payload in log:
        w.writerow([f"{t:.6f}", kind, payload])

    files = {
        "powerflow_csv": out / "powerflow.csv",
        "powerflow_txt": out / "powerflow.txt",
        "timeseries": out / "timeseries.csv",
        "events": out / "events.csv",
    }
    _atomic_write(files["powerflow_csv"], report_csv(pf, base))
    _atomic_write(files["powerflow_txt"], format_report(pf, base))
    _atomic_write(files["timeseries"], buf.getvalue())
    _atomic_write(files["events"], ev.getvalue())
    for i, rep in enumerate(decider.reports):
        p = out / f"decision_{i:02d}.json"
        _atomic_write(p, rep.to_text())
        files[f"decision_{i:02d}"] = p
    summary = report(out)
    files["summary"] = out / "summary.txt"
    _atomic_write(files["summary"], summary)
    return RunResult(out, files, ts.t, ts.x, cols, table, decider.reports, log)


# --------------------------------------------------------------------------
# summaries


def _read_table(path: Path):
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln]).reshape(-1, len(head))
    return head, data


def _payload(text: str) -> dict[str, str]:
    return dict(kv.split("=", 1) for kv in text.split(";") if "=" in kv)


def report(out_dir: str | Path, omega_band: float = 1e-4) -> str:
    """Plain-text summary of a finished run directory."""
    out = Path(out_dir)
    need = [out / "timeseries.csv", out / "events.csv"]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        raise FileNotFoundError("missing artifact(s): " + ", ".join(missing))
    head, data = _read_table(out / "timeseries.csv")
    t = data[:, 0]
    idx = {h: i for i, h in enumerate(head)}
    m = sum(1 for h in head if h.endswith(".omega"))
    om = data[:, [idx[f"dg{k + 1}.omega"] for k in range(m)]]
    V = data[:, [idx[f"dg{k + 1}.V"] for k in range(m)]]
    mpP = data[:, [idx[f"dg{k + 1}.mpP"] for k in range(m)]]
    with open(out / "events.csv", newline="") as fh:
        events = [(float(r["t"]), r["kind"], r["payload"]) for r in csv.DictReader(fh)]

    lines = [f"run: {out.name}", f"samples: {len(t)}, t_end = {t[-1]:.3f} s", ""]
    lines.append(f"max |omega - 1|: {np.abs(om - 1).max():.3e} pu")
    lines.append(f"max |V - 1| at DG buses: {np.abs(V - 1).max():.3e} pu")
    lines.append(f"final max |omega - 1|: {np.abs(om[-1] - 1).max():.3e} pu")
    lines.append(f"final max |V - 1|: {np.abs(V[-1] - 1).max():.3e} pu")
    spread = mpP[-1].max() - mpP[-1].min()
    mean = mpP[-1].mean()
    rel = spread / abs(mean) if mean else math.inf
    lines.append(f"final mpP spread: {spread:.3e} ({100 * rel:.4f} % of mean {mean:.4e})")
    lines.append("")

    # settling: last sample in each inter-event window outside the band
    marks = sorted({e[0] for e in events if e[1] != "start" and e[0] > 0} | {0.0})
    dev = np.abs(om - 1).max(axis=1)
    lines.append(f"settling (max |omega - 1| <= {omega_band:g}):")
    for a, b in zip(marks, marks[1:] + [t[-1] + 1]):
        sel = (t > a) & (t < b)
        if not sel.any():
            continue
        out_band = np.flatnonzero(dev[sel] > omega_band)
        if not out_band.size:
            lines.append(f"  from t={a:.3f} s: within band throughout")
        elif out_band[-1] == sel.sum() - 1:
            lines.append(f"  from t={a:.3f} s: not settled before next event")
        else:
            ts_ = t[sel][out_band[-1] + 1]
            lines.append(f"  from t={a:.3f} s: settled after {ts_ - a:.3f} s")
    lines.append("")

    cyber = [e for e in events if e[1] == "cut_edges"]
    if not cyber:
        lines.append("no cyber events")
    for t_, kind, payload in events:
        p = _payload(payload)
        if kind == "start":
            lines.append(f"t={t_:.3f} s initial pins {{{p.get('pins', '')}}} rate {p.get('rate')}")
        elif kind == "cut_edges":
            lines.append(
                f"t={t_:.3f} s cut {p.get('edges')}: rate {p.get('rate_before')} -> {p.get('rate_after')}"
            )
        elif kind == "repin":
            lines.append(
                f"t={t_:.3f} s repin {{{p.get('pins_before')}}} -> {{{p.get('pins_after')}}} rate {p.get('rate')}"
            )
        elif kind == "load_scale":
            lines.append(f"t={t_:.3f} s load x{p.get('factor')} at buses {p.get('buses')}")
    return "\n".join(lines) + "\n"
