"""Compare the numpy and compiled right-hand-side kernels.

    python benchmarks/bench_rhs.py [--repeat 2000] [--integrate 0.2]

For each bundled network: per-call time of both backends at a perturbed
steady state, their largest relative disagreement, and optionally the wall
time of a short closed-loop integration with each backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from pinmg import _backend
from pinmg.control import ControlGains
from pinmg.cybergraph import CommGraph, ring_lattice
from pinmg.dynamics import RhsModel, StateLayout, extract_steady_state
from pinmg.netmodel import packaged_network
from pinmg.powerflow import solve_power_flow
from pinmg.simulate import Segment, SimSettings, integrate


def _case(name: str):
    net = packaged_network(name)
    x = extract_steady_state(solve_power_flow(net), net)
    g = CommGraph.from_edges(2, [(0, 1)]) if net.m == 2 else ring_lattice(net.m, 4)
    pins = np.zeros(net.m, dtype=bool)
    pins[0] = True
    return net, x, g, pins


def per_call(f, x, repeat: int) -> float:
    f(0.0, x)
    t0 = time.perf_counter()
    for _ in range(repeat):
        f(0.0, x)
    return (time.perf_counter() - t0) / repeat


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--integrate", type=float, default=0.0, help="also integrate this many seconds")
    args = ap.parse_args(argv)
    if not _backend.HAVE_COMPILED:
        print("compiled kernel not built; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':>6} {'states':>6} {'numpy us':>10} {'compiled us':>12} {'speed-up':>9} {'max rel diff':>13}")
    for name in ("bus4", "bus38"):
        net, x0, g, pins = _case(name)
        x = x0 * (1 + 1e-3 * rng.standard_normal(x0.size))
        fn = RhsModel.build(net, g, pins, ControlGains(), "numpy")
        fc = RhsModel.build(net, g, pins, ControlGains(), "compiled")
        tn = per_call(fn, x, max(args.repeat // 10, 10))
        tc = per_call(fc, x, args.repeat)
        a, b = fn(0.0, x), fc(0.0, x)
        rel = float(np.max(np.abs(a - b)) / np.max(np.abs(a)))
        n = StateLayout.of(net).size
        print(f"{name:>6} {n:6d} {1e6 * tn:10.1f} {1e6 * tc:12.2f} {tn / tc:9.1f} {rel:13.2e}")
        if args.integrate > 0:
            settings = SimSettings(t_end=args.integrate)
            for model in (fn, fc):
                t0 = time.perf_counter()
                ts = integrate(Segment(model, model.sparsity()), x, settings)
                dt = time.perf_counter() - t0
                print(f"{'':>6} integrate {args.integrate:g} s with {model.backend:>8}: {dt:7.2f} s, {ts.n_rhs} RHS calls")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
