"""Command-line front end: ``pinmg <command> [options]``.

Global options come before the command. ``--config FILE`` names a TOML file
whose ``[<command>]`` table supplies defaults for that command's options;
explicit flags win. ``--seed`` is the master seed from which every random
stream is derived (see :func:`pinmg.scenario.sub_seed`).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def _write(path: Path, text: str) -> None:
    from .scenario import _atomic_write

    _atomic_write(path, text)


def _graph(args, m_default: int = 10):
    from .cybergraph import read_graph, small_world
    from .scenario import _resolve, sub_seed

    if args.graph:
        return read_graph(_resolve(args.graph, None))
    return small_world(m_default, 4, 0.2, sub_seed(args.seed, "decide:graph"))


def cmd_powerflow(args) -> int:
    from .powerflow import PfSettings, format_report, report_csv, solve_power_flow
    from .scenario import load_network_ref, _resolve

    ref = args.network if args.network in ("bus4", "bus38") else _resolve(args.network, None)
    net = load_network_ref(ref)
    sol = solve_power_flow(net, PfSettings(tolerance=args.tolerance, max_iterations=args.max_iterations))
    text = format_report(sol, net)
    out = Path(args.out)
    _write(out / "powerflow.csv", report_csv(sol, net))
    _write(out / "powerflow.txt", text)
    print(text, end="")
    return 0


def cmd_simulate(args) -> int:
    from .scenario import load_scenario, run_scenario

    s = load_scenario(args.scenario)
    seed = args.seed if args.seed_given else None
    res = run_scenario(s, args.out, seed=seed)
    print(res.files["summary"].read_text(), end="")
    return 0


def cmd_decide(args) -> int:
    from .pindecide import DecisionReport, GaParams, PinningProblem, PinningResult, exhaustive_pinning, ga_pinning
    from .scenario import sub_seed

    g = _graph(args)
    prob = PinningProblem(g, args.G_c, args.c_pin, args.rho_star)
    seed = sub_seed(args.seed, "decide:ga")
    if args.method == "exhaustive":
        res = exhaustive_pinning(prob)
    elif args.method == "ga":
        res = ga_pinning(prob, GaParams(seed=seed))
    else:
        from .pinlearn import MlpModel, decide

        if not args.model:
            print("error: --model is required for --method learned", file=sys.stderr)
            return 2
        d = decide(MlpModel.load(args.model), prob, GaParams(seed=seed))
        res = PinningResult(d.pins, d.feasible, d.rate, f"learned/{d.source}", seed, d.wall_time)
    rep = DecisionReport.of(prob, res)
    _write(Path(args.out) / "decision.json", rep.to_text())
    print(rep.to_text(), end="")
    return 0 if res.feasible else 3


def _spec(args):
    from .pinlearn import DatasetSpec, DisruptionPolicy

    return DatasetSpec(
        m=args.m,
        mean_degree=args.mean_degree,
        rewire_prob=args.rewire_prob,
        policy=DisruptionPolicy(args.policy, args.max_removals),
        G_c=args.G_c,
        c_pin=args.c_pin,
        rho_star=args.rho_star,
    )


def cmd_gen_data(args) -> int:
    from .pinlearn import dataset_csv, gen_dataset
    from .scenario import sub_seed

    t0 = time.perf_counter()
    ds = gen_dataset(args.count, _spec(args), sub_seed(args.seed, "gen-data"), workers=args.workers)
    path = Path(args.out) / args.file
    _write(path, dataset_csv(ds))
    print(
        f"{len(ds.samples)} samples -> {path} "
        f"(skipped infeasible {ds.skipped_infeasible}, duplicates {ds.duplicates}, "
        f"{time.perf_counter() - t0:.1f} s)"
    )
    return 0


def cmd_train(args) -> int:
    from .pinlearn import TrainParams, read_dataset, train
    from .scenario import sub_seed

    X, Y = read_dataset(args.data)
    hidden = tuple(int(h) for h in str(args.hidden).split(",") if h)
    params = TrainParams(
        hidden=hidden,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        momentum=args.momentum,
        validation_split=args.validation_split,
        seed=sub_seed(args.seed, "train"),
    )
    model, rep = train(X, Y, params)
    out = Path(args.out)
    _write(out / args.model_file, model.to_text())
    _write(out / "train_report.csv", rep.to_csv())
    print(
        f"trained {model.layer_sizes} on {rep.n_train} samples ({rep.n_val} validation): "
        f"train loss {rep.train_loss[-1]:.4f}, validation loss {rep.val_loss[-1]:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    from .pindecide import PinningProblem
    from .pinlearn import MlpModel, decide, draw_sample, devectorize_laplacian
    from .scenario import sub_seed
    from .cybergraph import CommGraph

    model = MlpModel.load(args.model)
    spec = _spec(args)
    seed = sub_seed(args.seed, "eval")
    rows = ["index,feasible,source,cardinality,optimal_cardinality,rate,latency_s"]
    lat, sources, ok, n = [], {}, 0, 0
    i = 0
    while n < args.count:
        s = draw_sample(spec, seed, i)
        i += 1
        if s is None:
            continue
        L = devectorize_laplacian(s.features)
        edges = [(a, b) for a in range(spec.m) for b in range(a + 1, spec.m) if L[a, b] != 0]
        prob = PinningProblem(CommGraph.from_edges(spec.m, edges), spec.G_c, spec.c_pin, spec.rho_star)
        d = decide(model, prob)
        n += 1
        ok += d.feasible
        lat.append(d.wall_time)
        sources[d.source] = sources.get(d.source, 0) + 1
        rows.append(
            f"{s.index},{int(d.feasible)},{d.source},{len(d.pins)},{int(s.labels.sum())},{d.rate:.12g},{d.wall_time:.6e}"
        )
    _write(Path(args.out) / "eval.csv", "\n".join(rows) + "\n")
    share = {k: v / n for k, v in sorted(sources.items())}
    print(f"evaluated {n} feasible graphs: {ok} decisions feasible ({100 * ok / n:.1f} %)")
    print("sources: " + ", ".join(f"{k} {100 * v:.1f} %" for k, v in share.items()))
    print(f"median decide latency: {1e3 * float(np.median(lat)):.3f} ms")
    return 0 if ok == n else 3


def cmd_report(args) -> int:
    from .scenario import report

    print(report(args.run_dir), end="")
    return 0


def _data_opts(p):
    p.add_argument("--m", type=int, default=10, help="number of DGs")
    p.add_argument("--mean-degree", type=int, default=4)
    p.add_argument("--rewire-prob", type=float, default=0.2)
    p.add_argument("--policy", choices=("none", "connected", "any"), default="connected")
    p.add_argument("--max-removals", type=int, default=6)
    _problem_opts(p)


def _problem_opts(p):
    p.add_argument("--G-c", dest="G_c", type=float, default=30.0)
    p.add_argument("--c-pin", type=float, default=1.0)
    p.add_argument("--rho-star", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pinmg", description="Pinning-controlled inverter microgrid toolkit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--seed", type=int, default=None, help="master seed (default 0, or the scenario's)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--config", default=None, help="TOML file with per-command defaults")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("powerflow", help="solve the load flow of a network")
    p.add_argument("--network", default="bus38", help="bus4, bus38 or a network TOML file")
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iterations", type=int, default=50)
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("simulate", help="run a scenario")
    p.add_argument("scenario", help="scenario TOML (or a packaged name such as case1)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decide", help="choose a pinning set for a communication graph")
    p.add_argument("--graph", default=None, help="graph file; default a seeded small-world graph")
    p.add_argument("--method", choices=("exhaustive", "ga", "learned"), default="ga")
    p.add_argument("--model", default=None)
    _problem_opts(p)
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("gen-data", help="generate a training set")
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--file", default="dataset.csv")
    _data_opts(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the pin-prediction network")
    p.add_argument("--data", required=False, default=None)
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--validation-split", type=float, default=0.1)
    p.add_argument("--model-file", default="model.txt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="check learned decisions on held-out graphs")
    p.add_argument("--model", required=False, default=None)
    p.add_argument("--count", type=int, default=500)
    _data_opts(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = ap.parse_args(argv)
    if args.config:
        with open(args.config, "rb") as fh:
            conf = tomllib.load(fh)
        section = conf.get(args.command, {})
        sub = next(a for a in ap._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
        sp = sub.choices[args.command]
        defaults = {k.replace("-", "_"): v for k, v in section.items()}
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            ap.error(f"unknown option(s) in [{args.command}] of {args.config}: {', '.join(unknown)}")
        sp.set_defaults(**defaults)
        top = {k: v for k, v in conf.items() if not isinstance(v, dict)}
        ap.set_defaults(**{k.replace("-", "_"): v for k, v in top.items()})
        args = ap.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    return args


def main(argv: list[str] | None = None) -> int:
    from .netmodel import ModelError
    from .pindecide import ProblemTooLarge
    from .powerflow import PowerFlowError
    from .scenario import InfeasiblePinning, ScenarioError
    from .simulate import SimulationError

    ap = build_parser()
    args = _apply_config(ap, sys.argv[1:] if argv is None else list(argv))
    for need, cmd in (("data", "train"), ("model", "eval")):
        if args.command == cmd and not getattr(args, need):
            ap.error(f"{cmd} needs --{need}")
    try:
        return int(args.func(args))
    except (PowerFlowError, SimulationError, InfeasiblePinning, ScenarioError, ModelError, ProblemTooLarge) as e:
        print(f"pinmg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"pinmg {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
