"""Command-line front end: abstraction export, synthesis runs, Monte Carlo
validation, plot/series export, and model validation.

Every command reads a JSON system config and writes CSV / JSON artifacts into
an output directory; identical configs and seeds reproduce identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import plots
from .abstraction import Partition, build_bmdp, export_partition_csv, load_system
from .automata import load_dra
from .geometry import Rect
from .models import bmdp_to_dict, complement_result, save_json, validate_bmdp
from .simulate import simulate_closed_loop
from .synth_continuous import ContinuousSynthesisConfig, synthesize_continuous
from .synth_finite import FiniteSynthesisConfig, synthesize_finite

FLOAT_FMT = "%.17g"


def _fmt(x) -> str:
    if isinstance(x, float):
        return FLOAT_FMT % x
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def _load_run_config(args):
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
    return cfg


def _initial_partition(system, grid_n):
    return Partition.regular(system.domain, grid_n)


def cmd_abstract(args) -> int:
    system = load_system(args.config)
    partition = _initial_partition(system, args.initial_grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, table = build_bmdp(partition, system)
    save_json(bmdp_to_dict(model), out / "bmdp.json")
    export_partition_csv(partition, out / "partition.csv")
    _write_csv(out / "modes.csv", ["mode_id"] + [f"u_{k}" for k in range(system.dim)],
               [(a, *table[a]) for a in sorted(table)])
    print(f"wrote abstraction with {model.n_states} states to {out}")
    return 0


def cmd_synthesize(args) -> int:
    system = load_system(args.config)
    dra = load_dra(args.dra)
    objective = args.objective
    if objective == "min":
        if not args.dra_complement:
            raise ValueError("minimization needs --dra-complement (the complement property's "
                             "automaton); the analysis runs on that product")
        dra = load_dra(args.dra_complement)
    partition = _initial_partition(system, args.initial_grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.pipeline == "finite":
        cfg = FiniteSynthesisConfig(system, dra, partition, eps_thr=args.eps_thr,
                                    score_frac=args.score_frac, max_iters=args.max_iters,
                                    eps_conv=args.eps_conv)
        res = synthesize_finite(cfg)
        policy_rows = list(res.policy_rows())
        _write_csv(out / "policy.csv",
                   ["cell_id", "dra_state", "mode_id", "p_min", "p_max", "epsilon"],
                   policy_rows)
        _write_csv(out / "modes.csv", ["mode_id"] + [f"u_{k}" for k in range(system.dim)],
                   [(a, *res.mode_table[a]) for a in sorted(res.mode_table)])
        save_json(res.winning.to_dict(), out / "components.json")
    else:
        cfg = ContinuousSynthesisConfig(system, dra, partition, eps_thr=args.eps_thr,
                                        score_frac=args.score_frac, max_iters=args.max_iters,
                                        eps_conv=args.eps_conv, n_min=args.n_min,
                                        n_init=args.n_init)
        res = synthesize_continuous(cfg)
        nd = res.prod.n_dra
        rows = []
        for p in sorted(res.policy_inputs):
            u = res.policy_inputs[p]
            rows.append((p // nd, p % nd, *u, float(res.interval.p_min[p]),
                         float(res.interval.p_max[p]), float(res.report.eps[p])))
        _write_csv(out / "policy.csv",
                   ["cell_id", "dra_state"] + [f"u_{k}" for k in range(system.dim)] +
                   ["p_min", "p_max", "epsilon"], rows)
        dim = system.dim
        _write_csv(out / "input_regions.csv",
                   ["state"] + [f"lo_{k}" for k in range(dim)] + [f"hi_{k}" for k in range(dim)],
                   list(res.region_rows()))

    _write_csv(out / "history.csv",
               ["iteration", "n_cells", "n_product_states", "eps_max", "mean_eps",
                "frac_above", "mean_actions", "mean_actions_flat", "wall_seconds"],
               [(r.iteration, r.n_cells, r.n_product_states, r.eps_max, r.mean_eps,
                 r.frac_above, r.mean_actions, r.mean_actions_flat, r.wall_seconds)
                for r in res.history])
    export_partition_csv(res.partition, out / "partition.csv")
    intervals = res.initial_intervals
    if objective == "min":
        flipped = complement_result(
            type(res.interval)(np.array([a for a, _ in intervals]),
                               np.array([b for _, b in intervals])))
        intervals = list(zip(flipped.p_min.tolist(), flipped.p_max.tolist()))
    _write_csv(out / "intervals.csv", ["cell_id", "p_min", "p_max"],
               [(j, a, b) for j, (a, b) in enumerate(intervals)])
    summary = {
        "pipeline": args.pipeline,
        "objective": objective,
        "eps_thr": args.eps_thr,
        "eps_max": res.report.eps_max,
        "iterations": len(res.history),
        "n_cells": len(res.partition),
        "capped": bool(res.capped),
        "seed": args.seed,
    }
    save_json(summary, out / "summary.json")
    flag = " (iteration cap reached)" if res.capped else ""
    print(f"eps_max={res.report.eps_max:.6f} after {len(res.history)} iterations{flag}; "
          f"artifacts in {out}")
    return 0


def _load_policy_dir(run_dir: Path, system):
    header, rows = _read_csv(run_dir / "policy.csv")
    policy = {}
    pmin = {}
    if "mode_id" in header:
        mode_hdr, mode_rows = _read_csv(run_dir / "modes.csv")
        table = {int(r[0]): np.array([float(x) for x in r[1:]]) for r in mode_rows}
        for row in rows:
            cell, s, mode = int(row[0]), int(row[1]), int(row[2])
            policy[(cell, s)] = table[mode]
            pmin[(cell, s)] = float(row[3])
    else:
        dim = system.dim
        for row in rows:
            cell, s = int(row[0]), int(row[1])
            policy[(cell, s)] = np.array([float(x) for x in row[2:2 + dim]])
            pmin[(cell, s)] = float(row[2 + dim])
    return policy, pmin


def _load_partition_dir(run_dir: Path, system) -> Partition:
    header, rows = _read_csv(run_dir / "partition.csv")
    dim = (len(header) - 1) // 2
    cells = [Rect.of([float(x) for x in row[1:1 + dim]],
                     [float(x) for x in row[1 + dim:1 + 2 * dim]]) for row in rows]
    return Partition(cells, system.domain)


def cmd_simulate(args) -> int:
    system = load_system(args.config)
    dra = load_dra(args.dra)
    run_dir = Path(args.run)
    partition = _load_partition_dir(run_dir, system)
    policy, _ = _load_policy_dir(run_dir, system)
    cells = None
    if args.cells:
        rng = np.random.Generator(np.random.PCG64(args.seed))
        cells = sorted(int(c) for c in rng.choice(len(partition), size=min(args.cells, len(partition)),
                                                  replace=False))
    outcomes = simulate_closed_loop(system, policy, dra, partition, args.horizon,
                                    args.runs, args.seed, cells=cells)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "simulation.csv",
               ["cell_id", "runs", "horizon", "violations", "frequency", "ci_lo", "ci_hi"],
               [(o.cell_id, o.runs, o.horizon, o.violations, o.frequency, o.ci_lo, o.ci_hi)
                for o in outcomes])
    worst = min(outcomes, key=lambda o: o.frequency)
    print(f"simulated {len(outcomes)} cells; lowest no-violation frequency "
          f"{worst.frequency:.4f} at cell {worst.cell_id}; results in {out}")
    return 0


def cmd_export_plots(args) -> int:
    system = load_system(args.config)
    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    partition = _load_partition_dir(run_dir, system)
    _, rows = _read_csv(run_dir / "history.csv")
    from .synth_finite import IterationRecord

    history = [IterationRecord(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]),
                               float(r[5]), float(r[6]), float(r[7]), float(r[8]))
               for r in rows]
    plots.precision_curves(history, out / "precision.png")
    plots.action_count_curve(history, out / "actions.png")
    plots.cumulative_time_curve(history, out / "time.png")
    _, int_rows = _read_csv(run_dir / "intervals.csv")
    p_min = [float(r[1]) for r in int_rows]
    p_max = [float(r[2]) for r in int_rows]
    verdict = ["satisfied" if lo > args.threshold else
               "violated" if hi < args.threshold else "undecided"
               for lo, hi in zip(p_min, p_max)]
    _write_csv(out / "classification.csv",
               ["cell_id", "p_min", "p_max", "verdict"],
               list(zip(range(len(p_min)), p_min, p_max, verdict)))
    written = ["precision.png", "actions.png", "time.png", "classification.csv"]
    if partition.domain.dim == 2:
        plots.partition_map(partition.cells, p_min, out / "satisfaction.png",
                            title="lower satisfaction bound per initial cell")
        plots.classification_map(partition.cells, p_min, p_max, args.threshold,
                                 out / "classification.png")
        written += ["satisfaction.png", "classification.png"]
        regions_path = run_dir / "input_regions.csv"
        if regions_path.exists() and args.state is not None:
            _, reg_rows = _read_csv(regions_path)
            dim = partition.domain.dim
            boxes = [Rect.of([float(x) for x in r[1:1 + dim]],
                             [float(x) for x in r[1 + dim:1 + 2 * dim]])
                     for r in reg_rows if int(r[0]) == args.state]
            if boxes and system.input_box is not None:
                plots.input_region_plot(boxes, system.input_box,
                                        out / f"input_region_{args.state}.png",
                                        title=f"retained inputs, product state {args.state}")
                written.append(f"input_region_{args.state}.png")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_validate_model(args) -> int:
    system = load_system(args.config)
    partition = _initial_partition(system, args.initial_grid)
    partition.validate()
    model, _ = build_bmdp(partition, system, validate=False)
    report = validate_bmdp(model)
    if not report.ok():
        print(str(report), file=sys.stderr)
        return 1
    print(f"abstraction over {len(partition)} cells x {len(system.modes)} modes is valid; "
          "reach boxes passed sampled containment")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochsynth",
                                     description="switching-policy synthesis for stochastic "
                                                 "systems against omega-regular objectives")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="system config JSON")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--initial-grid", type=int, default=16,
                       help="cells per axis of the initial partition")

    p_abs = sub.add_parser("abstract", help="build and export the interval abstraction")
    common(p_abs)
    p_abs.set_defaults(func=cmd_abstract)

    p_syn = sub.add_parser("synthesize", help="run the refinement synthesis loop")
    common(p_syn)
    p_syn.add_argument("--dra", required=True, help="automaton file for the property")
    p_syn.add_argument("--dra-complement", help="automaton of the complement property "
                                                "(required for --objective min)")
    p_syn.add_argument("--objective", choices=["max", "min"], default="max")
    p_syn.add_argument("--pipeline", choices=["finite", "continuous"], default="finite")
    p_syn.add_argument("--eps-thr", type=float, default=0.3)
    p_syn.add_argument("--score-frac", type=float, default=None)
    p_syn.add_argument("--max-iters", type=int, default=6)
    p_syn.add_argument("--eps-conv", type=float, default=None)
    p_syn.add_argument("--n-min", type=int, default=3)
    p_syn.add_argument("--n-init", type=int, default=12)
    p_syn.set_defaults(func=cmd_synthesize)

    p_sim = sub.add_parser("simulate", help="Monte Carlo validation of a synthesized policy")
    common(p_sim)
    p_sim.add_argument("--dra", required=True)
    p_sim.add_argument("--run", required=True, help="directory with policy.csv/partition.csv")
    p_sim.add_argument("--horizon", type=int, default=100)
    p_sim.add_argument("--runs", type=int, default=10000)
    p_sim.add_argument("--cells", type=int, default=0,
                       help="sample this many initial cells (0 = all)")
    p_sim.set_defaults(func=cmd_simulate, out=None)

    p_plot = sub.add_parser("export-plots", help="render figures and series for a run")
    common(p_plot)
    p_plot.add_argument("--run", required=True)
    p_plot.add_argument("--threshold", type=float, default=0.8)
    p_plot.add_argument("--state", type=int, default=None,
                        help="product state whose input region to draw")
    p_plot.set_defaults(func=cmd_export_plots, out=None)

    p_val = sub.add_parser("validate-model", help="validate abstraction invariants")
    common(p_val)
    p_val.set_defaults(func=cmd_validate_model)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "score_frac", None) is None and args.command == "synthesize":
        args.score_frac = 0.05 if args.pipeline == "finite" else 0.01
    if getattr(args, "eps_conv", None) is None and args.command == "synthesize":
        args.eps_conv = 1e-6 if args.pipeline == "finite" else 1e-2
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - turn anything into a machine-readable record
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
