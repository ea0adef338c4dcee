"""Command-line entry point: ``leqg {solve,check,simulate,reproduce,verify,train}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 saddle-condition violation (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from leqg import conditions, oracle, pg, simulate, solver
from leqg.model import ModelError, builtin, load_config, validate

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CONDITIONS = 0, 2, 3, 4

log = logging.getLogger("leqg")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    samples: int | None = None
    runs: int | None = None
    outputs: dict = field(default_factory=dict)  # path -> sha256
    wall_clock: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _load_model(path):
    if path is None:
        raise UsageError("--config is required")
    if not os.path.exists(path):
        try:
            return validate(builtin(path))
        except KeyError:
            raise UsageError(f"config {path!r} not found (and not a built-in instance)") from None
    return validate(load_config(Path(path).read_text()))


class Writer:
    """Writes output files and records their hashes in the manifest."""

    def __init__(self, out, manifest):
        self.out = Path(out)
        self.manifest = manifest

    def __call__(self, name, text):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        data = text.encode()
        path.write_bytes(data)
        self.manifest.outputs[str(path)] = hashlib.sha256(data).hexdigest()
        return path

    def finish(self, t0):
        self.manifest.wall_clock = round(time.perf_counter() - t0, 6)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(self.manifest.to_json())


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- commands -------------------------------------------------------------------------

def cmd_solve(args, write):
    model = _load_model(args.config)
    sol = solver.solve(model)
    report = conditions.check_full_horizon(sol)
    if args.format == "json":
        write("solution.json", solver.solution_json(sol))
        write("conditions.json", conditions.report_json(report))
    else:
        write("solution.csv", solver.solution_csv(sol))
        write("conditions.csv", conditions.report_csv(report))
    print(f"V_0(x0) = {sol.value[0](model.x0):.6f}  [{sol.status}]")
    return EXIT_OK if report.ok else EXIT_CONDITIONS


def cmd_check(args, write):
    model = _load_model(args.config)
    report = conditions.check_full_horizon(solver.solve(model))
    text = conditions.report_json(report) if args.format == "json" else conditions.report_csv(report)
    if args.out:
        write("conditions." + args.format, text)
    sys.stdout.write(text)
    return EXIT_OK if report.ok else EXIT_CONDITIONS


def _summary_csv(s: simulate.BatchSummary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x_mean", "x_var", "u_mean", "u_var"])
    T = len(s.u_mean)
    for t in range(T + 1):
        row = [t, repr(float(s.x_mean[t, 0])), repr(float(s.x_var[t, 0]))]
        row += [repr(float(s.u_mean[t, 0])), repr(float(s.u_var[t, 0]))] if t < T else ["", ""]
        w.writerow(row)
    return buf.getvalue()


def cmd_simulate(args, write):
    if args.runs is not None and args.runs < 1:
        raise UsageError("--runs must be at least 1")
    model = _load_model(args.config)
    sol = solver.solve(model)
    runs = args.runs or 1
    batch = simulate.run_batch(model, sol, args.measure, runs, args.seed)
    ref = simulate.run_trajectory(model, sol, "reference", args.seed)
    shifted = simulate.run_trajectory(model, sol, "shifted", args.seed)
    if model.is_scalar:
        write("trajectory.csv", simulate.table3_csv(simulate.table3_rows(sol, ref, shifted)))
        write("summary.csv", _summary_csv(batch))
    write("summary.json", _dump({"measure": args.measure, "runs": runs, "seed": args.seed,
                                 "theta_G_mean": batch.theta_G_mean,
                                 "x_mean": batch.x_mean.tolist(), "x_var": batch.x_var.tolist()}))
    print(f"{runs} run(s) under {args.measure}: mean theta*G_T = {batch.theta_G_mean:.6f}")
    return EXIT_OK


def _published_table3():
    text = resources.files("leqg.data").joinpath("table3.csv").read_text()
    return list(csv.DictReader(io.StringIO(text)))


def compare_deterministic(rows, published, decimals=4):
    """Names of (t, column) cells whose rounded value differs from the reference table."""
    bad = []
    for got, ref in zip(rows, published):
        for col in simulate.DETERMINISTIC_COLUMNS:
            if ref[col] == "":
                continue
            if f"{got[col]:.{decimals}f}" != f"{float(ref[col]):.{decimals}f}":
                bad.append((got["t"], col))
    if len(rows) != len(published):
        bad.append(("rows", len(rows)))
    return bad


def cmd_reproduce(args, write):
    model = _load_model(args.config or "table2")
    sol = solver.solve(model)
    seed = args.seed
    ref = simulate.run_trajectory(model, sol, "reference", seed)
    shifted = simulate.run_trajectory(model, sol, "shifted", seed)
    rows = simulate.table3_rows(sol, ref, shifted)
    write("table3.csv", simulate.table3_csv(rows, decimals=4))
    bad = compare_deterministic(rows, _published_table3())
    verdict = "PASS" if not bad else "FAIL"
    digest = f"deterministic columns match to 4 decimals: {verdict}"
    if bad:
        digest += f" ({len(bad)} mismatches, first {bad[0]})"
    write("digest.txt", digest + "\n")
    print(digest)
    return EXIT_OK if not bad else EXIT_NUMERICAL


def cmd_verify(args, write):
    model = _load_model(args.config)
    records = oracle.run_suite(model, seed=args.seed)
    write("verify.json", _dump(records))
    for r in records:
        print(f"{r['check']:<28} {'PASS' if r['pass'] else 'FAIL'}  max deviation {r['max_deviation']:.3e}")
    return EXIT_OK if all(r["pass"] for r in records) else EXIT_NUMERICAL


def cmd_train(args, write):
    model = _load_model(args.config)
    cfg = pg.TrainConfig(seed=args.seed)
    if args.episodes is not None:
        cfg.episodes = args.episodes
    if args.step is not None:
        cfg.delta0 = args.step
    if args.samples is not None:
        cfg.rollouts = args.samples
    cfg.mode = args.mode
    res = pg.train(model, cfg)
    write("history.jsonl", res.history_jsonl())
    write("policy.json", _dump({k: np.asarray(v).tolist() for k, v in zip("DdEeFf", res.K.blocks())}))
    last = res.history[-1]
    print(f"episode {last.episode}: C = {last.C_estimate:.6f}, gain gap = {last.gain_gap:.3e}, "
          f"|eta params| = {last.eta_norm:.3e}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "check": cmd_check, "simulate": cmd_simulate,
            "reproduce": cmd_reproduce, "verify": cmd_verify, "train": cmd_train}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file, or the name of a built-in instance (table2)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    parser = argparse.ArgumentParser(prog="leqg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="backward recursion and condition report")
    sub.add_parser("check", parents=[common], help="saddle-condition report")
    p = sub.add_parser("simulate", parents=[common], help="simulate trajectories")
    p.add_argument("--runs", type=int)
    p.add_argument("--samples", type=int, help="unused; accepted for uniformity")
    p.add_argument("--measure", choices=simulate.MEASURES, default="reference")
    sub.add_parser("reproduce", parents=[common], help="rebuild the reference table for the built-in instance")
    sub.add_parser("verify", parents=[common], help="run the brute-force oracle suite")
    p = sub.add_parser("train", parents=[common], help="natural policy gradient training")
    p.add_argument("--episodes", type=int)
    p.add_argument("--step", type=float, help="initial step size delta_0")
    p.add_argument("--samples", type=int, help="rollouts per episode")
    p.add_argument("--mode", choices=("exact", "zeroth-order"), default="exact")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) < 0:
        parser.error("--seed must be non-negative")
    manifest = RunManifest(command=args.command, config=args.config, seed=args.seed,
                           samples=getattr(args, "samples", None), runs=getattr(args, "runs", None))
    out = args.out or (None if args.command == "check" else ".")
    write = Writer(out or ".", manifest)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, write)
    except UsageError as exc:
        print(f"leqg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, KeyError) as exc:
        print(f"leqg: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (solver.NumericalError, np.linalg.LinAlgError, oracle.NoConvergence, oracle.GridTooCoarse,
            pg.Diverged) as exc:
        print(f"leqg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except simulate.ConditionsUnsatisfiable as exc:
        print(f"leqg: conditions violated: {exc}", file=sys.stderr)
        return EXIT_CONDITIONS
    if manifest.outputs:
        write.finish(t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
