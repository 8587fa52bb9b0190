"""``vmbpo solve | train | check``: run a config document and write CSV artifacts.

Exit codes: 0 success, 2 configuration error, 3 numerical abort or
non-convergence, 4 check failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import agent, checks
from .config import check_run, load_document, seeds_from, solve_run, train_run
from .errors import ConfigError, ConvergenceError, NotTransientError, NumericalAbort, SupportError
from .solvers import em_solve, m_step_exact

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4
ITERATION_COLUMNS = ("iteration", "residual", "elbo", "log_likelihood")


def _fmt(x):
    # repr of a float is the shortest string that round-trips, so reruns are byte-identical
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


class CsvSink:
    """Header on open, one flushed row per call."""

    def __init__(self, path: Path, columns):
        self.columns = tuple(columns)
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(self.columns)
        self.fh.flush()

    def __call__(self, row: dict):
        self.writer.writerow([_fmt(row[c]) for c in self.columns])
        self.fh.flush()

    def close(self):
        self.fh.close()


def write_csv(path: Path, columns, rows):
    sink = CsvSink(path, columns)
    try:
        for r in rows:
            sink(r)
    finally:
        sink.close()


def cmd_solve(doc, base, out: Path, seeds) -> int:
    run = solve_run(doc, base)
    mdp = run.mdp
    for seed in seeds:
        records = em_solve(mdp, run.eta, run.baseline(seed), run.em_iterations, run.lam, run.solver, run.e_step)
        write_csv(out / f"iterations_seed{seed}.csv", ITERATION_COLUMNS,
                  [dict(iteration=r.iteration, residual=r.solution.residual, elbo=r.elbo,
                        log_likelihood=r.log_likelihood) for r in records])
        last = records[-1]
        improved = m_step_exact(mdp, last.solution, last.baseline, run.lam)
        write_csv(out / f"policy_seed{seed}.csv", ("state", "action", "baseline", "variational", "improved"),
                  [dict(state=mdp.states[x], action=mdp.actions[a], baseline=last.baseline[x, a],
                        variational=last.solution.q_c_star[x, a], improved=improved[x, a])
                   for x in mdp.nonterminals for a in range(mdp.n_actions)])
        write_csv(out / f"values_seed{seed}.csv", ("state", "value"),
                  [dict(state=mdp.states[x], value=last.solution.v_pi[x]) for x in range(mdp.n_states)])
        print(f"seed {seed}: {len(records)} EM iterations, V({mdp.states[int(np.argmax(mdp.initial))]}) = "
              f"{float(mdp.initial @ last.solution.v_pi):.9f}")
    return EXIT_OK


def cmd_train(doc, base, out: Path, seeds) -> int:
    run = train_run(doc, base)
    finals = []
    for seed in seeds:
        sink = CsvSink(out / f"metrics_seed{seed}.csv", agent.METRIC_COLUMNS)
        try:
            # zero steps means no run at all: the file carries only the header
            if run.cfg.total_steps > 0:
                result = agent.train(run.env, run.cfg, seed, sink)
                finals.append(result.final_return(run.cfg.smoothing_window))
        finally:
            sink.close()
        if finals:
            print(f"seed {seed}: final return {finals[-1]:.4f}")
    rows = [dict(seed=s, final_return=f) for s, f in zip(seeds, finals)]
    if finals:
        rows += [dict(seed="mean", final_return=float(np.mean(finals))),
                 dict(seed="sd", final_return=float(np.std(finals)))]
        print(f"final return {np.mean(finals):.4f} +- {np.std(finals):.4f} over {len(finals)} seeds")
    write_csv(out / "summary.csv", ("seed", "final_return"), rows)
    return EXIT_OK


def cmd_check(doc, base, out: Path | None, seeds) -> int:
    c = check_run(doc)
    results = []
    for seed in seeds:
        for r in checks.run_checks(c["names"], seed, c["fault"]):
            print(f"[seed {seed}] {r.line()}")
            results.append(dict(seed=seed, name=r.name, passed=r.passed, worst=r.worst, tolerance=r.tolerance))
    if out is not None:
        write_csv(out / "checks.csv", ("seed", "name", "passed", "worst", "tolerance"), results)
    failed = sorted({r["name"] for r in results if not r["passed"]})
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmbpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run document (optional for check)")
        p.add_argument("--out", help="output directory (created if missing)")
        p.add_argument("--seed", help="comma-separated seeds; overrides run.seeds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is None:
            if args.command != "check":
                raise ConfigError("--config: required for " + args.command)
            doc, base = {}, Path.cwd()
        else:
            doc, base = load_document(args.config)
        seeds = seeds_from(doc, args.seed)
        out = None
        if args.out is not None or args.command != "check":
            out = Path(args.out or "out")
            out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](doc, base, out, seeds)
    except (ConfigError, NotTransientError, SupportError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConvergenceError as err:
        print(f"no convergence after {err.iterations} sweeps (residual {err.residual:.3e}): {err}",
              file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
