"""Command-line runner: ``spardl {allreduce,verify-complexity,train,bsag-trace}``.

Options can also come from a flat ``key=value`` file given with ``--config``
(one pair per line, ``#`` starts a comment, keys spelled like the long flags
without dashes, e.g. ``P=6`` or ``residual=pres``). Flags on the command line
win over the file. ``SPARDL_SEED`` is used when no seed is given.

Every subcommand writes CSV to ``--out`` or stdout and exits non-zero when an
internal check fails (reduce-scatter ownership, cross-worker consistency,
residual conservation, or a cost check in ``verify-complexity``).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import contextmanager

import numpy as np

from .collectives import is_power_of_two, topka_baseline
from .errors import ConfigError, SparDLError
from .fabric import Fabric
from .pipeline import (ClusterConfig, conservation_error, expected_cost, spardl_all_reduce,
                       verify_consistency)
from .sag import stationary_overlap_trace
from .trainer import SYNCHRONIZERS, SyntheticTask, TrainConfig, loss_curves_csv, train

REPORT_COLUMNS = ["P", "N", "k", "d", "sag", "residual", "timing", "seed", "max_rounds", "max_scalars",
                  "predicted_rounds", "predicted_scalars_low", "predicted_scalars_high", "consistent",
                  "conservation_error", "cost_ok"]


def read_config(path: str) -> dict[str, str]:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _int_list(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        if "-" in part.strip("-"):
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def _seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(os.environ.get("SPARDL_SEED", 0))


@contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _cluster_flags(p: argparse.ArgumentParser):
    p.add_argument("--P", type=int, help="number of workers")
    p.add_argument("--N", type=int, help="gradient dimension (default 10*k)")
    p.add_argument("--k", type=int, help="total selected gradients (default 100*P)")
    p.add_argument("--density", type=float, help="k as a fraction of N (used when --k is absent)")
    p.add_argument("--d", type=int, help="number of teams (default 1)")
    p.add_argument("--sag", choices=["none", "rsag", "bsag"], help="team synchronization")
    p.add_argument("--residual", choices=["gres", "pres", "lres"], help="residual collection scheme")
    p.add_argument("--timing", choices=["optimized", "naive"], help="reduce-scatter selection timing")


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--seed", type=int, help="RNG seed (fallback: $SPARDL_SEED, then 0)")
    p.add_argument("--out", help="CSV destination (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spardl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    parser._subcommands = sub.choices

    p = sub.add_parser("allreduce", help="one sparse all-reduce on seeded random gradients")
    _common_flags(p)
    _cluster_flags(p)

    p = sub.add_parser("verify-complexity", help="measured ledger vs closed-form costs")
    _common_flags(p)
    p.add_argument("--P", default="2-9", help="worker counts, e.g. 2-9 or 4,8,16")
    p.add_argument("--d", default="1", help="team counts to try for each P")
    p.add_argument("--sag", choices=["auto", "rsag", "bsag"], default="auto",
                   help="SAG variant for d>1 (auto: rsag for power-of-two d, else bsag)")
    p.add_argument("--k-per-worker", type=int, default=100, help="k = this * P")
    p.add_argument("--no-topka", action="store_true", help="skip the all-gather baseline rows")

    p = sub.add_parser("train", help="synchronous SGD on a synthetic regression task")
    _common_flags(p)
    p.add_argument("--compare", default="gres", help=f"comma list from {','.join(SYNCHRONIZERS)}")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    p.add_argument("--P", type=int, default=4)
    p.add_argument("--N", type=int, default=2000)
    p.add_argument("--samples", type=int, default=256, help="samples per worker")
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--sag", choices=["none", "rsag", "bsag"], default="none")
    p.add_argument("--timing", choices=["optimized", "naive"], default="optimized")

    p = sub.add_parser("bsag-trace", help="B-SAG controller on a stationary-overlap workload")
    _common_flags(p)
    p.add_argument("--P", type=int, default=6)
    p.add_argument("--k", type=int, default=600)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--iterations", type=int, default=100)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]):
    """Install ``--config`` values as the subcommand's defaults, so flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return
    sub = parser._subcommands[command]
    dests = {a.dest for a in sub._actions}
    values = read_config(known.config)
    for key in values:
        if key not in dests or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {command}")
    # argparse applies each option's type to string defaults
    sub.set_defaults(**values)


def _cluster_config(args) -> ClusterConfig:
    P = int(args.P or 4)
    N = int(args.N) if args.N else None
    if args.k:
        k = int(args.k)
    elif args.density:
        if N is None:
            raise ConfigError("--density needs --N")
        k = int(round(float(args.density) * N))
    else:
        k = 100 * P
    N = N or 10 * k
    d = int(args.d or 1)
    sag = args.sag or ("none" if d == 1 else "rsag" if is_power_of_two(d) else "bsag")
    return ClusterConfig(P, N, k, d, sag, args.residual or "gres", args.timing or "optimized", _seed(args))


def cmd_allreduce(args) -> int:
    cfg = _cluster_config(args)
    rng = np.random.default_rng(cfg.seed)
    grads = [rng.standard_normal(cfg.N) for _ in range(cfg.P)]
    out = spardl_all_reduce(grads, cfg)
    consistent = verify_consistency(out.results)
    err = conservation_error(out.inputs, out.global_gradient, out.residuals)
    pred = expected_cost(cfg.P, cfg.k, cfg.d, cfg.sag)
    cost_ok = pred.admits(out.ledger.max_rounds, out.ledger.max_scalars_received)
    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(REPORT_COLUMNS)
        row = cfg.as_row()
        w.writerow([row["P"], row["N"], row["k"], row["d"], row["sag"], row["residual"], row["timing"],
                    row["seed"], out.ledger.max_rounds, out.ledger.max_scalars_received, pred.rounds,
                    pred.scalars_low, pred.scalars_high, consistent, f"{err:.3g}", cost_ok])
    if cfg.residual == "gres" and err > 1e-9:
        print(f"spardl: conservation error {err:.3g}", file=sys.stderr)
        return 1
    return 0


def verify_rows(ps, ds, sag="auto", k_per_worker=100, seed=0, topka=True):
    """One row per valid (P, d) cell, plus an all-gather baseline row per P."""
    rows = []
    rng = np.random.default_rng(seed)
    for P in ps:
        k = k_per_worker * P
        N = 10 * k
        grads = [rng.standard_normal(N) for _ in range(P)]
        for d in ds:
            if P % d:
                continue
            mode = "none" if d == 1 else sag if sag != "auto" else ("rsag" if is_power_of_two(d) else "bsag")
            if mode == "rsag" and not is_power_of_two(d):
                continue
            out = spardl_all_reduce(grads, ClusterConfig(P, N, k, d, mode, seed=seed))
            pred = expected_cost(P, k, d, mode)
            r, s = out.ledger.max_rounds, out.ledger.max_scalars_received
            rows.append([f"spardl-{mode}", P, d, k, N, r, s, pred.rounds, pred.scalars_low,
                         pred.scalars_high, pred.admits(r, s)])
        if topka:
            fabric = Fabric(P)
            topka_baseline(fabric, grads, k)
            pred = expected_cost(P, k, mode="topka")
            r, s = fabric.ledger.max_rounds, fabric.ledger.max_scalars
            rows.append(["topka", P, 1, k, N, r, s, pred.rounds, pred.scalars_low, pred.scalars_high,
                         pred.admits(r, s)])
    return rows


def cmd_verify_complexity(args) -> int:
    rows = verify_rows(_int_list(args.P), _int_list(args.d), args.sag, int(args.k_per_worker), _seed(args),
                       not args.no_topka)
    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(["algorithm", "P", "d", "k", "N", "measured_rounds", "measured_scalars", "predicted_rounds",
                    "predicted_scalars_low", "predicted_scalars_high", "pass"])
        w.writerows(rows)
    return 0 if all(r[-1] for r in rows) else 1


def cmd_train(args) -> int:
    names = [s.strip() for s in str(args.compare).split(",") if s.strip()]
    for name in names:
        if name not in SYNCHRONIZERS:
            raise ConfigError(f"unknown synchronizer {name!r}")
    base = _seed(args)
    results = []
    for seed in range(base, base + int(args.seeds)):
        task = SyntheticTask.generate(seed, N=int(args.N), P=int(args.P), samples_per_worker=int(args.samples))
        for name in names:
            cfg = TrainConfig(iterations=int(args.iterations), lr=float(args.lr), density=float(args.density),
                              synchronizer=name, d=int(args.d), sag=args.sag, timing=args.timing)
            results.append(train(task, cfg))
    with _output(args.out) as fh:
        loss_curves_csv(results, fh)
    return 0


def cmd_bsag_trace(args) -> int:
    P, k, d = int(args.P), int(args.k), int(args.d)
    if d < 2 or P % d or k % P:
        raise ConfigError("bsag-trace needs d >= 2, d dividing P, and P dividing k")
    rows = stationary_overlap_trace(k, P, d, int(args.iterations), _seed(args))
    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(["iteration", "h", "step", "flag", "N_t", "L"])
        for r in rows:
            w.writerow([r.iteration, repr(r.h), repr(r.step), r.flag, r.n_t, r.L])
    return 0


COMMANDS = {
    "allreduce": cmd_allreduce,
    "verify-complexity": cmd_verify_complexity,
    "train": cmd_train,
    "bsag-trace": cmd_bsag_trace,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.error(str(exc))
    except SparDLError as exc:
        print(f"spardl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
