"""Command-line front end: ``spectra {run,compare,oracle,generate,verify}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .approximations import NAMED_KINDS, ApproximationError
from .channel import (DSL_PRESET, Channel, ScenarioError, SynthesisParams, generate_synthetic,
                      load_scenario, mw_to_dbm, save_scenario)
from .driver import ConfigError, RunConfig, compare_counts, escape_channel, oracle_targets, run
from .oracle import (TIGHTNESS_PAIRS, Grid, check_conditions, exhaustive_per_user, instance_batch,
                     pair_gap)

VERIFY_KINDS = NAMED_KINDS + ("iasb2c",)


class CliError(RuntimeError):
    pass


def _pair(text, cast, n, name):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != n:
        raise CliError(f"{name} expects {n} comma separated values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise CliError(f"bad {name} value {text!r}") from exc


def threads() -> int:
    raw = os.environ.get("SPECTRA_THREADS", "1")
    try:
        val = int(raw)
    except ValueError as exc:
        raise CliError(f"SPECTRA_THREADS must be an integer, got {raw!r}") from exc
    return max(1, val)


def fmt(x) -> str:
    return repr(float(x))


def dbm_text(mw) -> str:
    """dBm with full precision; exact zero power is written as ``-inf``."""
    return "-inf" if mw <= 0 else repr(float(mw_to_dbm(mw)))


# --------------------------------------------------------------------------
# scenarios

def synth_params(args, seed=None) -> SynthesisParams:
    N, K, s0 = _pair(args.synth, int, 3, "--synth")
    kw = {}
    if args.paper_defaults:
        kw.update(mask_dbm=DSL_PRESET["mask_dbm"], budget_dbm=DSL_PRESET["budget_dbm"])
    if args.budget_dbm is not None:
        kw["budget_dbm"] = args.budget_dbm
    if args.coupling_db is not None:
        kw["coupling_db"] = _pair(args.coupling_db, float, 2, "--coupling-db")
    if args.seed is not None:
        s0 = args.seed
    return SynthesisParams(num_users=N, num_tones=K, seed=s0 if seed is None else seed, **kw)


def decouple(ch: Channel) -> Channel:
    return Channel(np.zeros_like(ch.gains), ch.noise, ch.masks, ch.budgets, ch.weights,
                   dict(ch.metadata, decoupled=True))


def scenarios(args) -> list:
    """Scenario list for the command; ``--batch`` expands ``--synth`` over consecutive seeds."""
    if args.scenario:
        chans = [load_scenario(args.scenario)]
    elif args.escape:
        chans = [escape_channel()]
    elif args.synth:
        p = synth_params(args)
        chans = [generate_synthetic(replace(p, seed=p.seed + i)) for i in range(args.batch)]
    else:
        raise CliError("one scenario source is required: --scenario, --synth or --escape")
    if args.decoupled:
        chans = [decouple(c) for c in chans]
    return chans


def methods(args) -> list:
    names = [m.strip() for m in args.method.split(",") if m.strip()]
    if not names:
        raise CliError("--method needs at least one name")
    return names


def config(args, method: str, mode: str = None) -> RunConfig:
    return RunConfig(method=method, alloc=args.alloc, q=args.q, t=args.t, mode=mode or args.mode,
                     fixed_sweeps=args.outer, outer_tol=args.tol, init=args.init)


# --------------------------------------------------------------------------
# writers

def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_spectra(path: Path, powers):
    K, N = powers.shape
    write_csv(path, ["tone"] + [f"user{n + 1}_dbm" for n in range(N)],
              [[k] + [dbm_text(powers[k, n]) for n in range(N)] for k in range(K)])


def read_spectra(path) -> np.ndarray:
    """Inverse of the spectra writer, back to mW."""
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    dbm = np.array([[float(v) for v in r[1:]] for r in rows])
    return np.where(np.isneginf(dbm), 0.0, 10.0 ** (dbm / 10.0))


def write_run(out: Path, ch: Channel, rep, method: str):
    out.mkdir(parents=True, exist_ok=True)
    write_spectra(out / "spectra.csv", rep.powers)
    write_csv(out / "rates.csv", ["user", "weight", "rate_bps", "weighted_rate_bps"],
              [[n + 1, fmt(ch.weights[n]), fmt(rep.rates[n]), fmt(ch.weights[n] * rep.rates[n])]
               for n in range(ch.num_users)])
    write_csv(out / "trace.csv", ["sweep", "user", "inner", "objective", "accepted"],
              [[sw, n + 1 if n >= 0 else 0, inner, fmt(obj), int(acc)]
               for sw, n, inner, obj, acc in rep.trace])
    doc = rep.to_dict()
    doc["wall_clock_s"] = None  # keeps the report a deterministic function of the inputs
    doc.update(method=method, weighted_rate_bps=float(np.dot(ch.weights, rep.rates)),
               scenario=ch.metadata)
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# --------------------------------------------------------------------------
# commands

def cmd_run(args) -> int:
    chans = scenarios(args)
    if len(chans) != 1:
        raise CliError("run takes a single scenario (drop --batch)")
    ch = chans[0]
    names = methods(args)
    out = Path(args.out)
    for m in names:
        rep = run(ch, config(args, m))
        dest = out if len(names) == 1 else out / m
        write_run(dest, ch, rep, m)
        print(f"{m}: objective {rep.objective:.10g}, weighted rate {np.dot(ch.weights, rep.rates):.6g} bit/s, "
              f"sweeps {rep.sweeps}, converged {rep.converged}")
        for flag in rep.flags:
            print(f"  note: {flag}")
    return 0


def _compare_one(job):
    ch, names, modes, base, step_db = job
    targets = oracle_targets(ch, grid=Grid(step_db=step_db))
    res, common = compare_counts(ch, names, modes, targets, base)
    return {key: (r.counts[common], r.fp_counts[common]) for key, r in res.items()}


def cmd_compare(args) -> int:
    chans = scenarios(args)
    names = methods(args)
    modes = ("closed", "fixedpoint") if args.mode == "both" else (args.mode,)
    base = config(args, names[0], modes[0])
    jobs = [(ch, names, modes, base, args.grid_dbm) for ch in chans]
    workers = min(threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_compare_one, jobs))
    else:
        parts = [_compare_one(j) for j in jobs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cdf_rows, summary = [], []
    for m in names:
        for mode in modes:
            counts = np.concatenate([p[(m, mode)][0] for p in parts])
            fps = np.concatenate([p[(m, mode)][1] for p in parts])
            for metric, vals in (("approximations", counts), ("fp_updates", fps)):
                if metric == "fp_updates" and mode != "fixedpoint":
                    continue
                v, c = np.unique(vals, return_counts=True)
                cdf = np.cumsum(c) / max(vals.size, 1)
                cdf_rows += [[m, mode, metric, fmt(a), fmt(b)] for a, b in zip(v, cdf)]
            mean_fp = float(fps.mean()) if mode == "fixedpoint" and fps.size else float("nan")
            summary.append([m, mode, counts.size, fmt(counts.mean() if counts.size else np.nan), fmt(mean_fp)])
            print(f"{m:>8s} {mode:>10s}: mean approximations {summary[-1][3]}, mean fp updates {summary[-1][4]}")
    write_csv(out / "counts_cdf.csv", ["method", "mode", "metric", "value", "cdf"], cdf_rows)
    write_csv(out / "summary.csv", ["method", "mode", "slots", "mean_approximations", "mean_fp_updates"], summary)
    return 0


def cmd_oracle(args) -> int:
    chans = scenarios(args)
    if len(chans) != 1:
        raise CliError("oracle takes a single scenario")
    ch = chans[0]
    grid = Grid(step_db=args.grid_dbm)
    ref = np.zeros((ch.num_tones, ch.num_users))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best = np.zeros_like(ref)
    rows = []
    for n in range(ch.num_users):
        r = exhaustive_per_user(ch, ref, n, grid=grid)
        best[:, n] = r.x
        rows.append([n + 1, fmt(r.lam), fmt(r.power), fmt(r.objective)])
    write_spectra(out / "oracle_spectra.csv", best)
    write_csv(out / "oracle.csv", ["user", "lambda", "power_mw", "objective"], rows)
    print(f"per-user grid optimum ({args.grid_dbm} dB steps) written to {out}")
    return 0


def cmd_generate(args) -> int:
    chans = scenarios(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ch in enumerate(chans):
        name = "scenario.json" if len(chans) == 1 else f"scenario_{i:03d}.json"
        save_scenario(ch, out / name)
    print(f"wrote {len(chans)} scenario file(s) to {out}")
    return 0


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    batch = instance_batch(args.batch, seed)
    grid = Grid(step_db=args.grid_dbm) if args.grid_dbm_set else None
    rows, bad = [], []
    for kind in VERIFY_KINDS:
        for i, (ch, s, n) in enumerate(batch):
            rep = check_conditions(kind, ch, s, n, count=256, d_offset=args.corrupt_d, grid=grid)
            ok = rep.passed
            rows.append(["conditions", kind, seed, i, n + 1, fmt(rep.value_error), fmt(rep.slope_error),
                         fmt(rep.bound_gap), fmt(rep.worst_point), int(ok)])
            if not ok:
                what = []
                if rep.value_error > 1e-9:
                    what.append(f"value error {rep.value_error:.3g}")
                if rep.slope_error > 1e-6:
                    what.append(f"slope error {rep.slope_error:.3g}")
                if rep.bound_gap < -1e-9:
                    what.append(f"bound gap {rep.bound_gap:.3g} at x={rep.worst_point:.6g} mW")
                bad.append(f"{kind}: seed {seed} instance {i} user {n + 1}: " + ", ".join(what))
    for a, b in TIGHTNESS_PAIRS:
        for i, (ch, s, n) in enumerate(batch):
            gap, x = pair_gap(a, b, ch, s, n, d_offset=args.corrupt_d)
            ok = gap >= -1e-9
            rows.append(["tightness", f"{a}<={b}", seed, i, n + 1, "", "", fmt(gap), fmt(x), int(ok)])
            if not ok:
                bad.append(f"{a}<={b}: seed {seed} instance {i} user {n + 1}: gap {gap:.3g} at x={x:.6g} mW")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "verify.csv", ["check", "subject", "seed", "instance", "user", "value_error",
                                   "slope_error", "bound_gap", "worst_point_mw", "passed"], rows)
    if bad:
        for line in bad[:50]:
            print(f"violation: {line}", file=sys.stderr)
        if len(bad) > 50:
            print(f"... {len(bad) - 50} more", file=sys.stderr)
        print(f"verify: {len(bad)} violation(s)", file=sys.stderr)
        return 1
    print(f"verify: {len(rows)} checks passed")
    return 0


# --------------------------------------------------------------------------

def parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--scenario", metavar="PATH", help="scenario JSON file")
    src.add_argument("--synth", metavar="N,K,SEED", help="synthetic scenario: users, tones, seed")
    src.add_argument("--escape", action="store_true", help="built-in 3-user nonconvex escape instance")
    common.add_argument("--batch", type=int, default=None,
                        help="synthetic seeds (default 1) or verify instances (default 500)")
    common.add_argument("--paper-defaults", action="store_true", help="20.4 dBm mask and budget for --synth")
    common.add_argument("--budget-dbm", type=float)
    common.add_argument("--coupling-db", metavar="LO,HI")
    common.add_argument("--decoupled", action="store_true", help="zero all crosstalk gains")
    common.add_argument("--method", default="iasb1", help="method name or comma separated list")
    common.add_argument("--alloc", metavar="RULE", help="per-user/per-tone rule, e.g. user2:iasb3,rest:iasb1")
    common.add_argument("--mode", default=None, choices=["closed", "fixedpoint", "both"])
    common.add_argument("--outer", type=int, default=None, help="fixed number of outer sweeps")
    common.add_argument("--tol", type=float, default=1e-8, help="relative objective change that stops the outer loop")
    common.add_argument("--grid-dbm", type=float, default=None, help="oracle grid step in dB")
    common.add_argument("--init", default="zero", choices=["zero", "mask"])
    common.add_argument("--q", type=int, default=0, help="reference user for r terms (0-based)")
    common.add_argument("--t", type=int, default=1, help="reference user for alpha terms (0-based)")
    common.add_argument("--out", default="out", metavar="DIR")
    common.add_argument("--seed", type=int, default=None)

    p = argparse.ArgumentParser(prog="spectra", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="solve one scenario")
    sub.add_parser("compare", parents=[common], help="approximation counts against the grid oracle")
    sub.add_parser("oracle", parents=[common], help="per-user exhaustive grid search from zero")
    sub.add_parser("generate", parents=[common], help="write scenario files")
    v = sub.add_parser("verify", parents=[common], help="surrogate validity and tightness checks")
    v.add_argument("--corrupt-d", type=float, default=0.0, help="test hook: add this to every linear slope")
    return p


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "oracle": cmd_oracle,
            "generate": cmd_generate, "verify": cmd_verify}


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    args.grid_dbm_set = args.grid_dbm is not None
    if args.grid_dbm is None:
        args.grid_dbm = 0.1
    if args.mode is None:
        args.mode = "both" if args.command == "compare" else "closed"
    if args.mode == "both" and args.command != "compare":
        parser().error("--mode both is only valid for compare")
    if args.batch is None:
        args.batch = 500 if args.command == "verify" else 1
    if args.batch < 1:
        parser().error("--batch must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, ScenarioError, ApproximationError, ValueError, RuntimeError,
            OSError) as exc:
        print(f"spectra: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
