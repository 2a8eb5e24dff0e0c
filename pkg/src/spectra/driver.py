"""Outer sweep / per-user / inner approximation loop and convergence accounting."""

from __future__ import annotations

import re
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .approximations import ApproximationError, ApproximationSpec
from .channel import POWER_FLOOR_MW, Channel, db_close, mw_to_dbm
from .dual import MAX_BISECTION, UserSubproblems, solve_user
from .objective import rates, total_objective
from .oracle import Grid, exhaustive_per_user


# tolerances for the one retry of a dual solve whose step raised the objective
RETRY_POWER_RTOL = 1e-13
RETRY_LAM_RTOL = 1e-15


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# method assignment

def allocate_hybrid(ch: Channel, rule: str, q: int = 0, t: int = 1, fallback: int = 2) -> list:
    """Per-user, per-tone spec lists from a rule string.

    Entries are ``selector:method`` separated by commas and applied in order.
    Selectors: ``all``, ``rest`` (slots not yet assigned), ``user<i>`` with
    1-based ``i``, ``k<a>-<b>`` or ``k>=<a>`` for 0-based tone ranges, and
    ``user<i>@k<a>-<b>`` for both.
    """
    N, K = ch.num_users, ch.num_tones
    table: list = [[None] * K for _ in range(N)]
    mk = lambda name: ApproximationSpec.of(name, q=q, t=t, fallback=fallback)
    for entry in filter(None, (e.strip() for e in rule.split(","))):
        if ":" not in entry:
            entry = "all:" + entry
        sel, method = entry.rsplit(":", 1)
        try:
            spec = mk(method)
        except ApproximationError as e:
            raise ConfigError(f"{e} in rule {rule!r}") from e
        users, tones = range(N), range(K)
        rest = False
        for part in sel.split("@"):
            part = part.strip().lower()
            if part == "all":
                continue
            if part == "rest":
                rest = True
                continue
            m = re.fullmatch(r"user(\d+)", part)
            if m:
                i = int(m.group(1)) - 1
                if not 0 <= i < N:
                    raise ConfigError(f"rule names unknown user {m.group(1)} (channel has {N})")
                users = [i]
                continue
            m = re.fullmatch(r"k(\d+)-(\d+)|k>=(\d+)", part)
            if m:
                lo = int(m.group(1) if m.group(1) is not None else m.group(3))
                hi = int(m.group(2)) if m.group(2) is not None else K - 1
                if not (0 <= lo <= hi < K):
                    raise ConfigError(f"rule names unknown tones {part!r} (channel has {K})")
                tones = range(lo, hi + 1)
                continue
            raise ConfigError(f"bad selector {part!r} in rule {rule!r}")
        for n in users:
            for k in tones:
                if not rest or table[n][k] is None:
                    table[n][k] = spec
    missing = [(n, k) for n in range(N) for k in range(K) if table[n][k] is None]
    if missing:
        raise ConfigError(f"rule {rule!r} leaves {len(missing)} (user, tone) slots unassigned")
    return table


# --------------------------------------------------------------------------
# configuration and report

@dataclass(frozen=True)
class RunConfig:
    method: str = "iasb1"
    alloc: Optional[str] = None  # hybrid rule, overrides ``method``
    q: int = 0
    t: int = 1
    fallback: int = 2
    mode: str = "closed"
    max_sweeps: int = 50
    fixed_sweeps: Optional[int] = None  # run exactly this many sweeps when set
    outer_tol: float = 1e-8
    inner_max: int = 10
    inner_tol_db: float = 0.01
    init: str = "zero"  # zero | mask | given
    initial: Optional[np.ndarray] = None
    safeguard: bool = True
    fp_max_iter: int = 50
    users: Optional[tuple] = None  # restrict updates to these users

    def validate(self):
        if self.inner_max < 1 or self.max_sweeps < 1 or self.fp_max_iter < 1:
            raise ConfigError("iteration caps must be >= 1")
        if self.outer_tol <= 0 or self.inner_tol_db <= 0:
            raise ConfigError("tolerances must be positive")
        if self.mode not in ("closed", "fixedpoint"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.init not in ("zero", "mask", "given"):
            raise ConfigError(f"unknown initial point rule {self.init!r}")
        if self.init == "given" and self.initial is None:
            raise ConfigError("init='given' needs an initial allocation")

    def assignment(self, ch: Channel) -> list:
        rule = self.alloc if self.alloc else f"all:{self.method}"
        return allocate_hybrid(ch, rule, self.q, self.t, self.fallback)

    def start(self, ch: Channel) -> np.ndarray:
        if self.init == "zero":
            return np.zeros((ch.num_tones, ch.num_users))
        if self.init == "mask":
            # scale each user down so the mask start is budget feasible
            s = np.array(ch.masks, dtype=float)
            tot = s.sum(axis=0)
            return s * np.minimum(1.0, ch.budgets / tot)[None, :]
        s = np.array(self.initial, dtype=float)
        ch.check_allocation(s)
        return s


@dataclass
class SolveReport:
    powers: np.ndarray
    objective: float
    rates: np.ndarray
    bitloading: np.ndarray
    trace: list  # (sweep, user, inner, objective, accepted)
    approximations: np.ndarray  # (K, N) surrogates built
    fp_iterations: np.ndarray  # (K, N) fixed-point updates at the accepted prices
    lambdas: list  # per sweep, one price per user
    budget_gaps: list  # per sweep, budget - power per user (0 when inactive)
    solves_by_degree: Counter
    rejected: int
    sweeps: int
    converged: bool
    flags: list
    wall_clock: dict = field(default_factory=dict)
    retries: int = 0  # dual solves repeated with a tight budget tolerance

    @property
    def cubic_solves(self) -> int:
        return int(self.solves_by_degree.get(3, 0))

    def user_traces(self):
        """Objective values seen inside each user turn, keyed by ``(sweep, user)``."""
        out: dict = {}
        for sweep, n, inner, obj, _ in self.trace:
            out.setdefault((sweep, n), []).append(obj)
        return out

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "powers_mw": self.powers.tolist(),
            "powers_dbm": np.where(self.powers > 0, mw_to_dbm(np.maximum(self.powers, 1e-300)), None).tolist(),
            "rates_bps": self.rates.tolist(),
            "approximations": self.approximations.tolist(),
            "fp_iterations": self.fp_iterations.tolist(),
            "lambdas": self.lambdas,
            "budget_gaps": self.budget_gaps,
            "solves_by_degree": {str(k): int(v) for k, v in sorted(self.solves_by_degree.items(), key=str)},
            "rejected_steps": self.rejected,
            "dual_retries": self.retries,
            "sweeps": self.sweeps,
            "converged": self.converged,
            "flags": self.flags,
            "trace": [list(r) for r in self.trace],
            "wall_clock_s": self.wall_clock,
        }


# --------------------------------------------------------------------------
# main loop

def user_turn(ch: Channel, s: np.ndarray, n: int, specs, cfg: RunConfig, obj: float, counters: dict):
    """One inner approximation loop for user ``n``; returns the new allocation and objective."""
    records = []
    for inner in range(cfg.inner_max):
        t0 = time.perf_counter()
        probs = UserSubproblems(ch, s, n, specs, cfg.mode, fp_max_iter=cfg.fp_max_iter)
        t1 = time.perf_counter()
        sol = solve_user(ch, s, n, specs, mode=cfg.mode, problems=probs)
        t2 = time.perf_counter()
        counters["build"] += t1 - t0
        counters["dual"] += t2 - t1
        counters["approximations"][:, n] += 1
        s_new = s.copy()
        s_new[:, n] = sol.x
        obj_new = total_objective(ch, s_new)
        if cfg.safeguard and obj_new > obj and sol.active:
            # the budget tolerance alone can cost up to lam * 1e-6 * budget; retry with a tight one
            sol = solve_user(ch, s, n, specs, mode=cfg.mode, problems=probs, power_rtol=RETRY_POWER_RTOL,
                             lam_rtol=RETRY_LAM_RTOL, max_steps=4 * MAX_BISECTION)
            s_new[:, n] = sol.x
            obj_new = total_objective(ch, s_new)
            counters["retries"] += 1
        counters["solves"].update(probs.solves)
        accepted = not (cfg.safeguard and obj_new > obj)
        records.append((inner, obj_new if accepted else obj, accepted, sol))
        if not accepted:
            counters["rejected"] += 1
            break
        counters["fp"][:, n] += sol.fp_iterations
        if np.any(sol.flagged):
            counters["flags"].append(f"user {n}: {int(sol.flagged.sum())} tones hit the fixed-point guard")
        moved = not np.all(db_close(sol.x, s[:, n], cfg.inner_tol_db, POWER_FLOOR_MW))
        s, obj = s_new, obj_new
        if not moved:
            break
    return s, obj, records


def run(ch: Channel, cfg: RunConfig = RunConfig()) -> SolveReport:
    """Iterate per-user surrogate minimization until the objective settles."""
    cfg.validate()
    t_start = time.perf_counter()
    table = cfg.assignment(ch)
    s = cfg.start(ch)
    obj = total_objective(ch, s)
    K, N = s.shape
    counters = {"build": 0.0, "dual": 0.0, "solves": Counter(), "rejected": 0, "retries": 0, "flags": [],
                "approximations": np.zeros((K, N), dtype=int), "fp": np.zeros((K, N), dtype=int)}
    trace = [(0, -1, -1, obj, True)]
    lambdas, gaps = [], []
    users = range(N) if cfg.users is None else cfg.users
    sweeps_total = cfg.fixed_sweeps if cfg.fixed_sweeps is not None else cfg.max_sweeps
    converged = False
    sweep = 0
    for sweep in range(1, sweeps_total + 1):
        start_obj = obj
        lam_row, gap_row = [0.0] * N, [0.0] * N
        for n in users:
            s, obj, records = user_turn(ch, s, n, table[n], cfg, obj, counters)
            for inner, o, acc, sol in records:
                trace.append((sweep, n, inner, o, acc))
            last = next((r[3] for r in reversed(records) if r[2]), records[-1][3])
            lam_row[n] = float(last.lam)
            gap_row[n] = float(last.gap)
        lambdas.append(lam_row)
        gaps.append(gap_row)
        change = abs(start_obj - obj) / max(abs(obj), 1e-300)
        if cfg.fixed_sweeps is None and change < cfg.outer_tol:
            converged = True
            break
    if cfg.fixed_sweeps is not None:
        converged = True
    if not converged:
        counters["flags"].append(f"outer loop stopped at the sweep cap ({sweeps_total}) without meeting tol")
    r = rates(ch, s)
    wall = {"build": counters["build"], "dual": counters["dual"], "total": time.perf_counter() - t_start}
    return SolveReport(s, obj, r.rates, r.bitloading, trace, counters["approximations"], counters["fp"],
                       lambdas, gaps, counters["solves"], counters["rejected"], sweep, converged,
                       counters["flags"], wall, counters["retries"])


# --------------------------------------------------------------------------
# convergence counting against the exhaustive per-user optimum

@dataclass
class ConvergenceCounts:
    counts: np.ndarray  # (K, N) approximations until within tolerance, NaN if never
    fp_counts: np.ndarray  # (K, N) fixed-point updates spent up to that approximation
    converged: np.ndarray  # (K, N) bool


@dataclass
class OracleTargets:
    reference: np.ndarray  # (K, N) state the other users are frozen at
    targets: np.ndarray  # (K, N) per-user grid optimum for each user


def oracle_targets(ch: Channel, reference: Optional[np.ndarray] = None, ref_sweeps: int = 3,
                   grid: Grid = Grid()) -> OracleTargets:
    """Per-user exhaustive optima with the others frozen at a reference state.

    The default reference is a short IASB1 run from the all-zero point.
    """
    if reference is None:
        reference = run(ch, RunConfig(method="iasb1", fixed_sweeps=ref_sweeps)).powers
    targets = np.zeros_like(reference)
    for n in range(ch.num_users):
        s0 = reference.copy()
        s0[:, n] = 0.0
        targets[:, n] = exhaustive_per_user(ch, s0, n, grid=grid).x
    return OracleTargets(reference, targets)


def count_convergence(ch: Channel, cfg: RunConfig, oracle_solution: OracleTargets,
                      tol_db: float = 0.1, max_approx: int = 50) -> ConvergenceCounts:
    """Approximations needed per (tone, user) to settle within ``tol_db`` of the oracle.

    Each user restarts from zero power with the others at the reference
    state.  The count is the first approximation after which the power
    stays within tolerance of the target for the rest of the run.
    """
    table = cfg.assignment(ch)
    ref, targets = oracle_solution.reference, oracle_solution.targets
    K, N = ref.shape
    counts = np.full((K, N), np.nan)
    fp_counts = np.full((K, N), np.nan)
    for n in range(N):
        s = ref.copy()
        s[:, n] = 0.0
        history, fp_hist = [], []
        for _ in range(max_approx):
            probs = UserSubproblems(ch, s, n, table[n], cfg.mode, fp_max_iter=cfg.fp_max_iter)
            sol = solve_user(ch, s, n, table[n], mode=cfg.mode, problems=probs)
            history.append(sol.x)
            fp_hist.append(sol.fp_iterations if cfg.mode == "fixedpoint" else np.zeros(K, dtype=int))
            done = np.all(db_close(sol.x, s[:, n], cfg.inner_tol_db, POWER_FLOOR_MW))
            s[:, n] = sol.x
            if done:
                break
        H = np.array(history)  # (J, K)
        ok = db_close(H, targets[None, :, n], tol_db, POWER_FLOOR_MW)
        # stays[j] is True when every approximation from j on is within tolerance
        stays = np.flip(np.cumprod(np.flip(ok, axis=0), axis=0), axis=0).astype(bool)
        good = stays.any(axis=0)
        first = np.argmax(stays, axis=0)
        counts[good, n] = first[good] + 1
        fp = np.cumsum(np.array(fp_hist), axis=0)
        fp_counts[good, n] = fp[first[good], np.nonzero(good)[0]]
    return ConvergenceCounts(counts, fp_counts, ~np.isnan(counts))


def compare_counts(ch: Channel, methods, modes=("closed",), oracle_solution: Optional[OracleTargets] = None,
                   base: RunConfig = RunConfig(), tol_db: float = 0.1):
    """Counts for several methods and modes on one channel, keeping only slots where all converged."""
    oracle_solution = oracle_solution or oracle_targets(ch)
    results = {}
    for m in methods:
        for mode in modes:
            cfg = replace(base, method=m, mode=mode, alloc=None)
            results[(m, mode)] = count_convergence(ch, cfg, oracle_solution, tol_db)
    common = np.logical_and.reduce([r.converged for r in results.values()])
    return results, common


# --------------------------------------------------------------------------
# nonconvex escape instance

def escape_channel(victim_gain: float = 1e-3, victim_noise_mw: float = 1e-5,
                   far_gain: float = 0.1, far_noise_mw: float = 1.0, own_noise_mw: float = 0.1,
                   back_gain: float = 1e-6, mask_mw: float = 10.0,
                   weights=(0.8, 1.0, 0.55)) -> Channel:
    """Three users on one tone; user 2's restriction has minima at zero power and inside ``(0, mask)``.

    User 1 is a high-SINR victim whose loss is steep near zero, which makes
    zero a local (and global) minimum.  User 3 is a low-SINR victim whose
    nearly linear loss stops user 2 in the interior.  Starting from the mask,
    convex surrogates slide down into the interior minimum.  Budgets equal
    the mask so only the mask binds.
    """
    G = np.full((1, 3, 3), back_gain)
    G[0, 0, 1] = victim_gain  # user 2 into user 1
    G[0, 2, 1] = far_gain  # user 2 into user 3
    np.fill_diagonal(G[0], 0.0)
    z = np.array([[victim_noise_mw, own_noise_mw, far_noise_mw]])
    return Channel(G, z, np.full((1, 3), mask_mw), np.full(3, mask_mw), np.asarray(weights, dtype=float),
                   metadata={"name": "escape"})


def restriction_minima(ch: Channel, s: np.ndarray, n: int, grid: Grid = Grid(step_db=0.01)):
    """Local minima of the true restriction of user ``n`` on the first tone, from a dense grid scan."""
    from .objective import TonePoint
    tp = TonePoint.build(ch, s, n, [0])
    g = grid.points(tp.masks)[0]
    g = np.unique(g)
    v = tp.value(g[None, :])[0]
    left = np.concatenate([[np.inf], v[:-1]])
    right = np.concatenate([v[1:], [np.inf]])
    idx = np.nonzero((v <= left) & (v <= right))[0]
    return g[idx], v[idx]
