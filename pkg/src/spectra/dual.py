"""Per-user dual problem: bisection on the power price ``lam``."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .approximations import ApproximationSpec, build
from .channel import Channel
from .subproblem import Prepared, solve_closed_form, solve_fixed_point

POWER_RTOL = 1e-6
LAM_RTOL = 1e-10
MAX_BISECTION = 100
MAX_DOUBLING = 400


class BracketError(RuntimeError):
    pass


def tone_specs(specs, num_tones: int) -> list:
    """Normalize a method name, spec or per-tone sequence into one spec per tone."""
    if isinstance(specs, (str, ApproximationSpec)):
        return [ApproximationSpec.of(specs)] * num_tones
    specs = [ApproximationSpec.of(s) for s in specs]
    if len(specs) != num_tones:
        raise ValueError(f"expected {num_tones} per-tone specs, got {len(specs)}")
    return specs


class UserSubproblems:
    """All per-tone surrogates of one user at one build point, grouped by spec."""

    def __init__(self, ch: Channel, s: np.ndarray, n: int, specs, mode: str = "closed",
                 fp_max_iter: int = 50, fp_tol_db: float = 0.01, d_offset: float = 0.0):
        self.ch, self.n, self.mode = ch, n, mode
        self.K = ch.num_tones
        self.fp_max_iter, self.fp_tol_db = fp_max_iter, fp_tol_db
        per_tone = tone_specs(specs, self.K)
        groups: dict = {}
        for k, sp in enumerate(per_tone):
            groups.setdefault(sp, []).append(k)
        self.groups = []
        for sp, ks in groups.items():
            app = build(sp, ch, s, n, np.array(ks), d_offset=d_offset)
            prep = Prepared(app) if mode in ("closed", "closed_form") else None
            self.groups.append((np.array(ks), app, prep))
        self.solves = Counter()
        self.evaluations = 0

    def approximations(self):
        return [app for _, app, _ in self.groups]

    def solve(self, lam: float):
        """Per-tone argmins at price ``lam``; returns powers, surrogate values and fixed-point counts."""
        x = np.zeros(self.K)
        val = np.zeros(self.K)
        iters = np.zeros(self.K, dtype=int)
        flagged = np.zeros(self.K, dtype=bool)
        self.evaluations += 1
        for ks, app, prep in self.groups:
            if prep is not None:
                sol = solve_closed_form(app, lam, prep)
                self.solves[app.degree] += len(ks)
            else:
                sol = solve_fixed_point(app, lam, tol_db=self.fp_tol_db, max_iter=self.fp_max_iter)
                self.solves["fixed_point"] += int(sol.iterations.sum())
            x[ks] = sol.x
            val[ks] = sol.value
            iters[ks] = sol.iterations
            flagged[ks] = sol.flagged
        return x, val, iters, flagged


@dataclass
class DualEvaluation:
    lam: float
    g: float
    power: float
    x: np.ndarray
    values: np.ndarray
    fp_iterations: np.ndarray
    flagged: np.ndarray


def evaluate_dual(ch: Channel, s, n: int, specs, lam: float, budget=None, mode: str = "closed",
                  problems: UserSubproblems | None = None) -> DualEvaluation:
    """``g(lam) = sum_k min_x [f_app + lam x] - lam * budget`` and the matching powers."""
    probs = problems if problems is not None else UserSubproblems(ch, s, n, specs, mode)
    budget = ch.budgets[n] if budget is None else budget
    x, val, iters, flagged = probs.solve(lam)
    return DualEvaluation(lam, float(val.sum() - lam * budget), float(x.sum()), x, val, iters, flagged)


@dataclass
class UserSolution:
    x: np.ndarray
    lam: float
    power: float
    budget: float
    gap: float  # budget - power when the budget is active, else 0
    active: bool
    evaluations: int
    fp_iterations: np.ndarray
    flagged: np.ndarray
    solves: Counter = field(default_factory=Counter)


def solve_user(ch: Channel, s, n: int, specs, budget=None, mode: str = "closed",
               problems: UserSubproblems | None = None, power_rtol: float = POWER_RTOL,
               lam_rtol: float = LAM_RTOL, max_steps: int = MAX_BISECTION) -> UserSolution:
    """Minimize the surrogate sum under the power budget by bisection on ``lam``.

    The returned point is always the feasible end of the final bracket.  When
    the total power jumps across the budget (nonconvex surrogates), the
    remaining gap is reported instead of hidden.
    """
    probs = problems if problems is not None else UserSubproblems(ch, s, n, specs, mode)
    budget = float(ch.budgets[n] if budget is None else budget)

    def at(lam):
        return evaluate_dual(ch, s, n, specs, lam, budget, mode, probs)

    ev0 = at(0.0)
    if ev0.power <= budget:
        return UserSolution(ev0.x, 0.0, ev0.power, budget, 0.0, False, probs.evaluations,
                            ev0.fp_iterations, ev0.flagged, probs.solves)
    lo, hi = 0.0, 1.0
    ev_hi = at(hi)
    steps = 0
    while ev_hi.power > budget:
        lo, hi = hi, hi * 2.0
        ev_hi = at(hi)
        steps += 1
        if steps > MAX_DOUBLING or not np.isfinite(hi):
            raise BracketError(f"user {n}: power {ev_hi.power:.6g} mW still above budget {budget:.6g} at lam={hi:.3g}")
    if lo == 0.0:
        # shrink toward zero so bisection starts from a factor-two bracket
        while hi > 1e-300:
            ev = at(hi / 2.0)
            if ev.power > budget:
                lo = hi / 2.0
                break
            hi, ev_hi = hi / 2.0, ev
    for _ in range(max_steps):
        if budget - ev_hi.power <= power_rtol * budget or hi - lo <= lam_rtol * hi:
            break
        mid = 0.5 * (lo + hi)
        ev = at(mid)
        if ev.power > budget:
            lo = mid
        else:
            hi, ev_hi = mid, ev
    return UserSolution(ev_hi.x, hi, ev_hi.power, budget, budget - ev_hi.power, True,
                        probs.evaluations, ev_hi.fp_iterations, ev_hi.flagged, probs.solves)
