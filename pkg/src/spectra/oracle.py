"""Brute-force references: dense grids, per-user exhaustive search and surrogate checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximations import ApproximationSpec, build
from .channel import Channel
from .objective import TonePoint

BOUND_SLACK = 1e-9

# (tighter, looser) surrogate pairs; the first must lie below the second everywhere
TIGHTNESS_PAIRS = (
    ("iasb1", "cadsb"), ("iasb2", "iasb1"), ("iasb3", "iasb1"), ("iasb4", "iasb1"),
    ("iasb3", "iasb4"), ("iasb5", "iasb4"), ("iasb5", "iasb1"), ("iasb6", "iasb1"),
    ("iasb7", "iasb3"), ("iasb8", "iasb5"), ("iasb9", "iasb2"), ("iasb2c", "iasb1"),
    ("iasb10", "iasb1"), ("iasb10", "iasb4"), ("iasb10", "iasb5"), ("iasb10", "cadsb"),
    ("iasb10", "scale"),
)


@dataclass(frozen=True)
class Grid:
    """Zero plus a dBm ladder anchored at the mask and stepping down to the floor."""

    step_db: float = 0.1
    floor_dbm: float = -80.0

    def points(self, masks) -> np.ndarray:
        """Ascending grid per tone, shape ``(T, G)``; short ladders are padded with the mask."""
        masks = np.atleast_1d(np.asarray(masks, dtype=float))
        top = 10.0 * np.log10(masks)
        counts = np.floor((top - self.floor_dbm) / self.step_db + 1e-9).astype(int) + 1
        counts = np.maximum(counts, 1)
        G = int(counts.max())
        j = np.arange(G)[None, :]
        dbm = top[:, None] - self.step_db * (G - 1 - j)
        pts = 10.0 ** (dbm / 10.0)
        # columns below each tone's own floor repeat that tone's lowest rung
        low = (G - counts)[:, None]
        pts = np.where(j < low, np.take_along_axis(pts, low, axis=1), pts)
        pts[:, -1] = masks
        return np.concatenate([np.zeros((masks.size, 1)), pts], axis=1)


def uniform_grid(masks, count: int = 256, extra=None) -> np.ndarray:
    """``count`` uniform points on ``[0, mask]`` plus optional extra columns, sorted."""
    masks = np.atleast_1d(np.asarray(masks, dtype=float))
    g = np.linspace(0.0, 1.0, count)[None, :] * masks[:, None]
    if extra is not None:
        g = np.concatenate([g, np.atleast_2d(np.asarray(extra, dtype=float)).reshape(masks.size, -1)], axis=1)
    return np.sort(g, axis=1)


def grid_min_subproblem(fn, lam, grid: np.ndarray):
    """Exact argmin of ``fn(x) + lam x`` over grid rows; ties go to the smaller point."""
    grid = np.atleast_2d(grid)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (grid.shape[0],))
    vals = fn(grid) + lam[:, None] * grid
    vals = np.where(np.isnan(vals), np.inf, vals)
    j = np.argmin(vals, axis=1)
    rows = np.arange(grid.shape[0])
    return grid[rows, j], vals[rows, j]


@dataclass
class ExhaustiveResult:
    x: np.ndarray
    lam: float
    power: float
    objective: float  # sum over tones of the true restriction at x


def exhaustive_per_user(ch: Channel, s, n: int, budget=None, grid: Grid = Grid(),
                        lam_rtol: float = 1e-12) -> ExhaustiveResult:
    """Per-user optimum on the grid under the budget (others frozen at ``s``).

    Each tone is a grid argmin of ``f + lam x``; ``lam`` is bisected so the
    total power stays within budget.
    """
    budget = float(ch.budgets[n] if budget is None else budget)
    tp = TonePoint.build(ch, s, n)
    G = grid.points(tp.masks)
    V = tp.value(G)
    rows = np.arange(G.shape[0])

    def at(lam):
        j = np.argmin(V + lam * G, axis=1)
        return G[rows, j], V[rows, j]

    x, v = at(0.0)
    lam = 0.0
    if x.sum() > budget:
        lo, hi = 0.0, 1.0
        while at(hi)[0].sum() > budget:
            lo, hi = hi, hi * 2.0
        for _ in range(200):
            if hi - lo <= lam_rtol * hi:
                break
            mid = 0.5 * (lo + hi)
            if at(mid)[0].sum() > budget:
                lo = mid
            else:
                hi = mid
        lam = hi
        x, v = at(hi)
    return ExhaustiveResult(x, lam, float(x.sum()), float(v.sum()))


def waterfilling(noise, masks, budget, weight: float = 1.0, tol: float = 1e-14):
    """Single-user mask-constrained waterfilling ``x = clamp(w / lam - z, 0, mask)``."""
    noise = np.asarray(noise, dtype=float)
    masks = np.asarray(masks, dtype=float)

    def power(lam):
        return np.clip(weight / lam - noise, 0.0, masks)

    if masks.sum() <= budget:
        return masks.copy(), 0.0
    lo, hi = 1e-300, 1.0
    while power(hi).sum() > budget:
        hi *= 2.0
    lo = hi / 2.0
    while power(lo).sum() <= budget and lo > 1e-300:
        lo /= 2.0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if power(mid).sum() > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return power(hi), hi


# --------------------------------------------------------------------------
# surrogate checks

@dataclass
class ConditionReport:
    kind: str
    value_error: float  # max |f_app(x~) - f(x~)|
    slope_error: float  # max relative |f_app'(x~) - f'_fd(x~)|
    bound_gap: float  # min over grid of f_app - f
    worst_point: float  # grid point realizing bound_gap

    @property
    def passed(self) -> bool:
        return (self.value_error <= 1e-9 and self.slope_error <= 1e-6
                and self.bound_gap >= -BOUND_SLACK)


def fd_slope(tp: TonePoint, x):
    """Central finite difference of the true restriction with a step tied to the local scale.

    The step is ``1e-4`` of the smallest distance to a log singularity, so
    truncation and rounding both stay near ``1e-9`` relative.
    """
    x = np.asarray(x, dtype=float)
    scale = x + tp.own_int
    if tp.others.size:
        with np.errstate(divide="ignore"):
            ratio = np.where(tp.a_mn > 0, (tp.base_int + tp.a_mn * x[:, None]) / tp.a_mn, np.inf)
        scale = np.minimum(scale, ratio.min(axis=1))
    h = 1e-4 * scale
    return (tp.value(x + h) - tp.value(x - h)) / (2 * h)


def slope_scale(tp: TonePoint, x):
    """Sum of magnitudes of the derivative terms, used to normalize slope errors near stationarity."""
    x = np.asarray(x, dtype=float)
    ref = tp.w_n / (x + tp.own_int)
    if tp.others.size:
        intm = tp.base_int + tp.a_mn * x[:, None]
        ref = ref + np.sum(tp.w_m * tp.a_mn * tp.s_m / ((tp.s_m + intm) * intm), axis=1)
    return ref


def check_conditions(spec, ch: Channel, s, n: int, count: int = 256, d_offset: float = 0.0,
                     grid=None) -> ConditionReport:
    """Value match, slope match and upper bound of a surrogate at build point ``s``.

    ``grid`` may be ``None`` (uniform points), a :class:`Grid` (dBm ladder)
    or an explicit ``(T, G)`` array.
    """
    spec = ApproximationSpec.of(spec)
    app = build(spec, ch, s, n, d_offset=d_offset)
    tp = TonePoint.build(ch, s, n)
    xt = app.x_tilde
    value_error = float(np.max(np.abs(app.value(xt) - tp.value(xt))))
    fd = fd_slope(tp, xt)
    denom = np.maximum(np.abs(fd), slope_scale(tp, xt))
    slope_error = float(np.max(np.abs(app.derivative(xt) - fd) / denom))
    if grid is None:
        g = uniform_grid(app.masks, count, xt[:, None])
    elif isinstance(grid, Grid):
        g = np.sort(np.concatenate([grid.points(app.masks), xt[:, None]], axis=1), axis=1)
    else:
        g = grid
    gap = app.value(g) - tp.value(g)
    t, j = np.unravel_index(np.argmin(gap), gap.shape)
    return ConditionReport(spec.kind.name, value_error, slope_error, float(gap[t, j]), float(g[t, j]))


def common_build_point(s, n: int, *apps) -> np.ndarray:
    """Allocation at which all ``apps`` can be built with the same ``x~``.

    A lifted build (zero power moved to a tiny positive point) shifts the
    tangent point, so comparisons rebuild every surrogate at the lifted one.
    """
    s = np.array(s, dtype=float)
    for app in apps:
        lifted = app.params.get("lifted")
        if lifted is not None and np.any(lifted):
            s[app.tones[lifted], n] = app.x_tilde[lifted]
    return s


def pair_gap(kind_a, kind_b, ch: Channel, s, n: int, count: int = 256, d_offset: float = 0.0):
    """Smallest ``f_app_B - f_app_A`` over a uniform grid plus both tangent points."""
    a = build(kind_a, ch, s, n, d_offset=d_offset)
    b = build(kind_b, ch, s, n, d_offset=d_offset)
    s2 = common_build_point(s, n, a, b)
    if not np.array_equal(s2, s):
        a = build(kind_a, ch, s2, n, d_offset=d_offset)
        b = build(kind_b, ch, s2, n, d_offset=d_offset)
    g = uniform_grid(a.masks, count, np.stack([a.x_tilde, b.x_tilde], axis=1))
    gap = b.value(g) - a.value(g)
    t, j = np.unravel_index(np.argmin(gap), gap.shape)
    return float(gap[t, j]), float(g[t, j])


def verify_lemma_order(kind_a, kind_b, instances, count: int = 256):
    """Check ``f_app_A <= f_app_B`` on every grid point of every ``(ch, s, n)`` instance.

    Returns ``(passed, worst_gap)`` where ``worst_gap`` is the smallest
    ``f_app_B - f_app_A`` seen.
    """
    worst = np.inf
    for ch, s, n in instances:
        worst = min(worst, pair_gap(kind_a, kind_b, ch, s, n, count)[0])
    return worst >= -BOUND_SLACK, worst


def random_instance(seed: int, index: int = 0, num_tones: int = 4, users=(2, 6)):
    """One seeded ``(ch, s, n)`` surrogate test case with wide dynamic ranges.

    Gains span -40..+5 dB, noise -90..-30 dBm and masks -20..10 dBm; a fifth
    of the build-point powers are exactly zero.
    """
    rng = np.random.default_rng([seed, index])
    N = int(rng.integers(users[0], users[1] + 1))
    K = num_tones
    G = 10.0 ** rng.uniform(-4.0, 0.5, (K, N, N))
    G[:, np.arange(N), np.arange(N)] = 0.0
    z = 10.0 ** rng.uniform(-9.0, -3.0, (K, N))
    masks = 10.0 ** rng.uniform(-2.0, 1.0, (K, N))
    ch = Channel(G, z, masks, np.full(N, 10.0), rng.uniform(0.2, 1.0, N),
                 {"generator": "random_instance", "seed": int(seed), "index": int(index)})
    s = rng.uniform(0.0, 1.0, (K, N)) ** 3 * masks * (rng.uniform(size=(K, N)) < 0.8)
    n = int(rng.integers(N))
    return ch, s, n


def instance_batch(count: int, seed: int = 0, num_tones: int = 4):
    return [random_instance(seed, i, num_tones) for i in range(count)]
