"""Per-tone minimization of ``f_app(x) + lam * x`` over ``[0, mask]``.

Closed form: real roots of the stationarity polynomial plus the two
endpoints are compared.  Fixed point: the stationarity condition is solved
for the own-rate term and iterated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .approximations import Approximation
from .channel import POWER_FLOOR_MW, db_close

LEAD_TOL = 1e-40  # leading terms below this (relative) are dropped; only guards overflow in the shift


class ZeroPolynomialError(ValueError):
    """Raised when every coefficient of a polynomial is zero."""


# --------------------------------------------------------------------------
# polynomial roots

def _horner(P, x):
    """Evaluate rows of ``P`` (highest power first) at ``x`` of shape ``(T, R)``."""
    val = np.zeros_like(x)
    der = np.zeros_like(x)
    for i in range(P.shape[1]):
        der = der * x + val
        val = val * x + P[:, [i]]
    return val, der


def _polish(P, roots):
    """One guarded Newton step per root; the step is kept only if the residual drops."""
    with np.errstate(all="ignore"):
        val, der = _horner(P, roots)
        step = np.where(der != 0, val / der, 0.0)
        cand = roots - step
        val2, _ = _horner(P, cand)
        better = np.isfinite(cand) & (np.abs(val2) < np.abs(val))
    return np.where(better, cand, roots)


def _cardano(P):
    """Cardano / trigonometric real roots; accurate for the largest-magnitude root only."""
    a, b, c, d = (P[:, i] for i in range(4))
    B, C, D = b / a, c / a, d / a
    p = C - B * B / 3.0
    q = 2.0 * B**3 / 27.0 - B * C / 3.0 + D
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    out = np.full((P.shape[0], 3), np.nan)
    one = disc > 0
    if np.any(one):
        qq, pp, dd = q[one], p[one], disc[one]
        sgn = np.where(qq >= 0, 1.0, -1.0)
        A = -sgn * np.cbrt(np.abs(qq) / 2.0 + np.sqrt(dd))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(A != 0, A - pp / (3.0 * A), 0.0)
        out[one, 0] = t - B[one] / 3.0
    three = ~one
    if np.any(three):
        pp, qq = p[three], q[three]
        neg = pp < 0
        t = np.zeros((pp.size, 3))
        if np.any(neg):
            pn, qn = pp[neg], qq[neg]
            r = 2.0 * np.sqrt(-pn / 3.0)
            arg = np.clip(3.0 * qn / (pn * r), -1.0, 1.0)
            phi = np.arccos(arg) / 3.0
            ks = np.arange(3)[None, :]
            t[neg] = r[:, None] * np.cos(phi[:, None] - 2.0 * np.pi * ks / 3.0)
        # p == 0 and disc <= 0 forces q == 0: triple root at the shift
        out[three] = t - B[three][:, None] / 3.0
    return out


def _cubic(P):
    """Real roots of ``a x^3 + b x^2 + c x + d`` with ``a != 0``; NaN marks absent roots.

    The shifted closed form loses small roots when the magnitudes are far
    apart, so only its largest root is kept.  That root is Newton polished
    and divided out (backward when it dominates, forward otherwise), and the
    quadratic quotient gives the other two.
    """
    raw = _cardano(P)
    mag = np.where(np.isfinite(raw), np.abs(raw), -1.0)
    r1 = raw[np.arange(P.shape[0]), np.argmax(mag, axis=1)][:, None]
    for _ in range(3):
        r1 = _polish(P, r1)
    r1 = r1[:, 0]
    a, b, c, d = (P[:, i] for i in range(4))
    with np.errstate(divide="ignore", invalid="ignore"):
        rest = np.sqrt(np.abs(d / (a * r1)))  # geometric mean of the other two magnitudes
        backward = (r1 != 0) & (np.abs(r1) >= rest)
        g_b = -d / r1
        b_b = (g_b - c) / r1
        b_f = b + a * r1
        g_f = c + b_f * r1
    Q = np.stack([a, np.where(backward, b_b, b_f), np.where(backward, g_b, g_f)], axis=1)
    return np.concatenate([r1[:, None], _quadratic(Q)], axis=1)


def _quadratic(P):
    a, b, c = (P[:, i] for i in range(3))
    disc = b * b - 4 * a * c
    out = np.full((P.shape[0], 2), np.nan)
    ok = disc >= 0
    if np.any(ok):
        sq = np.sqrt(disc[ok])
        qv = -0.5 * (b[ok] + np.where(b[ok] >= 0, sq, -sq))
        r1 = qv / a[ok]
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(qv != 0, c[ok] / qv, r1)
        out[ok, 0] = r1
        out[ok, 1] = r2
    return out


def _companion(P):
    """Real roots through companion-matrix eigenvalues (rows share the degree)."""
    T, W = P.shape
    D = W - 1
    monic = P[:, 1:] / P[:, [0]]
    M = np.zeros((T, D, D))
    M[:, 0, :] = -monic
    if D > 1:
        idx = np.arange(D - 1)
        M[:, idx + 1, idx] = 1.0
    z = np.linalg.eigvals(M)
    real = np.abs(z.imag) <= 1e-7 * np.maximum(1.0, np.abs(z))
    return np.where(real, z.real, np.nan)


def real_roots_batch(P, polish: bool = True):
    """Real roots of each row of ``P`` (highest power first).

    Returns an array of shape ``(T, D)`` padded with NaN and a boolean array
    marking rows solved by the numeric companion fallback.  Leading
    coefficients below ``LEAD_TOL`` of the row maximum are treated as zero, so
    degrees degenerate gracefully.  All-zero rows yield no roots.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    T, W = P.shape
    D = W - 1
    scale = np.max(np.abs(P), axis=1, keepdims=True)
    Pn = np.divide(P, scale, out=np.zeros_like(P), where=scale > 0)
    big = np.abs(Pn) > LEAD_TOL
    lead = np.where(big.any(axis=1), big.argmax(axis=1), W)
    eff = W - 1 - lead
    out = np.full((T, max(D, 1)), np.nan)
    numeric = np.zeros(T, dtype=bool)
    for g in np.unique(eff):
        rows = np.nonzero(eff == g)[0]
        if g <= 0:
            continue
        sub = Pn[rows, W - 1 - g:]
        if g == 1:
            r = (-sub[:, 1] / sub[:, 0])[:, None]
        elif g == 2:
            r = _quadratic(sub)
        elif g == 3:
            r = _cubic(sub)
        else:
            r = _companion(sub)
            numeric[rows] = True
        if polish:
            r = _polish(sub, r)
            if g > 3:
                r = _polish(sub, r)
        out[rows, :g] = r
    return out, numeric


def real_roots(coeffs):
    """Sorted real roots of one polynomial (highest power first)."""
    P = np.asarray(coeffs, dtype=float)
    if not np.any(P != 0):
        raise ZeroPolynomialError("polynomial is identically zero")
    r, _ = real_roots_batch(P[None, :])
    r = r[0]
    return np.sort(r[np.isfinite(r)])


# --------------------------------------------------------------------------
# closed-form subproblem

@dataclass
class SubproblemSolution:
    x: np.ndarray  # (T,) argmin powers
    value: np.ndarray  # (T,) f_app(x) + lam x
    candidates: Optional[np.ndarray]  # (T, C) examined points
    method: str
    iterations: np.ndarray  # (T,) fixed-point iterations, 0 for closed form
    converged: np.ndarray  # (T,) bool
    flagged: np.ndarray  # (T,) bool: numeric fallback or divergence guard hit
    degree: int


class Prepared:
    """Stationarity polynomial of an approximation in the scaled variable ``x = mask * y``.

    ``P(lam) = base + lam * den`` so repeated solves at different prices
    only touch one row operation.
    """

    def __init__(self, app: Approximation):
        self.app = app
        M = app.masks
        T, J = app.coef.shape
        vs = app.v * M[:, None]
        sc = np.maximum(np.abs(app.u), np.abs(vs))
        sc = np.where(sc > 0, sc, 1.0)
        fac = [np.stack([vs[:, j] / sc[:, j], app.u[:, j] / sc[:, j]], axis=1) for j in range(J)]
        den = np.ones((T, 1))
        for f in fac:
            den = _pmul(den, f)
        num = np.zeros((T, J))
        for j in range(J):
            part = np.ones((T, 1))
            for i in range(J):
                if i != j:
                    part = _pmul(part, fac[i])
            num = _padd(num, (app.coef[:, j] * app.v[:, j] / sc[:, j])[:, None] * part)
        # -2 L (M y - x_tilde) den
        quad = np.stack([-2 * app.L * M, 2 * app.L * app.x_tilde], axis=1)
        base = _padd(num, _pmul(quad, den))
        base = _padd(base, app.d[:, None] * den)
        width = max(base.shape[1], den.shape[1])
        self.base = _pad(base, width)
        self.den = _pad(den, width)
        self.degree = app.degree

    def poly(self, lam):
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (self.base.shape[0],))
        return self.base + lam[:, None] * self.den


def _pmul(a, b):
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[1]):
        out[:, i:i + b.shape[1]] += a[:, [i]] * b
    return out


def _pad(a, width):
    if a.shape[1] >= width:
        return a
    return np.concatenate([np.zeros((a.shape[0], width - a.shape[1])), a], axis=1)


def _padd(a, b):
    w = max(a.shape[1], b.shape[1])
    return _pad(a, w) + _pad(b, w)


def _pick(app: Approximation, cands, lam):
    """Argmin of ``f_app + lam x`` over candidate columns, ties toward smaller x."""
    order = np.argsort(cands, axis=1, kind="stable")
    cands = np.take_along_axis(cands, order, axis=1)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (cands.shape[0],))
    with np.errstate(invalid="ignore"):
        vals = app.value(cands) + lam[:, None] * cands
    vals = np.where(np.isnan(vals), np.inf, vals)
    best = np.argmin(vals, axis=1)
    rows = np.arange(cands.shape[0])
    return cands[rows, best], vals[rows, best], cands


def solve_closed_form(app: Approximation, lam, prepared: Optional[Prepared] = None) -> SubproblemSolution:
    """Exact minimizer over the candidate set ``{0, mask, clamped stationary points}``."""
    prep = prepared if prepared is not None else Prepared(app)
    roots, numeric = real_roots_batch(prep.poly(lam))
    M = app.masks
    x_roots = np.clip(roots * M[:, None], 0.0, M[:, None])
    x_roots = np.where(np.isnan(roots), 0.0, x_roots)
    cands = np.concatenate([np.zeros((len(M), 1)), M[:, None], x_roots], axis=1)
    x, val, cands = _pick(app, cands, lam)
    T = len(M)
    return SubproblemSolution(x, val, cands, "closed_form", np.zeros(T, dtype=int),
                              np.ones(T, dtype=bool), numeric, app.degree)


# --------------------------------------------------------------------------
# fixed-point mode

def fixed_point_step(app: Approximation, lam, x=None):
    """One update ``x <- clamp(-c0 / (lam + d + R(x)) - u0, 0, mask)``.

    ``c0 log(u0 + x)`` is the own-rate term of ``f1`` and ``R`` is the rest
    of ``f1'``.  Returns the new point and a flag marking tones where the
    denominator was not positive (sent to the mask) or the own term vanished.
    """
    x = app.x_tilde if x is None else np.asarray(x, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), x.shape)
    c0, u0 = app.coef[:, 0], app.u[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        own = np.where(c0 != 0, c0 / (u0 + x), 0.0)
    R = app.f1_prime(x) - own
    den = lam + app.d + R
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = -c0 / den - u0
    bad = (den <= 0) | (c0 == 0)
    nxt = np.clip(np.where(den > 0, raw, app.masks), 0.0, app.masks)
    if np.any(c0 == 0):
        # own term absent: no isolated variable, fall back to the better endpoint
        zero = c0 == 0
        ends = np.stack([np.zeros(x.shape), app.masks], axis=1)
        ex, _, _ = _pick(app, ends, lam)
        nxt = np.where(zero, ex, nxt)
    return nxt, bad


def solve_fixed_point(app: Approximation, lam, x0=None, tol_db: float = 0.01,
                      max_iter: int = 50) -> SubproblemSolution:
    """Iterate :func:`fixed_point_step` from the build point until the change is below ``tol_db``.

    The reported count is the index of the first iterate that is already a
    fixed point to tolerance, so a one-shot update counts 1.
    """
    x = app.x_tilde.copy() if x0 is None else np.array(x0, dtype=float)
    T = x.size
    iters = np.zeros(T, dtype=int)
    done = np.zeros(T, dtype=bool)
    flagged = np.zeros(T, dtype=bool)
    x, bad = fixed_point_step(app, lam, x)
    flagged |= bad
    for j in range(1, max_iter + 1):
        nxt, bad = fixed_point_step(app, lam, x)
        close = db_close(nxt, x, tol_db, POWER_FLOOR_MW)
        newly = close & ~done
        iters[newly] = j
        done |= close
        flagged |= bad & ~done
        x = np.where(done & ~newly, x, nxt)
        if done.all():
            break
    iters[~done] = max_iter
    lam_b = np.broadcast_to(np.asarray(lam, dtype=float), (T,))
    val = app.value(x) + lam_b * x
    return SubproblemSolution(x, val, None, "fixed_point", iters, done, flagged, app.degree)


def solve(app: Approximation, lam, mode: str = "closed", prepared: Optional[Prepared] = None, **kw):
    if mode in ("closed", "closed_form"):
        return solve_closed_form(app, lam, prepared)
    if mode in ("fixedpoint", "fixed_point"):
        return solve_fixed_point(app, lam, **kw)
    raise ValueError(f"unknown solver mode {mode!r}")
