"""Per-user per-tone surrogate functions for the successive approximation methods.

Every surrogate splits the univariate restriction ``f`` into ``f1 + f2``.
``f1`` keeps a rational derivative and is represented as

    f1(x) = sum_j c_j log(u_j + v_j x) - L (x - x_tilde)^2

while ``f2 = f - f1`` is replaced by its tangent ``d x + e`` at the build
point.  Builders are vectorized over tones: each coefficient array has one
row per tone and one column per log factor.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .channel import Channel
from .objective import TonePoint


class ApproximationError(ValueError):
    pass


SCALE_LIFT_MW = 1e-8


# --------------------------------------------------------------------------
# method kinds

@dataclass(frozen=True)
class MethodKind:
    """A surrogate family.

    ``family`` is ``"cadsb"``, ``"scale"`` or ``"ia"``.  For the ``ia`` family
    the term multiset is given by counts: ``beta`` and ``quad`` are flags,
    ``refs`` counts exact reference lines, ``alphas`` counts alpha-bounded
    reference lines (``-1`` means every other user).
    """

    name: str
    family: str = "ia"
    budget: Optional[int] = 1  # None means N
    beta: bool = False
    quad: bool = False
    refs: int = 0
    alphas: int = 0
    convex_quad: bool = False

    @property
    def tag(self) -> str:
        return self.name.upper()

    def structural_degree(self, num_users: int) -> int:
        """Stationarity polynomial degree for an ``num_users`` channel."""
        others = max(num_users - 1, 0)
        if self.family in ("cadsb", "scale"):
            return 1 + others
        alphas = others if self.alphas < 0 else self.alphas
        return 1 + 2 * self.refs + alphas + int(self.quad)

    def reference_count(self, num_users: int) -> int:
        if self.family != "ia":
            return 0
        alphas = max(num_users - 1, 0) if self.alphas < 0 else self.alphas
        return self.refs + alphas


PRESETS = {
    "cadsb": MethodKind("cadsb", family="cadsb", budget=None),
    "scale": MethodKind("scale", family="scale", budget=None),
    "iasb1": MethodKind("iasb1", budget=1),
    "iasb2": MethodKind("iasb2", budget=2, quad=True),
    "iasb2c": MethodKind("iasb2c", budget=2, quad=True, convex_quad=True),
    "iasb3": MethodKind("iasb3", budget=3, refs=1),
    "iasb4": MethodKind("iasb4", budget=2, alphas=1),
    "iasb5": MethodKind("iasb5", budget=3, alphas=2),
    "iasb6": MethodKind("iasb6", budget=1, beta=True),
    "iasb7": MethodKind("iasb7", budget=3, beta=True, refs=1),
    "iasb8": MethodKind("iasb8", budget=3, beta=True, alphas=2),
    "iasb9": MethodKind("iasb9", budget=3, alphas=1, quad=True),
    "iasb10": MethodKind("iasb10", budget=None, alphas=-1),
}

# the twelve named families; iasb2c is the convex IASB2 variant
NAMED_KINDS = ("cadsb", "scale", "iasb1", "iasb2", "iasb3", "iasb4", "iasb5",
               "iasb6", "iasb7", "iasb8", "iasb9", "iasb10")

# published polynomial degrees for the ten IASB methods (N stands for the user count)
TABLE_DEGREES = {"iasb1": 1, "iasb2": 2, "iasb3": 3, "iasb4": 2, "iasb5": 3,
                 "iasb6": 1, "iasb7": 3, "iasb8": 3, "iasb9": 3, "iasb10": "N",
                 "cadsb": "N", "scale": "N", "iasb2c": 2}

_TOKEN = re.compile(r"(beta|alpha|b|β|l|r|a|α)(?:\^?\{?(\d+|n-1)\}?|([²³]))?")


def parse_method(name: str) -> MethodKind:
    """Parse ``cadsb``, ``scale``, ``iasb1``..``iasb10``, ``iasb2c`` or ``ia<d>-<terms>``.

    Terms are written as a string of tokens: ``b`` (or ``beta``), ``L``,
    ``r``, ``a`` (or ``alpha``), each optionally followed by a count such as
    ``a2``, ``α²`` or ``alpha^{N-1}``.
    """
    key = name.strip().lower().replace("-convex", "c").replace("_", "-")
    if key in PRESETS:
        return PRESETS[key]
    m = re.fullmatch(r"ia(\d+|n)(?:-(.+))?", key)
    if not m:
        raise ApproximationError(f"unknown method {name!r}")
    budget = None if m.group(1) == "n" else int(m.group(1))
    counts = {"b": 0, "l": 0, "r": 0, "a": 0}
    rest = m.group(2) or ""
    pos = 0
    while pos < len(rest):
        t = _TOKEN.match(rest, pos)
        if not t or t.end() == pos:
            raise ApproximationError(f"bad term list in method {name!r}")
        sym = {"beta": "b", "β": "b", "alpha": "a", "α": "a"}.get(t.group(1), t.group(1))
        exp = t.group(2) or {"²": "2", "³": "3"}.get(t.group(3) or "", "1")
        if exp == "n-1":
            if sym != "a":
                raise ApproximationError("only alpha terms may take the N-1 exponent")
            counts[sym] = -1
        else:
            counts[sym] = counts[sym] + int(exp) if counts[sym] >= 0 else -1
        pos = t.end()
    if counts["b"] > 1 or counts["l"] > 1:
        raise ApproximationError("beta and L terms may appear at most once")
    kind = MethodKind(key, budget=budget, beta=bool(counts["b"]), quad=bool(counts["l"]),
                      refs=counts["r"], alphas=counts["a"])
    if counts["a"] < 0 and budget is not None:
        raise ApproximationError("alpha^{N-1} needs degree budget N")
    if budget is not None:
        deg = 1 + 2 * kind.refs + kind.alphas + int(kind.quad)
        if deg > budget:
            raise ApproximationError(f"method {name!r} needs degree {deg} > budget {budget}")
    return kind


@dataclass(frozen=True)
class ApproximationSpec:
    """Method plus reference-line configuration for one (tone, user) slot.

    References are resolved in the order ``q, t, fallback`` and then the
    remaining users ascending, skipping the user being updated.
    """

    kind: MethodKind
    q: int = 0
    t: int = 1
    fallback: int = 2
    theta: Optional[float] = None
    strict: bool = False
    tuning: str = "default"

    @classmethod
    def of(cls, method, **kw) -> "ApproximationSpec":
        if isinstance(method, ApproximationSpec):
            return replace(method, **kw) if kw else method
        kind = method if isinstance(method, MethodKind) else parse_method(method)
        return cls(kind, **kw)

    def resolve_references(self, n: int, num_users: int) -> list:
        need = self.kind.reference_count(num_users)
        order = [self.q, self.t, self.fallback] + list(range(num_users))
        refs = []
        for r in order:
            if len(refs) == need:
                break
            if 0 <= r < num_users and r != n and r not in refs:
                refs.append(r)
        if len(refs) < need and self.strict:
            raise ApproximationError(
                f"cannot resolve {need} reference lines distinct from user {n} among {num_users} users")
        return refs


# --------------------------------------------------------------------------
# closed-form parameters (scalar helpers mirror the vectorized builder)

def alpha_param(ch: Channel, s_k, k: int, m: int) -> float:
    """``s_k^m / rec_k^m`` at the build point."""
    s_k = np.asarray(s_k, dtype=float)
    intf = ch.gains[k, m] @ s_k + ch.noise[k, m]
    return float(s_k[m] / (s_k[m] + intf))


def cadsb_b_param(ch: Channel, s_k, k: int, n: int) -> float:
    """``sum_{m != n} w_m a_k^{m,n} / int_k^m`` at the build point."""
    s_k = np.asarray(s_k, dtype=float)
    intf = ch.gains[k] @ s_k + ch.noise[k]
    others = [m for m in range(ch.num_users) if m != n]
    return float(np.sum(ch.weights[others] * ch.gains[k, others, n] / intf[others]))


def scale_c_param(ch: Channel, s_k, k: int, m: int) -> float:
    """Constant making ``-w log(1+r) <= -w alpha log r + c`` tight at the build point."""
    s_k = np.asarray(s_k, dtype=float)
    if s_k[m] == 0:
        return 0.0
    w = ch.weights[m]
    intf = ch.gains[k, m] @ s_k + ch.noise[k, m]
    r = s_k[m] / intf
    alpha = s_k[m] / (s_k[m] + intf)
    return float(-w * math.log1p(r) + w * alpha * math.log(r))


def _curvature(tp: TonePoint, x, cols) -> np.ndarray:
    """``sum_m w_m a^2 s_m (s_m + 2 int_m) / (rec_m int_m)^2`` over the given columns."""
    if len(cols) == 0:
        return np.zeros(len(tp.tones))
    a = tp.a_mn[:, cols]
    s = tp.s_m[:, cols]
    i = tp.base_int[:, cols] + a * np.asarray(x, dtype=float)[:, None]
    return np.sum(tp.w_m[cols] * a**2 * s * (s + 2 * i) / ((s + i) * i) ** 2, axis=1)


def _alpha_curvature(tp: TonePoint, x, alpha, cols) -> np.ndarray:
    """``sum_p w_p alpha_p a^2 / int_p^2`` over the given columns."""
    if len(cols) == 0:
        return np.zeros(len(tp.tones))
    a = tp.a_mn[:, cols]
    i = tp.base_int[:, cols] + a * np.asarray(x, dtype=float)[:, None]
    return np.sum(tp.w_m[cols] * alpha[:, cols] * a**2 / i**2, axis=1)


def _tuning(kind: MethodKind, tp: TonePoint, alpha, ref_cols, alpha_cols, mode: str):
    """Return ``(beta, L)`` arrays for the ``ia`` family."""
    T = len(tp.tones)
    zero = np.zeros(T)
    if not (kind.beta or kind.quad):
        return zero, zero
    mask = tp.masks
    I = tp.own_int
    used = set(ref_cols) | set(alpha_cols)
    rest = [j for j in range(len(tp.others)) if j not in used]
    every = list(range(len(tp.others)))
    w_safe = _curvature(tp, mask, rest)
    beta, L = zero, zero
    if kind.name == "iasb2":
        L = _curvature(tp, mask, every) / 2
    elif kind.name == "iasb2c":
        L = np.minimum(tp.w_n / (2 * (mask + I) ** 2), _curvature(tp, mask, every) / 2)
    elif kind.name == "iasb6":
        beta = I**2 * _curvature(tp, mask, every) / tp.w_n
    elif kind.name == "iasb7":
        beta = I**2 * w_safe / tp.w_n
    elif kind.name == "iasb8":
        raw = I**2 * (_curvature(tp, mask, every) - _alpha_curvature(tp, mask, alpha, alpha_cols)) / tp.w_n
        beta = np.maximum(raw, 0.0)
        if mode == "safe":
            beta = np.minimum(beta, I**2 * w_safe / tp.w_n)
    elif kind.name == "iasb9":
        raw = (_curvature(tp, mask, every) - _alpha_curvature(tp, mask, alpha, alpha_cols)) / 2
        L = np.maximum(raw, 0.0)
        if mode == "safe":
            L = np.minimum(L, w_safe / 2)
    else:
        # generalized recipe: share the remaining curvature between beta and L
        share = 0.5 if (kind.beta and kind.quad) else 1.0
        if kind.beta:
            beta = share * I**2 * w_safe / tp.w_n
        if kind.quad:
            L = share * w_safe / 2
    return np.minimum(beta, 1.0), L


def _f2_slope(kind, tp: TonePoint, x0, beta, alpha, exact_cols, gap_cols):
    """Slope of ``f2 = f - f1`` at the build point, summed term by term.

    Differencing ``f'`` and ``f1'`` loses digits when interference is tiny,
    so each remainder term is differentiated in simplified form.
    """
    a, sm = tp.a_mn, tp.s_m
    intm = tp.base_int + a * x0[:, None]
    rec = sm + intm
    w = tp.w_m
    if kind.family == "cadsb":
        return np.sum(w * a / intm, axis=1) if len(tp.others) else np.zeros_like(x0)
    # SCALE's own log bound is tangent at x~ (alpha_n = x~/(x~+I)), so its remainder has no slope
    slope = np.zeros_like(x0) if kind.family == "scale" else -beta * tp.w_n / (x0 + tp.own_int)
    if exact_cols:
        c = exact_cols
        slope = slope + np.sum(w[c] * a[:, c] * sm[:, c] / (rec[:, c] * intm[:, c]), axis=1)
    if gap_cols:
        c = gap_cols
        slope = slope + np.sum(w[c] * a[:, c] / intm[:, c] * (sm[:, c] / rec[:, c] - alpha[:, c]), axis=1)
    return slope


def tuning_param(kind, ch: Channel, s_k, k: int, n: int, spec: Optional[ApproximationSpec] = None) -> dict:
    """Closed-form tuning value ``{"beta": .., "L": ..}`` for one tone."""
    spec = ApproximationSpec.of(kind) if spec is None else spec
    s = np.zeros((ch.num_tones, ch.num_users))
    s[k] = s_k
    app = build(spec, ch, s, n, tones=[k])
    return {"beta": float(app.params["beta"][0]), "L": float(app.params["L"][0])}


# --------------------------------------------------------------------------
# built surrogate

@dataclass(frozen=True, eq=False)
class Approximation:
    """Surrogate ``f_app(x) = f1(x) + d x + e`` for user ``n`` on a set of tones."""

    kind: MethodKind
    n: int
    tones: np.ndarray
    x_tilde: np.ndarray  # (T,)
    masks: np.ndarray  # (T,)
    coef: np.ndarray  # (T, J)
    u: np.ndarray  # (T, J)
    v: np.ndarray  # (T, J)
    L: np.ndarray  # (T,)
    d: np.ndarray  # (T,)
    e: np.ndarray  # (T,)
    degree: int
    references: tuple = ()
    params: dict = field(default_factory=dict)

    @property
    def closed_form(self) -> bool:
        return self.degree <= 3

    def _x(self, x):
        x = np.asarray(x, dtype=float)
        extra = x.ndim - 1
        sh = lambda arr: arr.reshape(arr.shape[:1] + (1,) * extra + arr.shape[1:])
        return x, sh

    def f1(self, x):
        x, sh = self._x(x)
        arg = sh(self.u) + sh(self.v) * x[..., None]
        c = sh(self.coef)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(c != 0, c * np.log(arg), 0.0)
        return logs.sum(axis=-1) - sh(self.L[:, None])[..., 0] * (x - sh(self.x_tilde[:, None])[..., 0]) ** 2

    def f1_prime(self, x):
        x, sh = self._x(x)
        arg = sh(self.u) + sh(self.v) * x[..., None]
        c = sh(self.coef)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(c != 0, c * sh(self.v) / arg, 0.0)
        return terms.sum(axis=-1) - 2 * sh(self.L[:, None])[..., 0] * (x - sh(self.x_tilde[:, None])[..., 0])

    def f1_second(self, x):
        x, sh = self._x(x)
        arg = sh(self.u) + sh(self.v) * x[..., None]
        c = sh(self.coef)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(c != 0, -c * sh(self.v) ** 2 / arg**2, 0.0)
        return terms.sum(axis=-1) - 2 * sh(self.L[:, None])[..., 0]

    def value(self, x):
        x, sh = self._x(x)
        col = lambda a: sh(a[:, None])[..., 0]
        return self.f1(x) + col(self.d) * x + col(self.e)

    def derivative(self, x):
        x, sh = self._x(x)
        return self.f1_prime(x) + sh(self.d[:, None])[..., 0]

    def second_derivative(self, x):
        return self.f1_second(x)

    def rational(self):
        """Coefficients of ``f1' = num / den`` per tone, highest power first.

        ``den`` is the product of every log factor, ``num`` has the same
        degree plus one when a quadratic term is present.
        """
        T, J = self.coef.shape
        den = np.ones((T, 1))
        for j in range(J):
            den = _polymul(den, np.stack([self.v[:, j], self.u[:, j]], axis=1))
        num = np.zeros((T, J + 1))
        for j in range(J):
            part = np.ones((T, 1))
            for i in range(J):
                if i != j:
                    part = _polymul(part, np.stack([self.v[:, i], self.u[:, i]], axis=1))
            num = _polyadd(num, (self.coef[:, j] * self.v[:, j])[:, None] * part)
        if np.any(self.L != 0):
            lin = np.stack([-2 * self.L, 2 * self.L * self.x_tilde], axis=1)
            num = _polyadd(num, _polymul(lin, den))
        return _trim_cols(num, self.degree + 1), _trim_cols(den, self.degree + 1)

    @property
    def p(self) -> np.ndarray:
        """``p1..p8`` per tone (numerator then denominator, cubic first)."""
        if self.degree > 3:
            raise ApproximationError("p1..p8 only describe rational functions of degree <= 3")
        num, den = self.rational()
        return np.concatenate([_pad_cols(num, 4), _pad_cols(den, 4)], axis=1)

    def stationarity(self, lam) -> np.ndarray:
        """Coefficients of ``num + (lam + d) den``, highest power first."""
        num, den = self.rational()
        lam = np.broadcast_to(np.asarray(lam, dtype=float), self.d.shape)
        D = max(num.shape[1], den.shape[1])
        return _pad_cols(num, D) + (lam + self.d)[:, None] * _pad_cols(den, D)

    def subset(self, idx) -> "Approximation":
        idx = np.asarray(idx)
        pick = lambda a: a[idx]
        params = {k: (v[idx] if isinstance(v, np.ndarray) and v.shape[:1] == self.d.shape else v)
                  for k, v in self.params.items()}
        return replace(self, tones=pick(self.tones), x_tilde=pick(self.x_tilde), masks=pick(self.masks),
                       coef=pick(self.coef), u=pick(self.u), v=pick(self.v), L=pick(self.L),
                       d=pick(self.d), e=pick(self.e), params=params)


def _polymul(a, b):
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[1]):
        out[:, i:i + b.shape[1]] += a[:, [i]] * b
    return out


def _pad_cols(a, width):
    if a.shape[1] >= width:
        return a[:, a.shape[1] - width:]
    return np.concatenate([np.zeros((a.shape[0], width - a.shape[1])), a], axis=1)


def _polyadd(a, b):
    w = max(a.shape[1], b.shape[1])
    return _pad_cols(a, w) + _pad_cols(b, w)


def _trim_cols(a, width):
    """Drop leading columns beyond ``width`` (they are structurally zero)."""
    return _pad_cols(a, max(width, 1)) if a.shape[1] > width else a


# --------------------------------------------------------------------------
# builder

def build(spec, ch: Channel, s, n: int, tones=None, *, d_offset: float = 0.0) -> Approximation:
    """Build the surrogate of ``spec`` for user ``n`` at allocation ``s``.

    ``s`` is the full ``(K, N)`` allocation (the build point), ``tones``
    optionally restricts to a subset.  ``d_offset`` perturbs the
    linearization slope; it exists only to exercise failure reporting.
    """
    spec = ApproximationSpec.of(spec)
    kind = spec.kind
    tp = TonePoint.build(ch, s, n, tones)
    N = ch.num_users
    T = len(tp.tones)
    x0 = np.asarray(s, dtype=float)[tp.tones, n]
    I = tp.own_int
    a, sm, base = tp.a_mn, tp.s_m, tp.base_int
    intm = base + a * x0[:, None]
    rec = sm + intm
    alpha = sm / rec
    with np.errstate(divide="ignore", invalid="ignore"):
        cvals = np.where(sm > 0, -tp.w_m * np.log1p(sm / intm) + tp.w_m * alpha * np.log(sm / intm), 0.0)
    col_of = {int(m): j for j, m in enumerate(tp.others)}

    coef, uu, vv = [], [], []

    def add(c, u_, v_):
        coef.append(np.broadcast_to(np.asarray(c, dtype=float), (T,)))
        uu.append(np.broadcast_to(np.asarray(u_, dtype=float), (T,)))
        vv.append(np.broadcast_to(np.asarray(v_, dtype=float), (T,)))

    params = {"alpha": alpha, "c": cvals}
    beta = np.zeros(T)
    L = np.zeros(T)
    refs: list = []
    exact_cols: list = []
    gap_cols: list = []
    if kind.family == "cadsb":
        add(-tp.w_n, I, 1.0)
        for j in range(len(tp.others)):
            add(-tp.w_m[j], sm[:, j] + base[:, j], a[:, j])
        params["b"] = np.sum(tp.w_m * a / intm, axis=1) if len(tp.others) else np.zeros(T)
    elif kind.family == "scale":
        # the own log bound degenerates at zero power; build just above it
        lifted = x0 <= 0
        x0 = np.where(lifted, np.minimum(np.minimum(SCALE_LIFT_MW, 1e-3 * I), tp.masks), x0)
        intm = base + a * x0[:, None]
        rec = sm + intm
        alpha = sm / rec
        params["alpha"] = alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            params["c"] = np.where(sm > 0, -tp.w_m * np.log1p(sm / intm) + tp.w_m * alpha * np.log(sm / intm), 0.0)
        params["lifted"] = lifted
        alpha_n = x0 / (x0 + I)
        add(-tp.w_n * alpha_n, 0.0, 1.0)
        for j in range(len(tp.others)):
            add(tp.w_m[j] * alpha[:, j], base[:, j], a[:, j])
        params["alpha_n"] = alpha_n
        gap_cols = list(range(len(tp.others)))
        with np.errstate(divide="ignore", invalid="ignore"):
            params["c_n"] = np.where(x0 > 0, -tp.w_n * np.log1p(x0 / I) + tp.w_n * alpha_n * np.log(x0 / I), 0.0)
    else:
        refs = spec.resolve_references(n, N)
        ref_cols = [col_of[r] for r in refs[:kind.refs]]
        alpha_cols = [col_of[r] for r in refs[kind.refs:]]
        if spec.theta is not None:
            if kind.beta:
                beta = np.full(T, float(spec.theta))
            elif kind.quad:
                L = np.full(T, float(spec.theta))
        else:
            beta, L = _tuning(kind, tp, alpha, ref_cols, alpha_cols, spec.tuning)
        add(-tp.w_n * (1.0 - beta), I, 1.0)
        for j in ref_cols:
            add(-tp.w_m[j], sm[:, j] + base[:, j], a[:, j])
            add(tp.w_m[j], base[:, j], a[:, j])
        for j in alpha_cols:
            add(tp.w_m[j] * alpha[:, j], base[:, j], a[:, j])
        params["beta"] = beta
        params["L"] = L
        gap_cols = alpha_cols
        exact_cols = [j for j in range(len(tp.others)) if j not in ref_cols and j not in alpha_cols]
    params.setdefault("beta", beta)
    params.setdefault("L", L)

    C = np.stack(coef, axis=1)
    U = np.stack(uu, axis=1)
    V = np.stack(vv, axis=1)
    degree = C.shape[1] + int(kind.quad)
    proto = Approximation(kind=kind, n=n, tones=tp.tones, x_tilde=x0, masks=tp.masks, coef=C, u=U, v=V,
                          L=L, d=np.zeros(T), e=np.zeros(T), degree=degree, references=tuple(refs),
                          params=params)
    f, _, _ = tp.derivatives(x0)
    d = _f2_slope(kind, tp, x0, beta, alpha, exact_cols, gap_cols) + d_offset
    e = f - proto.f1(x0) - d * x0
    return replace(proto, d=d, e=e)
