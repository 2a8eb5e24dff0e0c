"""True nonconvex objective, rates, and the per-user univariate restriction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .channel import Channel

SYMBOL_RATE_HZ = 4000.0


def interference(ch: Channel, s: np.ndarray, k=None, n=None):
    """Interference plus noise ``sum_{m != n} a[k,n,m] s[k,m] + z[k,n]``.

    With ``k`` and ``n`` omitted the full ``(K, N)`` array is returned.
    """
    s = np.asarray(s, dtype=float)
    if k is None and n is None:
        return np.einsum("knm,km->kn", ch.gains, s) + ch.noise
    return float(ch.gains[k, n] @ s[k] + ch.noise[k, n])


def received(ch: Channel, s: np.ndarray) -> np.ndarray:
    return np.asarray(s, dtype=float) + interference(ch, s)


def per_tone_objective(ch: Channel, s_k, k: int) -> float:
    """``f_k(s_k) = -sum_n w_n log(1 + s_k^n / int_k^n)`` in nats."""
    s_k = np.asarray(s_k, dtype=float)
    intf = ch.gains[k] @ s_k + ch.noise[k]
    return float(-np.sum(ch.weights * np.log1p(s_k / intf)))


def tone_objectives(ch: Channel, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return -np.sum(ch.weights[None, :] * np.log1p(s / interference(ch, s)), axis=1)


def total_objective(ch: Channel, s: np.ndarray) -> float:
    return float(np.sum(tone_objectives(ch, s)))


class Rates(NamedTuple):
    bitloading: np.ndarray  # (K, N) bits per symbol
    rates: np.ndarray  # (N,) bits per second


def rates(ch: Channel, s: np.ndarray, symbol_rate: float = SYMBOL_RATE_HZ) -> Rates:
    s = np.asarray(s, dtype=float)
    b = np.log2(1.0 + s / interference(ch, s))
    return Rates(b, symbol_rate * b.sum(axis=0))


@dataclass(frozen=True)
class TonePoint:
    """Restriction of ``f_k`` to user ``n``'s power on a set of tones.

    Other users' powers are frozen.  Arrays are indexed by position in
    ``tones``; per-interferer arrays have one column per ``m != n``.
    Evaluators accept ``x`` of shape ``(T,)`` or ``(T, G)``.
    """

    n: int
    tones: np.ndarray
    w_n: float
    own_int: np.ndarray  # (T,) int_k^n, independent of x
    others: np.ndarray  # (M,) user indices m != n
    w_m: np.ndarray  # (M,)
    s_m: np.ndarray  # (T, M) frozen powers of the others
    base_int: np.ndarray  # (T, M) int_k^m with s_k^n removed
    a_mn: np.ndarray  # (T, M) coupling from n into m
    masks: np.ndarray  # (T,)

    @classmethod
    def build(cls, ch: Channel, s: np.ndarray, n: int, tones=None) -> "TonePoint":
        s = np.asarray(s, dtype=float)
        tones = np.arange(ch.num_tones) if tones is None else np.atleast_1d(np.asarray(tones, dtype=int))
        others = np.array([m for m in range(ch.num_users) if m != n], dtype=int)
        sk = s[tones]
        g = ch.gains[tones]
        intf = np.einsum("tnm,tm->tn", g, sk) + ch.noise[tones]
        a_mn = g[:, others, n]
        base_int = intf[:, others] - a_mn * sk[:, [n]]
        return cls(
            n=n,
            tones=tones,
            w_n=float(ch.weights[n]),
            own_int=intf[:, n],
            others=others,
            w_m=ch.weights[others],
            s_m=sk[:, others],
            base_int=base_int,
            a_mn=a_mn,
            masks=ch.masks[tones, n],
        )

    def _expand(self, x):
        x = np.asarray(x, dtype=float)
        extra = x.ndim - 1
        shape = lambda arr: arr.reshape(arr.shape[:1] + (1,) * extra + arr.shape[1:])
        return x, shape

    def interferer_int(self, x):
        """``int_k^m`` for every ``m != n`` as a function of ``x = s_k^n``; shape ``x.shape + (M,)``."""
        x, sh = self._expand(x)
        return sh(self.base_int) + sh(self.a_mn) * x[..., None]

    def value(self, x):
        x, sh = self._expand(x)
        I = sh(self.own_int[:, None])[..., 0]
        own = -self.w_n * np.log1p(x / I)
        if self.others.size == 0:
            return own
        intm = sh(self.base_int) + sh(self.a_mn) * x[..., None]
        return own - np.sum(self.w_m * np.log1p(sh(self.s_m) / intm), axis=-1)

    def derivatives(self, x):
        """Value, first and second derivative of the restriction at ``x``."""
        x, sh = self._expand(x)
        I = sh(self.own_int[:, None])[..., 0]
        f = -self.w_n * np.log1p(x / I)
        d1 = -self.w_n / (x + I)
        d2 = self.w_n / (x + I) ** 2
        if self.others.size:
            sm, a = sh(self.s_m), sh(self.a_mn)
            intm = sh(self.base_int) + a * x[..., None]
            rec = sm + intm
            f = f - np.sum(self.w_m * np.log1p(sm / intm), axis=-1)
            d1 = d1 + np.sum(self.w_m * a * sm / (rec * intm), axis=-1)
            d2 = d2 - np.sum(self.w_m * a**2 * sm * (sm + 2 * intm) / (rec * intm) ** 2, axis=-1)
        return f, d1, d2


def restriction_derivatives(tp: TonePoint, x):
    """``(f, f', f'')`` of the per-user univariate restriction at ``x``."""
    return tp.derivatives(x)
