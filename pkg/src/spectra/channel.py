"""Static problem data for the multi-user multi-carrier interference channel.

All arithmetic uses linear mW; dBm only appears at the file boundary.
Array layout is tone-major: ``gains[k, n, m]`` is the normalized coupling
from transmitter ``m`` into receiver ``n`` on tone ``k`` (zero diagonal),
``noise[k, n]`` and ``masks[k, n]`` are per tone per user.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCENARIO_VERSION = 1

# Values used by the DSL experiments; only the budget/mask/weights enter the math.
DSL_PRESET = {
    "mask_dbm": 20.4,
    "budget_dbm": 20.4,
    "snr_gap_db": 12.9,
    "tone_spacing_hz": 4312.5,
    "symbol_rate_hz": 4000.0,
}


class ScenarioError(ValueError):
    """Raised when a scenario file cannot be parsed or violates an invariant."""


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(mw, dtype=float))


@dataclass(frozen=True, eq=False)
class Channel:
    gains: np.ndarray
    noise: np.ndarray
    masks: np.ndarray
    budgets: np.ndarray
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        gains = np.array(self.gains, dtype=float)
        noise = np.array(self.noise, dtype=float)
        K, N = noise.shape if noise.ndim == 2 else (None, None)
        if K is None:
            raise ScenarioError("noise must be a (num_tones, num_users) array")
        if gains.shape != (K, N, N):
            raise ScenarioError(f"gains must have shape {(K, N, N)}, got {gains.shape}")
        masks = np.broadcast_to(np.asarray(self.masks, dtype=float), (K, N)).copy()
        budgets = np.broadcast_to(np.asarray(self.budgets, dtype=float), (N,)).copy()
        weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (N,)).copy()

        diag = gains[:, np.arange(N), np.arange(N)]
        if np.any(diag != 0.0):
            raise ScenarioError("gains: diagonal (direct) entries must be zero")
        _require(np.all(np.isfinite(gains)) and np.all(gains >= 0), "gains must be finite and nonnegative")
        _require(np.all(np.isfinite(noise)) and np.all(noise > 0), "noise must be strictly positive")
        _require(np.all(np.isfinite(masks)) and np.all(masks > 0), "masks must be strictly positive")
        _require(np.all(np.isfinite(budgets)) and np.all(budgets > 0), "budgets must be strictly positive")
        _require(np.all(np.isfinite(weights)) and np.all(weights > 0), "weights must be strictly positive")

        for name, arr in (("gains", gains), ("noise", noise), ("masks", masks),
                          ("budgets", budgets), ("weights", weights)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_tones(self) -> int:
        return self.noise.shape[0]

    @property
    def num_users(self) -> int:
        return self.noise.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Channel):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("gains", "noise", "masks", "budgets", "weights")
        )

    def check_allocation(self, powers: np.ndarray, atol: float = 0.0) -> None:
        """Raise ``ValueError`` unless ``0 <= powers <= masks`` elementwise."""
        powers = np.asarray(powers)
        if powers.shape != self.noise.shape:
            raise ValueError(f"allocation shape {powers.shape} != {self.noise.shape}")
        if np.any(powers < -atol) or np.any(powers > self.masks + atol):
            raise ValueError("allocation outside [0, mask]")

    def with_weights(self, weights) -> "Channel":
        return Channel(self.gains, self.noise, self.masks, self.budgets, weights, dict(self.metadata))

    def subset_users(self, users) -> "Channel":
        users = list(users)
        idx = np.ix_(range(self.num_tones), users, users)
        return Channel(self.gains[idx], self.noise[:, users], self.masks[:, users],
                       self.budgets[users], self.weights[users], dict(self.metadata))


def _require(ok, message):
    if not ok:
        raise ScenarioError(message)


def zero_allocation(ch: Channel) -> np.ndarray:
    return np.zeros_like(ch.noise)


# ---------------------------------------------------------------------------
# scenario files


def _field_array(doc, base, shape, *, required=True):
    """Read ``base_mw`` or ``base_dbm`` (scalar, per-user list or [k][n]) as mW."""
    has_mw, has_dbm = f"{base}_mw" in doc, f"{base}_dbm" in doc
    if has_mw and has_dbm:
        raise ScenarioError(f"{base}: give either {base}_mw or {base}_dbm, not both")
    if not (has_mw or has_dbm):
        if required:
            raise ScenarioError(f"missing field {base}_dbm")
        return None
    key = f"{base}_mw" if has_mw else f"{base}_dbm"
    try:
        arr = np.asarray(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{key}: not numeric ({exc})") from None
    try:
        arr = np.broadcast_to(arr, shape).copy()
    except ValueError:
        raise ScenarioError(f"{key}: shape {arr.shape} does not broadcast to {shape}") from None
    return arr if has_mw else dbm_to_mw(arr)


def channel_from_dict(doc: dict) -> Channel:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    version = doc.get("version", SCENARIO_VERSION)
    if version != SCENARIO_VERSION:
        raise ScenarioError(f"version: unsupported scenario version {version!r}")
    try:
        N = int(doc["num_users"])
        K = int(doc["num_tones"])
    except KeyError as exc:
        raise ScenarioError(f"missing field {exc.args[0]}") from None
    if N < 1 or K < 1:
        raise ScenarioError("num_users and num_tones must be >= 1")

    weights = np.broadcast_to(np.asarray(doc.get("weights", 1.0), dtype=float), (N,)).copy()
    budgets = _field_array(doc, "budgets", (N,))
    masks = _field_array(doc, "masks", (K, N))
    noise = _field_array(doc, "noise", (K, N))

    gains = np.zeros((K, N, N))
    for i, entry in enumerate(doc.get("gains", [])):
        try:
            k, n, m, value = int(entry["k"]), int(entry["n"]), int(entry["m"]), float(entry["value"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"gains[{i}]: malformed entry ({exc})") from None
        if not (0 <= k < K and 0 <= n < N and 0 <= m < N):
            raise ScenarioError(f"gains[{i}]: index out of range (k={k}, n={n}, m={m})")
        if n == m:
            raise ScenarioError(f"gains[{i}]: direct gain n == m is not allowed")
        gains[k, n, m] = value
    return Channel(gains, noise, masks, budgets, weights, dict(doc.get("metadata", {})))


def channel_to_dict(ch: Channel) -> dict:
    K, N = ch.num_tones, ch.num_users
    gains = [
        {"k": k, "n": n, "m": m, "value": float(ch.gains[k, n, m])}
        for k in range(K) for n in range(N) for m in range(N) if n != m
    ]
    return {
        "version": SCENARIO_VERSION,
        "num_users": N,
        "num_tones": K,
        "weights": ch.weights.tolist(),
        "budgets_mw": ch.budgets.tolist(),
        "masks_mw": ch.masks.tolist(),
        "noise_mw": ch.noise.tolist(),
        "gains": gains,
        "metadata": ch.metadata,
    }


def load_scenario(path) -> Channel:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return channel_from_dict(doc)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def save_scenario(ch: Channel, path) -> None:
    # mW floats are written with repr precision so the round trip is exact.
    Path(path).write_text(json.dumps(channel_to_dict(ch), indent=1))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthesisParams:
    """Knobs for :func:`generate_synthetic`.

    ``coupling_db`` is the range of direct-to-crosstalk ratios: a pair with
    ratio ``r`` dB gets a base normalized gain ``10**(-r/10)``.  The noise
    floor rises by up to ``noise_tilt_db`` towards high tones (longer lines
    get a steeper tilt), and crosstalk rises by ``high_tone_boost_db``.
    """

    num_users: int
    num_tones: int
    coupling_db: tuple = (25.0, 50.0)
    noise_dbm: float = -50.0
    noise_tilt_db: float = 30.0
    mask_dbm: float = 0.0
    budget_dbm: float = 12.0
    high_tone_boost_db: float = 10.0
    profile_db: float = 3.0
    snr_gap_db: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 1 or self.num_tones < 1:
            raise ValueError("num_users and num_tones must be >= 1")
        lo, hi = self.coupling_db
        if not (0.0 < lo <= hi):
            raise ValueError("coupling_db must satisfy 0 < lo <= hi (crosstalk weaker than direct)")
        if self.noise_tilt_db < 0 or self.high_tone_boost_db < 0 or self.profile_db < 0:
            raise ValueError("tilts and profiles must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def generate_synthetic(p: SynthesisParams) -> Channel:
    """Seeded frequency-correlated crosstalk channel standing in for a cable simulator."""
    p.validate()
    rng = np.random.default_rng(p.seed)
    N, K = p.num_users, p.num_tones
    t = np.linspace(0.0, 1.0, K) if K > 1 else np.zeros(1)

    lo, hi = p.coupling_db
    ratio_db = rng.uniform(lo, hi, size=(N, N))
    # smooth per-pair tone profile: low order polynomial in normalized tone index
    c1 = rng.normal(0.0, p.profile_db, size=(N, N))
    c2 = rng.normal(0.0, p.profile_db, size=(N, N))
    profile = c1[None] * (t[:, None, None] - 0.5) + c2[None] * (t[:, None, None] ** 2 - 1.0 / 3.0)
    gain_db = -ratio_db[None] + profile + p.high_tone_boost_db * t[:, None, None]
    # keep every coupling strictly below the direct path
    gain_db = np.minimum(gain_db, -0.1)
    gains = dbm_to_mw(gain_db)
    gains[:, np.arange(N), np.arange(N)] = 0.0

    slope = rng.uniform(0.25, 1.0, size=N) * p.noise_tilt_db
    noise_db = p.noise_dbm + p.snr_gap_db + slope[None, :] * t[:, None]
    noise = dbm_to_mw(noise_db)

    meta = {"generator": "synthetic", "seed": int(p.seed), "snr_gap_db": p.snr_gap_db}
    return Channel(gains, noise, dbm_to_mw(p.mask_dbm), dbm_to_mw(p.budget_dbm),
                   np.full(N, 1.0 / N), meta)


def uniform_allocation(ch: Channel) -> np.ndarray:
    """Budget spread flat over tones, clipped to the mask."""
    flat = ch.budgets[None, :] / ch.num_tones
    return np.minimum(flat, ch.masks)


def db_close(a, b, tol_db: float, floor_mw: float) -> np.ndarray:
    """Elementwise ``|dBm(a) - dBm(b)| <= tol_db`` with powers below ``floor_mw`` treated as the floor."""
    a = np.maximum(np.asarray(a, dtype=float), floor_mw)
    b = np.maximum(np.asarray(b, dtype=float), floor_mw)
    return np.abs(10.0 * np.log10(a / b)) <= tol_db


POWER_FLOOR_DBM = -80.0
POWER_FLOOR_MW = 10.0 ** (POWER_FLOOR_DBM / 10.0)
