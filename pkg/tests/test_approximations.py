import math

import numpy as np
import pytest

import naive
from spectra.approximations import (NAMED_KINDS, PRESETS, TABLE_DEGREES, ApproximationError, ApproximationSpec,
                                    alpha_param, build, cadsb_b_param, parse_method, scale_c_param, tuning_param)
from spectra.channel import Channel
from spectra.driver import escape_channel
from spectra.objective import TonePoint, interference
from spectra.oracle import check_conditions, fd_slope, random_instance, uniform_grid, verify_lemma_order
from conftest import small_channel

ALL_KINDS = NAMED_KINDS + ("iasb2c",)


# -- scalar parameters -------------------------------------------------------

def test_alpha_zero_and_half():
    ch = small_channel(N=3, K=1)
    s = np.array([0.0, 0.4, 0.2])
    assert alpha_param(ch, s, 0, 0) == 0.0
    intf = interference(ch, s[None, :], 0, 1)
    s[1] = intf
    assert alpha_param(ch, s, 0, 1) == pytest.approx(0.5, rel=1e-15)


def test_alpha_matches_ratio():
    for i in range(10):
        ch, s, _ = random_instance(21, i)
        for m in range(ch.num_users):
            ref = s[0, m] / (s[0, m] + naive.interference(ch, s, 0, m))
            assert alpha_param(ch, s[0], 0, m) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_cadsb_b_zero_gains_and_two_user():
    ch = Channel(np.zeros((1, 2, 2)), [[0.1, 0.2]], 1.0, 1.0, 1.0)
    assert cadsb_b_param(ch, [0.5, 0.5], 0, 0) == 0.0
    G = np.zeros((1, 2, 2))
    G[0, 1, 0] = 0.1  # user 1 into user 2
    ch = Channel(G, [[0.3, 1.0]], 1.0, 1.0, [1.0, 1.0])
    assert cadsb_b_param(ch, [0.0, 0.5], 0, 0) == pytest.approx(0.1, rel=1e-15)


def test_cadsb_b_six_user_sum():
    ch = small_channel(seed=8, N=6, K=2)
    s = np.random.default_rng(0).uniform(0, 1, (2, 6))
    for n in range(6):
        ref = sum(ch.weights[m] * ch.gains[1, m, n] / naive.interference(ch, s, 1, m) for m in range(6) if m != n)
        assert cadsb_b_param(ch, s[1], 1, n) == pytest.approx(ref, rel=1e-13)


def test_scale_c_examples_and_bound():
    ch = Channel(np.zeros((1, 2, 2)), [[0.2, 0.5]], 1.0, 1.0, [0.7, 1.3])
    assert scale_c_param(ch, [0.0, 0.4], 0, 0) == 0.0
    c = scale_c_param(ch, [0.2, 0.4], 0, 0)  # s = int
    assert c == pytest.approx(-0.7 * math.log(2), rel=1e-15)
    # bound -w log(1+r) <= -w alpha log r + c, tight only at the build ratio
    rt = 0.37 / 0.2
    c = scale_c_param(ch, [0.37, 0.4], 0, 0)
    alpha = rt / (1 + rt)
    r = np.linspace(0.01, 20, 256)
    gap = (-0.7 * alpha * np.log(r) + c) - (-0.7 * np.log1p(r))
    assert gap.min() >= -1e-14
    assert abs(-0.7 * alpha * math.log(rt) + c + 0.7 * math.log1p(rt)) <= 1e-14
    far = np.abs(r - rt) > 0.1
    assert np.all(gap[far] > 0)


# -- tuning ------------------------------------------------------------------

def test_iasb2_zero_gains_gives_zero_L():
    ch = Channel(np.zeros((1, 3, 3)), [[0.1, 0.2, 0.3]], 1.0, 1.0, 1.0)
    assert tuning_param("iasb2", ch, [0.1, 0.2, 0.3], 0, 1)["L"] == 0.0


def test_iasb2_convex_takes_smaller_branch():
    ch = small_channel(seed=4, N=3, K=1, gain_range=(-1, -0.2), noise_range=(-2, -1))
    s = np.array([0.5, 0.4, 0.6])
    L2 = tuning_param("iasb2", ch, s, 0, 0)["L"]
    L2c = tuning_param("iasb2c", ch, s, 0, 0)["L"]
    own = ch.weights[0] / (2 * (ch.masks[0, 0] + naive.interference(ch, s[None], 0, 0)) ** 2)
    assert L2c == pytest.approx(min(own, L2), rel=1e-13)
    assert L2c <= L2


def test_iasb6_remainder_is_concave():
    G = np.zeros((1, 2, 2))
    G[0, 0, 1], G[0, 1, 0] = 0.3, 0.2
    ch = Channel(G, [[0.01, 0.02]], 1.0, 1.0, [1.0, 0.8])
    s = np.array([[0.4, 0.2]])
    beta = tuning_param("iasb6", ch, s[0], 0, 1)["beta"]
    assert 0 < beta <= 1
    tp = TonePoint.build(ch, s, 1)
    x = np.linspace(0, 1, 256)[None, :]
    _, _, d2 = tp.derivatives(x)
    f1_second = ch.weights[1] * (1 - beta) / (x + tp.own_int[:, None]) ** 2
    assert np.max(d2 - f1_second) <= 1e-12


def test_theta_override_beta_zero_reproduces_iasb1():
    ch, s, n = random_instance(30, 0)
    a = build(ApproximationSpec.of("iasb6", theta=0.0), ch, s, n)
    b = build("iasb1", ch, s, n)
    g = uniform_grid(a.masks, 64)
    assert np.array_equal(a.value(g), b.value(g))
    assert np.array_equal(a.d, b.d)


# -- build -------------------------------------------------------------------

def test_iasb1_slope_is_f2_derivative():
    for i in range(20):
        ch, s, n = random_instance(31, i)
        app = build("iasb1", ch, s, n)
        assert app.degree == 1
        tp = TonePoint.build(ch, s, n)
        x0 = s[:, n]
        # f2 = f + w log(1 + x/I); its slope from differences of the true restriction
        fd = fd_slope(tp, x0) + ch.weights[n] / (x0 + tp.own_int)
        analytic = np.array([sum(ch.weights[m] * ch.gains[k, m, n] * s[k, m]
                                 / ((s[k, m] + naive.interference(ch, s, k, m)) * naive.interference(ch, s, k, m))
                                 for m in range(ch.num_users) if m != n) for k in range(ch.num_tones)])
        scale = np.maximum(np.abs(analytic), ch.weights[n] / (x0 + tp.own_int))
        assert np.all(np.abs(app.d - analytic) <= 1e-12 * scale)
        assert np.all(np.abs(app.d - fd) <= 1e-6 * scale)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_value_match_at_build_point(kind):
    for i in range(15):
        ch, s, n = random_instance(32, i)
        app = build(kind, ch, s, n)
        tp = TonePoint.build(ch, s, n)
        assert np.max(np.abs(app.value(app.x_tilde) - tp.value(app.x_tilde))) <= 1e-9


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_conditions_on_small_batch(kind, instances):
    for ch, s, n in instances:
        rep = check_conditions(kind, ch, s, n)
        assert rep.passed, (kind, rep)


def test_corrupted_slope_fails_condition_15():
    ch, s, n = random_instance(33, 0)
    rep = check_conditions("iasb1", ch, s, n, d_offset=1e-3)
    assert not rep.passed and rep.slope_error > 1e-6


def test_iasb3_nonconvex_on_strong_interferer():
    ch = escape_channel()
    s = np.array(ch.masks, dtype=float)
    app = build("iasb3", ch, s, 1)
    x = np.linspace(0, ch.masks[0, 1], 257)
    d2 = app.second_derivative(x[None, :])
    assert d2.min() < 0
    v = app.value(x[None, :])[0]
    assert np.min(v[:-2] - 2 * v[1:-1] + v[2:]) < 0


@pytest.mark.parametrize("kind", [k for k in TABLE_DEGREES if k != "iasb2c"])
def test_degrees_match_table(kind):
    ch = small_channel(seed=2, N=5, K=2)
    s = np.full((2, 5), 0.3)
    app = build(kind, ch, s, 3)
    want = TABLE_DEGREES[kind]
    assert app.degree == (5 if want == "N" else want)
    num, den = app.rational()
    assert num.shape[1] - 1 <= app.degree and den.shape[1] - 1 <= app.degree
    if app.degree <= 3:
        assert app.p.shape == (2, 8)
    else:
        assert not app.closed_form


def test_p_coefficients_encode_f1_prime():
    ch, s, n = random_instance(34, 2, users=(4, 4))
    for kind in ("iasb1", "iasb2", "iasb3", "iasb5", "iasb9"):
        app = build(kind, ch, s, n)
        p = app.p
        x = np.linspace(0.1, 0.9, 7)[None, :] * app.masks[:, None]
        num = sum(p[:, [i]] * x ** (3 - i) for i in range(4))
        den = sum(p[:, [4 + i]] * x ** (3 - i) for i in range(4))
        assert np.allclose(num / den, app.f1_prime(x), rtol=1e-9)


def test_stationarity_roots_are_critical_points():
    ch, s, n = random_instance(35, 1, users=(3, 3))
    app = build("iasb3", ch, s, n)
    lam = 0.7
    P = app.stationarity(lam)
    for t in range(P.shape[0]):
        for r in np.roots(np.trim_zeros(P[t], "f")):
            if abs(r.imag) < 1e-12 and 0 < r.real < app.masks[t]:
                x = np.full(P.shape[0], r.real)
                assert abs(app.derivative(x)[t] + lam) <= 1e-7 * (1 + abs(lam))


# -- second derivative orderings used in the tightness proofs ----------------------

@pytest.mark.parametrize("tight,loose", [("iasb1", "cadsb"), ("iasb2", "iasb1"), ("iasb3", "iasb1"),
                                         ("iasb4", "iasb1"), ("iasb5", "iasb4"), ("iasb6", "iasb1"),
                                         ("iasb7", "iasb3")])
def test_f1_curvature_ordering(tight, loose, instances):
    for ch, s, n in instances:
        a, b = build(tight, ch, s, n), build(loose, ch, s, n)
        g = uniform_grid(a.masks, 64)[:, 1:]
        assert np.all(a.f1_second(g) <= b.f1_second(g) + 1e-9 * np.abs(b.f1_second(g)))


def test_lemma_pairs_small_batch(instances):
    assert verify_lemma_order("iasb1", "cadsb", instances)[0]
    assert verify_lemma_order("iasb10", "scale", instances)[0]
    ok, gap = verify_lemma_order("iasb1", "iasb1", instances)
    assert ok and gap == 0.0


# -- names and references ----------------------------------------------------------

def test_generalized_names_match_presets():
    same = {"ia1": "iasb1", "ia2-l": "iasb2", "ia3-r": "iasb3", "ia2-α": "iasb4", "ia3-α²": "iasb5",
            "ia1-β": "iasb6", "ia3-βr": "iasb7", "ia3-βα²": "iasb8", "ia3-αl": "iasb9", "ian-α^{n-1}": "iasb10"}
    for name, preset in same.items():
        k, p = parse_method(name), PRESETS[preset]
        assert (k.budget, k.beta, k.quad, k.refs, k.alphas) == (p.budget, p.beta, p.quad, p.refs, p.alphas), name


def test_generalized_extension_builds():
    ch, s, n = random_instance(36, 0, users=(5, 5))
    app = build("ia3-βαl", ch, s, n)
    assert app.degree == 3
    assert check_conditions("ia3-βαl", ch, s, n).passed


def test_budget_overflow_and_unknown_rejected():
    with pytest.raises(ApproximationError):
        parse_method("ia2-r")  # r costs two degrees on top of the own term
    with pytest.raises(ApproximationError):
        parse_method("iasb11")


def test_reference_fallback():
    spec = ApproximationSpec.of("iasb5", q=0, t=1, fallback=2)
    assert spec.resolve_references(0, 4) == [1, 2]
    assert spec.resolve_references(3, 4) == [0, 1]
    refs = spec.resolve_references(1, 4)
    assert 1 not in refs and len(set(refs)) == 2
    strict = ApproximationSpec.of("iasb5", strict=True)
    with pytest.raises(ApproximationError):
        strict.resolve_references(0, 2)
