import numpy as np
import pytest

from spectra.approximations import ApproximationSpec
from spectra.channel import Channel, SynthesisParams, generate_synthetic
from spectra.driver import (ConfigError, RunConfig, allocate_hybrid, compare_counts, count_convergence,
                            escape_channel, oracle_targets, restriction_minima, run)
from spectra.oracle import waterfilling
from conftest import small_channel


def _kind(spec):
    return ApproximationSpec.of(spec).kind.name


def test_single_user_runs():
    ch = Channel(np.zeros((4, 1, 1)), [[0.01], [0.02], [0.05], [0.1]], 1.0, 2.0, 1.0)
    rep = run(ch, RunConfig(method="iasb3"))
    assert rep.converged and rep.rates[0] > 0
    ref, _ = waterfilling(ch.noise[:, 0], ch.masks[:, 0], 2.0)
    assert np.allclose(rep.powers[:, 0], ref, rtol=1e-5)


def test_zero_crosstalk_equals_independent_users():
    rng = np.random.default_rng(1)
    z = 10 ** rng.uniform(-3, -1, (8, 3))
    ch = Channel(np.zeros((8, 3, 3)), z, 0.5, [1.0, 1.5, 2.0], [1.0, 0.7, 1.2])
    rep = run(ch, RunConfig(method="iasb1"))
    for n in range(3):
        alone = run(ch.subset_users([n]), RunConfig(method="iasb1"))
        assert np.allclose(rep.powers[:, n], alone.powers[:, 0], rtol=1e-9, atol=1e-15)


def test_escape_instance_has_two_minima():
    ch = escape_channel()
    start = RunConfig(init="mask").start(ch)
    xs, _ = restriction_minima(ch, start, 1)
    assert xs[0] == 0.0
    assert np.any((xs > 1.0) & (xs < ch.masks[0, 1]))


def test_escape_from_mask_start():
    ch = escape_channel()
    obj = {m: run(ch, RunConfig(method=m, init="mask")).objective for m in ("iasb1", "cadsb", "scale", "iasb3")}
    assert obj["iasb3"] < min(obj["iasb1"], obj["cadsb"], obj["scale"]) - 0.1
    fp = run(ch, RunConfig(method="iasb3", init="mask", mode="fixedpoint")).objective
    assert fp > obj["iasb3"] + 0.1


def test_zero_start_no_escape_needed():
    ch = escape_channel()
    a = run(ch, RunConfig(method="iasb3")).objective
    b = run(ch, RunConfig(method="iasb1")).objective
    assert a <= b + 1e-12


def test_count_convergence_decoupled_is_one():
    rng = np.random.default_rng(2)
    ch = Channel(np.zeros((6, 2, 2)), 10 ** rng.uniform(-3, -1, (6, 2)), 0.5, 10.0, [1.0, 0.8])
    oracle = oracle_targets(ch)
    res = count_convergence(ch, RunConfig(method="iasb1"), oracle)
    assert np.all(res.counts == 1)


def test_compare_counts_common_mask():
    ch = generate_synthetic(SynthesisParams(num_users=3, num_tones=8, seed=4))
    res, common = compare_counts(ch, ["iasb1", "iasb10"], ("closed", "fixedpoint"))
    assert set(res) == {(m, mode) for m in ("iasb1", "iasb10") for mode in ("closed", "fixedpoint")}
    assert common.shape == (8, 3) and common.any()
    assert np.all(res[("iasb1", "closed")].fp_counts[common] == 0)


def test_allocate_all():
    ch = small_channel(N=3, K=4)
    table = allocate_hybrid(ch, "all:iasb1")
    assert len(table) == 3 and all(len(row) == 4 for row in table)
    assert all(_kind(spec) == "iasb1" for row in table for spec in row)


def test_allocate_user_rule_is_one_based():
    ch = small_channel(N=3, K=4)
    table = allocate_hybrid(ch, "user2:iasb3,rest:iasb1")
    kinds = [[_kind(s) for s in row] for row in table]
    assert kinds[1] == ["iasb3"] * 4
    assert kinds[0] == kinds[2] == ["iasb1"] * 4
    assert sum(k == "iasb3" for row in kinds for k in row) == ch.num_tones


@pytest.mark.parametrize("rule", ["user7:iasb3,rest:iasb1", "user2:nope", "", "all"])
def test_allocate_rejects_bad_rules(rule):
    with pytest.raises(ConfigError):
        allocate_hybrid(small_channel(N=3, K=4), rule)


def test_hybrid_saves_cubic_solves():
    ch = escape_channel()
    full = run(ch, RunConfig(method="iasb3", init="mask"))
    hyb = run(ch, RunConfig(alloc="user2:iasb3,rest:iasb1", init="mask"))
    assert abs(hyb.objective - full.objective) <= 1e-9 * abs(full.objective)
    assert hyb.cubic_solves < full.cubic_solves


def test_deterministic():
    ch = generate_synthetic(SynthesisParams(num_users=3, num_tones=16, seed=5))
    a = run(ch, RunConfig(method="iasb5"))
    b = run(ch, RunConfig(method="iasb5"))
    assert np.array_equal(a.powers, b.powers) and a.trace == b.trace


@pytest.mark.parametrize("method", ["cadsb", "scale", "iasb1", "iasb3", "iasb8", "iasb10"])
def test_trace_nonincreasing_and_feasible(method):
    ch = generate_synthetic(SynthesisParams(num_users=4, num_tones=16, seed=6))
    rep = run(ch, RunConfig(method=method))
    objs = np.array([o for *_, o, acc in rep.trace if acc])
    assert np.all(np.diff(objs) <= 1e-9 * np.abs(objs[1:]))
    assert np.all(rep.powers >= 0) and np.all(rep.powers <= ch.masks)
    assert np.all(rep.powers.sum(axis=0) <= ch.budgets * (1 + 1e-12))


def test_sweep_cap_is_flagged():
    ch = generate_synthetic(SynthesisParams(num_users=4, num_tones=16, seed=6))
    rep = run(ch, RunConfig(method="scale", max_sweeps=1))
    assert not rep.converged
    assert any("sweep cap" in f for f in rep.flags)


def test_fixed_sweeps():
    ch = small_channel(N=3, K=4)
    rep = run(ch, RunConfig(fixed_sweeps=2))
    assert rep.sweeps == 2 and len(rep.lambdas) == 2


@pytest.mark.parametrize("kw", [dict(mode="newton"), dict(inner_max=0), dict(init="given"), dict(outer_tol=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        run(small_channel(), RunConfig(**kw))


def test_low_snr_single_user():
    # a barely-on tone: convex kinds land on waterfilling, SCALE only creeps towards it
    rng = np.random.default_rng(8)
    z = 10 ** rng.uniform(-3, -1, (8, 1))
    m = 10 ** rng.uniform(-1.5, -0.5, (8, 1))
    ch = Channel(np.zeros((8, 1, 1)), z, m, 0.4 * m.sum(), 1.0)
    ref, _ = waterfilling(z[:, 0], m[:, 0], 0.4 * m.sum())
    best = run(ch, RunConfig(method="iasb1"))
    on = ref > 1e-6
    assert np.all(np.abs(10 * np.log10(best.powers[on, 0] / ref[on])) <= 0.01)
    slow = run(ch, RunConfig(method="scale"))
    assert slow.objective <= best.objective * (1 - 1e-6)  # objectives are negative
    assert slow.rejected == 0
