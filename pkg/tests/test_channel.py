import json
import math

import numpy as np
import pytest

from spectra.channel import (DSL_PRESET, Channel, ScenarioError, SynthesisParams, channel_to_dict,
                             dbm_to_mw, generate_synthetic, load_scenario, mw_to_dbm, save_scenario)
from conftest import small_channel


def test_minimal_single_user_file(tmp_path):
    p = tmp_path / "one.json"
    p.write_text(json.dumps({"version": 1, "num_users": 1, "num_tones": 1, "weights": [1.0],
                             "budgets_dbm": [20.4], "masks_dbm": 20.4, "noise_dbm": -140.0}))
    ch = load_scenario(p)
    assert ch.num_users == 1 and ch.num_tones == 1
    assert ch.gains.shape == (1, 1, 1) and ch.gains[0, 0, 0] == 0.0
    assert math.isclose(ch.noise[0, 0], 1e-14, rel_tol=1e-12)
    assert math.isclose(ch.masks[0, 0], 10 ** 2.04, rel_tol=1e-12)


def test_round_trip_is_bit_exact(tmp_path):
    ch = small_channel(seed=3, N=4, K=5)
    p = tmp_path / "s.json"
    save_scenario(ch, p)
    back = load_scenario(p)
    assert back == ch
    for f in ("gains", "noise", "masks", "budgets", "weights"):
        assert np.array_equal(getattr(back, f), getattr(ch, f))


def test_zero_noise_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"num_users": 1, "num_tones": 1, "budgets_dbm": [0], "masks_dbm": 0, "noise_mw": 0}))
    with pytest.raises(ScenarioError, match="noise must be strictly positive"):
        load_scenario(p)


def test_parse_error_has_location(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"num_users": 1,\n "num_tones": }')
    with pytest.raises(ScenarioError, match="line 2"):
        load_scenario(p)


def test_bad_gain_entry_named(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"num_users": 2, "num_tones": 1, "budgets_dbm": 0, "masks_dbm": 0, "noise_dbm": -60,
                             "gains": [{"k": 0, "n": 0, "m": 0, "value": 0.1}]}))
    with pytest.raises(ScenarioError, match=r"gains\[0\]"):
        load_scenario(p)


def test_unwritable_path_raises(tmp_path):
    with pytest.raises(OSError):
        save_scenario(small_channel(), tmp_path / "missing" / "dir" / "x.json")


def test_two_user_file_lists_two_gains_per_tone():
    doc = channel_to_dict(small_channel(N=2, K=3))
    per_tone = [sum(1 for g in doc["gains"] if g["k"] == k) for k in range(3)]
    assert per_tone == [2, 2, 2]


def test_dbm_mw_inverse():
    x = np.logspace(-14, 3, 200)
    assert np.allclose(dbm_to_mw(mw_to_dbm(x)), x, rtol=1e-12, atol=0)


def test_channel_is_read_only():
    ch = small_channel()
    with pytest.raises(ValueError):
        ch.gains[0, 0, 1] = 1.0


def test_direct_gain_rejected():
    with pytest.raises(ScenarioError):
        Channel(np.ones((1, 2, 2)), np.ones((1, 2)), 1.0, 1.0, 1.0)


def test_synthetic_single_user_has_no_gains():
    ch = generate_synthetic(SynthesisParams(num_users=1, num_tones=8))
    assert np.all(ch.gains == 0)


def test_synthetic_deterministic():
    p = SynthesisParams(num_users=4, num_tones=16, seed=9)
    assert generate_synthetic(p) == generate_synthetic(p)
    assert not (generate_synthetic(p) == generate_synthetic(SynthesisParams(num_users=4, num_tones=16, seed=10)))


def test_synthetic_6x64_seed42_scan():
    ch = generate_synthetic(SynthesisParams(num_users=6, num_tones=64, seed=42))
    off = ~np.eye(6, dtype=bool)
    assert np.all(ch.gains[:, off] < 1.0) and np.all(ch.gains[:, off] > 0.0)
    assert np.all(ch.noise > 0)
    # frequency correlated: neighbouring tones differ far less than the spread over the band
    g = 10 * np.log10(ch.gains[:, off])
    assert np.max(np.abs(np.diff(g, axis=0))) < 0.5 * np.max(g.max(axis=0) - g.min(axis=0))


def test_synthetic_high_tones_stronger_crosstalk():
    ch = generate_synthetic(SynthesisParams(num_users=3, num_tones=32, seed=1, profile_db=0.0))
    off = ~np.eye(3, dtype=bool)
    assert np.all(ch.gains[-1][off] > ch.gains[0][off])


def test_synthesis_rejects_nonpositive_coupling():
    with pytest.raises(ValueError):
        generate_synthetic(SynthesisParams(num_users=2, num_tones=2, coupling_db=(0.0, 10.0)))


def test_interference_at_least_noise_for_feasible_points():
    ch = small_channel(seed=5)
    rng = np.random.default_rng(0)
    from spectra.objective import interference
    for _ in range(20):
        s = rng.uniform(0, 1, ch.noise.shape) * ch.masks
        assert np.all(interference(ch, s) >= ch.noise)


def test_dsl_preset_recorded():
    assert DSL_PRESET["mask_dbm"] == 20.4 and DSL_PRESET["symbol_rate_hz"] == 4000.0
