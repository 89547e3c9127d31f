import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from backaction.analysis import bin_magnitudes, rayleigh_stationarity_test, welch_asd
from backaction.errors import DomainError
from backaction.synth import (AdiabaticityWarning, TimeSeries, child_seed, colored_noise, lorentzian_sweep,
                              ringdown_series)


def pink(f):
    return 1e-3 / np.asarray(f)


def bump(f):
    f = np.asarray(f)
    return 1e-2 * (1 + (f / 50) ** 2) / (1 + (f / 120) ** 4)


@pytest.mark.parametrize("max_block", [1 << 18, 4096])
def test_parseval(max_block):
    fs, dur = 1024.0, 64.0
    ts = colored_noise(bump, fs, dur, seed=3, max_block=max_block)
    expected, _ = integrate.quad(bump, 0, fs / 2, limit=200)
    assert np.var(ts.samples) == pytest.approx(expected, rel=0.05)


def test_white_level_and_zero_mean():
    ts = colored_noise(2.0, 100.0, 200.0, seed=1)
    assert abs(np.mean(ts.samples)) < 1e-12
    assert np.var(ts.samples) == pytest.approx(2.0 * 50.0, rel=0.03)


def test_stitched_record_keeps_spectrum():
    ts = colored_noise(lambda f: 1e-2 * (1 + (f / 50) ** 2), 512.0, 120.0, seed=5, max_block=2048)
    est = welch_asd(ts, 1.0)
    sel = (est.freqs > 5) & (est.freqs < 250)
    ratio = est.psd[sel] / (1e-2 * (1 + (est.freqs[sel] / 50) ** 2))
    assert np.mean(ratio) == pytest.approx(1.0, abs=0.03)


def test_seed_determinism():
    a = colored_noise(pink, 256.0, 10.0, seed=42)
    b = colored_noise(pink, 256.0, 10.0, seed=42)
    c = colored_noise(pink, 256.0, 10.0, seed=43)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert child_seed(1, 2) == child_seed(1, 2) != child_seed(1, 3)


def test_rayleigh_pass_rate_for_fixed_target():
    passed = 0
    for seed in range(100):
        ts = colored_noise(pink, 256.0, 40.0, seed=seed)
        est = welch_asd(ts, 0.2, keep_segments=True)
        passed += rayleigh_stationarity_test(bin_magnitudes(est, 40.0)).p_value > 0.01
    assert passed >= 97


def test_target_psd_validation():
    with pytest.raises(DomainError):
        colored_noise(lambda f: -np.ones_like(f), 100.0, 1.0, 0)
    with pytest.raises(DomainError):
        colored_noise(lambda f: np.full_like(f, np.inf), 100.0, 1.0, 0)
    with pytest.raises(DomainError):
        colored_noise(1.0, 100.0, 0.01, 0)


@settings(max_examples=20, deadline=None)
@given(data=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), fs=st.floats(1.0, 1e5),
       seed=st.one_of(st.none(), st.integers(0, 2**40)))
def test_binary_round_trip(tmp_path_factory, data, fs, seed):
    p = tmp_path_factory.mktemp("bin") / "x.bin"
    ts = TimeSeries(np.array(data), fs, seed)
    ts.to_binary(p)
    back = TimeSeries.from_binary(p)
    assert np.array_equal(back.samples, ts.samples)
    assert back.sample_rate == fs and back.seed == seed


def test_csv_round_trip(tmp_path):
    ts = colored_noise(1.0, 100.0, 2.0, seed=9)
    ts.to_csv(tmp_path / "x.csv")
    back = TimeSeries.from_csv(tmp_path / "x.csv")
    assert np.array_equal(back.samples, ts.samples)
    assert back.sample_rate == pytest.approx(100.0, rel=1e-12)


def test_ringdown_envelope():
    rd = ringdown_series(14.0, 1e3, 2.0, 20.0, 400.0, seed=0)
    t = rd.series.times
    mid = (t > 50) & (t < 350)
    expected = 2.0 * np.exp(-14.0 / 2e3 * t[mid])
    assert np.allclose(rd.envelope[mid], expected, rtol=1e-3)
    with pytest.raises(DomainError):
        ringdown_series(14.0, 0.4, 1.0, 20.0, 10.0)
    with pytest.raises(DomainError):
        ringdown_series(14.0, 1e3, 1.0, 8.0, 10.0)


def test_lorentzian_sweep_shape_and_adiabatic_warning():
    kappa = 2 * math.pi * 1e6
    ts = lorentzian_sweep(kappa, 1e9, 1e6)
    assert ts.samples.max() == pytest.approx(1.0, abs=1e-6)
    with pytest.warns(AdiabaticityWarning):
        lorentzian_sweep(kappa, 1e12, 1e8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lorentzian_sweep(kappa, 1e9, 1e6)


def test_time_series_add_requires_matching_shape():
    a = TimeSeries(np.ones(10), 10.0)
    assert np.all((a + a).samples == 2)
    with pytest.raises(DomainError):
        a + TimeSeries(np.ones(11), 10.0)
