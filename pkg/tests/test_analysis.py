import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from pcfsim import analysis
from pcfsim._validation import ConfigError
from pcfsim.analysis import (AdevCurve, AllanDeviation, DriftRegressor, PsdCurve, WelchPSD, fit_drift,
                             fit_sigma0, integrated_phase_noise, overlapping_adev, suppression_db, welch_psd)
from pcfsim.noise import NoiseSpec, synth_power_law
from pcfsim.trace import Trace, phase_to_frequency


def brute_adev(y, m, tau0, carrier):
    """Overlapping two-sample variance straight from the definition."""
    y = np.asarray(y, dtype=float) / carrier
    n = y.size
    acc = 0.0
    count = 0
    for j in range(n - 2 * m + 1):
        a = sum(y[j:j + m]) / m
        b = sum(y[j + m:j + 2 * m]) / m
        acc += (b - a) ** 2
        count += 1
    return np.sqrt(acc / (2 * count))


def test_constant_trace_has_zero_adev():
    c = overlapping_adev(Trace(np.full(1000, 45e6), 1.0))
    assert np.all(c.sigma == 0.0)


def test_adev_matches_definition_on_long_trace():
    rng = np.random.default_rng(3)
    y = 1e-3 * np.cumsum(rng.standard_normal(10_000)) + rng.standard_normal(10_000)
    tr = Trace(y, 2.0, "Hz")
    ms = [1, 3, 16, 100]
    c = overlapping_adev(tr, [m / 2.0 for m in ms], carrier=193.4e12)
    for m, s in zip(ms, c.sigma):
        if m <= 16:
            ref = brute_adev(y, m, 0.5, 193.4e12)
        else:
            # vectorised definition for the long averages
            z = y / 193.4e12
            means = np.convolve(z, np.ones(m) / m, mode="valid")
            ref = np.sqrt(np.mean((means[m:] - means[:-m]) ** 2) / 2)
        assert s == pytest.approx(ref, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=60), st.integers(1, 3))
def test_adev_matches_definition_property(values, m):
    y = np.array(values)
    c = overlapping_adev(Trace(y, 1.0), [float(m)], carrier=1.0)
    if len(c) == 0:
        return
    ref = brute_adev(y, m, 1.0, 1.0)
    assert c.sigma[0] == pytest.approx(ref, rel=1e-12, abs=1e-12 * max(1.0, np.max(np.abs(y))))


def test_adev_error_bars_and_taus():
    y = np.random.default_rng(0).standard_normal(1024)
    c = overlapping_adev(Trace(y, 1.0))
    assert np.all(np.diff(c.tau) > 0)
    assert np.allclose(c.err, c.sigma / np.sqrt(c.n_estimates))
    assert c.tau[-1] <= 256


def test_adev_snaps_and_drops_taus():
    y = np.random.default_rng(0).standard_normal(100)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        c = overlapping_adev(Trace(y, 1.0), [1.4, 1000.0])
    assert any("snapped" in str(x.message) for x in w)
    assert c.tau.tolist() == [1.0]


def test_white_phase_adev_slope():
    ph = synth_power_law(NoiseSpec("white-phase", 1e-2, 8), 2**16, 1.0)
    c = overlapping_adev(phase_to_frequency(ph), carrier=1.0)
    slope = np.polyfit(np.log(c.tau[2:12]), np.log(c.sigma[2:12]), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.1)


def _curve(tau, sigma, rel_err=0.05):
    tau = np.asarray(tau, float)
    sigma = np.asarray(sigma, float)
    return AdevCurve(tau, sigma, rel_err * sigma, np.full(tau.size, 100))


def test_fit_sigma0_exact():
    tau = 2.0 ** np.arange(8)
    fit = fit_sigma0(_curve(tau, 1.9e-16 / tau))
    assert fit.sigma0 == pytest.approx(1.9e-16, rel=1e-12)
    assert fit.scatter == pytest.approx(0.0, abs=1e-12)
    assert not fit.model_mismatch


def test_fit_sigma0_with_scatter():
    rng = np.random.default_rng(4)
    tau = 2.0 ** np.arange(10)
    hits = 0
    for _ in range(50):
        sig = 1.9e-16 / tau * (1 + 0.1 * rng.standard_normal(tau.size))
        fit = fit_sigma0(_curve(tau, sig, 0.1))
        hits += abs(fit.sigma0 / 1.9e-16 - 1) < 0.1
    assert hits >= 48


def test_fit_sigma0_flags_rising_curve():
    tau = 2.0 ** np.arange(12)
    sig = 1e-15 / tau + 1e-19 * tau
    assert fit_sigma0(_curve(tau, sig, 0.02)).model_mismatch
    with pytest.raises(ConfigError):
        fit_sigma0(_curve(tau[:2], sig[:2]))


def test_welch_tone_power():
    fs, n = 100.0, 2**14
    f0 = 256 * fs / 2**12  # bin-centred for 4096-sample segments
    t = np.arange(n) / fs
    psd = welch_psd(Trace(np.sqrt(2) * np.sin(2 * np.pi * f0 * t), fs), 7)
    i = int(np.argmin(np.abs(psd.freq - f0)))
    power_bin = psd.density[i] * psd.resolution
    assert 10 * np.log10(power_bin) == pytest.approx(0.0, abs=3.0)
    total = np.sum(psd.density[i - 2:i + 3]) * psd.resolution
    assert total == pytest.approx(1.0, rel=0.05)


def test_welch_white_level_and_parseval():
    fs = 50.0
    x = np.random.default_rng(1).standard_normal(2**15) * 0.3
    psd = welch_psd(Trace(x, fs), 16)
    assert np.mean(psd.density) == pytest.approx(0.09 / (fs / 2), rel=0.2)
    assert np.sum(psd.density) * psd.resolution == pytest.approx(np.var(x), rel=0.05)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["white-phase", "white-frequency"]), st.integers(0, 10**6))
def test_parseval_property(kind, seed):
    x = synth_power_law(NoiseSpec(kind, 1.0, seed), 2**14, 10.0).values
    if kind == "white-frequency":
        x = np.diff(x)
    psd = welch_psd(Trace(x, 10.0), 8)
    assert np.sum(psd.density) * psd.resolution == pytest.approx(np.var(x), rel=0.05)


def test_welch_needs_length():
    with pytest.raises(ConfigError):
        welch_psd(Trace(np.zeros(10), 1.0), 8)


def test_integrated_phase_noise_examples():
    f = np.linspace(0.01, 10, 1000)
    zero = PsdCurve(f, np.zeros_like(f), "rad", f[1] - f[0])
    assert integrated_phase_noise(zero, (0.1, 5.0)) == 0.0
    flat = PsdCurve(f, np.full_like(f, 4e-6), "rad", f[1] - f[0])
    assert integrated_phase_noise(flat, (0.5, 2.5)) == pytest.approx(np.sqrt(4e-6 * 2.0), rel=1e-12)
    with pytest.raises(ConfigError):
        integrated_phase_noise(flat, (0.001, 1.0))


def test_integrated_phase_noise_from_frequency_psd():
    f = np.linspace(0.1, 10, 100)
    freq_psd = PsdCurve(f, 3e-6 * f**2, "Hz", f[1] - f[0])
    assert integrated_phase_noise(freq_psd, (1.0, 4.0)) == pytest.approx(np.sqrt(9e-6), rel=1e-9)


def _psd(d):
    f = np.arange(1, d.size + 1) * 0.1
    return PsdCurve(f, d, "rad", 0.1)


def test_suppression_identity_and_factor():
    d = np.abs(np.random.default_rng(2).standard_normal(50)) + 0.1
    same = suppression_db(_psd(d), _psd(d))
    assert same.overall_db == 0.0 and np.all(same.per_bin_db == 0.0)
    s = suppression_db(_psd(172 * d), _psd(d))
    assert s.overall_db == pytest.approx(22.4, abs=0.05)


@given(st.lists(st.floats(1e-6, 1e6), min_size=3, max_size=30), st.floats(1e-3, 1e3))
def test_suppression_antisymmetric(vals, k):
    a = np.array(vals)
    b = a * k * np.linspace(0.5, 2.0, a.size)
    fwd = suppression_db(_psd(a), _psd(b))
    rev = suppression_db(_psd(b), _psd(a))
    assert fwd.overall_db == pytest.approx(-rev.overall_db, abs=1e-9)
    assert np.allclose(fwd.per_bin_db, -rev.per_bin_db, atol=1e-9)


def test_suppression_floors_zero_bins():
    d = np.ones(10)
    z = d.copy()
    z[3] = 0.0
    s = suppression_db(_psd(d), _psd(z))
    assert s.floored and np.isfinite(s.per_bin_db).all()


def test_fit_drift_examples():
    assert fit_drift(Trace(np.full(100, 3.0), 1.0)).rate == 0.0
    t = np.arange(5000) / 2.0
    y = 0.0338 * t + np.random.default_rng(5).standard_normal(t.size) * 0.5
    fit = fit_drift(Trace(y, 2.0))
    assert abs(fit.rate - 0.0338) < 3 * fit.uncertainty


@given(st.floats(-10, 10), st.floats(-1e3, 1e3))
def test_fit_drift_exact_on_ramps(rate, offset):
    t = np.arange(200) / 4.0
    fit = fit_drift(Trace(offset + rate * t, 4.0))
    assert fit.rate == pytest.approx(rate, abs=1e-9 * (1 + abs(offset)))


def test_estimators_follow_sklearn_conventions():
    for est in (AllanDeviation(fs=2.0), WelchPSD(fs=2.0, segments=4), DriftRegressor()):
        params = est.get_params()
        assert clone(est).get_params() == params
    y = synth_power_law(NoiseSpec("white-phase", 1e-3, 2), 4096, 1.0)
    freq = phase_to_frequency(y).values
    ad = AllanDeviation(fs=1.0, carrier=1.0).fit(freq)
    assert ad.sigma0_ > 0 and ad.transform(freq).shape[0] == len(ad.curve_)
    w = WelchPSD(fs=1.0, segments=4).fit(freq)
    assert w.transform(freq).shape == w.freq_.shape
    t = np.arange(100.0)
    reg = DriftRegressor().fit(t.reshape(-1, 1), 2.0 + 0.5 * t)
    assert reg.rate_ == pytest.approx(0.5)
    assert reg.predict(np.array([[200.0]]))[0] == pytest.approx(102.0)
    assert reg.score(t.reshape(-1, 1), 2.0 + 0.5 * t) == pytest.approx(1.0)
