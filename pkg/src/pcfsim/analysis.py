"""Stability metrics computed from traces.

Functions here are pure.  The estimator classes at the bottom wrap them with
a scikit-learn compatible ``fit``/``transform``/``predict`` surface so they
compose with pipelines and ``get_params``/``set_params``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import signal
from scipy.integrate import trapezoid
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, check_1d, check_count, check_positive
from .trace import Trace, as_trace

CARRIER_1550 = 193.4e12
NUMERIC_FLOOR = 1e-300


@dataclass(frozen=True)
class AdevCurve:
    tau: np.ndarray
    sigma: np.ndarray
    err: np.ndarray
    n_estimates: np.ndarray
    carrier: float = CARRIER_1550

    def __len__(self):
        return self.tau.size

    def points(self):
        return list(zip(self.tau.tolist(), self.sigma.tolist(), self.err.tolist()))


@dataclass(frozen=True)
class PsdCurve:
    freq: np.ndarray
    density: np.ndarray
    unit: str
    resolution: float

    def to_phase(self) -> "PsdCurve":
        """Frequency-noise PSD [Hz^2/Hz] to phase-noise PSD [rad^2/Hz]."""
        if self.unit == "rad":
            return self
        return PsdCurve(self.freq, self.density / self.freq**2, "rad", self.resolution)

    def to_frequency(self) -> "PsdCurve":
        if self.unit == "Hz":
            return self
        return PsdCurve(self.freq, self.density * self.freq**2, "Hz", self.resolution)


@dataclass(frozen=True)
class Sigma0Fit:
    sigma0: float
    uncertainty: float
    scatter: float
    slope: float
    slope_err: float
    model_mismatch: bool


@dataclass(frozen=True)
class Suppression:
    freq: np.ndarray
    per_bin_db: np.ndarray
    overall_db: float
    floored: bool = False


@dataclass(frozen=True)
class DriftFit:
    rate: float
    uncertainty: float
    intercept: float = 0.0


@dataclass
class StabilityReport:
    adev: AdevCurve | None = None
    sigma0: Sigma0Fit | None = None
    psd_open: PsdCurve | None = None
    psd_closed: PsdCurve | None = None
    suppression: Suppression | None = None
    drift: DriftFit | None = None
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# Allan deviation


def default_taus(n: int, tau0: float, max_fraction: float = 0.25) -> np.ndarray:
    """Octave-spaced taus from ``tau0`` up to ``max_fraction`` of the record."""
    m = 1
    out = []
    while m <= max(1, int(n * max_fraction)):
        out.append(m * tau0)
        m *= 2
    return np.array(out)


@njit(cache=True)
def _prefix_sums(v):
    """Prefix sums of ``v`` as an unevaluated pair ``hi + lo`` (Neumaier)."""
    n = v.size
    hi = np.zeros(n + 1)
    lo = np.zeros(n + 1)
    s = 0.0
    c = 0.0
    for k in range(n):
        t = s + v[k]
        if abs(s) >= abs(v[k]):
            c += (s - t) + v[k]
        else:
            c += (v[k] - t) + s
        s = t
        hi[k + 1] = s
        lo[k + 1] = c
    return hi, lo


@njit(cache=True)
def _window_sums(hi, lo, m):
    """``sum(v[j:j+m])`` for every j, each correct to about one ulp."""
    n = hi.size - m
    out = np.empty(n)
    for j in range(n):
        a = hi[j + m]
        b = hi[j]
        d = a - b
        # exact remainder of the subtraction (two-sum)
        bb = d - a
        e = (a - (d - bb)) - (b + bb)
        out[j] = d + (e + (lo[j + m] - lo[j]))
    return out


def overlapping_adev(trace: Trace, taus=None, carrier: float = CARRIER_1550) -> AdevCurve:
    """Overlapping Allan deviation of the fractional frequency ``trace / carrier``.

    ``trace`` holds gate-averaged frequency samples.  Taus that are not an
    integer multiple of the sample period are snapped (with a warning); taus
    too long for the record are dropped.

    Error bars are ``sigma / sqrt(K)`` with ``K = floor(N / m) - 1`` the count
    of non-overlapping estimates at averaging factor ``m``.
    """
    trace = as_trace(trace)
    check_positive(carrier, "carrier")
    y = trace.values
    n = y.size
    tau0 = 1.0 / trace.fs
    if taus is None:
        taus = default_taus(n, tau0)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))

    # offset-free frequency (constant traces give exactly zero); the
    # compensated prefix sums keep long averages accurate to rounding
    v = y - y[0]
    v = v - np.mean(v)
    hi, lo = _prefix_sums(v)
    ms = []
    for tau in taus:
        m = max(1, int(round(tau / tau0)))
        if abs(m * tau0 - tau) > 1e-9 * tau:
            warnings.warn(f"tau {tau:g} s snapped to {m * tau0:g} s", stacklevel=2)
        if hi.size - 2 * m < 1:
            continue
        if ms and m <= ms[-1]:
            continue
        ms.append(m)
    ms = np.array(ms, dtype=int)
    sig = np.empty(ms.size)
    for i, m in enumerate(ms):
        w = _window_sums(hi, lo, m)
        d2 = w[m:] - w[:-m]
        sig[i] = np.sqrt(np.mean(d2 * d2) / 2.0) / (m * carrier)
    k = np.maximum(n // np.maximum(ms, 1) - 1, 1)
    return AdevCurve(ms * tau0, sig, sig / np.sqrt(k), k, carrier)


def fit_sigma0(curve: AdevCurve, tau_min: float | None = None, tau_max: float | None = None) -> Sigma0Fit:
    """Fit ``sigma(tau) = sigma0 / tau`` on log axes.

    The slope is then refitted freely; a slope more than 3 standard errors
    (from the curve's error bars) away from -1 sets ``model_mismatch``.
    """
    mask = curve.sigma > 0
    if tau_min is not None:
        mask &= curve.tau >= tau_min
    if tau_max is not None:
        mask &= curve.tau <= tau_max
    if mask.sum() < 3:
        raise ConfigError("need at least 3 positive ADEV points", "curve")
    tau, sig = curve.tau[mask], curve.sigma[mask]
    rel = np.maximum(curve.err[mask] / sig, 1e-12)
    w = 1.0 / rel**2
    lx, ly = np.log(tau), np.log(sig)

    r = ly + lx
    ln_s0 = np.sum(w * r) / np.sum(w)
    sigma0 = float(np.exp(ln_s0))
    n = r.size
    resid_var = np.sum(w * (r - ln_s0) ** 2) / np.sum(w) * n / (n - 1)
    uncertainty = float(sigma0 * np.sqrt(resid_var / n))
    scatter = float(np.sqrt(np.mean((sig * tau / sigma0 - 1.0) ** 2)))

    xm = np.sum(w * lx) / np.sum(w)
    sxx = np.sum(w * (lx - xm) ** 2)
    slope = float(np.sum(w * (lx - xm) * (ly - np.sum(w * ly) / np.sum(w))) / sxx)
    slope_err = float(np.sqrt(1.0 / sxx))
    mismatch = bool(abs(slope + 1.0) > 3.0 * slope_err)
    return Sigma0Fit(sigma0, uncertainty, scatter, slope, slope_err, mismatch)


# --------------------------------------------------------------------------
# spectra


def welch_psd(trace: Trace, segments: int = 8, unit: str | None = None) -> PsdCurve:
    """One-sided averaged-periodogram PSD (Hann window, 50 % overlap).

    ``segments`` is the number of averaged periodograms.  A bin-centred tone
    of power P shows up in its own bin as about P / 1.5 (-1.8 dB), the rest
    leaking into the two Hann neighbours.
    """
    trace = as_trace(trace)
    segments = check_count(segments, "segments", 1)
    n = trace.values.size
    if n < 2 * segments:
        raise ConfigError(f"trace of {n} samples is too short for {segments} segments", "segments")
    nperseg = n if segments == 1 else int(2 * n // (segments + 1))
    f, p = signal.welch(trace.values, fs=trace.fs, window="hann", nperseg=nperseg,
                        noverlap=nperseg // 2, detrend="constant", scaling="density")
    keep = f > 0
    return PsdCurve(f[keep], p[keep], unit or trace.unit or "rad", trace.fs / nperseg)


def _band_integral(freq, dens, lo, hi):
    """Trapezoidal integral of ``dens`` over [lo, hi] with interpolated edges."""
    inner = (freq > lo) & (freq < hi)
    fx = np.concatenate(([lo], freq[inner], [hi]))
    dx = np.concatenate(([np.interp(lo, freq, dens)], dens[inner], [np.interp(hi, freq, dens)]))
    return float(trapezoid(dx, fx))


def integrated_phase_noise(psd: PsdCurve, band: tuple[float, float]) -> float:
    """RMS phase [rad] in ``band`` from a phase (or frequency) noise PSD."""
    lo, hi = map(float, band)
    ph = psd.to_phase()
    if not (ph.freq[0] <= lo < hi <= ph.freq[-1] * (1 + 1e-12)):
        raise ConfigError(f"band ({lo:g}, {hi:g}) Hz outside PSD support "
                          f"[{ph.freq[0]:g}, {ph.freq[-1]:g}] Hz", "band")
    return float(np.sqrt(max(_band_integral(ph.freq, ph.density, lo, min(hi, ph.freq[-1])), 0.0)))


def suppression_db(open_psd: PsdCurve, closed_psd: PsdCurve, band=None) -> Suppression:
    """Noise suppression ``10 log10(open / closed)`` per bin and integrated.

    ``closed_psd`` is interpolated (log-log) onto the open-loop grid if the
    grids differ.  ``band`` restricts the integrated figure.
    """
    f = open_psd.freq
    closed = closed_psd.density
    if closed_psd.freq.shape != f.shape or not np.allclose(closed_psd.freq, f, rtol=1e-12):
        lo, hi = closed_psd.freq[0], closed_psd.freq[-1]
        keep = (f >= lo) & (f <= hi)
        f = f[keep]
        opened = open_psd.density[keep]
        closed = np.exp(np.interp(np.log(f), np.log(closed_psd.freq),
                                  np.log(np.maximum(closed_psd.density, NUMERIC_FLOOR))))
    else:
        opened = open_psd.density
    floored = bool(np.any(closed <= 0) or np.any(opened <= 0))
    closed = np.maximum(closed, NUMERIC_FLOOR)
    opened = np.maximum(opened, NUMERIC_FLOOR)
    per_bin = 10.0 * (np.log10(opened) - np.log10(closed))
    if band is None:
        band = (f[0], f[-1])
    po = _band_integral(f, opened, *band)
    pc = _band_integral(f, closed, *band)
    overall = 10.0 * (np.log10(po) - np.log10(pc))
    return Suppression(f, per_bin, float(overall), floored)


# --------------------------------------------------------------------------
# drift


def fit_drift(trace: Trace) -> DriftFit:
    """Ordinary least-squares slope [unit/s] of ``trace`` versus time."""
    trace = as_trace(trace)
    y = trace.values
    if y.size < 3:
        raise ConfigError("need at least 3 samples", "trace")
    t = np.arange(y.size) / trace.fs
    tm = t.mean()
    tc = t - tm
    sxx = np.dot(tc, tc)
    ym = y.mean()
    rate = float(np.dot(tc, y - ym) / sxx)
    resid = y - ym - rate * tc
    dof = max(y.size - 2, 1)
    unc = float(np.sqrt(np.dot(resid, resid) / dof / sxx))
    return DriftFit(rate, unc, float(ym - rate * (tm + trace.t0)))


# --------------------------------------------------------------------------
# estimator wrappers


def _trace_from_X(X, fs):
    if isinstance(X, Trace):
        return X
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    return Trace(check_1d(arr, "X"), fs)


class AllanDeviation(TransformerMixin, BaseEstimator):
    """Overlapping ADEV with a fixed-slope white-phase fit.

    ``fit(X)`` takes a frequency trace (or 1-d array sampled at ``fs``) and
    sets ``curve_``, ``sigma0_`` and ``model_mismatch_``.  ``transform(X)``
    returns the ADEV of ``X`` evaluated at the fitted taus.
    """

    def __init__(self, fs=1.0, taus=None, carrier=CARRIER_1550, tau_min=None, tau_max=None):
        self.fs = fs
        self.taus = taus
        self.carrier = carrier
        self.tau_min = tau_min
        self.tau_max = tau_max

    def fit(self, X, y=None):
        trace = _trace_from_X(X, self.fs)
        self.curve_ = overlapping_adev(trace, self.taus, self.carrier)
        self.taus_ = self.curve_.tau
        if np.count_nonzero(self.curve_.sigma > 0) >= 3:
            fit = fit_sigma0(self.curve_, self.tau_min, self.tau_max)
            self.sigma0_, self.sigma0_err_ = fit.sigma0, fit.uncertainty
            self.model_mismatch_ = fit.model_mismatch
            self.fit_ = fit
        else:
            self.sigma0_, self.sigma0_err_, self.model_mismatch_, self.fit_ = 0.0, 0.0, False, None
        return self

    def transform(self, X):
        check_is_fitted(self, "taus_")
        trace = _trace_from_X(X, self.fs)
        return overlapping_adev(trace, self.taus_, self.carrier).sigma


class WelchPSD(TransformerMixin, BaseEstimator):
    """Welch PSD estimator; ``transform`` returns densities on the fitted grid."""

    def __init__(self, fs=1.0, segments=8, unit="rad"):
        self.fs = fs
        self.segments = segments
        self.unit = unit

    def fit(self, X, y=None):
        self.psd_ = welch_psd(_trace_from_X(X, self.fs), self.segments, self.unit)
        self.freq_ = self.psd_.freq
        return self

    def transform(self, X):
        check_is_fitted(self, "freq_")
        psd = welch_psd(_trace_from_X(X, self.fs), self.segments, self.unit)
        return np.interp(self.freq_, psd.freq, psd.density)


class DriftRegressor(RegressorMixin, BaseEstimator):
    """Linear drift model ``f(t) = intercept_ + rate_ * t``.

    ``X`` is a column of times [s] (shape ``(n, 1)`` or ``(n,)``), ``y`` the
    frequencies.  ``rate_err_`` is the OLS standard error of the slope.
    """

    def fit(self, X, y):
        t = check_1d(np.asarray(X, dtype=float).ravel(), "X", 3)
        f = check_1d(y, "y", 3)
        if t.size != f.size:
            raise ConfigError("X and y lengths differ", "y")
        tc = t - t.mean()
        sxx = np.dot(tc, tc)
        self.rate_ = float(np.dot(tc, f - f.mean()) / sxx)
        self.intercept_ = float(f.mean() - self.rate_ * t.mean())
        resid = f - self.intercept_ - self.rate_ * t
        self.rate_err_ = float(np.sqrt(np.dot(resid, resid) / max(t.size - 2, 1) / sxx))
        return self

    def predict(self, X):
        check_is_fitted(self, "rate_")
        t = np.asarray(X, dtype=float).ravel()
        return self.intercept_ + self.rate_ * t
