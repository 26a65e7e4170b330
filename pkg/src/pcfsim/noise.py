"""Disturbance generators: power-law phase noise, temperature, laser drift.

All power-law processes are returned as *phase* in radians.  The amplitude
``A`` of a :class:`NoiseSpec` is the square root of the one-sided PSD
coefficient at 1 Hz in the native unit of the kind:

=====================  =====================  ==========================
kind                   native PSD             phase PSD S_phi(f)
=====================  =====================  ==========================
white-phase            A^2  rad^2/Hz          A^2
white-frequency        A^2  Hz^2/Hz           A^2 / f^2
flicker-frequency      A^2 / f  Hz^2/Hz       A^2 / f^3
random-walk-frequency  A^2 / f^2  Hz^2/Hz     A^2 / f^4
=====================  =====================  ==========================

(``phi = 2 pi * integral(nu)`` gives ``S_phi = S_nu / f^2``.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._validation import ConfigError, check_count, check_positive
from .trace import Trace

RNG_NAME = "numpy.random.Philox"

KINDS = {
    "white-phase": 0.0,
    "white-frequency": -2.0,
    "flicker-frequency": -3.0,
    "random-walk-frequency": -4.0,
}


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox4x64, period 2^256) for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    amplitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}; expected one of {sorted(KINDS)}", "kind")
        if not np.isfinite(self.amplitude) or self.amplitude < 0:
            raise ConfigError(f"amplitude must be >= 0, got {self.amplitude!r}", "amplitude")

    @property
    def phase_exponent(self) -> float:
        return KINDS[self.kind]

    def phase_psd(self, f):
        """Target one-sided phase PSD [rad^2/Hz] at frequencies ``f`` > 0."""
        f = np.asarray(f, dtype=float)
        return self.amplitude**2 * f ** self.phase_exponent


def synth_power_law(spec: NoiseSpec, n: int, fs: float) -> Trace:
    """Seeded phase series whose PSD follows ``spec`` (FFT shaping of white noise).

    The DC bin is removed, so the series has zero mean and is circular in
    time; the realized spectrum follows the target exactly up to the chi-square
    scatter of each Fourier bin.
    """
    if isinstance(n, bool) or int(n) != n or n < 2:
        raise ConfigError(f"need at least 2 samples, got {n!r}", "n")
    n = int(n)
    check_positive(fs, "fs")
    if spec.amplitude == 0.0:
        return Trace(np.zeros(n), fs, "rad", spec.kind)

    white = make_rng(spec.seed).standard_normal(n)
    spectrum = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    gain = np.zeros_like(f)
    gain[1:] = np.sqrt(spec.phase_psd(f[1:]) * fs / 2.0)
    phase = np.fft.irfft(spectrum * gain, n=n)
    return Trace(phase, fs, "rad", spec.kind, meta={"rng": RNG_NAME, "seed": spec.seed})


def synth_sum(specs: Sequence[NoiseSpec], n: int, fs: float, scale: float = 1.0) -> np.ndarray:
    """Sum of several power-law phase processes, each multiplied by ``scale``."""
    out = np.zeros(int(n))
    for spec in specs:
        if spec.amplitude > 0:
            out += synth_power_law(spec, n, fs).values
    return out * scale


@dataclass(frozen=True)
class TempProfile:
    """Temperature: mean + sum of sinusoids + seeded random walk.

    ``components`` holds ``(amplitude degC, period s, phase rad)`` tuples;
    ``random_walk`` is in degC/sqrt(s).
    """

    mean: float = 22.0
    components: tuple = ()
    random_walk: float = 0.0
    seed: int = 0

    def __post_init__(self):
        comps = tuple(tuple(float(v) for v in c) for c in self.components)
        for i, c in enumerate(comps):
            if len(c) != 3:
                raise ConfigError("each component is (amplitude, period, phase)", f"components[{i}]")
            if c[1] <= 0:
                raise ConfigError(f"period must be > 0, got {c[1]}", f"components[{i}].period")
            if c[0] < 0:
                raise ConfigError(f"amplitude must be >= 0, got {c[0]}", f"components[{i}].amplitude")
        if self.random_walk < 0:
            raise ConfigError("must be >= 0", "random_walk")
        object.__setattr__(self, "components", comps)


def synth_temperature(profile: TempProfile, n: int, fs: float) -> Trace:
    n = check_count(n, "n", 1)
    check_positive(fs, "fs")
    t = np.arange(n) / fs
    temp = np.full(n, float(profile.mean))
    for amp, period, phase in profile.components:
        temp += amp * np.sin(2.0 * np.pi * t / period + phase)
    if profile.random_walk > 0:
        steps = make_rng(profile.seed).standard_normal(n) * profile.random_walk / np.sqrt(fs)
        steps[0] = 0.0
        temp += np.cumsum(steps)
    return Trace(temp, fs, "degC", "temperature")


@dataclass(frozen=True)
class DriftSpec:
    """Laser frequency drift: ``rate`` [Hz/s] from t = 0, optionally
    overridden by ``segments`` of ``(start s, rate Hz/s)``."""

    rate: float = 0.0
    segments: tuple = ()
    initial_offset: float = 0.0

    def __post_init__(self):
        segs = tuple((float(s), float(r)) for s, r in self.segments)
        starts = [s for s, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("segment start times must be strictly increasing", "segments")
        if starts and starts[0] < 0:
            raise ConfigError("segment start times must be >= 0", "segments")
        object.__setattr__(self, "segments", segs)

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        starts, rates = [0.0], [float(self.rate)]
        for s, r in self.segments:
            if s == 0.0:
                rates[0] = r
            else:
                starts.append(s)
                rates.append(r)
        return np.array(starts), np.array(rates)

    def evaluate(self, t) -> np.ndarray:
        """Frequency offset [Hz] at times ``t`` (exact piecewise integral)."""
        t = np.asarray(t, dtype=float)
        starts, rates = self.breakpoints()
        ends = np.append(starts[1:], np.inf)
        out = np.full(t.shape, float(self.initial_offset))
        for s, e, r in zip(starts, ends, rates):
            out += r * np.clip(t - s, 0.0, e - s)
        return out

    def rate_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        starts, rates = self.breakpoints()
        idx = np.searchsorted(starts, t, side="right") - 1
        return rates[np.clip(idx, 0, None)]

    def scaled(self, factor: float) -> "DriftSpec":
        """Same waveform on a time axis compressed by ``factor``."""
        return DriftSpec(self.rate * factor,
                         tuple((s / factor, r * factor) for s, r in self.segments),
                         self.initial_offset)


def drift_waveform(drift: DriftSpec, n: int, fs: float) -> Trace:
    n = check_count(n, "n", 1)
    check_positive(fs, "fs")
    return Trace(drift.evaluate(np.arange(n) / fs), fs, "Hz", "f_L_d")
