"""Uniformly sampled time series with sample-rate metadata."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigError, check_1d, check_positive


@dataclass(frozen=True)
class Trace:
    """A uniformly sampled series.

    ``unit`` is a free label (``"rad"``, ``"Hz"``, ``"degC"``, ...); ``t0`` is
    the time of the first sample in seconds.
    """

    values: np.ndarray
    fs: float
    unit: str = ""
    name: str = ""
    t0: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        check_positive(self.fs, "fs")

    def __len__(self) -> int:
        return self.values.size

    @property
    def dt(self) -> float:
        return 1.0 / self.fs

    @property
    def duration(self) -> float:
        return self.values.size / self.fs

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.values.size) / self.fs

    def slice_time(self, start: float | None = None, stop: float | None = None) -> "Trace":
        """Samples with ``start <= t < stop``."""
        t = self.times
        mask = np.ones(t.size, dtype=bool)
        if start is not None:
            mask &= t >= start - 1e-12 / self.fs
        if stop is not None:
            mask &= t < stop - 1e-12 / self.fs
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return Trace(np.empty(0), self.fs, self.unit, self.name, float(start or self.t0))
        return Trace(self.values[idx], self.fs, self.unit, self.name, float(t[idx[0]]), dict(self.meta))

    def with_values(self, values, unit: str | None = None, name: str | None = None) -> "Trace":
        return Trace(values, self.fs, self.unit if unit is None else unit,
                     self.name if name is None else name, self.t0, dict(self.meta))


def as_trace(x, fs: float | None = None, name: str = "x") -> Trace:
    """Coerce an array or Trace to a Trace, validating contents."""
    if isinstance(x, Trace):
        check_1d(x.values, name)
        return x
    if fs is None:
        raise ConfigError("a sample rate is required when passing a bare array", "fs")
    return Trace(check_1d(x, name), fs)


def frequency_to_phase(trace: Trace) -> Trace:
    """Integrate a frequency trace [Hz] of gate averages into phase [rad].

    The returned phase has one more sample than the input; sample ``k`` is the
    phase at the start of gate ``k``.
    """
    phase = np.concatenate(([0.0], 2.0 * np.pi * np.cumsum(trace.values) / trace.fs))
    return Trace(phase, trace.fs, "rad", trace.name, trace.t0)


def phase_to_frequency(trace: Trace) -> Trace:
    """Gate-average frequency [Hz] from a phase trace [rad]."""
    freq = np.diff(trace.values) * trace.fs / (2.0 * np.pi)
    return Trace(freq, trace.fs, "Hz", trace.name, trace.t0)
