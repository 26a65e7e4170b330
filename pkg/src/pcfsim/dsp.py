"""Servo signal chain: Nyquist folding, NCO, lock-in, integrators, PID, AOM drive.

The per-tick primitives (``lpf_step``, ``pid_update``, ``dint_update``,
``lockin_samples``) are numba-compiled functions operating on small float64
state arrays so the same code runs from Python and from the loop kernel in
:mod:`pcfsim.servo`.  The classes wrap them for interactive use.

Two lock-in fidelities exist.  Mode A treats the lock-in as its low-pass
transfer function acting on the instantaneous difference frequency
``f_ADC - f_LO``.  Mode B synthesizes the ADC samples of the in-loop beat at
``f_S`` (the undersampling does the folding), mixes them with a
phase-accumulator NCO, filters at the sample rate and discriminates the
phase of the filtered phasor once per control tick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._validation import ConfigError, check_count, check_finite, check_positive

TWO_PI = 2.0 * math.pi


class NyquistZoneError(ConfigError):
    def __init__(self, f: float, f_s: float):
        self.zone = int(f // (f_s / 2.0)) + 1
        super().__init__(f"{f:.9g} Hz falls in Nyquist zone {self.zone}, "
                         f"expected zone 2 ({f_s / 2:.9g}, {f_s:.9g}) Hz", "f_pd1")


@dataclass(frozen=True)
class DspConfig:
    """Servo tuning.  Gains act on Hz-valued errors at ``control_rate``.

    PID 1 sees the one-way fiber frequency error ``-err / 2``; PID 2 sees the
    output of the integrator cascade.  ``rf_scale`` divides the RF plan
    (``f_S``, AOM frequencies and bandwidth, LPF cutoff) for sample-rate runs.
    """

    f_S: float = 125e6
    lpf_cutoff: float = 113e3
    lpf_order: int = 2
    pid1: tuple = (0.0, 2 * math.pi * 20.0, 0.0)
    pid2: tuple = (0.0, 0.0, 0.0)
    integrator_stages: int = 2
    integrator_leak: float = 1.0 - 1e-6
    control_rate: float = 2000.0
    rf_scale: float = 1.0

    def __post_init__(self):
        check_positive(self.f_S, "dsp.f_S")
        check_positive(self.lpf_cutoff, "dsp.lpf_cutoff")
        check_positive(self.control_rate, "dsp.control_rate")
        check_positive(self.rf_scale, "dsp.rf_scale")
        check_count(self.lpf_order, "dsp.lpf_order", 1)
        if self.integrator_stages not in (1, 2):
            raise ConfigError("must be 1 or 2", "dsp.integrator_stages")
        if not 0.0 < self.integrator_leak <= 1.0:
            raise ConfigError("must lie in (0, 1]", "dsp.integrator_leak")
        for name in ("pid1", "pid2"):
            gains = tuple(float(g) for g in getattr(self, name))
            if len(gains) != 3:
                raise ConfigError("expected (kp, ki, kd)", f"dsp.{name}")
            for g in gains:
                check_finite(g, f"dsp.{name}")
            object.__setattr__(self, name, gains)
        if self.f_S / self.rf_scale <= 2.0 * self.lpf_cutoff / self.rf_scale:
            raise ConfigError("f_S must exceed twice the LPF cutoff", "dsp.f_S")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def f_S_eff(self) -> float:
        return self.f_S / self.rf_scale

    @property
    def lpf_cutoff_eff(self) -> float:
        return self.lpf_cutoff / self.rf_scale

    def lpf_time_constant(self) -> float:
        return 1.0 / (TWO_PI * self.lpf_cutoff_eff)


# --------------------------------------------------------------------------
# closed-form blocks (Eqs. of the RF plan)


def adc_fold(f_pd1: float, f_s: float) -> float:
    """Apparent frequency of a second-Nyquist-zone input after sampling."""
    if not f_s / 2.0 < f_pd1 < f_s:
        raise NyquistZoneError(f_pd1, f_s)
    return f_s - f_pd1


def nco_frequency(f_s: float, f1: float, f2: float, f_l_c: float) -> float:
    """Lock-in reference: ``[f_S - 2 (f1 + f2)] - 2 f_L^c``."""
    f_lo = (f_s - 2.0 * (f1 + f2)) - 2.0 * f_l_c
    if not 0.0 < f_lo < f_s / 2.0:
        raise ConfigError(f"LO frequency {f_lo:.9g} Hz outside (0, {f_s / 2:.9g}) Hz", "f_LO")
    return f_lo


def synth_aom_drive(f1: float, f_f_c: float, f_l_c: float) -> float:
    """AOM1 drive ``f1 - f_F^c - f_L^c``."""
    return f1 - f_f_c - f_l_c


# --------------------------------------------------------------------------
# compiled primitives


@njit(cache=True)
def lpf_coefficient(cutoff, dt):
    return 1.0 - math.exp(-TWO_PI * cutoff * dt)


@njit(cache=True)
def lpf_step(state, x, a):
    """Cascade of first-order IIR sections; ``state`` holds one value per section."""
    y = x
    for i in range(state.size):
        state[i] += a * (y - state[i])
        y = state[i]
    return y


@njit(cache=True)
def capture_gain(x, cutoff, order):
    """Roll-off applied to a difference frequency outside the LPF passband."""
    ax = abs(x)
    if ax <= cutoff:
        return 1.0
    return (cutoff / ax) ** order


@njit(cache=True)
def pid_update(state, e, dt, kp, ki, kd, limit):
    """One discrete PID step.  ``state`` = [integral, previous error, primed].

    The integral is clamped to +/- ``limit`` (anti-windup) and so is the output.
    """
    integ = state[0] + ki * e * dt
    if integ > limit:
        integ = limit
    elif integ < -limit:
        integ = -limit
    state[0] = integ
    deriv = 0.0
    if state[2] > 0.0:
        deriv = kd * (e - state[1]) / dt
    state[1] = e
    state[2] = 1.0
    out = kp * e + integ + deriv
    if out > limit:
        out = limit
    elif out < -limit:
        out = -limit
    return out


@njit(cache=True)
def dint_update(state, x, dt, stages, leak):
    """Trapezoidal integrator cascade.  ``state`` = [y1, x1_prev, y2, x2_prev]."""
    y = leak * state[0] + 0.5 * (x + state[1]) * dt
    state[1] = x
    state[0] = y
    if stages == 2:
        y2 = leak * state[2] + 0.5 * (y + state[3]) * dt
        state[3] = y
        state[2] = y2
        return y2
    return y


@njit(cache=True)
def _wrap(p):
    return (p + math.pi) % TWO_PI - math.pi


@njit(cache=True)
def lockin_samples(state, f_pd1, f_lo, f_s, m, a):
    """Process ``m`` ADC samples of a beat at ``f_pd1`` against an NCO at ``f_lo``.

    ``state`` = [theta_pd1, theta_lo, prev_angle, primed, re_1..re_n, im_1..im_n]
    with ``n`` LPF sections.  Returns the discriminated frequency of the
    filtered phasor over the ``m`` samples (Hz).
    """
    order = (state.size - 4) // 2
    th_pd = state[0]
    th_lo = state[1]
    d_pd = TWO_PI * f_pd1 / f_s
    d_lo = TWO_PI * f_lo / f_s
    zr = 0.0
    zi = 0.0
    for _ in range(m):
        s = math.cos(th_pd)
        yr = s * math.cos(th_lo)
        yi = -s * math.sin(th_lo)
        for j in range(order):
            state[4 + j] += a * (yr - state[4 + j])
            yr = state[4 + j]
            state[4 + order + j] += a * (yi - state[4 + order + j])
            yi = state[4 + order + j]
        zr = yr
        zi = yi
        th_pd = (th_pd + d_pd) % TWO_PI
        th_lo = (th_lo + d_lo) % TWO_PI
    state[0] = th_pd
    state[1] = th_lo
    ang = math.atan2(zi, zr)
    if state[3] == 0.0:
        state[3] = 1.0
        state[2] = ang
        return 0.0
    dphi = _wrap(ang - state[2])
    state[2] = ang
    return dphi * f_s / (TWO_PI * m)


# --------------------------------------------------------------------------
# stateful wrappers


class LockIn:
    """Mode-A lock-in: LPF acting on ``f_ADC - f_LO``.

    ``capture_flag`` is raised while the difference frequency sits outside the
    LPF passband; such inputs are attenuated by the filter roll-off.
    """

    def __init__(self, cutoff: float, order: int, dt: float):
        self.cutoff = cutoff
        self.order = order
        self.a = lpf_coefficient(cutoff, dt)
        self.state = np.zeros(order)
        self.capture_flag = False

    def step(self, f_adc: float, f_lo: float) -> float:
        x = f_adc - f_lo
        self.capture_flag = abs(x) > self.cutoff
        return lpf_step(self.state, x * capture_gain(x, self.cutoff, self.order), self.a)


def lockin_demod(lockin: LockIn, f_adc: float, f_lo: float, dt: float | None = None) -> float:
    """Advance ``lockin`` by one control tick; returns the filtered error [Hz]."""
    return lockin.step(f_adc, f_lo)


class SampleRateLockIn:
    """Mode-B lock-in operating on synthesized ADC samples."""

    def __init__(self, f_s: float, cutoff: float, order: int, samples_per_tick: int):
        self.f_s = f_s
        self.m = int(samples_per_tick)
        self.a = lpf_coefficient(cutoff, 1.0 / f_s)
        self.state = np.zeros(4 + 2 * order)

    def step(self, f_pd1: float, f_lo: float) -> float:
        return lockin_samples(self.state, f_pd1, f_lo, self.f_s, self.m, self.a)


class PID:
    def __init__(self, kp=0.0, ki=0.0, kd=0.0, limit=np.inf, initial=0.0):
        self.kp, self.ki, self.kd, self.limit = kp, ki, kd, limit
        self.state = np.array([float(initial), 0.0, 0.0])

    def step(self, error: float, dt: float) -> float:
        return pid_update(self.state, error, dt, self.kp, self.ki, self.kd, self.limit)


def pid_step(pid: PID, error: float, dt: float) -> float:
    return pid.step(error, dt)


class DoubleIntegrator:
    def __init__(self, stages: int = 2, leak: float = 1.0):
        if stages not in (1, 2):
            raise ConfigError("must be 1 or 2", "stages")
        self.stages = stages
        self.leak = leak
        self.state = np.zeros(4)

    def step(self, x: float, dt: float) -> float:
        return dint_update(self.state, x, dt, self.stages, self.leak)


def double_integrate(integrator: DoubleIntegrator, x: float, dt: float, stages: int | None = None) -> float:
    if stages is not None and stages != integrator.stages:
        raise ConfigError("stage count is fixed at construction", "stages")
    return integrator.step(x, dt)
