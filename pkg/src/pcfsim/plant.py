"""Physical plant: laser, fiber segments, AOMs, Faraday-mirror round trip, beats.

Everything runs at baseband: optical fields are tracked as frequency offsets
from the nominal laser frequency.  With ``g = f_L - f_L^c`` the laser offset
seen after the compensation, the in-loop beat offset from ``2 (f1 + f2)`` is

    2 f_L^c + 2 f_F^n + [g(t) - g(t - 2 tau)]

where ``f_F^n`` is the one-way fiber frequency noise at the Faraday mirror
(``t - tau``) minus the round-trip average of the AOM correction, and the
bracket is the laser change over the round trip.  The remote (delivered)
light is ``g(t - tau) - f_F^c(t - tau) + nu_x(t)``, with the fiber noise of
the x segment lumped at the far end.

Delays are fractional numbers of control ticks and are read by linear
interpolation.  Before the delay line holds a full round trip, reads return
the oldest stored value and the state's ``warm`` flag stays False.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._validation import ConfigError, check_positive
from .noise import DriftSpec, NoiseSpec, TempProfile, synth_sum, synth_temperature
from .trace import Trace

C_LIGHT = 299_792_458.0
CARRIER_1550 = 193.4e12


@dataclass(frozen=True)
class LaserModel:
    nominal_frequency: float = CARRIER_1550
    drift: DriftSpec = DriftSpec()
    intrinsic_noise: tuple = ()

    def __post_init__(self):
        check_positive(self.nominal_frequency, "laser.nominal_frequency")
        object.__setattr__(self, "intrinsic_noise", tuple(self.intrinsic_noise))


@dataclass(frozen=True)
class FiberLink:
    """A fiber segment.  Noise amplitudes are per sqrt(km): the PSD scales with length."""

    length: float = 1.0  # km
    group_index: float = 1.468
    noise: tuple = ()
    temperature_coupling: float = 0.0  # rad / degC
    id: str = "x"

    def __post_init__(self):
        check_positive(self.length, f"{self.id}.length", strict=False)
        check_positive(self.group_index, f"{self.id}.group_index")
        if not self.temperature_coupling >= 0:
            raise ConfigError("must be >= 0", f"{self.id}.temperature_coupling")
        object.__setattr__(self, "noise", tuple(self.noise))

    @property
    def one_way_delay(self) -> float:
        return self.length * 1e3 * self.group_index / C_LIGHT

    def noise_specs(self) -> tuple:
        s = math.sqrt(self.length)
        return tuple(NoiseSpec(n.kind, n.amplitude * s, n.seed) for n in self.noise)


@dataclass(frozen=True)
class AomActuator:
    center_frequency: float = 20e6
    bandwidth: float = 1e6

    def __post_init__(self):
        check_positive(self.center_frequency, "aom.center_frequency")
        check_positive(self.bandwidth, "aom.bandwidth")

    def drive(self, frequency: float) -> tuple[float, bool]:
        """Clamp a requested drive frequency; returns (applied, saturated)."""
        lo = self.center_frequency - self.bandwidth
        hi = self.center_frequency + self.bandwidth
        if frequency < lo:
            return lo, True
        if frequency > hi:
            return hi, True
        return frequency, False


@dataclass(frozen=True)
class CounterModel:
    """Frequency counter.  ``reference_instability`` is added to recorded beats
    as a phase process sampled at the gate rate; it is the measurement floor
    of the in-loop and out-of-loop records and is not seen by the servo."""

    gate_time: float = 1.0
    reference_instability: NoiseSpec | None = None
    readout_resolution: float = 0.0

    def __post_init__(self):
        check_positive(self.gate_time, "counter.gate_time")
        check_positive(self.readout_resolution, "counter.readout_resolution", strict=False)


@dataclass(frozen=True)
class DfcReference:
    """Comb reference for the out-of-loop beat, modeled as white frequency noise.

    ``linewidth`` is carried as metadata only; the beat noise follows from
    ``instability_at_1s`` (white FM: sigma_y(tau) = sigma_1 / sqrt(tau)).
    """

    instability_at_1s: float = 8.40e-12
    linewidth: float = 6.38e3
    seed: int = 0

    def __post_init__(self):
        check_positive(self.instability_at_1s, "dfc.instability_at_1s", strict=False)
        check_positive(self.linewidth, "dfc.linewidth", strict=False)

    def noise_spec(self, carrier: float = CARRIER_1550) -> NoiseSpec:
        # white FM: S_y = 2 sigma_1^2 (one-sided), in Hz^2/Hz times carrier^2
        return NoiseSpec("white-frequency", math.sqrt(2.0) * self.instability_at_1s * carrier, self.seed)


@dataclass(frozen=True)
class PlantConfig:
    laser: LaserModel = LaserModel()
    link: FiberLink = FiberLink(1.0, id="x")
    delivery: FiberLink = FiberLink(0.0, id="y")
    reference: FiberLink = FiberLink(0.0, id="z")
    aom1: AomActuator = AomActuator()
    aom2: AomActuator = AomActuator()
    counter: CounterModel = CounterModel()
    dfc: DfcReference = DfcReference(0.0, 6.38e3)
    temperature: TempProfile = TempProfile()
    loop_noise: tuple = ()  # additive reference-clock noise on the error path

    def scaled(self, factor: float) -> "PlantConfig":
        """Map slow processes onto a time axis compressed by ``factor``.

        Drift rates grow by ``factor``; periods, gate time and random-walk
        time constants shrink.  Fiber delays and fiber noise stay physical.
        """
        if factor == 1.0:
            return self
        temp = self.temperature
        temp = replace(temp, components=tuple((a, p / factor, ph) for a, p, ph in temp.components),
                       random_walk=temp.random_walk * math.sqrt(factor))
        dfc_scale = 1.0 / math.sqrt(factor)
        return replace(
            self,
            laser=replace(self.laser, drift=self.laser.drift.scaled(factor)),
            counter=replace(self.counter, gate_time=self.counter.gate_time / factor),
            dfc=replace(self.dfc, instability_at_1s=self.dfc.instability_at_1s * dfc_scale),
            temperature=temp,
        )


# --------------------------------------------------------------------------
# disturbance synthesis


@dataclass
class Disturbances:
    """Per-tick disturbance arrays (length ``n``) for a run at tick ``dt``.

    ``f_L``: laser offset [Hz]; ``nu_x``: one-way x-segment frequency noise
    including its thermal term [Hz]; ``nu_yz``: ``nu_y - nu_z`` [Hz];
    ``dfc``: comb frequency noise [Hz]; ``loop``: additive error-path noise
    [Hz]; ``temperature``: n + 1 samples at the tick edges [degC].
    """

    f_L: np.ndarray
    nu_x: np.ndarray
    nu_yz: np.ndarray
    dfc: np.ndarray
    loop: np.ndarray
    temperature: np.ndarray
    dt: float

    @property
    def n(self) -> int:
        return self.f_L.size

    def tick(self, k: int) -> "TickDisturbance":
        return TickDisturbance(
            laser_step=float(self.f_L[k] - (self.f_L[k - 1] if k > 0 else 0.0)),
            dphi_x=float(self.nu_x[k]) * 2.0 * math.pi * self.dt,
            dphi_yz=float(self.nu_yz[k]) * 2.0 * math.pi * self.dt,
            temperature=float(self.temperature[k + 1]),
            dfc=float(self.dfc[k]),
            loop=float(self.loop[k]),
        )


def _freq_from_phase(phase: np.ndarray, dt: float) -> np.ndarray:
    return np.diff(phase) / (2.0 * np.pi * dt)


def build_disturbances(plant: PlantConfig, n: int, dt: float) -> Disturbances:
    """Synthesize all per-tick disturbances for ``n`` ticks (plant in sim units)."""
    fs = 1.0 / dt
    t = np.arange(n) * dt
    temp = synth_temperature(plant.temperature, n + 1, fs).values
    dtemp = np.diff(temp)

    f_l = plant.laser.drift.evaluate(t)
    if plant.laser.intrinsic_noise:
        f_l = f_l + _freq_from_phase(synth_sum(plant.laser.intrinsic_noise, n + 1, fs), dt)

    def link_freq(link: FiberLink) -> np.ndarray:
        nu = link.temperature_coupling * dtemp / (2.0 * np.pi * dt)
        specs = link.noise_specs()
        if specs and link.length > 0:
            nu = nu + _freq_from_phase(synth_sum(specs, n + 1, fs), dt)
        return nu

    nu_x = link_freq(plant.link)
    nu_yz = link_freq(plant.delivery) - link_freq(plant.reference)

    dfc_spec = plant.dfc.noise_spec(plant.laser.nominal_frequency)
    dfc = np.zeros(n) if dfc_spec.amplitude == 0 else _freq_from_phase(synth_sum([dfc_spec], n + 1, fs), dt)
    loop = np.zeros(n) if not plant.loop_noise else _freq_from_phase(synth_sum(plant.loop_noise, n + 1, fs), dt)
    return Disturbances(f_l, nu_x, nu_yz, dfc, loop, temp, dt)


# --------------------------------------------------------------------------
# per-tick reference stepper


class DelayLine:
    """Ring buffer of per-tick values read at a fractional tick delay."""

    def __init__(self, max_delay_ticks: float):
        self.size = int(math.floor(max_delay_ticks)) + 4
        self.buf = np.zeros(self.size)
        self.k = -1

    def copy(self) -> "DelayLine":
        new = DelayLine.__new__(DelayLine)
        new.size, new.buf, new.k = self.size, self.buf.copy(), self.k
        return new

    def push(self, value: float) -> None:
        self.k += 1
        self.buf[self.k % self.size] = value

    def read(self, delay: float) -> float:
        p = self.k - delay
        if p <= 0.0:
            return float(self.buf[0])
        i0 = int(math.floor(p))
        frac = p - i0
        v0 = self.buf[i0 % self.size]
        if frac == 0.0:
            return float(v0)
        return float(v0 + frac * (self.buf[(i0 + 1) % self.size] - v0))


@dataclass(frozen=True)
class TickDisturbance:
    laser_step: float = 0.0   # Hz, change of the laser offset this tick
    dphi_x: float = 0.0       # rad, x-segment fiber phase increment (noise + thermal)
    dphi_yz: float = 0.0      # rad, y minus z phase increment
    temperature: float | None = None
    dfc: float = 0.0
    loop: float = 0.0


@dataclass
class PlantState:
    """Instantaneous plant state.  Advanced by :func:`plant_tick`.

    ``f_F_c`` and ``f_L_c`` are the servo corrections applied during the
    next tick; they are set by the controller between ticks.
    """

    dt: float
    round_trip_ticks: float
    f1: float = 20e6
    f2: float = 20e6
    bandwidth: float = 1e6
    tick: int = 0
    f_L: float = 0.0
    phi_x: float = 0.0
    phi_yz: float = 0.0
    nu_x: float = 0.0
    nu_yz: float = 0.0
    temperature: float = 22.0
    dfc: float = 0.0
    loop: float = 0.0
    f_F_c: float = 0.0
    f_L_c: float = 0.0
    aom1_drive: float = 20e6
    saturated: bool = False
    warm: bool = False
    hist_g: DelayLine = None
    hist_fc: DelayLine = None
    hist_nu: DelayLine = None

    def __post_init__(self):
        if self.hist_g is None:
            self.hist_g = DelayLine(self.round_trip_ticks)
            self.hist_fc = DelayLine(self.round_trip_ticks)
            self.hist_nu = DelayLine(self.round_trip_ticks)

    @property
    def one_way_ticks(self) -> float:
        return 0.5 * self.round_trip_ticks

    @property
    def time(self) -> float:
        return self.tick * self.dt

    @classmethod
    def initial(cls, plant: PlantConfig, dt: float) -> "PlantState":
        return cls(dt=dt, round_trip_ticks=2.0 * plant.link.one_way_delay / dt,
                   f1=plant.aom1.center_frequency, f2=plant.aom2.center_frequency,
                   bandwidth=plant.aom1.bandwidth, temperature=plant.temperature.mean,
                   aom1_drive=plant.aom1.center_frequency)

    def apply_drive(self, f_f_c: float, f_l_c: float) -> None:
        self.f_F_c = f_f_c
        self.f_L_c = f_l_c


def _clamp_correction(f_f_c: float, f_l_c: float, limit: float) -> tuple[float, float, bool]:
    total = f_f_c + f_l_c
    if abs(total) <= limit:
        return f_f_c, f_l_c, False
    if abs(f_l_c) > limit:
        f_l_c = math.copysign(limit, f_l_c)
    return math.copysign(limit, total) - f_l_c, f_l_c, True


def plant_tick(state: PlantState, disturbances: TickDisturbance, dt: float) -> PlantState:
    """Advance the plant by one tick, returning a new state."""
    if not dt > 0:
        raise ConfigError("must be > 0", "dt")
    d = disturbances
    f_f_c, f_l_c, sat = _clamp_correction(state.f_F_c, state.f_L_c, state.bandwidth)
    new = replace(state, hist_g=state.hist_g.copy(), hist_fc=state.hist_fc.copy(),
                  hist_nu=state.hist_nu.copy())
    new.tick = state.tick + 1
    new.f_L = state.f_L + d.laser_step
    new.phi_x = state.phi_x + d.dphi_x
    new.phi_yz = state.phi_yz + d.dphi_yz
    new.nu_x = d.dphi_x / (2.0 * math.pi * dt)
    new.nu_yz = d.dphi_yz / (2.0 * math.pi * dt)
    if d.temperature is not None:
        new.temperature = d.temperature
    new.dfc = d.dfc
    new.loop = d.loop
    new.f_F_c, new.f_L_c = f_f_c, f_l_c
    new.aom1_drive = state.f1 - f_f_c - f_l_c
    new.saturated = sat
    new.hist_g.push(new.f_L - f_l_c)
    new.hist_fc.push(f_f_c)
    new.hist_nu.push(new.nu_x)
    new.warm = new.hist_g.k >= state.round_trip_ticks
    return new


def inloop_offset(state: PlantState) -> float:
    """In-loop beat minus the nominal ``2 (f1 + f2)``."""
    d_rt = state.round_trip_ticks
    cbar = 0.5 * (state.f_F_c + state.hist_fc.read(d_rt))
    f_f_n = state.hist_nu.read(state.one_way_ticks) - cbar
    delta = state.hist_g.read(0.0) - state.hist_g.read(d_rt)
    return 2.0 * (state.f_L_c + f_f_n) + delta


def beat_inloop(state: PlantState) -> float:
    """f_PD1 = 2 (f1 + f2 + f_L^c + f_F^n) + delta f_L^d."""
    return 2.0 * (state.f1 + state.f2) + inloop_offset(state)


def remote_offset(state: PlantState) -> float:
    d_ow = state.one_way_ticks
    return state.hist_g.read(d_ow) - state.hist_fc.read(d_ow) + state.nu_x


def beat_outofloop(state: PlantState, ref: DfcReference | None = None) -> float:
    """Delivered light minus the comb reference, including the y - z term."""
    dfc = state.dfc if ref is None or ref.instability_at_1s > 0 else 0.0
    return remote_offset(state) + state.nu_yz - dfc


def counter_read(counter: CounterModel, beat: Trace, window: float, start: float | None = None,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean frequency over ``[start, start + window)`` and the window end time.

    ``rng`` draws the reference-instability contribution (white frequency
    noise only); without it the read is noiseless.
    """
    if window < counter.gate_time * (1 - 1e-9):
        raise ConfigError(f"window {window} s is shorter than the gate time {counter.gate_time} s", "window")
    start = beat.t0 if start is None else start
    seg = beat.slice_time(start, start + window)
    expected = int(round(window * beat.fs))
    if len(seg) < max(expected, 1):
        raise ConfigError("beat does not cover the requested window", "window")
    mean = float(np.mean(seg.values))
    spec = counter.reference_instability
    if rng is not None and spec is not None and spec.kind == "white-frequency":
        mean += rng.standard_normal() * spec.amplitude / math.sqrt(2.0 * window)
    if counter.readout_resolution > 0:
        mean = round(mean / counter.readout_resolution) * counter.readout_resolution
    return mean, start + window
