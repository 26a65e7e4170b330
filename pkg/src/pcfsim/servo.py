"""Closed-loop orchestration: PCF-only, self-referencing and absolute referencing.

The loop runs in a compiled kernel (:func:`_run_ticks`) that advances plant
and DSP together one control tick at a time.  Python drives the kernel in
segments so that counter reads and telemetry deliveries can be scheduled on
the same logical clock between segments.

Per tick, with ``u1 = -err / 2`` the one-way fiber error seen by PID 1 and
``u2 = -(err - 2 cbar)`` the error with the round-trip averaged AOM
correction ``cbar`` added back (the component the PCF loop has not
removed), the self-referencing path is ``f_L^c = PID2(dint(u2))``.

Time scaling: a run with ``time_scale = S`` compresses slow processes by S
(see :meth:`PlantConfig.scaled`).  Returned traces are on the physical time
axis, so slopes and Allan taus read directly in physical units.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit

from . import analysis
from ._validation import ConfigError, check_positive, check_probability
from .dsp import (DspConfig, capture_gain, dint_update, lockin_samples, lpf_coefficient,
                  lpf_step, pid_update)
from .noise import make_rng, synth_power_law
from .plant import Disturbances, PlantConfig, build_disturbances, counter_read
from .trace import Trace, frequency_to_phase

MODES = ("pcf-only", "self-referencing", "absolute-referencing")

# parameter vector layout
_DT, _DRT, _LPF_A, _CUT, _ORDER, _KP1, _KI1, _KD1, _KP2, _KI2, _KD2, _STAGES, _LEAK, _LIMIT, \
    _PCF, _MODE, _WARM, _FID, _F12, _FS, _M, _LPF_AS, _GATE = range(23)
_NPAR = 23
# state vector layout
_FFC, _FLC, _RATE, _NPOST, _NCAP, _NSAT = range(6)
_NSTATE = 6
# recorded channels (gate averages)
CHANNELS = ("dpd1", "x", "err", "f_F_c", "f_L_c", "f_ool", "sat", "capture", "u2")
_NCH = len(CHANNELS)

_MODE_CODE = {"pcf-only": 0, "self-referencing": 1, "absolute-referencing": 2}
_MODE_STEP = 3


class UnlockedError(RuntimeError):
    """The loop did not stay within the lock-in capture range."""


@dataclass(frozen=True)
class TelemetryConfig:
    latency: float = 0.0
    drop_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        check_positive(self.latency, "telemetry.latency", strict=False)
        check_probability(self.drop_probability, "telemetry.drop_probability")


@dataclass(frozen=True)
class MetricsConfig:
    sigma0_tau: tuple = (None, None)
    adev_max_fraction: float = 0.25
    psd_segments: int = 8
    ipn_band: tuple | None = None
    suppression_band: tuple | None = None
    compare_open_loop: bool = False
    settle_time: float = 0.0  # extra exclusion after warm-up, physical s


@dataclass(frozen=True)
class ServoConfig:
    mode: str = "pcf-only"
    dsp: DspConfig = DspConfig()
    drift_estimation_window: float = 86400.0
    telemetry: TelemetryConfig = TelemetryConfig()
    duration: float = 100.0
    time_scale: float = 1.0
    fidelity: str = "A"
    interpolation: str = "ramp"
    pcf_active: bool = True
    metrics: MetricsConfig = MetricsConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {list(MODES)}", "servo.mode")
        if self.fidelity not in ("A", "B"):
            raise ConfigError("must be 'A' or 'B'", "servo.fidelity")
        if self.interpolation not in ("ramp", "step"):
            raise ConfigError("must be 'ramp' or 'step'", "servo.interpolation")
        check_positive(self.duration, "servo.duration")
        check_positive(self.time_scale, "servo.time_scale")
        check_positive(self.drift_estimation_window, "servo.drift_estimation_window")


# --------------------------------------------------------------------------
# telemetry


TELEMETRY_MAGIC = b"PCFT"
TELEMETRY_VERSION = 1
_TELEMETRY_STRUCT = struct.Struct("<4sHIdd")


@dataclass(frozen=True)
class TelemetryRecord:
    """Counter-to-servo message.  Wire format (little endian, 26 bytes):
    magic ``b"PCFT"``, version u16, sequence u32, timestamp f64 [s], drift f64 [Hz/s]."""

    seq: int
    timestamp: float
    drift: float

    def encode(self) -> bytes:
        return _TELEMETRY_STRUCT.pack(TELEMETRY_MAGIC, TELEMETRY_VERSION, self.seq & 0xFFFFFFFF,
                                      float(self.timestamp), float(self.drift))

    @classmethod
    def decode(cls, data: bytes) -> "TelemetryRecord":
        if len(data) != _TELEMETRY_STRUCT.size:
            raise ConfigError(f"expected {_TELEMETRY_STRUCT.size} bytes, got {len(data)}", "telemetry.record")
        magic, version, seq, ts, drift = _TELEMETRY_STRUCT.unpack(data)
        if magic != TELEMETRY_MAGIC:
            raise ConfigError(f"bad magic {magic!r}", "telemetry.record")
        if version != TELEMETRY_VERSION:
            raise ConfigError(f"unsupported version {version}", "telemetry.record")
        return cls(seq, ts, drift)


class TelemetryChannel:
    """Lossy message channel with fixed latency and its own RNG stream."""

    def __init__(self, config: TelemetryConfig, time_scale: float = 1.0):
        self.config = config
        self.time_scale = time_scale
        self.rng = make_rng(config.seed)
        self.sent = 0
        self.dropped = 0
        self.delivered = 0

    def send(self, record: TelemetryRecord, now: float) -> tuple[bytes, float] | None:
        """Returns (payload, arrival time) or None when the message is lost.

        ``now`` and the arrival time are on the simulation clock.
        """
        self.sent += 1
        if self.rng.random() < self.config.drop_probability:
            self.dropped += 1
            return None
        self.delivered += 1
        return record.encode(), now + self.config.latency / self.time_scale


def telemetry_exchange(channel: TelemetryChannel, measurement: tuple[float, float], seq: int = 0):
    """Push ``(drift Hz/s, timestamp s)`` through ``channel``.

    Returns ``(TelemetryRecord, arrival_time)`` or None for a drop.
    """
    drift, timestamp = measurement
    out = channel.send(TelemetryRecord(seq, timestamp, drift), timestamp / channel.time_scale)
    if out is None:
        return None
    payload, arrival = out
    return TelemetryRecord.decode(payload), arrival


# --------------------------------------------------------------------------
# kernel


@njit(cache=True)
def _ring_read(ring, k, delay):
    p = k - delay
    if p <= 0.0:
        return ring[0]
    i0 = int(math.floor(p))
    frac = p - i0
    n = ring.size
    v0 = ring[i0 % n]
    if frac == 0.0:
        return v0
    return v0 + frac * (ring[(i0 + 1) % n] - v0)


@njit(cache=True)
def _run_ticks(k0, k1, P, S, lpf, pid1, pid2, dint, lockb, ring_fc, ring_g, ring_nu,
               f_l, nu_x, nu_yz, dfc, loop, rec):
    dt = P[_DT]
    drt = P[_DRT]
    dow = 0.5 * drt
    lim = P[_LIMIT]
    cut = P[_CUT]
    order = P[_ORDER]
    mode = int(P[_MODE])
    gate = int(P[_GATE])
    inv_gate = 1.0 / gate
    nrec = rec.shape[0]
    nring = ring_fc.size
    warm = int(P[_WARM])
    for k in range(k0, k1):
        ffc = S[_FFC]
        flc = S[_FLC]
        total = ffc + flc
        sat = 0.0
        if abs(total) > lim:
            if abs(flc) > lim:
                flc = math.copysign(lim, flc)
            ffc = math.copysign(lim, total) - flc
            sat = 1.0
        g = f_l[k] - flc
        slot = k % nring
        ring_fc[slot] = ffc
        ring_g[slot] = g
        ring_nu[slot] = nu_x[k]

        cbar = 0.5 * (ffc + _ring_read(ring_fc, k, drt))
        f_f_n = _ring_read(ring_nu, k, dow) - cbar
        delta = g - _ring_read(ring_g, k, drt)
        dpd1 = 2.0 * (flc + f_f_n) + delta
        x = -dpd1 + 2.0 * flc
        capture = 1.0 if abs(x) > cut else 0.0
        if P[_FID] == 0.0:
            xin = x + loop[k]
            err = lpf_step(lpf, xin * capture_gain(xin, cut, order), P[_LPF_A])
        else:
            f_pd1 = P[_F12] + dpd1
            f_lo = P[_FS] - P[_F12] - 2.0 * flc
            err = lockin_samples(lockb, f_pd1, f_lo, P[_FS], int(P[_M]), P[_LPF_AS]) + loop[k]

        ool = _ring_read(ring_g, k, dow) - _ring_read(ring_fc, k, dow) + nu_x[k] + nu_yz[k] - dfc[k]

        if P[_PCF] > 0.0:
            ffc_next = pid_update(pid1, -0.5 * err, dt, P[_KP1], P[_KI1], P[_KD1], lim)
        else:
            ffc_next = 0.0
        u2 = -(err - 2.0 * cbar)
        if mode == 1:
            y = dint_update(dint, u2, dt, int(P[_STAGES]), P[_LEAK])
            flc_next = pid_update(pid2, y, dt, P[_KP2], P[_KI2], P[_KD2], lim)
        elif mode == 2:
            flc_next = flc + S[_RATE] * dt
        else:
            flc_next = flc

        if k >= warm:
            S[_NPOST] += 1.0
            S[_NCAP] += capture
        S[_NSAT] += sat
        r = k // gate
        if r < nrec:
            rec[r, 0] += dpd1 * inv_gate
            rec[r, 1] += x * inv_gate
            rec[r, 2] += err * inv_gate
            rec[r, 3] += ffc * inv_gate
            rec[r, 4] += flc * inv_gate
            rec[r, 5] += ool * inv_gate
            rec[r, 6] += sat * inv_gate
            rec[r, 7] += capture * inv_gate
            rec[r, 8] += u2 * inv_gate
        S[_FFC] = ffc_next
        S[_FLC] = flc_next


def warmup_time(plant: PlantConfig, dsp: DspConfig) -> float:
    """Simulation seconds excluded from metrics: round trip plus 10 LPF time constants."""
    return 2.0 * plant.link.one_way_delay + 10.0 * dsp.lpf_time_constant()


class LoopKernel:
    """Compiled loop state for one run; advance it with :meth:`advance`."""

    def __init__(self, plant: PlantConfig, servo: ServoConfig, dist: Disturbances, gate_ticks: int):
        dsp = servo.dsp
        dt = dsp.dt
        self.dt = dt
        self.n = dist.n
        self.k = 0
        self.dist = dist
        rf = dsp.rf_scale
        drt = 2.0 * plant.link.one_way_delay / dt
        mode = _MODE_CODE[servo.mode]
        if servo.mode == "absolute-referencing" and servo.interpolation == "step":
            mode = _MODE_STEP
        P = np.zeros(_NPAR)
        P[_DT] = dt
        P[_DRT] = drt
        P[_CUT] = dsp.lpf_cutoff_eff
        P[_LPF_A] = lpf_coefficient(dsp.lpf_cutoff_eff, dt)
        P[_ORDER] = dsp.lpf_order
        P[_KP1], P[_KI1], P[_KD1] = dsp.pid1
        P[_KP2], P[_KI2], P[_KD2] = dsp.pid2
        P[_STAGES] = dsp.integrator_stages
        P[_LEAK] = dsp.integrator_leak
        P[_LIMIT] = plant.aom1.bandwidth / rf
        P[_PCF] = 1.0 if servo.pcf_active else 0.0
        P[_MODE] = mode
        P[_WARM] = math.ceil(warmup_time(plant, dsp) / dt)
        P[_FID] = 0.0 if servo.fidelity == "A" else 1.0
        P[_F12] = 2.0 * (plant.aom1.center_frequency + plant.aom2.center_frequency) / rf
        P[_FS] = dsp.f_S_eff
        if servo.fidelity == "B":
            m = dsp.f_S_eff * dt
            if abs(m - round(m)) > 1e-9 or round(m) < 1:
                raise ConfigError(f"f_S / control_rate = {m:.6g} must be a positive integer in mode B",
                                  "dsp.control_rate")
            P[_M] = round(m)
            P[_LPF_AS] = lpf_coefficient(dsp.lpf_cutoff_eff, 1.0 / dsp.f_S_eff)
        P[_GATE] = gate_ticks
        self.P = P
        self.S = np.zeros(_NSTATE)
        self.lpf = np.zeros(dsp.lpf_order)
        self.pid1 = np.zeros(3)
        self.pid2 = np.zeros(3)
        self.dint = np.zeros(4)
        self.lockb = np.zeros(4 + 2 * dsp.lpf_order)
        size = int(math.floor(drt)) + 4
        self.ring_fc = np.zeros(size)
        self.ring_g = np.zeros(size)
        self.ring_nu = np.zeros(size)
        self.rec = np.zeros((self.n // gate_ticks, _NCH))
        self.gate_ticks = gate_ticks

    def advance(self, k_target: int) -> None:
        k_target = min(int(k_target), self.n)
        if k_target <= self.k:
            return
        d = self.dist
        _run_ticks(self.k, k_target, self.P, self.S, self.lpf, self.pid1, self.pid2, self.dint,
                   self.lockb, self.ring_fc, self.ring_g, self.ring_nu,
                   d.f_L, d.nu_x, d.nu_yz, d.dfc, d.loop, self.rec)
        self.k = k_target

    @property
    def warm_ticks(self) -> int:
        return int(self.P[_WARM])

    @property
    def capture_fraction(self) -> float:
        return self.S[_NCAP] / self.S[_NPOST] if self.S[_NPOST] > 0 else 0.0

    @property
    def saturated_fraction(self) -> float:
        return self.S[_NSAT] / max(self.k, 1)

    def set_rate(self, rate: float) -> None:
        self.S[_RATE] = rate

    def bump_correction(self, delta: float) -> None:
        self.S[_FLC] += delta


# --------------------------------------------------------------------------
# run orchestration


@dataclass
class RunResult:
    traces: dict
    metrics: analysis.StabilityReport
    metadata: dict
    unlocked: bool = False
    open_loop: "RunResult | None" = None

    def summary(self) -> dict:
        return metrics_dict(self)


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _gate_mean(x: np.ndarray, gate: int, nrec: int) -> np.ndarray:
    return x[: nrec * gate].reshape(nrec, gate).mean(axis=1)


def _floor_noise(plant: PlantConfig, nrec: int, fs_rec: float, offset: int) -> np.ndarray:
    spec = plant.counter.reference_instability
    if spec is None or spec.amplitude == 0 or nrec < 1:
        return np.zeros(nrec)
    spec = replace(spec, seed=spec.seed + offset)
    phase = synth_power_law(spec, nrec + 1, fs_rec).values
    return np.diff(phase) * fs_rec / (2.0 * np.pi)


def _run_absolute(kern: LoopKernel, servo: ServoConfig, plant: PlantConfig, floor_ool: np.ndarray):
    """Counter -> telemetry -> feed-forward cycle; returns (first delivery tick, stats)."""
    dt = kern.dt
    gate = kern.gate_ticks
    S = servo.time_scale
    w_gates = max(1, int(round(servo.drift_estimation_window / S / (gate * dt))))
    w_ticks = w_gates * gate
    window = w_ticks * dt
    channel = TelemetryChannel(servo.telemetry, S)
    step_mode = servo.interpolation == "step"
    rate_applied = 0.0
    next_step = None
    first = None
    seq = 0
    estimates = []
    fs_rec = 1.0 / (gate * dt)

    def advance(target):
        nonlocal next_step
        while step_mode and next_step is not None and next_step <= target:
            kern.advance(next_step)
            kern.bump_correction(rate_applied * w_ticks * dt)
            next_step += w_ticks
        kern.advance(target)

    start = int(math.ceil(kern.warm_ticks / gate)) * gate
    while start + 2 * w_ticks <= kern.n:
        end = start + 2 * w_ticks
        advance(end)
        r0 = start // gate
        ool = Trace(kern.rec[r0: r0 + 2 * w_gates, 5] + floor_ool[r0: r0 + 2 * w_gates], fs_rec,
                    "Hz", "f_ool", t0=r0 / fs_rec)
        m1, t1 = counter_read(plant.counter, ool, window, start=ool.t0)
        m2, t2 = counter_read(plant.counter, ool, window, start=t1)
        rate_sim = (m2 - m1) / window
        out = telemetry_exchange(channel, (rate_sim / S, t2 * S), seq)
        seq += 1
        if out is None:
            start = end
            continue
        record, arrival = out
        arrival_tick = end + int(round((arrival - end * dt) / dt))
        if arrival_tick > kern.n:
            break
        advance(arrival_tick)
        rate_applied += record.drift * S
        estimates.append(record.drift)
        if step_mode:
            if next_step is None:
                next_step = arrival_tick
                advance(arrival_tick)
        else:
            kern.set_rate(rate_applied)
        if first is None:
            first = arrival_tick
        start = int(math.ceil(arrival_tick / gate)) * gate
    advance(kern.n)
    stats = {"sent": channel.sent, "dropped": channel.dropped, "delivered": channel.delivered,
             "applied": len(estimates), "estimates_hz_per_s": estimates, "window_s": window * S}
    return first, stats


def run_scenario(plant: PlantConfig, servo: ServoConfig, *, disturbances: Disturbances | None = None,
                 config_id: str | None = None, _open_loop: bool = True) -> RunResult:
    """Advance plant and DSP in lockstep for ``servo.duration`` (physical seconds)."""
    S = servo.time_scale
    sim_plant = plant.scaled(S)
    dsp = servo.dsp
    dt = dsp.dt
    n = int(round(servo.duration / S / dt))
    gate = max(1, int(round(sim_plant.counter.gate_time / dt)))
    warm = warmup_time(sim_plant, dsp)
    if n * dt <= warm or n < 2 * gate:
        raise ConfigError(f"duration {servo.duration} s does not exceed the warm-up", "servo.duration")
    if disturbances is not None and (disturbances.n != n or not math.isclose(disturbances.dt, dt, rel_tol=1e-12)):
        raise ConfigError(f"disturbances hold {disturbances.n} ticks of {disturbances.dt:g} s; "
                          f"the run needs {n} ticks of {dt:g} s", "disturbances")
    dist = disturbances if disturbances is not None else build_disturbances(sim_plant, n, dt)
    kern = LoopKernel(sim_plant, servo, dist, gate)
    nrec = kern.rec.shape[0]
    fs_rec = 1.0 / (gate * dt)
    floor_in = _floor_noise(sim_plant, nrec, fs_rec, 0)
    floor_ool = _floor_noise(sim_plant, nrec, fs_rec, 1)

    tele = None
    first = None
    if servo.mode == "absolute-referencing":
        first, tele = _run_absolute(kern, servo, sim_plant, floor_ool)
    else:
        kern.advance(n)

    traces = _make_traces(kern, sim_plant, servo, dist, floor_in, floor_ool)
    unlocked = kern.capture_fraction > 0.01
    excl = (warm + servo.metrics.settle_time / S) * S
    fit_start = excl
    if first is not None:
        fit_start = max(excl, first * dt * S)

    open_res = None
    if _open_loop and servo.metrics.compare_open_loop and servo.pcf_active:
        open_servo = replace(servo, pcf_active=False, mode="pcf-only")
        open_res = run_scenario(plant, open_servo, disturbances=dist, config_id=config_id, _open_loop=False)

    report = compute_metrics(traces, servo, plant, excl, fit_start, open_res)
    report.extra["capture_fraction"] = kern.capture_fraction
    report.extra["saturated_fraction"] = kern.saturated_fraction
    report.extra["unlocked"] = unlocked
    if tele is not None:
        report.extra["telemetry"] = tele
        report.extra["first_correction_s"] = None if first is None else first * dt * S

    seeds = _collect_seeds(plant)
    meta = {
        "time_scale": S,
        "rf_scale": dsp.rf_scale,
        "dt_sim": dt,
        "ticks": n,
        "gate_ticks": gate,
        "record_rate_hz": fs_rec / S,
        "warmup_s": warm * S,
        "excluded_s": excl,
        "fit_start_s": fit_start,
        "seeds": seeds,
        "rng": "numpy.random.Philox",
        "config_hash": config_id or config_hash({"plant": asdict(plant), "servo": asdict(servo)}),
        "mode": servo.mode,
        "fidelity": servo.fidelity,
    }
    return RunResult(traces, report, meta, unlocked, open_res)


def _collect_seeds(plant: PlantConfig) -> list:
    seeds = [n.seed for n in plant.laser.intrinsic_noise]
    for link in (plant.link, plant.delivery, plant.reference):
        seeds += [n.seed for n in link.noise]
    seeds.append(plant.temperature.seed)
    seeds.append(plant.dfc.seed)
    if plant.counter.reference_instability is not None:
        seeds.append(plant.counter.reference_instability.seed)
    return seeds


def _make_traces(kern, plant, servo, dist, floor_in, floor_ool) -> dict:
    rec = kern.rec
    nrec = rec.shape[0]
    S = servo.time_scale
    fs = 1.0 / (kern.gate_ticks * kern.dt) / S
    dsp = servo.dsp
    rf = dsp.rf_scale
    f1 = plant.aom1.center_frequency / rf
    f2 = plant.aom2.center_frequency / rf
    f_s = dsp.f_S_eff
    dpd1 = rec[:, 0] + floor_in
    f_lc = rec[:, 4]
    f_fc = rec[:, 3]
    temp_tick = 0.5 * (dist.temperature[:-1] + dist.temperature[1:])
    cols = {
        "f_PD1": (2.0 * (f1 + f2) + dpd1, "Hz"),
        "f_ADC": (f_s - (2.0 * (f1 + f2) + dpd1), "Hz"),
        "f_LO": ((f_s - 2.0 * (f1 + f2)) - 2.0 * f_lc, "Hz"),
        "err": (rec[:, 2], "Hz"),
        "f_F_c": (f_fc, "Hz"),
        "f_L_c": (f_lc, "Hz"),
        "f_1_t": (f1 - f_fc - f_lc, "Hz"),
        "f_ool": (rec[:, 5] + floor_ool, "Hz"),
        "inloop": (dpd1, "Hz"),
        "T": (_gate_mean(temp_tick, kern.gate_ticks, nrec), "degC"),
        "sat": (rec[:, 6], "1"),
        "capture": (rec[:, 7], "1"),
    }
    return {k: Trace(v, fs, u, k) for k, (v, u) in cols.items()}


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a) * np.dot(b, b)))
    return float(np.dot(a, b) / den) if den > 0 else 0.0


def compute_metrics(traces: dict, servo: ServoConfig, plant: PlantConfig, excl: float,
                    fit_start: float, open_res: RunResult | None) -> analysis.StabilityReport:
    m = servo.metrics
    carrier = plant.laser.nominal_frequency
    rep = analysis.StabilityReport()
    inloop = traces["inloop"].slice_time(excl)
    ool = traces["f_ool"].slice_time(excl)
    temp = traces["T"].slice_time(excl)
    lo, hi = m.sigma0_tau

    if len(inloop) >= 8:
        rep.adev = analysis.overlapping_adev(inloop, analysis.default_taus(len(inloop), inloop.dt,
                                                                           m.adev_max_fraction), carrier)
        if len(rep.adev) >= 3:
            try:
                rep.sigma0 = analysis.fit_sigma0(rep.adev, lo, hi)
            except ConfigError:
                rep.sigma0 = None
        if len(inloop) >= 2 * m.psd_segments:
            rep.psd_closed = analysis.welch_psd(frequency_to_phase(inloop), m.psd_segments, "rad")
    if len(ool) >= 3:
        fit_tr = traces["f_ool"].slice_time(fit_start)
        if len(fit_tr) >= 3:
            rep.drift = analysis.fit_drift(fit_tr)
    drift = plant.laser.drift
    injected = float(np.mean(drift.rate_at(traces["f_ool"].times)))
    rep.extra["injected_drift_hz_per_s"] = injected
    if rep.drift is not None and injected != 0:
        rep.extra["residual_drift_fraction"] = abs(rep.drift.rate) / abs(injected)
    if m.ipn_band is not None and rep.psd_closed is not None:
        try:
            rep.extra["integrated_phase_noise_rad"] = analysis.integrated_phase_noise(rep.psd_closed, m.ipn_band)
        except ConfigError as exc:
            # run too short to resolve the band; report the gap instead of failing
            rep.extra["integrated_phase_noise_rad"] = float("nan")
            rep.extra["integrated_phase_noise_note"] = str(exc)
    err = traces["err"].slice_time(excl)
    if len(err):
        half = err.values[len(err) // 2:]
        rep.extra["mean_error_last_half_hz"] = float(np.mean(half))
    if len(temp) > 2 and np.ptp(temp.values) > 0:
        rep.extra["corr_f_L_c_temperature"] = _pearson(traces["f_L_c"].slice_time(excl).values, temp.values)
        ph_in = frequency_to_phase(inloop).values[1:]
        ph_out = frequency_to_phase(ool).values[1:]
        rep.extra["corr_inloop_phase_temperature"] = _pearson(ph_in, temp.values)
        rep.extra["corr_outofloop_phase_temperature"] = _pearson(ph_out, temp.values)
        rep.extra["inloop_phase_excursion_rad"] = float(np.ptp(ph_in))
        rep.extra["outofloop_phase_excursion_rad"] = float(np.ptp(ph_out))
    if open_res is not None:
        rep.psd_open = open_res.metrics.psd_closed
        rep.extra["adev_open"] = open_res.metrics.adev
        rep.extra["sigma0_open"] = open_res.metrics.sigma0
        if rep.psd_open is not None and rep.psd_closed is not None:
            rep.suppression = analysis.suppression_db(rep.psd_open, rep.psd_closed, m.suppression_band)
    return rep


# --------------------------------------------------------------------------
# loop-gain probe


def _probe_response(plant: PlantConfig, servo: ServoConfig, f: float, amplitude: float,
                    pcf: bool) -> tuple[complex, float]:
    dsp = servo.dsp
    dt = dsp.dt
    ki = dsp.pid1[1]
    ugb = ki / (2 * math.pi) if ki > 0 else 1.0
    settle = warmup_time(plant, dsp) + 10.0 / ugb
    cycles = max(10, int(math.ceil(0.2 * f)))
    n_settle = int(math.ceil(settle / dt))
    n_meas = int(round(cycles / f / dt))
    n = n_settle + n_meas
    t = np.arange(n) * dt
    zeros = np.zeros(n)
    tone = amplitude * np.sin(2 * np.pi * f * t)
    dist = Disturbances(zeros, tone, zeros, zeros, zeros, np.zeros(n + 1), dt)
    srv = replace(servo, mode="pcf-only", pcf_active=pcf, fidelity="A")
    kern = LoopKernel(plant, srv, dist, 1)
    kern.advance(n)
    y = kern.rec[n_settle:, 0]
    tt = t[n_settle:]
    phasor = 2.0 / n_meas * np.sum(y * np.exp(-2j * np.pi * f * tt))
    return complex(phasor), kern.capture_fraction


def loop_transfer(plant: PlantConfig, servo: ServoConfig, f: float, amplitude: float = 1.0) -> complex:
    """Open-loop gain L(f) of the PCF path measured by tone injection on the fiber."""
    closed, cap = _probe_response(plant, servo, f, amplitude, True)
    if cap > 0.01:
        raise UnlockedError(f"loop unlocked during probe at {f} Hz")
    opened, _ = _probe_response(plant, servo, f, amplitude, False)
    return opened / closed - 1.0


def loop_gain_probe(plant: PlantConfig, servo: ServoConfig, tone_frequency: float,
                    amplitude: float = 1.0) -> float:
    """Suppression 20 log10(|open-loop residual| / |closed-loop residual|) at the tone [dB].

    Noise sources are disabled during the probe; the plant contributes only
    its delays and actuator limits.
    """
    closed, cap = _probe_response(plant, servo, tone_frequency, amplitude, True)
    if cap > 0.01:
        raise UnlockedError(f"loop unlocked during probe at {tone_frequency} Hz")
    opened, _ = _probe_response(plant, servo, tone_frequency, amplitude, False)
    return 20.0 * math.log10(abs(opened) / max(abs(closed), 1e-300))


def unity_gain_frequency(plant: PlantConfig, servo: ServoConfig, f_lo: float, f_hi: float,
                         points: int = 9) -> float:
    """Frequency where |L| crosses 1, located on a log grid and refined log-linearly."""
    freqs = np.geomspace(f_lo, f_hi, points)
    mags = np.array([abs(loop_transfer(plant, servo, f)) for f in freqs])
    idx = np.flatnonzero((mags[:-1] >= 1.0) & (mags[1:] < 1.0))
    if idx.size == 0:
        raise ConfigError("no unity-gain crossing in the probed range", "f_range")
    i = idx[0]
    a, b = np.log(mags[i]), np.log(mags[i + 1])
    x = np.log(freqs[i]) + (0.0 - a) / (b - a) * (np.log(freqs[i + 1]) - np.log(freqs[i]))
    return float(np.exp(x))


# --------------------------------------------------------------------------
# per-tick Python reference (validation of the kernel)


def reference_loop(plant: PlantConfig, servo: ServoConfig, dist: Disturbances) -> dict:
    """Pure-Python mode-A loop built from the plant and DSP objects.

    Slow; meant for short cross-checks of the compiled kernel.
    """
    from .dsp import DoubleIntegrator, LockIn, PID
    from .plant import PlantState, inloop_offset, plant_tick, remote_offset

    dsp = servo.dsp
    dt = dsp.dt
    state = PlantState.initial(plant, dt)
    lim = plant.aom1.bandwidth
    lock = LockIn(dsp.lpf_cutoff_eff, dsp.lpf_order, dt)
    pid1 = PID(*dsp.pid1, limit=lim)
    pid2 = PID(*dsp.pid2, limit=lim)
    dint = DoubleIntegrator(dsp.integrator_stages, dsp.integrator_leak)
    out = {c: np.zeros(dist.n) for c in ("dpd1", "err", "f_F_c", "f_L_c", "f_ool")}
    for k in range(dist.n):
        state = plant_tick(state, dist.tick(k), dt)
        dpd1 = inloop_offset(state)
        x = -dpd1 + 2.0 * state.f_L_c
        lock_in = x + state.loop
        err = lock.step(lock_in, 0.0)
        ool = remote_offset(state) + state.nu_yz - state.dfc
        out["dpd1"][k] = dpd1
        out["err"][k] = err
        out["f_F_c"][k] = state.f_F_c
        out["f_L_c"][k] = state.f_L_c
        out["f_ool"][k] = ool
        cbar = 0.5 * (state.f_F_c + state.hist_fc.read(state.round_trip_ticks))
        ffc = pid1.step(-0.5 * err, dt) if servo.pcf_active else 0.0
        flc = state.f_L_c
        if servo.mode == "self-referencing":
            flc = pid2.step(dint.step(-(err - 2.0 * cbar), dt), dt)
        state.apply_drive(ffc, flc)
    return out


# --------------------------------------------------------------------------
# reporting


def _curve_dict(obj):
    if obj is None:
        return None
    d = {}
    for k, v in asdict(obj).items():
        d[k] = v.tolist() if isinstance(v, np.ndarray) else v
    return d


def metrics_dict(result: RunResult) -> dict:
    """JSON-ready metrics with units, all on the physical time axis."""
    rep = result.metrics
    out = {"unlocked": bool(result.unlocked), "time_scale": result.metadata["time_scale"]}
    if rep.sigma0 is not None:
        out["sigma0"] = {**_curve_dict(rep.sigma0), "unit": "1 (fractional, at tau = 1 s)"}
    if rep.adev is not None:
        out["adev"] = {**_curve_dict(rep.adev), "unit": "1 (fractional); tau in s"}
    if rep.drift is not None:
        out["drift"] = {**_curve_dict(rep.drift), "unit": "Hz/s (de-scaled)"}
    if rep.suppression is not None:
        s = rep.suppression
        out["suppression"] = {"overall_db": s.overall_db, "floored": s.floored,
                              "lowest_bin_hz": float(s.freq[0]),
                              "lowest_bin_db": float(s.per_bin_db[0]), "unit": "dB"}
    extra = {}
    for k, v in rep.extra.items():
        if isinstance(v, (analysis.AdevCurve, analysis.Sigma0Fit)):
            v = _curve_dict(v)
        extra[k] = v
    out["extra"] = extra
    return out
