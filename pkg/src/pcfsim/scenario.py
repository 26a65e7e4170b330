"""Scenario files: sectioned key-value text resolved into plant and servo configs.

A scenario file has the sections ``[scenario]``, ``[plant]``, ``[noise]``,
``[dsp]``, ``[servo]``, ``[outputs]`` and, for QBER budgets, ``[qkd]``.
Unknown sections or keys are rejected.  Values:

- noise lists: ``kind amplitude [seed]`` entries separated by ``;``
  (fiber amplitudes are per sqrt(km)); seeds default to
  ``1000 * scenario.seed + slot``
- pairs and triples: comma separated numbers
- temperature components: ``amplitude period phase`` entries separated by ``;``
- drift segments: ``start:rate`` entries separated by ``;``
- targets: ``metric op value`` entries separated by ``;``

Every scenario resolves to a plain dictionary (all defaults filled in);
that dictionary is what reports embed and what :func:`from_resolved`
rebuilds a run from.
"""

from __future__ import annotations

import configparser
import copy
import math
import operator
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ._validation import ConfigError
from .dsp import DspConfig
from .noise import KINDS, DriftSpec, NoiseSpec, TempProfile
from .plant import AomActuator, CounterModel, DfcReference, FiberLink, LaserModel, PlantConfig
from .servo import MetricsConfig, ServoConfig, TelemetryConfig, config_hash

TRACE_COLUMNS = ("f_PD1", "f_ADC", "f_LO", "err", "f_F_c", "f_L_c", "f_1_t", "f_ool", "T", "sat")


class ScenarioError(ConfigError):
    """Configuration error located in a scenario file."""

    def __init__(self, message: str, field: str | None = None, path: str | None = None,
                 line: int | None = None, col: int | None = None):
        self.path, self.line, self.col = path, line, col
        loc = ""
        if path is not None or line is not None:
            loc = f"{path or '<string>'}:{line or 0}:{col or 0}: "
        super().__init__(message, field)
        self.args = (loc + self.args[0],)

    def __str__(self):
        return self.args[0]


# --------------------------------------------------------------------------
# value parsers (string -> JSON-able value)


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {s!r}")
    return v


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else _float(s)


def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"not an integer: {s!r}")
    return int(v)


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s: str) -> str:
    return s.strip()


def _entries(s: str) -> list[str]:
    return [e.strip() for e in s.split(";") if e.strip()]


def _numbers(s: str, n: int | None = None) -> list[float]:
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    vals = [_float(p) for p in parts]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _pair(s: str):
    if s.strip().lower() in ("", "none"):
        return None
    return _numbers(s, 2)


def _opt_pair(s: str):
    """Pair whose members may be ``none``."""
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if len(parts) != 2:
        raise ValueError(f"expected 2 values, got {len(parts)}")
    return [_opt_float(p) for p in parts]


def _triple(s: str):
    return _numbers(s, 3)


def _noise(s: str) -> list:
    out = []
    for e in _entries(s):
        parts = e.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"noise entry {e!r} must be 'kind amplitude [seed]'")
        if parts[0] not in KINDS:
            raise ValueError(f"unknown noise kind {parts[0]!r}; expected one of {sorted(KINDS)}")
        amp = _float(parts[1])
        if amp < 0:
            raise ValueError("noise amplitude must be >= 0")
        out.append([parts[0], amp, _int(parts[2]) if len(parts) == 3 else None])
    return out


def _components(s: str) -> list:
    out = []
    for e in _entries(s):
        vals = _numbers(e, 3)
        if vals[1] <= 0:
            raise ValueError(f"period must be > 0, got {vals[1]}")
        if vals[0] < 0:
            raise ValueError(f"amplitude must be >= 0, got {vals[0]}")
        out.append(vals)
    return out


def _segments(s: str) -> list:
    out = []
    for e in _entries(s):
        if ":" not in e:
            raise ValueError(f"segment {e!r} must be 'start:rate'")
        a, b = e.split(":", 1)
        out.append([_float(a), _float(b)])
    return out


_OPS = {"<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt, "==": operator.eq}


def _targets(s: str) -> list:
    out = []
    for e in _entries(s):
        m = re.fullmatch(r"([\w.]+)\s*(<=|>=|==|<|>)\s*(\S+)", e)
        if not m:
            raise ValueError(f"target {e!r} must be 'metric op value'")
        val = m.group(3)
        v = _bool(val) if val.lower() in ("true", "false") else _float(val)
        out.append([m.group(1), m.group(2), v])
    return out


def _traces(s: str) -> list:
    if s.strip().lower() == "all":
        return list(TRACE_COLUMNS)
    names = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    for n in names:
        if n not in TRACE_COLUMNS:
            raise ValueError(f"unknown trace {n!r}; expected a subset of {list(TRACE_COLUMNS)}")
    return names


def _choice(*options):
    def parse(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {list(options)}, got {v!r}")
        return v
    return parse


def _float_list(s: str) -> list:
    return _numbers(s)


def _int_list(s: str) -> list:
    return [_int(p) for p in re.split(r"[,\s]+", s.strip()) if p]


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "scenario": {
        "name": (_str, "scenario"),
        "description": (_str, ""),
        "seed": (_int, 1),
    },
    "plant": {
        "length_km": (_float, 1.0),
        "group_index": (_float, 1.468),
        "x_temperature_coupling": (_float, 0.0),
        "y_length_km": (_float, 0.0),
        "y_temperature_coupling": (_float, 0.0),
        "z_length_km": (_float, 0.0),
        "z_temperature_coupling": (_float, 0.0),
        "carrier_hz": (_float, 193.4e12),
        "aom1_center_hz": (_float, 20e6),
        "aom2_center_hz": (_float, 20e6),
        "aom_bandwidth_hz": (_float, 1e6),
        "gate_time_s": (_float, 1.0),
        "counter_floor": (_noise, []),
        "readout_resolution_hz": (_float, 0.0),
        "dfc_instability": (_float, 0.0),
        "dfc_linewidth_hz": (_float, 6.38e3),
    },
    "noise": {
        "fiber": (_noise, []),
        "delivery": (_noise, []),
        "reference": (_noise, []),
        "laser": (_noise, []),
        "loop": (_noise, []),
        "drift_rate_hz_per_s": (_float, 0.0),
        "drift_segments": (_segments, []),
        "drift_offset_hz": (_float, 0.0),
        "temperature_mean_c": (_float, 22.0),
        "temperature_components": (_components, []),
        "temperature_random_walk": (_float, 0.0),
    },
    "dsp": {
        "f_s_hz": (_float, 125e6),
        "lpf_cutoff_hz": (_float, 113e3),
        "lpf_order": (_int, 2),
        "pid1": (_triple, [0.0, 2 * math.pi * 20.0, 0.0]),
        "pid2": (_triple, [0.0, 0.0, 0.0]),
        "integrator_stages": (_int, 2),
        "integrator_leak": (_float, 1.0 - 1e-6),
        "control_rate_hz": (_float, 2000.0),
        "rf_scale": (_float, 1.0),
    },
    "servo": {
        "mode": (_choice("pcf-only", "self-referencing", "absolute-referencing"), "pcf-only"),
        "duration_s": (_float, 100.0),
        "time_scale": (_float, 1.0),
        "fidelity": (_choice("A", "B"), "A"),
        "interpolation": (_choice("ramp", "step"), "ramp"),
        "pcf_active": (_bool, True),
        "drift_window_s": (_float, 86400.0),
        "telemetry_latency_s": (_float, 0.0),
        "telemetry_drop": (_float, 0.0),
        "telemetry_seed": (_int, None),
    },
    "outputs": {
        "traces": (_traces, list(TRACE_COLUMNS)),
        "sigma0_tau_s": (_opt_pair, [None, None]),
        "adev_max_fraction": (_float, 0.25),
        "psd_segments": (_int, 8),
        "ipn_band_hz": (_pair, None),
        "suppression_band_hz": (_pair, None),
        "compare_open_loop": (_bool, False),
        "settle_time_s": (_float, 0.0),
        "targets": (_targets, []),
    },
    "qkd": {
        "slices": (_int_list, [16, 32, 64]),
        "delta_phi_deg": (_float_list, []),
        "integration_time_s": (_opt_float, None),
        "curve_max_deg": (_float, 10.0),
        "curve_points": (_int, 201),
    },
}

# noise slots used to derive default seeds
_SEED_SLOTS = {("noise", "fiber"): 1, ("noise", "delivery"): 2, ("noise", "reference"): 3,
               ("noise", "laser"): 4, ("noise", "loop"): 5, ("plant", "counter_floor"): 6}


def numeric_paths() -> list[str]:
    """Dotted scenario keys that accept a single number (valid sweep parameters)."""
    return sorted(f"{s}.{k}" for s, keys in SCHEMA.items() for k, (p, _) in keys.items()
                  if p in (_float, _int) and s not in ("qkd",))


# --------------------------------------------------------------------------
# parsing


def _locate(lines: list[str]) -> dict:
    """(section, key) -> (line, column of value) by scanning raw text."""
    loc = {}
    section = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\s*\[([^\]]+)\]", raw)
        if m:
            section = m.group(1).strip()
            loc[(section, None)] = (i, raw.index("[") + 1)
            continue
        m = re.match(r"(\s*)([^=:\s][^=:]*?)\s*[=:]\s*", raw)
        if m and section is not None:
            loc[(section, m.group(2).strip().lower())] = (i, m.end() + 1)
    return loc


@dataclass
class Scenario:
    name: str
    resolved: dict
    path: str | None = None
    has_simulation: bool = True
    plant: PlantConfig | None = None
    servo: ServoConfig | None = None
    traces: list = field(default_factory=list)
    targets: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.resolved)

    @property
    def seed(self) -> int:
        return self.resolved["scenario"]["seed"]

    def with_overrides(self, **dotted) -> "Scenario":
        d = copy.deepcopy(self.resolved)
        for key, value in dotted.items():
            sec, k = key.split(".", 1)
            d[sec][k] = value
        return from_resolved(d, self.path)


def parse_text(text: str, path: str | None = None) -> Scenario:
    lines = text.splitlines()
    loc = _locate(lines)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   comment_prefixes=("#", ";"), strict=True)
    cp.optionxform = str.lower
    try:
        cp.read_string(text, source=path or "<string>")
    except configparser.DuplicateOptionError as e:
        raise ScenarioError(f"duplicate key {e.option!r}", f"{e.section}.{e.option}", path, e.lineno, 1) from None
    except configparser.DuplicateSectionError as e:
        raise ScenarioError(f"duplicate section [{e.section}]", e.section, path, e.lineno, 1) from None
    except configparser.MissingSectionHeaderError as e:
        raise ScenarioError("content before the first [section] header", None, path, e.lineno, 1) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ScenarioError("malformed line (expected 'key = value')", None, path, lineno, 1) from None

    raw: dict[str, dict[str, tuple[str, tuple]]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            line, col = loc.get((sec, None), (None, None))
            raise ScenarioError(f"unknown section [{sec}]; expected one of {list(SCHEMA)}", sec, path, line, col)
        raw[sec] = {}
        for key, value in cp.items(sec):
            line, col = loc.get((sec, key), (None, None))
            if key not in SCHEMA[sec]:
                raise ScenarioError(f"unknown key {key!r}; valid keys: {sorted(SCHEMA[sec])}",
                                    f"{sec}.{key}", path, line, col)
            raw[sec][key] = (value, (line, col))

    resolved = {}
    for sec, keys in SCHEMA.items():
        if sec == "qkd" and sec not in raw:
            continue
        resolved[sec] = {}
        for key, (parser, default) in keys.items():
            if sec in raw and key in raw[sec]:
                value, (line, col) = raw[sec][key]
                try:
                    resolved[sec][key] = parser(value)
                except ValueError as e:
                    raise ScenarioError(str(e), f"{sec}.{key}", path, line, col) from None
            else:
                resolved[sec][key] = copy.deepcopy(default)
    sim = any(s in raw for s in ("plant", "noise", "dsp", "servo"))
    resolved["scenario"]["simulate"] = sim
    try:
        return from_resolved(resolved, path)
    except ConfigError as e:
        if isinstance(e, ScenarioError):
            raise
        line = col = None
        if e.field and "." in e.field:
            sec, key = e.field.split(".", 1)
            line, col = loc.get((sec, key), (None, None))
        raise ScenarioError(str(e).split(": ", 1)[-1] if e.field else str(e), e.field, path, line, col) from None


def load(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, or a shipped scenario by name (e.g. ``"fig2c"``)."""
    p = Path(path_or_name)
    if not p.exists():
        name = p.name if p.suffix == ".scenario" else f"{p.name}.scenario"
        ref = resources.files("pcfsim") / "scenarios" / name
        if not ref.is_file():
            raise ScenarioError(f"no such scenario file or shipped scenario: {path_or_name}", "scenario")
        return parse_text(ref.read_text(), name)
    return parse_text(p.read_text(), str(p))


def shipped() -> list[str]:
    root = resources.files("pcfsim") / "scenarios"
    return sorted(r.name[: -len(".scenario")] for r in root.iterdir() if r.name.endswith(".scenario"))


# --------------------------------------------------------------------------
# building runtime configs


def _specs(entries: list, base_seed: int, slot: int) -> tuple:
    out = []
    for i, (kind, amp, seed) in enumerate(entries):
        if seed is None:
            seed = 1000 * base_seed + 10 * slot + i
        out.append(NoiseSpec(kind, float(amp), int(seed)))
    return tuple(out)


def _check_keys(d: dict):
    for sec, keys in d.items():
        if sec not in SCHEMA:
            raise ScenarioError(f"unknown section [{sec}]", sec)
        for key in keys:
            if key not in SCHEMA[sec] and not (sec == "scenario" and key == "simulate"):
                raise ScenarioError(f"unknown key {key!r}", f"{sec}.{key}")


def from_resolved(d: dict, path: str | None = None) -> Scenario:
    """Build a :class:`Scenario` from a resolved dictionary (e.g. a report's ``config``)."""
    d = copy.deepcopy(d)
    _check_keys(d)
    for sec, keys in SCHEMA.items():
        if sec == "qkd" and sec not in d:
            continue
        d.setdefault(sec, {})
        for key, (_, default) in keys.items():
            d[sec].setdefault(key, copy.deepcopy(default))
    d["scenario"].setdefault("simulate", True)
    name = d["scenario"]["name"]
    scen = Scenario(name, d, path, bool(d["scenario"]["simulate"]),
                    traces=list(d["outputs"]["traces"]), targets=list(d["outputs"]["targets"]))
    if scen.has_simulation:
        scen.plant, scen.servo = build_configs(d)
    return scen


def build_configs(d: dict) -> tuple[PlantConfig, ServoConfig]:
    seed = d["scenario"]["seed"]
    pl, nz, ds, sv, out = d["plant"], d["noise"], d["dsp"], d["servo"], d["outputs"]
    gi = pl["group_index"]
    floor = _specs(pl["counter_floor"], seed, 6)
    if len(floor) > 1:
        raise ConfigError("at most one counter floor process", "plant.counter_floor")
    plant = PlantConfig(
        laser=LaserModel(pl["carrier_hz"],
                         DriftSpec(nz["drift_rate_hz_per_s"], tuple(map(tuple, nz["drift_segments"])),
                                   nz["drift_offset_hz"]),
                         _specs(nz["laser"], seed, 4)),
        link=FiberLink(pl["length_km"], gi, _specs(nz["fiber"], seed, 1), pl["x_temperature_coupling"], "plant.x"),
        delivery=FiberLink(pl["y_length_km"], gi, _specs(nz["delivery"], seed, 2),
                           pl["y_temperature_coupling"], "plant.y"),
        reference=FiberLink(pl["z_length_km"], gi, _specs(nz["reference"], seed, 3),
                            pl["z_temperature_coupling"], "plant.z"),
        aom1=AomActuator(pl["aom1_center_hz"], pl["aom_bandwidth_hz"]),
        aom2=AomActuator(pl["aom2_center_hz"], pl["aom_bandwidth_hz"]),
        counter=CounterModel(pl["gate_time_s"], floor[0] if floor else None, pl["readout_resolution_hz"]),
        dfc=DfcReference(pl["dfc_instability"], pl["dfc_linewidth_hz"], 1000 * seed + 70),
        temperature=TempProfile(nz["temperature_mean_c"], tuple(map(tuple, nz["temperature_components"])),
                                nz["temperature_random_walk"], 1000 * seed + 80),
        loop_noise=_specs(nz["loop"], seed, 5),
    )
    dsp = DspConfig(f_S=ds["f_s_hz"], lpf_cutoff=ds["lpf_cutoff_hz"], lpf_order=ds["lpf_order"],
                    pid1=tuple(ds["pid1"]), pid2=tuple(ds["pid2"]),
                    integrator_stages=ds["integrator_stages"], integrator_leak=ds["integrator_leak"],
                    control_rate=ds["control_rate_hz"], rf_scale=ds["rf_scale"])
    tseed = sv["telemetry_seed"] if sv["telemetry_seed"] is not None else 1000 * seed + 90
    metrics = MetricsConfig(
        sigma0_tau=tuple(out["sigma0_tau_s"]),
        adev_max_fraction=out["adev_max_fraction"],
        psd_segments=out["psd_segments"],
        ipn_band=None if out["ipn_band_hz"] is None else tuple(out["ipn_band_hz"]),
        suppression_band=None if out["suppression_band_hz"] is None else tuple(out["suppression_band_hz"]),
        compare_open_loop=out["compare_open_loop"],
        settle_time=out["settle_time_s"],
    )
    servo = ServoConfig(
        mode=sv["mode"], dsp=dsp, drift_estimation_window=sv["drift_window_s"],
        telemetry=TelemetryConfig(sv["telemetry_latency_s"], sv["telemetry_drop"], tseed),
        duration=sv["duration_s"], time_scale=sv["time_scale"], fidelity=sv["fidelity"],
        interpolation=sv["interpolation"], pcf_active=sv["pcf_active"], metrics=metrics,
    )
    warm = 2 * plant.link.one_way_delay + 10 * dsp.lpf_time_constant()
    if servo.duration / servo.time_scale <= warm:
        raise ConfigError(f"must exceed the warm-up of {warm * servo.time_scale:.6g} s", "servo.duration_s")
    return plant, servo


def evaluate_targets(targets: list, metrics: dict) -> list[dict]:
    """Check ``[metric, op, value]`` targets against a metrics dictionary."""
    results = []
    for name, op, value in targets:
        node = metrics
        for part in name.split("."):
            node = node.get(part) if isinstance(node, dict) else None
            if node is None:
                break
        ok = node is not None and bool(_OPS[op](node, value))
        results.append({"metric": name, "op": op, "target": value, "value": node, "pass": ok})
    return results
