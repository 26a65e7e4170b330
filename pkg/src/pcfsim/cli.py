"""Command line entry point: ``pcfsim simulate | sweep | analyze | qber``.

Exit status: 0 on success, 1 when a run ends unlocked or a target fails,
2 on configuration or input errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, analysis, qkd
from ._validation import ConfigError, DomainError
from .scenario import Scenario, ScenarioError, evaluate_targets, from_resolved, load, numeric_paths
from .servo import metrics_dict, run_scenario
from .trace import Trace, frequency_to_phase

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

UNITS = {"f_PD1": "Hz", "f_ADC": "Hz", "f_LO": "Hz", "err": "Hz", "f_F_c": "Hz", "f_L_c": "Hz",
         "f_1_t": "Hz", "f_ool": "Hz", "T": "degC", "sat": "1"}


# --------------------------------------------------------------------------
# file helpers


def _atomic_write(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="\n") as f:
        f.write(data)
    os.replace(tmp, path)


def _fmt(v: float) -> str:
    # shortest repr that round-trips; deterministic across runs
    return repr(float(v))


def _clean(obj):
    """Make floats JSON-safe (non-finite -> None) and arrays lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_csv(path: Path, columns: dict[str, tuple[np.ndarray, str]]) -> None:
    names = list(columns)
    header = ",".join(f"{n} [{columns[n][1]}]" for n in names)
    data = np.column_stack([np.asarray(columns[n][0], dtype=float) for n in names])
    lines = [header] + [",".join(_fmt(v) for v in row) for row in data]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_csv(path: str | Path) -> dict[str, tuple[np.ndarray, str]]:
    """Read a trace CSV written by :func:`write_csv`: {name: (values, unit)}."""
    with open(path) as f:
        header = f.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {}
    for i, h in enumerate(header):
        h = h.strip()
        if "[" in h and h.endswith("]"):
            name, unit = h[:-1].split("[", 1)
            out[name.strip()] = (data[:, i], unit.strip())
        else:
            out[h] = (data[:, i], "")
    return out


def _trace_from_csv(path: str, column: str) -> Trace:
    cols = read_csv(path)
    if "t" not in cols:
        raise ConfigError(f"{path} has no 't [s]' column", "trace")
    if column not in cols:
        raise ConfigError(f"{path} has no column {column!r}; columns: {sorted(cols)}", "column")
    t = cols["t"][0]
    if t.size < 2:
        raise ConfigError(f"{path} needs at least 2 rows", "trace")
    fs = 1.0 / float(np.median(np.diff(t)))
    values, unit = cols[column]
    return Trace(values, fs, unit, column, float(t[0]))


# --------------------------------------------------------------------------
# simulate


def _resolve_scenario(arg: str, seed_override: int | None, scale: float | None, mode: str | None) -> Scenario:
    p = Path(arg)
    if p.suffix == ".json" and p.exists():
        report = json.loads(p.read_text())
        if "config" not in report:
            raise ConfigError(f"{arg} is not a report (no 'config' entry)", "scenario")
        scen = from_resolved(report["config"], arg)
    else:
        scen = load(arg)
    over = {}
    if seed_override is not None:
        over["scenario.seed"] = int(seed_override)
    if scale is not None:
        over["servo.time_scale"] = float(scale)
    if mode is not None:
        over["servo.fidelity"] = mode
    return scen.with_overrides(**over) if over else scen


def run_and_report(scen: Scenario) -> tuple[dict, dict]:
    """Run a scenario; returns (report dict, csv columns)."""
    if not scen.has_simulation:
        raise ConfigError(f"scenario {scen.name!r} has no simulation sections", "scenario")
    result = run_scenario(scen.plant, scen.servo, config_id=scen.config_hash)
    metrics = metrics_dict(result)
    if result.open_loop is not None:
        metrics["open_loop"] = metrics_dict(result.open_loop)
    targets = evaluate_targets(scen.targets, metrics)
    meta = dict(result.metadata)
    report = {
        "scenario": scen.name,
        "config_hash": scen.config_hash,
        "config": scen.resolved,
        "metrics": metrics,
        "metadata": meta,
        "targets": targets,
        "pass": (not result.unlocked) and all(t["pass"] for t in targets),
        "version": __version__,
    }
    tr = result.traces
    t = np.arange(len(tr["f_PD1"])) / tr["f_PD1"].fs
    cols = {"t": (t, "s")}
    for name in scen.traces:
        cols[name] = (tr[name].values, UNITS[name])
    return report, cols


def cmd_simulate(args) -> int:
    scen = _resolve_scenario(args.scenario, args.seed_override, args.scale, args.mode)
    report, cols = run_and_report(scen)
    out = Path(args.out_dir)
    write_csv(out / f"{scen.name}.csv", cols)
    _atomic_write(out / f"{scen.name}.json", dump_json(report))
    status = "unlocked" if report["metrics"]["unlocked"] else "locked"
    print(f"{scen.name}: {status}; wrote {out / (scen.name + '.csv')} and {out / (scen.name + '.json')}")
    for t in report["targets"]:
        print(f"  target {t['metric']} {t['op']} {t['target']}: {t['value']} -> {'PASS' if t['pass'] else 'FAIL'}")
    return EXIT_OK if report["pass"] else EXIT_FAIL


# --------------------------------------------------------------------------
# sweep


def _parse_values(text: str) -> list[float]:
    vals = [v for v in text.replace(";", ",").split(",") if v.strip()]
    if not vals:
        raise ConfigError("empty value list", "values")
    try:
        return [float(v) for v in vals]
    except ValueError as e:
        raise ConfigError(str(e), "values") from None


def _sweep_row(value: float, report: dict) -> dict:
    m = report["metrics"]
    sup = m.get("suppression") or {}
    s0 = m.get("sigma0") or {}
    dr = m.get("drift") or {}
    ex = m.get("extra", {})
    return {
        "value": value,
        "suppression_db": sup.get("overall_db", math.nan),
        "lowest_bin_db": sup.get("lowest_bin_db", math.nan),
        "sigma0": s0.get("sigma0", math.nan),
        "drift_hz_per_s": dr.get("rate", math.nan),
        "residual_drift_fraction": ex.get("residual_drift_fraction", math.nan),
        "unlocked": 1.0 if m["unlocked"] else 0.0,
    }


def sweep(scen: Scenario, param: str, values: list[float]) -> tuple[list[dict], list[dict]]:
    valid = numeric_paths()
    if param not in valid:
        raise ConfigError(f"unknown parameter path {param!r}; valid paths: {', '.join(valid)}", "param")
    if not values:
        raise ConfigError("empty value list", "values")
    rows, reports = [], []
    for v in sorted(values):
        sec, key = param.split(".", 1)
        typed = int(v) if isinstance(scen.resolved[sec][key], int) and float(v).is_integer() else float(v)
        run = scen.with_overrides(**{param: typed})
        report, _ = run_and_report(run)
        reports.append(report)
        rows.append({**_sweep_row(v, report), "config_hash": report["config_hash"]})
    return rows, reports


def cmd_sweep(args) -> int:
    scen = _resolve_scenario(args.scenario, args.seed_override, args.scale, args.mode)
    values = _parse_values(args.values)
    rows, reports = sweep(scen, args.param, values)
    out = Path(args.out_dir)
    tag = args.param.replace(".", "_")
    names = ["value", "suppression_db", "lowest_bin_db", "sigma0", "drift_hz_per_s",
             "residual_drift_fraction", "unlocked"]
    lines = ["param [" + args.param + "],suppression [dB],lowest_bin_suppression [dB],sigma0 [1],"
             "drift [Hz/s],residual_drift [1],unlocked [1],config_hash"]
    for r in rows:
        lines.append(",".join(_fmt(r[n]) for n in names) + "," + r["config_hash"])
    _atomic_write(out / f"{scen.name}_sweep_{tag}.csv", "\n".join(lines) + "\n")
    for v, rep in zip(sorted(values), reports):
        _atomic_write(out / f"{scen.name}_{tag}_{_fmt(v)}.json", dump_json(rep))
    print(f"{scen.name}: {len(rows)} runs; wrote {out / (scen.name + '_sweep_' + tag + '.csv')}")
    return EXIT_OK if all(r["unlocked"] == 0.0 for r in rows) else EXIT_FAIL


# --------------------------------------------------------------------------
# analyze


def analyze_trace(trace: Trace, carrier: float, segments: int, tau_range=(None, None)) -> dict:
    out = {"column": trace.name, "unit": trace.unit, "fs_hz": trace.fs, "samples": len(trace)}
    if trace.unit == "Hz":
        curve = analysis.overlapping_adev(trace, None, carrier)
        out["adev"] = {"tau": curve.tau.tolist(), "sigma": curve.sigma.tolist(), "err": curve.err.tolist()}
        if len(curve) >= 3:
            fit = analysis.fit_sigma0(curve, *tau_range)
            out["sigma0"] = {"sigma0": fit.sigma0, "uncertainty": fit.uncertainty,
                             "model_mismatch": fit.model_mismatch, "slope": fit.slope}
        d = analysis.fit_drift(trace)
        out["drift"] = {"rate": d.rate, "uncertainty": d.uncertainty, "unit": "Hz/s"}
        phase = frequency_to_phase(trace)
    else:
        phase = trace
    psd = analysis.welch_psd(phase, segments, "rad")
    out["psd"] = {"freq": psd.freq.tolist(), "density": psd.density.tolist(), "unit": "rad^2/Hz",
                  "resolution_hz": psd.resolution}
    return out


def cmd_analyze(args) -> int:
    trace = _trace_from_csv(args.trace, args.column)
    res = analyze_trace(trace, args.carrier, args.segments, (args.tau_min, args.tau_max))
    out = Path(args.out_dir)
    stem = f"{Path(args.trace).stem}_{args.column}"
    _atomic_write(out / f"{stem}_analysis.json", dump_json(res))
    if "adev" in res:
        write_csv(out / f"{stem}_adev.csv", {"tau": (np.array(res["adev"]["tau"]), "s"),
                                             "sigma": (np.array(res["adev"]["sigma"]), "1")})
    write_csv(out / f"{stem}_psd.csv", {"f": (np.array(res["psd"]["freq"]), "Hz"),
                                       "S_phi": (np.array(res["psd"]["density"]), "rad^2/Hz")})
    print(f"wrote {out / (stem + '_analysis.json')}")
    return EXIT_OK


# --------------------------------------------------------------------------
# qber


def qber_report(M: int, delta_phi: float, integration_time=None) -> dict:
    b = qkd.qber_budget(M, delta_phi, integration_time)
    return b.to_dict()


def cmd_qber(args) -> int:
    out = Path(args.out_dir)
    budgets = []
    slices = list(qkd.FIG7_SLICES)
    max_deg, points = 10.0, 201
    name = "qber"
    if args.scenario:
        scen = load(args.scenario)
        q = scen.resolved.get("qkd")
        if q is None:
            raise ConfigError(f"scenario {scen.name!r} has no [qkd] section", "qkd")
        name = scen.name
        slices = q["slices"]
        max_deg, points = q["curve_max_deg"], q["curve_points"]
        for m in slices:
            for dphi in q["delta_phi_deg"]:
                budgets.append(qber_report(m, dphi, q["integration_time_s"]))
    elif args.trace_a or args.trace_b:
        if not (args.trace_a and args.trace_b):
            raise ConfigError("both --trace-a and --trace-b are required", "trace_b")
        if args.integration_time is None:
            raise ConfigError("--integration-time is required with trace files", "integration_time")
        a = _trace_from_csv(args.trace_a, args.column)
        b = _trace_from_csv(args.trace_b, args.column)
        if a.unit == "Hz":
            a, b = frequency_to_phase(a), frequency_to_phase(b)
        dphi = qkd.delta_phi_from_links(a, b, args.integration_time)
        budgets.append(qber_report(args.M, dphi, args.integration_time))
    else:
        if args.delta_phi is None:
            raise ConfigError("give --delta-phi, two trace files, or --scenario", "delta_phi")
        budgets.append(qber_report(args.M, args.delta_phi, args.integration_time))
    curve = qkd.fig7_curve(max_deg, points, slices)
    cols = {"delta_phi": (curve["delta_phi_deg"], "deg"), "E_F": (curve["E_F"], "1")}
    for m in slices:
        cols[f"E_M_{m}"] = (curve[f"E_M_{m}"], "1")
    write_csv(out / f"{name}_fig7.csv", cols)
    summary = {"budgets": budgets}
    pts = [b["delta_phi"] for b in budgets]
    if len(set(pts)) >= 2 and min(pts) > 0:
        ef = sorted({(b["delta_phi"], b["E_F"]) for b in budgets})
        summary["E_F_ratio_max_over_min"] = ef[-1][1] / ef[0][1]
    _atomic_write(out / f"{name}_budget.json", dump_json(summary))
    for b in budgets:
        print(f"M={b['M']} dphi={b['delta_phi']:.4g} deg: E_F={b['E_F']:.4e} E_M={b['E_M']:.4e} "
              f"total={b['total']:.4e}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcfsim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required,
                       help="scenario file, shipped scenario name, or a report JSON to re-run")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--seed-override", type=int, default=None, help="replace the scenario base seed")
        p.add_argument("--scale", type=float, default=None, help="override the time-scale factor")
        p.add_argument("--mode", choices=("A", "B"), default=None,
                       help="lock-in fidelity: A (control rate) or B (sample rate)")

    p = sub.add_parser("simulate", help="run one scenario and write CSV traces plus a JSON report")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a scenario over values of one numeric parameter")
    common(p)
    p.add_argument("--param", required=True, help="dotted scenario key, e.g. plant.length_km")
    p.add_argument("--values", required=True, help="comma separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="ADEV, PSD and drift fit of a trace CSV column")
    p.add_argument("--trace", required=True)
    p.add_argument("--column", default="f_PD1")
    p.add_argument("--carrier", type=float, default=analysis.CARRIER_1550)
    p.add_argument("--segments", type=int, default=8)
    p.add_argument("--tau-min", type=float, default=None)
    p.add_argument("--tau-max", type=float, default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("qber", help="TF-QKD QBER budget and the E_F(dphi) curve")
    p.add_argument("--M", type=int, default=16, help="number of phase slices")
    p.add_argument("--delta-phi", type=float, default=None, help="differential phase error [deg]")
    p.add_argument("--trace-a", default=None)
    p.add_argument("--trace-b", default=None)
    p.add_argument("--column", default="f_ool")
    p.add_argument("--integration-time", type=float, default=None)
    p.add_argument("--scenario", default=None, help="scenario with a [qkd] section")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_qber)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ConfigError, DomainError) as e:
        print(f"pcfsim {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"pcfsim {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
