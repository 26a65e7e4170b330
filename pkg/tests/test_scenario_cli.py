import json

import numpy as np
import pytest

from pcfsim import cli, scenario
from pcfsim._validation import ConfigError
from pcfsim.scenario import ScenarioError, numeric_paths, parse_text

SMALL = """\
[scenario]
name = small
seed = 9

[plant]
length_km = 2
gate_time_s = 0.5

[noise]
fiber = white-frequency 0.02

[dsp]
control_rate_hz = 1000
pid1 = 0, 125.66370614359172, 0

[servo]
duration_s = 60

[outputs]
traces = f_PD1, f_F_c, f_ool
"""


def _write(tmp_path, text=SMALL, name="small.scenario"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_fill_every_key():
    s = parse_text(SMALL)
    assert s.resolved["servo"]["mode"] == "pcf-only"
    assert s.resolved["dsp"]["integrator_stages"] == 2
    assert s.plant.link.length == 2.0
    # default seeds derive from the scenario seed and slot
    assert s.plant.link.noise[0].seed == 9 * 1000 + 10


def test_unknown_key_reports_line_and_column():
    text = SMALL.replace("length_km = 2", "length_km = 2\nlenght_km = 3")
    with pytest.raises(ScenarioError) as exc:
        parse_text(text, "x.scenario")
    msg = str(exc.value)
    assert "x.scenario:7:13" in msg and "lenght_km" in msg and "length_km" in msg


@pytest.mark.parametrize("edit,field", [
    (("length_km = 2", "length_km = two"), "plant.length_km"),
    (("fiber = white-frequency 0.02", "fiber = pink 0.02"), "noise.fiber"),
    (("[outputs]", "[output]"), "output"),
    (("duration_s = 60", "duration_s = 0.00001"), "servo.duration_s"),
])
def test_bad_values_name_the_key(edit, field):
    with pytest.raises(ScenarioError) as exc:
        parse_text(SMALL.replace(*edit), "x.scenario")
    assert exc.value.field == field
    assert exc.value.line is not None


def test_malformed_file_exits_with_config_status(tmp_path, capsys):
    p = _write(tmp_path, SMALL.replace("pid1 = 0, 125.66370614359172, 0", "pid1 = 0, 1"))
    assert cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "dsp.pid1" in err or "3 numbers" in err
    assert "small.scenario:" in err


def test_missing_scenario_exits_2(tmp_path):
    assert cli.main(["simulate", "--scenario", "no_such_thing", "--out-dir", str(tmp_path)]) == 2


def test_simulate_outputs_byte_identical(tmp_path):
    p = _write(tmp_path)
    for d in ("a", "b"):
        assert cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path / d)]) == 0
    for f in ("small.csv", "small.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_csv_header_carries_units(tmp_path):
    p = _write(tmp_path)
    cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path)])
    header = (tmp_path / "small.csv").read_text().splitlines()[0]
    assert header == "t [s],f_PD1 [Hz],f_F_c [Hz],f_ool [Hz]"
    cols = cli.read_csv(tmp_path / "small.csv")
    assert cols["t"][1] == "s" and cols["f_ool"][0].size == 120


def test_report_json_reruns_identically(tmp_path):
    p = _write(tmp_path)
    cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path / "a")])
    report = tmp_path / "a" / "small.json"
    assert cli.main(["simulate", "--scenario", str(report), "--out-dir", str(tmp_path / "b")]) == 0
    a = json.loads(report.read_text())
    b = json.loads((tmp_path / "b" / "small.json").read_text())
    assert a["metrics"] == b["metrics"] and a["config_hash"] == b["config_hash"]


def test_seed_override_changes_run(tmp_path):
    s = parse_text(SMALL)
    r1, _ = cli.run_and_report(s)
    r2, _ = cli.run_and_report(s.with_overrides(**{"scenario.seed": 10}))
    assert r1["config_hash"] != r2["config_hash"]
    assert r1["metrics"]["adev"]["sigma"] != r2["metrics"]["adev"]["sigma"]


def test_sweep_rejects_unknown_path_and_empty_list():
    s = parse_text(SMALL)
    with pytest.raises(ConfigError) as exc:
        cli.sweep(s, "plant.lenght_km", [1.0])
    assert "plant.length_km" in str(exc.value)
    with pytest.raises(ConfigError):
        cli.sweep(s, "plant.length_km", [])
    with pytest.raises(ConfigError):
        cli._parse_values(" , ")
    assert "noise.fiber" not in numeric_paths()


def test_sweep_gives_distinct_hashes(tmp_path):
    p = _write(tmp_path)
    code = cli.main(["sweep", "--scenario", str(p), "--param", "plant.length_km",
                     "--values", "1,2,4", "--out-dir", str(tmp_path)])
    assert code == 0
    lines = (tmp_path / "small_sweep_plant_length_km.csv").read_text().splitlines()
    assert lines[0].startswith("param [plant.length_km],suppression [dB]")
    hashes = [ln.rsplit(",", 1)[1] for ln in lines[1:]]
    assert len(hashes) == 3 and len(set(hashes)) == 3


def test_qber_command_examples(tmp_path):
    assert cli.main(["qber", "--M", "16", "--delta-phi", "4.3", "--out-dir", str(tmp_path)]) == 0
    b = json.loads((tmp_path / "qber_budget.json").read_text())["budgets"][0]
    assert b["E_F"] == pytest.approx(1.4e-3, rel=0.02)
    assert cli.main(["qber", "--M", "64", "--delta-phi", "0", "--out-dir", str(tmp_path)]) == 0
    b = json.loads((tmp_path / "qber_budget.json").read_text())["budgets"][0]
    assert b["E_F"] == 0.0 and b["E_M"] == pytest.approx(0.8e-3, abs=0.05e-3)
    header = (tmp_path / "qber_fig7.csv").read_text().splitlines()[0]
    assert header == "delta_phi [deg],E_F [1],E_M_16 [1],E_M_32 [1],E_M_64 [1]"


def test_qber_scenario_ratio(tmp_path):
    assert cli.main(["qber", "--scenario", "fig7_qber", "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "fig7_qber_budget.json").read_text())
    assert len(summary["budgets"]) == 6
    assert summary["E_F_ratio_max_over_min"] == pytest.approx(73.9, abs=0.5)


def test_qber_identical_traces_give_zero(tmp_path):
    p = _write(tmp_path)
    cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path)])
    csv = str(tmp_path / "small.csv")
    assert cli.main(["qber", "--trace-a", csv, "--trace-b", csv, "--integration-time", "2",
                     "--out-dir", str(tmp_path)]) == 0
    b = json.loads((tmp_path / "qber_budget.json").read_text())["budgets"][0]
    assert b["delta_phi"] == 0.0 and b["E_F"] == 0.0
    assert cli.main(["qber", "--trace-a", csv, "--integration-time", "2", "--out-dir", str(tmp_path)]) == 2


def test_simulate_exits_1_when_unlocked(tmp_path):
    text = SMALL.replace("length_km = 2", "length_km = 1").replace(
        "pid1 = 0, 125.66370614359172, 0", "pid1 = 0, 5026.548245743669, 0").replace(
        "fiber = white-frequency 0.02", "fiber = white-frequency 0.03")
    p = _write(tmp_path, text.replace("duration_s = 60", "duration_s = 20"))
    assert cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path)]) == 1
    rep = json.loads((tmp_path / "small.json").read_text())
    assert rep["metrics"]["unlocked"] and not rep["pass"]
    assert (tmp_path / "small.csv").exists()


def test_failed_target_exits_1(tmp_path):
    p = _write(tmp_path, SMALL.replace("traces = f_PD1, f_F_c, f_ool",
                                       "traces = f_ool\ntargets = sigma0.sigma0 < 0"))
    assert cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path)]) == 1


def test_fig2c_lo_tracks_minus_twice_correction(tmp_path):
    assert cli.main(["simulate", "--scenario", "fig2c", "--out-dir", str(tmp_path)]) == 0
    cols = cli.read_csv(tmp_path / "fig2c.csv")
    f_lo = cols["f_LO"][0] - 45e6
    f_lc = cols["f_L_c"][0]
    assert cols["f_LO"][1] == "Hz"
    assert np.allclose(f_lo, -2 * f_lc, rtol=0, atol=1e-6)


def test_analyze_command(tmp_path):
    p = _write(tmp_path)
    cli.main(["simulate", "--scenario", str(p), "--out-dir", str(tmp_path)])
    assert cli.main(["analyze", "--trace", str(tmp_path / "small.csv"), "--column", "f_ool",
                     "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "small_f_ool_analysis.json").read_text())
    assert res["unit"] == "Hz" and res["psd"]["unit"] == "rad^2/Hz"
    assert (tmp_path / "small_f_ool_adev.csv").exists()
    assert cli.main(["analyze", "--trace", str(tmp_path / "small.csv"), "--column", "nope",
                     "--out-dir", str(tmp_path)]) == 2


def test_every_shipped_scenario_parses():
    names = scenario.shipped()
    assert len(names) == 9
    for n in names:
        s = scenario.load(n)
        assert s.name == n
        assert s.has_simulation == (n != "fig7_qber")
