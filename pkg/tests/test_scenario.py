import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

import settings
from models.ber import ReceiverModel, cer_mai_free, chip_power_from_average, dbm_to_watts
from models.channel import WaterType, beer_loss, responsivity
from models.errors import InfeasibleError, ScenarioValidationError
from scenario import (
    COLUMNS,
    DEFAULTS,
    KINDS,
    Scenario,
    deep_merge,
    default_scenario,
    load_scenario,
    run,
    scenario_from_dict,
    validate,
)
from uwoc_sim import main

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.mark.parametrize("kind", KINDS)
def test_defaults_are_valid(kind):
    assert validate(default_scenario(kind)) == []


@pytest.mark.parametrize("name", ["relay_ber", "localization", "miso_ber", "power_control"])
def test_shipped_scenarios_are_valid(name):
    scenario = load_scenario(SCENARIOS / f"{name}.json")
    assert validate(scenario) == []
    assert scenario.seed == 1


def test_too_many_synchronous_users_rejected():
    diagnostics = validate(scenario_from_dict({"kind": "relay-ber", "code": {"users": 7}}))
    assert [d["field"] for d in diagnostics] == ["code.users"]
    assert "6.56" in diagnostics[0]["message"]
    uplink_only = scenario_from_dict({"kind": "relay-ber", "code": {"users": 7}, "directions": ["uplink"]})
    assert validate(uplink_only) == []


def test_chip_time_must_match_bit_rate():
    bad = scenario_from_dict({"kind": "relay-ber", "chip_time": 2e-8})
    assert [d["field"] for d in validate(bad)] == ["chip_time"]
    good = scenario_from_dict({"kind": "relay-ber", "chip_time": 1e-8})
    assert validate(good) == []


def test_unknown_kind_and_bad_json(tmp_path):
    with pytest.raises(ScenarioValidationError):
        scenario_from_dict({"kind": "sonar"})
    path = tmp_path / "broken.json"
    path.write_text("{kind: ")
    with pytest.raises(ScenarioValidationError):
        load_scenario(path)


def test_deep_merge_keeps_defaults():
    merged = deep_merge(DEFAULTS["relay-ber"], {"code": {"users": 3}, "n_relays": [1]})
    assert merged["code"] == {"length": 50, "weight": 3, "max_correlation": 1, "users": 3}
    assert merged["n_relays"] == [1]
    assert DEFAULTS["relay-ber"]["code"]["users"] == 5


def test_default_seed_follows_settings(monkeypatch):
    monkeypatch.setattr(settings, "SEED", 41)
    assert Scenario("relay-ber").seed == 41
    assert default_scenario("localization").seed == 41
    assert Scenario("relay-ber", seed=3).seed == 3


def test_single_user_single_hop_downlink_is_closed_form():
    scenario = scenario_from_dict({
        "kind": "relay-ber", "code": {"users": 1}, "n_relays": [0], "directions": ["downlink"],
        "sweep_dbm": {"start": 10.0, "stop": 20.0, "step": 5.0}, "monte_carlo": {"bits": 0},
    })
    frame = run(scenario, workers=1)
    assert list(frame.columns) == COLUMNS["relay-ber"]
    assert list(frame["power_dbm"]) == [10.0, 15.0, 20.0]
    assert frame["ber_mc"].isna().all()

    loss = beer_loss(WaterType.preset("clear-ocean").extinction, 90.0)
    for dbm, ber in zip(frame["power_dbm"], frame["ber_analytic"]):
        rx = ReceiverModel(responsivity(0.8, 450.0), 1e-16, chip_power_from_average(float(dbm_to_watts(dbm)), 50, 3),
                           1e-8)

        def integrand(x):
            cer = float(cer_mai_free(math.exp(2.0 * x), rx, loss))
            return 0.5 * (cer ** 3 + 1.0 - (1.0 - cer) ** 3) * stats.norm.pdf(x, -0.17, math.sqrt(0.17))

        expected, _ = integrate.quad(integrand, -np.inf, np.inf, limit=200)
        assert ber == pytest.approx(expected, rel=1e-3, abs=1e-12)


def test_relay_sweep_is_reproducible_with_monte_carlo():
    scenario = scenario_from_dict({
        "kind": "relay-ber", "n_relays": [0], "directions": ["uplink"],
        "sweep_dbm": {"start": -10.0, "stop": -5.0, "step": 5.0}, "monte_carlo": {"bits": 20_000, "min_ber": 1e-4},
    })
    first = run(scenario, workers=1)
    second = run(scenario, workers=2)
    pd.testing.assert_frame_equal(first, second)
    assert first["ber_mc"].notna().all()
    assert (first["mc_stderr"] > 0).all()


def test_noiseless_tdoa_trials_are_exact():
    scenario = scenario_from_dict({
        "kind": "localization", "trials": 20, "anchors": [7], "methods": ["tdoa"], "tdoa_jitter": 0.0,
    })
    frame = run(scenario, workers=1)
    assert list(frame.columns) == COLUMNS["localization"]
    assert len(frame) == 20
    assert frame["err_m"].max() < 1e-6


def test_localization_trials_cover_methods_and_anchor_counts():
    scenario = scenario_from_dict({"kind": "localization", "trials": 25})
    frame = run(scenario, workers=1)
    assert len(frame) == 2 * 2 * 25
    assert set(frame["method"]) == {"rss-lls", "tdoa"}
    assert set(frame["n_anchors"]) == {3, 7}
    rss = frame[frame["method"] == "rss-lls"]
    assert (rss["err_m"] >= 0).all()
    assert rss["err_m"].median() < 50.0


def test_power_control_sweep():
    scenario = scenario_from_dict({"kind": "power-control", "target_ber": [1e-4], "n_rings": [1, 3]})
    frame = run(scenario, workers=1)
    assert list(frame.columns) == COLUMNS["power-control"]
    by_rings = dict(zip(frame["n_rings"], frame["avg_power_per_bit_dbm"]))
    assert 0 < by_rings[1] - by_rings[3] <= 10 * math.log10(3) + 1e-9


def test_power_cap_is_infeasible():
    scenario = scenario_from_dict({"kind": "power-control", "target_ber": [1e-6], "n_rings": [1],
                                   "power_cap_dbm": -30.0})
    with pytest.raises(InfeasibleError):
        run(scenario, workers=1)


def test_miso_sweep_shape():
    scenario = scenario_from_dict({
        "kind": "mimo-ber", "link": {"range_m": 10.0, "aperture_diameter": 2.0}, "photons": 20_000,
        "n_tx": [1, 3], "sigma_x_sq": [0.01], "sweep_dbm": {"start": 0.0, "stop": 5.0, "step": 5.0},
    })
    frame = run(scenario, workers=1)
    assert list(frame.columns) == COLUMNS["mimo-ber"]
    assert len(frame) == 4
    assert frame["ber_analytic"].between(0.0, 0.5).all()
    pd.testing.assert_frame_equal(frame, run(scenario, workers=1))


def test_cli_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", str(SCENARIOS / "relay_ber.json")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "relay-ber", "code": {"users": 7}}))
    assert main(["validate", str(bad)]) == 2
    out = capsys.readouterr().out
    assert '"ok": false' in out


def test_cli_run_writes_csv(tmp_path, capsys):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "kind": "relay-ber", "n_relays": [0], "directions": ["downlink"],
        "sweep_dbm": {"start": 0.0, "stop": 5.0, "step": 5.0}, "monte_carlo": {"bits": 0},
    }))
    out = tmp_path / "out" / "relay_ber.csv"
    assert main(["run", str(path), "--out", str(out), "--seed", "3", "--workers", "1"]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == COLUMNS["relay-ber"]
    assert len(frame) == 2


def test_cli_error_exit_codes(tmp_path, capsys):
    infeasible = tmp_path / "cap.json"
    infeasible.write_text(json.dumps({"kind": "power-control", "target_ber": [1e-6], "n_rings": [1],
                                      "power_cap_dbm": -30.0}))
    assert main(["run", str(infeasible), "--out", str(tmp_path / "x.csv")]) == 3
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"kind": "relay-ber", "code": {"users": 7}}))
    assert main(["run", str(invalid), "--out", str(tmp_path / "y.csv")]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 1


def test_cli_generates_codes(tmp_path, capsys):
    out = tmp_path / "codes.txt"
    assert main(["codes", "gen", "50", "3", "1", "5", "--seed", "2", "--out", str(out)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["codes"]) == 5
    assert not doc["shortfall"]
    assert out.read_text().splitlines()[0] == "50 3 1"
