import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backaction.config import with_overrides
from backaction.errors import DomainError
from backaction.model import HBAR, K_B
from backaction.noisebudget import (SOURCES, BudgetError, backsolve_phase_noise, backsolve_sensing_anchor,
                                    build_budget, input_power_for_ratio, power_dependence, qba_psd,
                                    ratio_formula, thermal_psd)

GRID = np.geomspace(10, 1000, 200)


@pytest.fixture(scope="module")
def high(ref):
    return with_overrides(ref, {"laser.circulating_power_w": 4.1})


def test_qba_and_thermal_hand_oracle(high):
    n = 7.2965e9
    g = 2 * math.pi * (2 * math.pi * 299792458.0 / 1064e-9) * 2.8
    kappa = 2 * math.pi * 1.181e6
    s_q = 2 * n * HBAR**2 * g**2 / kappa
    bud = build_budget(high, [325.0])
    assert bud.per_source["qba"][0] == pytest.approx(s_q, rel=1e-3)
    assert bud.per_source["qba"][0] == pytest.approx(2.13e-32, rel=0.01)
    s_th = 4 * K_B * 300 * 5e-6 * 196 / (2 * 3.2e5 * 2 * math.pi * 325)
    assert bud.per_source["thermal"][0] == pytest.approx(s_th, rel=1e-12)
    assert bud.per_source["thermal"][0] == pytest.approx(1.24e-32, rel=0.01)
    visc = thermal_psd(high.with_damping("viscous").mech, 2 * math.pi * 325)
    assert visc == pytest.approx(4 * K_B * 300 * 5e-6 * 14 / (2 * 3.2e5), rel=1e-12)


def test_ratio_value_and_closed_form(high):
    bud = build_budget(high, GRID)
    assert bud.ratio_at(325) == pytest.approx(1.7145, rel=1e-3)
    for f in (75.0, 325.0, 900.0):
        assert ratio_formula(high, f) == pytest.approx(bud.ratio_at(f), rel=1e-10)


def test_closed_form_exact_in_high_temperature_limit(high):
    cfg = replace(high, noise=replace(high.noise, high_temperature_limit=True))
    bud = build_budget(cfg, [325.0])
    assert ratio_formula(cfg, 325.0) == pytest.approx(bud.ratio_at(325.0), rel=1e-13)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.05, 20.0))
def test_ratio_invariant_under_joint_scaling(high, alpha):
    cfg = high.with_damping("viscous")
    base = build_budget(cfg, [325.0]).ratio_at(325.0)
    scaled = replace(cfg, mech=replace(cfg.mech, temperature=cfg.mech.temperature * alpha),
                     laser=replace(cfg.laser, input_power=cfg.laser.input_power * alpha))
    assert build_budget(scaled, [325.0]).ratio_at(325.0) == pytest.approx(base, rel=1e-12)


def test_structure_thermal_asd_slope(ref):
    bud = build_budget(ref, GRID)
    slope = np.diff(np.log(bud.asd("thermal"))) / np.diff(np.log(GRID))
    assert np.allclose(slope, -0.5, atol=1e-12)
    visc = build_budget(ref.with_damping("viscous"), GRID)
    assert np.allclose(np.diff(np.log(visc.asd("thermal"))), 0, atol=1e-12)


def test_total_is_sum_of_sources(high):
    cfg = with_overrides(high, {"noise.unknown_anchor_asd": 1e-16, "cavity.detuning_over_kappa": 0.3})
    bud = build_budget(cfg, GRID)
    assert set(bud.per_source) == set(SOURCES) | {"unknown"}
    assert np.allclose(bud.total, sum(bud.per_source.values()), rtol=1e-15)
    assert np.allclose(bud.asd("total") ** 2, sum(bud.asd(s) ** 2 for s in bud.per_source), rtol=1e-12)


def test_no_light(ref):
    bud = build_budget(ref.with_input_power(0.0), GRID)
    for s in ("qba", "classical", "phase"):
        assert np.all(bud.per_source[s] == 0)
    # without light only thermal and sensing remain, with sensing 93% of the PSD at 75 Hz
    assert np.allclose(bud.total, bud.per_source["thermal"] + bud.per_source["sensing"])
    assert bud.fraction("sensing", 75.0) == pytest.approx(0.93, abs=0.005)


def test_backsolved_defaults_reproduce_their_anchors(ref):
    anchor = backsolve_sensing_anchor(ref, 0.93, 75.0)
    assert anchor == pytest.approx(ref.noise.sensing_anchor_asd, rel=1e-4)
    cfg = with_overrides(ref, {"laser.input_power_w": 7.6e-3, "cavity.detuning_over_kappa": 1.1})
    assert backsolve_phase_noise(cfg, 0.003, 325.0) == pytest.approx(ref.laser.phase_noise, rel=1e-4)
    assert build_budget(cfg, [325.0]).fraction("phase", 325.0) == pytest.approx(0.003, rel=1e-3)
    with pytest.raises(DomainError):
        backsolve_phase_noise(ref.with_input_power(1e-3), 0.003, 325.0)


def test_power_dependence_and_crossover(ref):
    pd = power_dependence(ref, [0.0, 1e-3, 4e-3], 325.0)
    assert pd.asd["qba"][0] == 0
    assert pd.asd["qba"][2] == pytest.approx(2 * pd.asd["qba"][1], rel=1e-12)
    cross = pd.crossovers["qba_equals_thermal"]
    assert cross == pytest.approx(5.92e-3, rel=0.01)
    assert input_power_for_ratio(ref, 325.0, 1.0) == pytest.approx(cross, rel=1e-12)
    b = build_budget(ref.with_input_power(cross), [325.0])
    assert b.per_source["qba"][0] == pytest.approx(b.per_source["thermal"][0], rel=1e-12)


def test_qba_rejects_negative_photon_number(ref):
    with pytest.raises(DomainError):
        qba_psd(-1.0, ref.cavity)


def test_budget_error_names_source(ref):
    cfg = with_overrides(ref, {"laser.input_power_w": 7.6e-3, "cavity.detuning_over_kappa": -1.1})
    with pytest.raises(BudgetError) as info:
        build_budget(cfg, GRID)
    assert info.value.source == "phase"


def test_grid_validation(ref):
    for bad in ([], [0.0, 1.0], [2.0, 1.0]):
        with pytest.raises(DomainError):
            build_budget(ref, bad)


def test_exports(ref, tmp_path):
    bud = build_budget(ref, GRID)
    bud.to_csv(tmp_path / "b.csv")
    header = (tmp_path / "b.csv").read_text().splitlines()[0].split(",")
    assert header == ["frequency_hz", "asd_total", "asd_qba", "asd_classical", "asd_thermal",
                      "asd_sensing", "asd_phase"]
    data = np.loadtxt(tmp_path / "b.csv", delimiter=",", skiprows=1)
    assert np.allclose(data[:, 1], bud.asd("total"), rtol=1e-15)
    bud.to_json(tmp_path / "b.json")
    import json

    rep = json.loads((tmp_path / "b.json").read_text())
    assert rep["parameters"]["mechanics"]["quality_factor"] == 3.2e5
    assert rep["ratio_at"]["325"] == pytest.approx(bud.ratio_at(325))
