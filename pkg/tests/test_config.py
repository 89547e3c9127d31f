import math

import pytest
import yaml

from backaction.config import (apply_overrides, config_from_dict, load_config, parse_yaml, reference_path,
                               with_overrides)
from backaction.errors import ConfigError
from backaction.model import Damping, Geometry


def test_reference_values(ref):
    assert ref.cavity.kappa == pytest.approx(2 * math.pi * 1.181e6)
    assert ref.cavity.kappa_in == pytest.approx(ref.cavity.kappa / 2)
    assert ref.cavity.geometry is Geometry.TRIANGULAR
    assert ref.mech.damping_model is Damping.STRUCTURE
    assert ref.mech.quality_factor == 3.2e5
    assert ref.laser.rin_table == ((75.0, 3.5e-7), (325.0, 1.8e-7))
    assert set(ref.reproduce) >= {"ratio325", "linewidth", "ringdown", "optical_spring", "fig3a", "fig4a", "fig4d"}


def test_scientific_notation_reads_as_float():
    raw = parse_yaml("a: 1.181e6\nb: 5e-6\nc: 3")
    assert raw == {"a": 1.181e6, "b": 5e-6, "c": 3}



def test_unknown_key_names_path(ref):
    raw = apply_overrides(ref.raw, {"cavity.kapa_hz": 1.0})
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.key == "cavity.kapa_hz"


def test_missing_required_key_has_unit_hint(ref):
    raw = apply_overrides(ref.raw, {})
    del raw["mechanics"]["mirror_mass_kg"]
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.key == "mechanics.mirror_mass_kg" and info.value.unit == "kg"
    assert "kg" in str(info.value)


@pytest.mark.parametrize("override", [
    {"mechanics.quality_factor": "high"},
    {"mechanics.quality_factor": -1},
    {"cavity.geometry": "square"},
    {"mechanics.damping_model": "magic"},
    {"laser.quantum_efficiency_a_per_w": 2.0},
    {"laser.rin_table": [[75.0]]},
    {"noise.high_temperature_limit": "yes"},
    {"loop.blocks.h_pdh": {"flat": "x"}},
    {"loop.blocks.h_foo": {"flat": 1}},
    {"bogus.section": 1},
])
def test_invalid_values(ref, override):
    with pytest.raises(ConfigError):
        config_from_dict(apply_overrides(ref.raw, override))


def test_power_and_detuning_overrides_replace_alternatives(ref):
    cfg = with_overrides(ref, {"laser.input_power_w": 1e-3, "cavity.detuning_hz": 1.0e5})
    assert cfg.laser.input_power == 1e-3
    assert cfg.cavity.detuning == pytest.approx(2 * math.pi * 1e5)
    cfg = with_overrides(cfg, {"laser.circulating_power_w": 4.1, "cavity.detuning_over_kappa": 0.0})
    assert cfg.laser.input_power == pytest.approx(10.15e-3, rel=1e-3)
    raw = apply_overrides(ref.raw, {})
    raw["laser"]["input_power_w"] = 1e-3
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_malformed_files(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("cavity: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    top = tmp_path / "list.yaml"
    top.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(top)


def test_copies_are_independent(ref):
    raw = apply_overrides(ref.raw, {"laser.input_power_w": 0})
    assert "circulating_power_w" in ref.raw["laser"]
    assert raw["laser"]["input_power_w"] == 0
