"""Reading experiment configurations from YAML.

Frequencies are entered in Hz (ordinary frequency) and converted to rad/s
here; every other quantity is SI. ``reference_config()`` returns the bundled
parameter set for the 5 mg pendulum experiment.
"""
from __future__ import annotations

import copy
import math
import re
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, DomainError
from .model import (CavityParams, Damping, ExperimentConfig, Geometry, LaserParams,
                    MechanicalParams, NoiseParams, input_power_for_circulating)

TWO_PI = 2 * math.pi

# key -> unit hint
SCHEMA: dict[str, dict[str, str]] = {
    "cavity": {
        "kappa_hz": "Hz (half linewidth)",
        "kappa_in_hz": "Hz",
        "detuning_hz": "Hz",
        "detuning_over_kappa": "dimensionless",
        "wavelength_m": "m",
        "round_trip_length_m": "m",
        "coupling_factor_per_m": "1/m (g = 2 pi w_c x factor)",
        "coupling_g_hz_per_m": "Hz/m",
        "incident_angle_rad": "rad",
        "k_t_opt_nm_per_rad": "N m/rad",
        "geometry": "triangular|linear",
    },
    "mechanics": {
        "mirror_mass_kg": "kg",
        "effective_mass_kg": "kg",
        "wire_length_m": "m",
        "wire_radius_m": "m",
        "wire_youngs_modulus_pa": "Pa",
        "wire_shear_modulus_pa": "Pa",
        "wire_density_kg_m3": "kg/m^3",
        "quality_factor": "dimensionless",
        "temperature_k": "K",
        "damping_model": "viscous|structure",
    },
    "laser": {
        "input_power_w": "W",
        "circulating_power_w": "W",
        "rin_amplitude": "1/sqrt(Hz)",
        "rin_table": "[[f_Hz, A], ...]",
        "quantum_efficiency_a_per_w": "A/W",
        "phase_noise": "rad/sqrt(Hz)",
    },
    "noise": {
        "sensing_anchor_asd": "N/sqrt(Hz)",
        "sensing_anchor_hz": "Hz",
        "unknown_anchor_asd": "N/sqrt(Hz)",
        "unknown_anchor_hz": "Hz",
        "high_temperature_limit": "bool",
    },
}
SECTIONS = set(SCHEMA) | {"loop", "grid", "reproduce"}
REQUIRED = {
    "cavity": ["kappa_hz"],
    "mechanics": ["mirror_mass_kg", "wire_length_m", "wire_radius_m", "quality_factor"],
}


class _Loader(yaml.SafeLoader):
    pass


# accept 1e-3 and 1.5e6 as floats (YAML 1.2 style) rather than strings
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)$
    |^[-+]?(?:[0-9][0-9_]*)\.[0-9_]*$
    |^[-+]?\.[0-9_]+(?:[eE][-+]?[0-9]+)?$
    |^[-+]?\.(?:inf|Inf|INF)$
    |^\.(?:nan|NaN|NAN)$""", re.X),
    list("-+0123456789."),
)


def reference_path() -> Path:
    return Path(str(resources.files("backaction") / "data" / "reference.yaml"))


def _num(section: Mapping, sec: str, key: str, default=None, required=False):
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"{sec}.{key}", "missing", SCHEMA[sec][key])
        return default
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{sec}.{key}", f"expected a number, got {v!r}", SCHEMA[sec][key])
    if not math.isfinite(v):
        raise ConfigError(f"{sec}.{key}", "must be finite", SCHEMA[sec][key])
    return float(v)


def _check_keys(raw: Mapping):
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>", "configuration must be a mapping of sections")
    for sec in raw:
        if sec not in SECTIONS:
            raise ConfigError(str(sec), f"unknown section; expected one of {sorted(SECTIONS)}")
    for sec, keys in SCHEMA.items():
        body = raw.get(sec) or {}
        if not isinstance(body, Mapping):
            raise ConfigError(sec, "section must be a mapping")
        for k in body:
            if k not in keys:
                raise ConfigError(f"{sec}.{k}", f"unknown key; expected one of {sorted(keys)}")
    for sec, keys in REQUIRED.items():
        for k in keys:
            if k not in (raw.get(sec) or {}):
                raise ConfigError(f"{sec}.{k}", "missing", SCHEMA[sec][k])


def _build(section: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except DomainError as exc:
        raise ConfigError(section, str(exc)) from exc
    except ValueError as exc:  # bad enum value
        raise ConfigError(section, str(exc)) from exc


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a parsed configuration and build the parameter records."""
    _check_keys(raw)
    raw = copy.deepcopy(dict(raw))
    c = raw.get("cavity") or {}
    m = raw.get("mechanics") or {}
    la = raw.get("laser") or {}
    no = raw.get("noise") or {}

    kappa = TWO_PI * _num(c, "cavity", "kappa_hz", required=True)
    kin_hz = _num(c, "cavity", "kappa_in_hz")
    if "detuning_hz" in c and "detuning_over_kappa" in c:
        raise ConfigError("cavity.detuning_hz", "give either detuning_hz or detuning_over_kappa, not both")
    if "detuning_over_kappa" in c:
        detuning = _num(c, "cavity", "detuning_over_kappa") * kappa
    else:
        detuning = TWO_PI * _num(c, "cavity", "detuning_hz", 0.0)
    wavelength = _num(c, "cavity", "wavelength_m", 1064e-9)
    if "coupling_factor_per_m" in c and "coupling_g_hz_per_m" in c:
        raise ConfigError("cavity.coupling_factor_per_m", "give only one coupling key")
    if "coupling_g_hz_per_m" in c:
        g = TWO_PI * _num(c, "cavity", "coupling_g_hz_per_m")
    else:
        omega_c = TWO_PI * 299792458.0 / wavelength
        g = TWO_PI * omega_c * _num(c, "cavity", "coupling_factor_per_m", 2.8)
    geometry = c.get("geometry", "triangular")
    if geometry not in {g_.value for g_ in Geometry}:
        raise ConfigError("cavity.geometry", f"unknown geometry {geometry!r}", SCHEMA["cavity"]["geometry"])
    cavity = _build("cavity", CavityParams,
                    kappa=kappa,
                    kappa_in=None if kin_hz is None else TWO_PI * kin_hz,
                    detuning=detuning,
                    wavelength=wavelength,
                    round_trip_length=_num(c, "cavity", "round_trip_length_m", 0.1),
                    coupling_g=g,
                    incident_angle_beta=_num(c, "cavity", "incident_angle_rad", 0.75),
                    k_t_opt=_num(c, "cavity", "k_t_opt_nm_per_rad", 1.2e-9),
                    geometry=geometry)

    damping = m.get("damping_model", "structure")
    if damping not in {d.value for d in Damping}:
        raise ConfigError("mechanics.damping_model", f"unknown damping model {damping!r}",
                          SCHEMA["mechanics"]["damping_model"])
    mech_kwargs = dict(
        mirror_mass=_num(m, "mechanics", "mirror_mass_kg", required=True),
        wire_length=_num(m, "mechanics", "wire_length_m", required=True),
        wire_radius=_num(m, "mechanics", "wire_radius_m", required=True),
        quality_factor=_num(m, "mechanics", "quality_factor", required=True),
        temperature=_num(m, "mechanics", "temperature_k", 300.0),
        damping_model=damping,
        effective_mass=_num(m, "mechanics", "effective_mass_kg"),
    )
    for key, arg in (("wire_youngs_modulus_pa", "wire_youngs_modulus"),
                     ("wire_shear_modulus_pa", "wire_shear_modulus"),
                     ("wire_density_kg_m3", "wire_density")):
        v = _num(m, "mechanics", key)
        if v is not None:
            mech_kwargs[arg] = v
    mech = _build("mechanics", MechanicalParams, **mech_kwargs)

    if la.get("input_power_w") is not None and la.get("circulating_power_w") is not None:
        raise ConfigError("laser.input_power_w", "give either input_power_w or circulating_power_w, not both")
    if la.get("circulating_power_w") is not None:
        p_circ = _num(la, "laser", "circulating_power_w")
        if p_circ < 0:
            raise ConfigError("laser.circulating_power_w", "must be non-negative", "W")
        p_in = input_power_for_circulating(cavity, p_circ)
    else:
        p_in = _num(la, "laser", "input_power_w", 0.0)
    table = la.get("rin_table")
    if table is not None:
        try:
            table = tuple((float(f), float(a)) for f, a in table)
        except (TypeError, ValueError) as exc:
            raise ConfigError("laser.rin_table", "expected a list of [f_Hz, A] pairs",
                              SCHEMA["laser"]["rin_table"]) from exc
    laser = _build("laser", LaserParams,
                   input_power=p_in,
                   rin_amplitude=_num(la, "laser", "rin_amplitude", 0.0),
                   quantum_efficiency=_num(la, "laser", "quantum_efficiency_a_per_w", 0.73),
                   phase_noise=_num(la, "laser", "phase_noise", 0.0),
                   rin_table=table)

    hi_t = no.get("high_temperature_limit", False)
    if not isinstance(hi_t, bool):
        raise ConfigError("noise.high_temperature_limit", "expected true or false", "bool")
    noise = NoiseParams(
        sensing_anchor_asd=_num(no, "noise", "sensing_anchor_asd", 0.0),
        sensing_anchor_hz=_num(no, "noise", "sensing_anchor_hz", 75.0),
        unknown_anchor_asd=_num(no, "noise", "unknown_anchor_asd", 0.0),
        unknown_anchor_hz=_num(no, "noise", "unknown_anchor_hz", 75.0),
        high_temperature_limit=hi_t,
    )
    for key in ("sensing_anchor_asd", "unknown_anchor_asd"):
        if getattr(noise, key) < 0:
            raise ConfigError(f"noise.{key}", "must be non-negative", SCHEMA["noise"][key])
    for key in ("sensing_anchor_hz", "unknown_anchor_hz"):
        if not getattr(noise, key) > 0:
            raise ConfigError(f"noise.{key}", "must be positive", "Hz")

    loop = raw.get("loop") or {}
    if not isinstance(loop, Mapping):
        raise ConfigError("loop", "section must be a mapping")
    from .dynamics import BLOCK_UNITS, parse_block_spec

    for name, spec in (loop.get("blocks") or {}).items():
        if name not in BLOCK_UNITS:
            raise ConfigError(f"loop.blocks.{name}", f"unknown block; expected one of {sorted(BLOCK_UNITS)}")
        parse_block_spec(spec, name, f"loop.blocks.{name}")

    return ExperimentConfig(cavity=cavity, mech=mech, laser=laser, noise=noise, loop=dict(loop),
                            reproduce=dict(raw.get("reproduce") or {}), raw=raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.load(path.read_text(), Loader=_Loader)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read file: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    return config_from_dict(raw or {})


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def reference_config() -> ExperimentConfig:
    return load_config(reference_path())


def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict:
    """Return a copy of ``raw`` with dotted keys replaced, e.g. ``{"laser.input_power_w": 0}``."""
    out = copy.deepcopy(dict(raw))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(dotted, "path crosses a non-mapping value")
        node[parts[-1]] = value
        if parts[0] == "laser" and parts[-1] in ("input_power_w", "circulating_power_w"):
            other = "circulating_power_w" if parts[-1] == "input_power_w" else "input_power_w"
            out.get("laser", {}).pop(other, None)
        if parts[0] == "cavity" and parts[-1] in ("detuning_hz", "detuning_over_kappa"):
            other = "detuning_over_kappa" if parts[-1] == "detuning_hz" else "detuning_hz"
            out.get("cavity", {}).pop(other, None)
    return out


def with_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    return config_from_dict(apply_overrides(config.raw, overrides))
