"""Force-noise budget on the suspended mirror.

Internal PSDs are double-sided (N^2/Hz). Exports convert to single-sided
ASD = sqrt(2 * PSD), which is what the measured spectra are plotted in.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from enum import Enum
from typing import Any, Sequence

import numpy as np

from .dynamics import dissipation_rate, operating_point_spring
from .errors import DomainError
from .model import (HBAR, K_B, CavityParams, ExperimentConfig, MechanicalParams,
                    intracavity_state, pendulum_mode,
                    shot_noise_ratio, thermal_occupation)

SOURCES = ("qba", "classical", "thermal", "sensing", "phase")


class BudgetError(ValueError):
    def __init__(self, source: str, cause: Exception):
        self.source = source
        super().__init__(f"{source}: {cause}")


def qba_psd(n_circ: float, cavity: CavityParams) -> float:
    """Quantum radiation-pressure force noise 2 N hbar^2 g^2 / kappa."""
    if n_circ < 0:
        raise DomainError("n_circ must be non-negative")
    return 2 * n_circ * HBAR**2 * cavity.coupling_g**2 / cavity.kappa


def classical_ba_psd(n_circ: float, cavity: CavityParams, b):
    """Intensity-noise back-action, (4 kappa_in / kappa) B^2 times the quantum level."""
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise DomainError("B must be non-negative")
    out = 4 * cavity.kappa_in / cavity.kappa * b**2 * qba_psd(n_circ, cavity)
    return out if out.ndim else float(out)


def thermal_psd(mech: MechanicalParams, omega):
    """Suspension thermal force noise 4 k_B T m gamma(w)."""
    out = 4 * K_B * mech.temperature * mech.effective_mass * dissipation_rate(mech, omega)
    return out


def phase_ba_psd(cavity: CavityParams, omega_eff: float, delta_phi: float, s_ffc):
    """Back-action of laser phase noise, S_c * 2 |Delta| w_eff dphi / (kappa^2 + Delta^2)."""
    if delta_phi < 0:
        raise DomainError("phase noise must be non-negative")
    d = abs(cavity.detuning)
    return np.asarray(s_ffc) * 2 * d * omega_eff * delta_phi / (cavity.kappa**2 + d**2)


def sensing_psd(anchor_level: float, anchor_f: float, omega):
    """Force-referred sensing noise with ASD proportional to f through (anchor_f, anchor_level).

    ``anchor_level`` is a single-sided ASD in N/sqrt(Hz); the return value is
    the double-sided PSD.
    """
    if anchor_level < 0:
        raise DomainError("anchor level must be non-negative")
    f = np.asarray(omega, dtype=float) / (2 * math.pi)
    out = 0.5 * (anchor_level * f / anchor_f) ** 2
    return out if out.ndim else float(out)


def _shot_ratio_bins(config: ExperimentConfig, f: np.ndarray) -> np.ndarray:
    laser = config.laser
    if laser.input_power == 0:
        return np.zeros_like(f)
    return np.array([shot_noise_ratio(laser, laser.input_power, rin=a) for a in laser.rin_at(f)])


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def parameter_snapshot(config: ExperimentConfig) -> dict:
    return {
        "cavity": _jsonable(config.cavity),
        "mechanics": _jsonable(config.mech),
        "laser": _jsonable(config.laser),
        "noise": _jsonable(config.noise),
    }


@dataclass
class NoiseBudget:
    grid: np.ndarray  # Hz
    per_source: dict[str, np.ndarray]  # double-sided N^2/Hz
    total: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)
    config: ExperimentConfig | None = field(default=None, repr=False)

    def asd(self, source: str = "total") -> np.ndarray:
        """Single-sided ASD, N/sqrt(Hz)."""
        psd = self.total if source == "total" else self.per_source[source]
        return np.sqrt(2 * psd)

    def ratio_at(self, f: float) -> float:
        """Quantum back-action over thermal force PSD at ``f`` Hz."""
        cfg = self.config
        n = intracavity_state(cfg.cavity, cfg.laser).n_circ
        return float(qba_psd(n, cfg.cavity) / thermal_psd(cfg.mech, 2 * math.pi * f))

    def fraction(self, source: str, f: float) -> float:
        k = int(np.argmin(np.abs(self.grid - f)))
        return float(self.per_source[source][k] / self.total[k]) if self.total[k] > 0 else 0.0

    @property
    def enhancement(self) -> float:
        """w_eff / w_m: gain of the on-resonance comparison from optical trapping (structure damping)."""
        return self.metadata["omega_eff"] / self.metadata["omega_m"]

    def to_csv(self, path) -> None:
        cols = ["total", *SOURCES] + [s for s in self.per_source if s not in SOURCES]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency_hz"] + [f"asd_{c}" for c in cols])
            asds = [self.asd(c) for c in cols]
            for i, f in enumerate(self.grid):
                w.writerow([repr(float(f))] + [repr(float(a[i])) for a in asds])

    def report(self, ratio_frequencies: Sequence[float] = (75.0, 325.0)) -> dict:
        return _jsonable({
            "ratio_at": {f"{f:g}": self.ratio_at(f) for f in ratio_frequencies},
            "ratio_formula": {f"{f:g}": ratio_formula(self.config, f) for f in ratio_frequencies},
            "enhancement_omega_eff_over_omega_m": self.enhancement,
            "derived": {k: v for k, v in self.metadata.items() if k != "parameters"},
            "parameters": self.metadata.get("parameters", {}),
        })

    def to_json(self, path, ratio_frequencies: Sequence[float] = (75.0, 325.0)) -> None:
        with open(path, "w") as fh:
            json.dump(self.report(ratio_frequencies), fh, indent=2)


def build_budget(config: ExperimentConfig, grid) -> NoiseBudget:
    """Evaluate every force-noise source on ``grid`` (Hz) and sum them."""
    f = np.asarray(grid, dtype=float)
    if f.ndim != 1 or f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
        raise DomainError("grid must be positive and strictly increasing")
    omega = 2 * np.pi * f
    cav, mech, noise = config.cavity, config.mech, config.noise
    state = intracavity_state(cav, config.laser)
    per: dict[str, np.ndarray] = {}

    def run(name, fn):
        try:
            per[name] = np.broadcast_to(np.asarray(fn(), dtype=float), f.shape).copy()
        except Exception as exc:  # attribute the failure to its source
            raise BudgetError(name, exc) from exc

    try:
        spring = operating_point_spring(config)
    except Exception as exc:
        raise BudgetError("phase", exc) from exc
    b = _shot_ratio_bins(config, f)
    run("qba", lambda: qba_psd(state.n_circ, cav))
    run("classical", lambda: classical_ba_psd(state.n_circ, cav, b))
    run("thermal", lambda: thermal_psd(mech, omega))
    run("sensing", lambda: sensing_psd(noise.sensing_anchor_asd, noise.sensing_anchor_hz, omega))
    run("phase", lambda: phase_ba_psd(cav, spring.omega_eff, config.laser.phase_noise, per["classical"]))
    if noise.unknown_anchor_asd > 0:
        run("unknown", lambda: sensing_psd(noise.unknown_anchor_asd, noise.unknown_anchor_hz, omega))
    total = np.zeros_like(f)
    for name in per:
        total = total + per[name]
    meta = {
        "n_circ": state.n_circ,
        "p_circ": state.p_circ,
        "input_power": config.laser.input_power,
        "omega_m": pendulum_mode(mech),
        "omega_eff": spring.omega_eff,
        "k_opt": spring.k_opt,
        "damping_model": mech.damping_model.value,
        "parameters": parameter_snapshot(config),
    }
    return NoiseBudget(f, per, total, meta, config)


def zero_point_coupling_sq(config: ExperimentConfig, omega: float) -> float:
    """g^2 scaled by the zero-point spread hbar / (2 m w) of an oscillator at ``omega``."""
    return config.cavity.coupling_g**2 * HBAR / (2 * config.mech.effective_mass * omega)


def ratio_formula(config: ExperimentConfig, f: float) -> float:
    """Closed-form QBA/thermal ratio written with phonon number.

    (N g0^2 / n_th kappa) (2Q / w_m) for viscous damping and the same times
    w / w_m for structure damping, where g0 is the coupling scaled to the
    zero-point motion at ``f``. With the high-temperature phonon number this
    equals the direct PSD ratio identically.
    """
    omega = 2 * math.pi * f
    cfg = config
    n = intracavity_state(cfg.cavity, cfg.laser).n_circ
    wm = pendulum_mode(cfg.mech)
    n_th = thermal_occupation(cfg.mech.temperature, omega, cfg.noise.high_temperature_limit)
    base = n * zero_point_coupling_sq(cfg, omega) / (n_th * cfg.cavity.kappa) * 2 * cfg.mech.quality_factor / wm
    if cfg.mech.damping_model.value == "structure":
        base *= omega / wm
    return float(base)


@dataclass
class PowerDependence:
    powers: np.ndarray  # W
    frequency: float  # Hz
    asd: dict[str, np.ndarray]  # single-sided, per source and "total"
    crossovers: dict[str, float]  # W


def power_dependence(config: ExperimentConfig, p_list: Sequence[float], f: float) -> PowerDependence:
    """Per-source single-sided ASD at ``f`` as the input power varies."""
    powers = np.asarray(p_list, dtype=float)
    if np.any(powers < 0):
        raise DomainError("powers must be non-negative")
    cols: dict[str, list] = {}
    for p in powers:
        bud = build_budget(config.with_input_power(float(p)), [f])
        for name in list(bud.per_source) + ["total"]:
            cols.setdefault(name, []).append(float(bud.asd(name)[0]))
    asd = {k: np.array(v) for k, v in cols.items()}
    # S_q = a P, S_c = b P^2 (double-sided) at this frequency
    ref = config.with_input_power(1e-3)
    bud = build_budget(ref, [f])
    a = bud.per_source["qba"][0] / 1e-3
    b = bud.per_source["classical"][0] / 1e-6
    s_th = bud.per_source["thermal"][0]
    cross = {
        "qba_equals_thermal": s_th / a if a > 0 else math.inf,
        "classical_equals_qba": a / b if b > 0 else math.inf,
        "classical_equals_thermal": math.sqrt(s_th / b) if b > 0 else math.inf,
    }
    return PowerDependence(powers, f, asd, cross)


def backsolve_sensing_anchor(config: ExperimentConfig, share: float = 0.93, f: float = 75.0) -> float:
    """Sensing ASD at ``f`` that makes up ``share`` of the no-light force PSD there.

    With no light the spectrum is thermal plus sensing, so the sensing PSD is
    share / (1 - share) times the thermal PSD.
    """
    if not 0 <= share < 1:
        raise DomainError("share must lie in [0, 1)")
    s_th = thermal_psd(config.mech, 2 * math.pi * f)
    s_sens = share / (1 - share) * float(s_th)
    return math.sqrt(2 * s_sens)


def backsolve_phase_noise(config: ExperimentConfig, fraction: float = 0.003, f: float = 325.0) -> float:
    """Laser phase noise that makes phase back-action ``fraction`` of the total force PSD at ``f``."""
    if not 0 <= fraction < 1:
        raise DomainError("fraction must lie in [0, 1)")
    cfg = replace(config, laser=replace(config.laser, phase_noise=0.0))
    bud = build_budget(cfg, [f])
    other = bud.total[0]
    target = fraction / (1 - fraction) * other
    unit = phase_ba_psd(cfg.cavity, bud.metadata["omega_eff"], 1.0, bud.per_source["classical"][0])
    if unit <= 0:
        raise DomainError("phase back-action vanishes at this operating point (zero detuning or no light)")
    return float(target / unit)


def input_power_for_ratio(config: ExperimentConfig, f: float, ratio: float = 1.0) -> float:
    """Input power at which the QBA/thermal ratio at ``f`` reaches ``ratio``."""
    bud = build_budget(config.with_input_power(1e-3), [f])
    return ratio / bud.ratio_at(f) * 1e-3

