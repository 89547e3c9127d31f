"""Physical parameters of the suspended-mirror cavity and their static derived quantities.

All quantities are SI. Angular frequencies are rad/s; anything typed in Hz
is converted by the config loader before it reaches these records.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np
from scipy import constants as sc

from .errors import DomainError

HBAR = sc.hbar
K_B = sc.k
C_LIGHT = sc.c
E_CHARGE = sc.e
G_EARTH = 9.80  # m/s^2, fixed

TUNGSTEN_YOUNGS = 411e9  # Pa
TUNGSTEN_SHEAR = 161e9  # Pa
TUNGSTEN_DENSITY = 19300.0  # kg/m^3


class Geometry(str, Enum):
    TRIANGULAR = "triangular"
    LINEAR = "linear"


class Damping(str, Enum):
    VISCOUS = "viscous"
    STRUCTURE = "structure"


@dataclass(frozen=True)
class CavityParams:
    """Optical cavity.

    ``kappa`` is the amplitude (field) half linewidth and ``detuning`` is
    measured in the same convention. ``coupling_g`` is the frequency pull per
    metre of mirror displacement, rad/(s m).
    """

    kappa: float
    coupling_g: float
    kappa_in: float | None = None  # defaults to kappa/2 (critical coupling)
    detuning: float = 0.0
    wavelength: float = 1064e-9
    round_trip_length: float = 0.1
    incident_angle_beta: float = 0.75
    k_t_opt: float = 1.2e-9  # N m/rad
    geometry: Geometry = Geometry.TRIANGULAR

    def __post_init__(self):
        if self.kappa_in is None:
            object.__setattr__(self, "kappa_in", self.kappa / 2)
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        if not self.kappa > 0:
            raise DomainError("kappa must be positive")
        if not 0 < self.kappa_in <= self.kappa:
            raise DomainError("kappa_in must satisfy 0 < kappa_in <= kappa")
        if not self.wavelength > 0:
            raise DomainError("wavelength must be positive")
        if not self.round_trip_length > 0:
            raise DomainError("round_trip_length must be positive")

    @property
    def omega_laser(self) -> float:
        return 2 * math.pi * C_LIGHT / self.wavelength

    @property
    def effective_k_t_opt(self) -> float:
        """Optical torsional stiffness; a linear cavity of the same scale gives the opposite sign."""
        if self.geometry is Geometry.LINEAR:
            return -self.k_t_opt
        return self.k_t_opt


@dataclass(frozen=True)
class MechanicalParams:
    mirror_mass: float
    wire_length: float
    wire_radius: float
    quality_factor: float
    temperature: float = 300.0
    damping_model: Damping = Damping.STRUCTURE
    wire_youngs_modulus: float = TUNGSTEN_YOUNGS
    wire_shear_modulus: float = TUNGSTEN_SHEAR
    wire_density: float = TUNGSTEN_DENSITY
    effective_mass: float | None = None  # mass of the pendulum mode; defaults to mirror_mass

    def __post_init__(self):
        object.__setattr__(self, "damping_model", Damping(self.damping_model))
        if self.effective_mass is None:
            object.__setattr__(self, "effective_mass", self.mirror_mass)
        for name in ("mirror_mass", "wire_length", "wire_radius", "quality_factor",
                     "wire_youngs_modulus", "wire_shear_modulus", "wire_density",
                     "effective_mass"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.temperature < 0:
            raise DomainError("temperature must be non-negative")

    @property
    def tension(self) -> float:
        return self.mirror_mass * G_EARTH


@dataclass(frozen=True)
class LaserParams:
    """Input beam.

    ``rin_amplitude`` is the relative intensity noise amplitude A in 1/sqrt(Hz).
    If ``rin_table`` is given as ``((f_Hz, A), ...)`` it overrides the scalar
    and is interpolated as a power law between (and beyond) its points.
    """

    input_power: float = 0.0
    rin_amplitude: float = 0.0
    quantum_efficiency: float = 0.73  # A/W
    phase_noise: float = 0.0
    rin_table: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.input_power < 0:
            raise DomainError("input_power must be non-negative")
        if not 0 < self.quantum_efficiency <= 1.2:
            raise DomainError("quantum_efficiency must lie in (0, 1.2]")
        if self.rin_amplitude < 0 or self.phase_noise < 0:
            raise DomainError("rin_amplitude and phase_noise must be non-negative")
        if self.rin_table is not None:
            table = tuple(sorted((float(f), float(a)) for f, a in self.rin_table))
            if len(table) == 0 or any(f <= 0 or a < 0 for f, a in table):
                raise DomainError("rin_table needs positive frequencies and non-negative amplitudes")
            object.__setattr__(self, "rin_table", table)

    def rin_at(self, f):
        """RIN amplitude at frequency ``f`` (Hz)."""
        f = np.asarray(f, dtype=float)
        if self.rin_table is None:
            return np.full_like(f, self.rin_amplitude)
        fs = np.array([p[0] for p in self.rin_table])
        amps = np.array([p[1] for p in self.rin_table])
        if len(fs) == 1 or np.any(amps == 0):
            return np.interp(f, fs, amps)
        lf, la = np.log(fs), np.log(amps)
        x = np.log(f)
        # linear in log-log, extrapolating with the end slopes
        idx = np.clip(np.searchsorted(lf, x) - 1, 0, len(lf) - 2)
        slope = (la[idx + 1] - la[idx]) / (lf[idx + 1] - lf[idx])
        return np.exp(la[idx] + slope * (x - lf[idx]))


@dataclass(frozen=True)
class NoiseParams:
    """Readout-side noise and approximation switches.

    Sensing and "unknown" noises are force-referred single-sided ASDs with an
    f^+1 slope passing through ``(anchor_hz, anchor_asd)``.
    """

    sensing_anchor_asd: float = 0.0  # N/sqrt(Hz)
    sensing_anchor_hz: float = 75.0
    unknown_anchor_asd: float = 0.0
    unknown_anchor_hz: float = 75.0
    high_temperature_limit: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    cavity: CavityParams
    mech: MechanicalParams
    laser: LaserParams
    noise: NoiseParams = field(default_factory=NoiseParams)
    loop: dict[str, Any] = field(default_factory=dict)
    reproduce: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def with_input_power(self, p_in: float) -> "ExperimentConfig":
        return replace(self, laser=replace(self.laser, input_power=p_in))

    def with_detuning(self, detuning: float) -> "ExperimentConfig":
        return replace(self, cavity=replace(self.cavity, detuning=detuning))

    def with_damping(self, model: Damping | str) -> "ExperimentConfig":
        return replace(self, mech=replace(self.mech, damping_model=Damping(model)))


@dataclass(frozen=True)
class DerivedState:
    omega_m: float
    k_grav: float
    n_circ: float
    p_circ: float
    shot_ratio_b: float
    n_th: float
    dilution: float
    k_t_wire: float


@dataclass(frozen=True)
class WireMechanics:
    k_el: float  # N/m
    lambda_flex: float  # m
    dilution: float
    k_t_wire: float  # N m/rad
    violin_f1: float  # Hz


@dataclass(frozen=True)
class TorsionalStability:
    stable: bool
    power_margin: float


@dataclass(frozen=True)
class IntracavityState:
    n_circ: float
    p_circ: float  # W


def pendulum_mode(mech: MechanicalParams) -> float:
    """Angular frequency of the gravity pendulum, sqrt(g/l)."""
    if not mech.wire_length > 0:
        raise DomainError("wire_length must be positive")
    return math.sqrt(G_EARTH / mech.wire_length)


def gravitational_stiffness(mech: MechanicalParams) -> float:
    """k_grav = m g / l (N/m)."""
    return mech.mirror_mass * G_EARTH / mech.wire_length


def wire_mechanics(mech: MechanicalParams) -> WireMechanics:
    """Bending, torsion and violin-mode figures of a round suspension wire.

    The dilution factor counts the flexure length at both clamping points,
    D = 2 l / lambda_flex with lambda_flex = sqrt(E I / T).
    """
    r, l = mech.wire_radius, mech.wire_length
    tension = mech.tension
    area_moment = math.pi * r**4 / 4
    lambda_flex = math.sqrt(mech.wire_youngs_modulus * area_moment / tension)
    dilution = 2 * l / lambda_flex
    k_el = gravitational_stiffness(mech) / dilution
    k_t_wire = math.pi * mech.wire_shear_modulus * r**4 / (2 * l)
    mu = mech.wire_density * math.pi * r**2
    violin_f1 = math.sqrt(tension / mu) / (2 * l)
    return WireMechanics(k_el, lambda_flex, dilution, k_t_wire, violin_f1)


def torsional_stability(cavity: CavityParams, k_t_wire: float) -> TorsionalStability:
    """Stability of the torsional mode under the optical torque.

    ``power_margin`` is |k_t_opt| / k_t_wire: since the optical stiffness is
    linear in stored power, it is the factor by which the stored power exceeds
    the instability threshold a linear cavity would have.
    """
    if not k_t_wire > 0:
        raise DomainError("k_t_wire must be positive")
    k_opt = cavity.effective_k_t_opt
    margin = abs(cavity.k_t_opt) / k_t_wire
    if cavity.geometry is Geometry.TRIANGULAR:
        stable = True
    else:
        # total stiffness k_t_wire + k_opt with k_opt <= 0
        stable = k_t_wire + k_opt > 0
    return TorsionalStability(stable, margin)


def intracavity_state(cavity: CavityParams, laser: LaserParams) -> IntracavityState:
    if laser.input_power < 0:
        raise DomainError("input_power must be non-negative")
    photon_flux = laser.input_power / (HBAR * cavity.omega_laser)
    n_circ = 2 * cavity.kappa_in * photon_flux / (cavity.kappa**2 + cavity.detuning**2)
    p_circ = n_circ * HBAR * cavity.omega_laser * C_LIGHT / cavity.round_trip_length
    return IntracavityState(n_circ, p_circ)


def input_power_for_circulating(cavity: CavityParams, p_circ: float) -> float:
    """Invert :func:`intracavity_state`: input power that stores ``p_circ`` watts."""
    if p_circ < 0:
        raise DomainError("circulating power must be non-negative")
    n_circ = p_circ * cavity.round_trip_length / (HBAR * cavity.omega_laser * C_LIGHT)
    return n_circ * HBAR * cavity.omega_laser * (cavity.kappa**2 + cavity.detuning**2) / (2 * cavity.kappa_in)


def shot_noise_ratio(laser: LaserParams, reference_power: float, rin=None) -> float:
    """Relative shot-noise level B = sqrt(rho P / 2e) * A.

    ``rin`` overrides the laser's scalar RIN amplitude (e.g. a value read from
    the RIN table at a particular frequency).
    """
    if not reference_power > 0:
        raise DomainError("reference_power must be positive")
    a = laser.rin_amplitude if rin is None else rin
    return math.sqrt(laser.quantum_efficiency * reference_power / (2 * E_CHARGE)) * a


def implied_reference_power(rin_amplitude: float, shot_ratio: float, quantum_efficiency: float) -> float:
    """Power at which a RIN ``rin_amplitude`` corresponds to shot-noise ratio ``shot_ratio``."""
    if not rin_amplitude > 0:
        raise DomainError("rin_amplitude must be positive")
    return 2 * E_CHARGE * (shot_ratio / rin_amplitude) ** 2 / quantum_efficiency


def thermal_occupation(temperature, omega, high_temperature_limit: bool = False):
    """Bose occupation 1/(exp(hbar w / kT) - 1)."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise DomainError("omega must be positive")
    if temperature < 0:
        raise DomainError("temperature must be non-negative")
    if temperature == 0:
        out = np.zeros_like(omega)
    elif high_temperature_limit:
        out = K_B * temperature / (HBAR * omega)
    else:
        out = 1.0 / np.expm1(HBAR * omega / (K_B * temperature))
    return out if out.ndim else float(out)


def derive(config: ExperimentConfig) -> DerivedState:
    """Bundle the static derived quantities for a configuration."""
    mech = config.mech
    omega_m = pendulum_mode(mech)
    wire = wire_mechanics(mech)
    state = intracavity_state(config.cavity, config.laser)
    b = (shot_noise_ratio(config.laser, config.laser.input_power)
         if config.laser.input_power > 0 else 0.0)
    n_th = thermal_occupation(mech.temperature, omega_m, config.noise.high_temperature_limit)
    return DerivedState(
        omega_m=omega_m,
        k_grav=gravitational_stiffness(mech),
        n_circ=state.n_circ,
        p_circ=state.p_circ,
        shot_ratio_b=b,
        n_th=n_th,
        dilution=wire.dilution,
        k_t_wire=wire.k_t_wire,
    )
