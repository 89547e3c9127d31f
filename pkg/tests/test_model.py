import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backaction.errors import DomainError
from backaction.model import (HBAR, K_B, CavityParams, LaserParams, MechanicalParams, derive,
                              gravitational_stiffness, implied_reference_power,
                              input_power_for_circulating, intracavity_state, pendulum_mode,
                              shot_noise_ratio, thermal_occupation, torsional_stability, wire_mechanics)

# Independent hand oracles for the 5 mg pendulum on a 50 mm, 3 um tungsten wire
M, L, R, G = 5e-6, 0.05, 1.5e-6, 9.80
E, SHEAR, RHO = 411e9, 161e9, 19300.0
TENSION = M * G
I_AREA = math.pi * R**4 / 4
DILUTION = 2 * L / math.sqrt(E * I_AREA / TENSION)
K_T_WIRE = math.pi * SHEAR * R**4 / (2 * L)
VIOLIN = math.sqrt(TENSION / (RHO * math.pi * R**2)) / (2 * L)


def test_pendulum_mode_and_gravity_spring(ref):
    assert pendulum_mode(ref.mech) == pytest.approx(14.0, rel=1e-12)
    assert gravitational_stiffness(ref.mech) == pytest.approx(9.8e-4, rel=1e-12)


def test_wire_mechanics_matches_hand_oracle(ref):
    w = wire_mechanics(ref.mech)
    assert w.dilution == pytest.approx(DILUTION, rel=1e-12)
    assert w.k_t_wire == pytest.approx(K_T_WIRE, rel=1e-12)
    assert w.violin_f1 == pytest.approx(VIOLIN, rel=1e-12)
    assert w.k_el == pytest.approx(9.8e-4 / DILUTION, rel=1e-12)
    # frozen values
    assert w.dilution == pytest.approx(547.58, rel=1e-4)
    assert w.violin_f1 == pytest.approx(189.52, rel=1e-4)
    assert w.k_t_wire == pytest.approx(2.5606e-11, rel=1e-4)


def test_torsional_margin_and_geometry(ref):
    w = wire_mechanics(ref.mech)
    st_tri = torsional_stability(ref.cavity, w.k_t_wire)
    assert st_tri.stable
    assert st_tri.power_margin == pytest.approx(1.2e-9 / K_T_WIRE, rel=1e-12)
    lin = CavityParams(kappa=ref.cavity.kappa, coupling_g=ref.cavity.coupling_g, geometry="linear")
    assert not torsional_stability(lin, w.k_t_wire).stable
    weak = CavityParams(kappa=ref.cavity.kappa, coupling_g=1.0, geometry="linear", k_t_opt=1e-12)
    assert torsional_stability(weak, w.k_t_wire).stable
    with pytest.raises(DomainError):
        torsional_stability(ref.cavity, 0.0)


def test_circulating_power_reference(ref):
    st_ = intracavity_state(ref.cavity, ref.laser)
    assert st_.p_circ == pytest.approx(4.1, rel=1e-12)
    # N = P L / (hbar w_L c)
    w_l = 2 * math.pi * 299792458.0 / 1064e-9
    assert st_.n_circ == pytest.approx(4.1 * 0.1 / (HBAR * w_l * 299792458.0), rel=1e-12)
    assert st_.n_circ == pytest.approx(7.3e9, rel=0.01)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(1e-6, 10.0), ratio=st.floats(-3, 3))
def test_circulating_inverse_round_trip(p, ratio):
    cav = CavityParams(kappa=2 * math.pi * 1.181e6, coupling_g=1.0, detuning=ratio * 2 * math.pi * 1.181e6)
    p_in = input_power_for_circulating(cav, p)
    assert intracavity_state(cav, LaserParams(input_power=p_in)).p_circ == pytest.approx(p, rel=1e-12)


def test_implied_reference_power_consistency():
    # B = 94 at A = 3.5e-7 and B = 48 at A = 1.8e-7 imply nearly the same power
    p1 = implied_reference_power(3.5e-7, 94, 0.73)
    p2 = implied_reference_power(1.8e-7, 48, 0.73)
    assert p1 == pytest.approx(31.66e-3, rel=1e-3)
    assert p2 == pytest.approx(p1, rel=0.02)
    laser = LaserParams(rin_amplitude=3.5e-7)
    assert shot_noise_ratio(laser, p1) == pytest.approx(94, rel=1e-12)


def test_thermal_occupation_limits():
    w = 14.0
    n = thermal_occupation(300.0, w)
    assert n == pytest.approx(K_B * 300 / (HBAR * w), rel=1e-9)
    assert thermal_occupation(300.0, 2 * math.pi * 325) == pytest.approx(1.92e10, rel=0.01)
    assert thermal_occupation(300.0, w, high_temperature_limit=True) == pytest.approx(K_B * 300 / (HBAR * w))
    assert thermal_occupation(0.0, w) == 0.0
    with pytest.raises(DomainError):
        thermal_occupation(300.0, 0.0)


def test_rin_table_power_law_interpolation():
    laser = LaserParams(rin_table=((75, 3.5e-7), (325, 1.8e-7)))
    assert laser.rin_at(75.0) == pytest.approx(3.5e-7)
    assert laser.rin_at(325.0) == pytest.approx(1.8e-7)
    f = np.array([30.0, 150.0, 1000.0])
    slope = math.log(1.8 / 3.5) / math.log(325 / 75)
    assert np.allclose(laser.rin_at(f), 3.5e-7 * (f / 75) ** slope, rtol=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(mirror_mass=0, wire_length=0.05, wire_radius=1e-6, quality_factor=1e5),
    dict(mirror_mass=1e-6, wire_length=-1, wire_radius=1e-6, quality_factor=1e5),
    dict(mirror_mass=1e-6, wire_length=0.05, wire_radius=1e-6, quality_factor=0),
    dict(mirror_mass=1e-6, wire_length=0.05, wire_radius=1e-6, quality_factor=1e5, temperature=-1),
])
def test_mechanical_validation(kwargs):
    with pytest.raises(DomainError):
        MechanicalParams(**kwargs)


def test_parameter_validation():
    with pytest.raises(DomainError):
        CavityParams(kappa=-1, coupling_g=1)
    with pytest.raises(DomainError):
        CavityParams(kappa=1, coupling_g=1, kappa_in=2)
    with pytest.raises(DomainError):
        LaserParams(quantum_efficiency=1.5)
    with pytest.raises(DomainError):
        LaserParams(input_power=-1)


def test_derive_bundle(ref):
    d = derive(ref)
    assert d.omega_m == pytest.approx(14.0)
    assert d.dilution == pytest.approx(DILUTION)
    assert d.shot_ratio_b > 0
