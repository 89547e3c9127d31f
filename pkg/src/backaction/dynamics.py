"""Frequency-domain mechanics and the feedback-loop algebra of the readout.

Sign convention: every loop is written as positive feedback, so closed-loop
denominators read 1 - G. The optical spring block is H_opt = -K_opt, which
puts the trapped pendulum resonance at sqrt(w_m^2 + K_opt/m).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .analysis import SpectralEstimate
from .errors import (AssumptionError, CalibrationError, ConfigError, DomainError,
                     SingularLoopError, UnitError)
from .model import (HBAR, CavityParams, Damping, ExperimentConfig, LaserParams,
                    MechanicalParams, intracavity_state, pendulum_mode)
from .synth import TimeSeries

SINGULAR_TOL = 1e-6
G2_NEGLIGIBLE = 0.1


def _check_omega(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    if np.any(~(w > 0)):
        raise DomainError("angular frequency must be positive")
    return w


@dataclass(frozen=True)
class FrequencyResponse:
    """Complex response of one block, mapping ``units_in`` to ``units_out``."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    units_in: str
    units_out: str
    label: str = ""

    def __call__(self, omega):
        w = _check_omega(omega)
        out = np.asarray(self.evaluator(w), dtype=complex)
        out = np.broadcast_to(out, w.shape).astype(complex)
        return out if out.ndim else complex(out)

    @classmethod
    def flat(cls, value: complex, units_in: str, units_out: str, label: str = "") -> "FrequencyResponse":
        v = complex(value)
        return cls(lambda w: np.full(np.shape(w), v, dtype=complex), units_in, units_out, label)

    @classmethod
    def zpk(cls, zeros_hz: Sequence[complex], poles_hz: Sequence[complex], gain: float,
            units_in: str, units_out: str, label: str = "") -> "FrequencyResponse":
        """k * prod(s - 2 pi z) / prod(s - 2 pi p), s = i w; roots given in Hz."""
        z = 2 * np.pi * np.asarray(zeros_hz, dtype=complex)
        p = 2 * np.pi * np.asarray(poles_hz, dtype=complex)

        def ev(w):
            s = 1j * np.asarray(w)[..., None]
            num = np.prod(s - z, axis=-1) if z.size else 1.0
            den = np.prod(s - p, axis=-1) if p.size else 1.0
            return gain * num / den

        return cls(ev, units_in, units_out, label)

    def to_csv(self, path, omega) -> None:
        h = np.atleast_1d(self(omega))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_rad_s", "real", "imag"])
            for om, v in zip(np.atleast_1d(omega), h):
                w.writerow([repr(float(om)), repr(float(v.real)), repr(float(v.imag))])


def cascade(*blocks: FrequencyResponse) -> FrequencyResponse:
    """Series connection, signal flowing through ``blocks`` left to right."""
    for a, b in zip(blocks, blocks[1:]):
        if a.units_out != b.units_in:
            raise UnitError(f"cannot feed {a.label or 'block'} [{a.units_in}->{a.units_out}] "
                            f"into {b.label or 'block'} [{b.units_in}->{b.units_out}]")
    evs = [b.evaluator for b in blocks]

    def ev(w):
        out = np.ones(np.shape(w), dtype=complex)
        for e in evs:
            out = out * e(w)
        return out

    return FrequencyResponse(ev, blocks[0].units_in, blocks[-1].units_out,
                             "*".join(b.label for b in blocks))


def mech_susceptibility(mech: MechanicalParams, omega):
    """Displacement per unit force of the pendulum mode, m/N.

    Viscous damping uses w w_m / Q; structure damping a constant loss angle
    1/Q on the spring, w_m^2 (1 + i/Q).
    """
    w = _check_omega(omega)
    wm = pendulum_mode(mech)
    m = mech.effective_mass
    if mech.damping_model is Damping.VISCOUS:
        den = wm**2 - w**2 + 1j * w * wm / mech.quality_factor
    else:
        den = wm**2 * (1 + 1j / mech.quality_factor) - w**2
    out = np.asarray(1 / (m * den))
    return out if out.ndim else complex(out)


def dissipation_rate(mech: MechanicalParams, omega):
    """gamma(w): w_m/2Q (viscous) or w_m^2/(2 Q w) (structure)."""
    w = _check_omega(omega)
    wm = pendulum_mode(mech)
    if mech.damping_model is Damping.VISCOUS:
        out = np.full(w.shape, wm / (2 * mech.quality_factor))
    else:
        out = wm**2 / (2 * mech.quality_factor * w)
    return out if out.ndim else float(out)


class OpticalSpringInstability(DomainError):
    pass


@dataclass(frozen=True)
class OpticalSpring:
    k_opt: float  # N/m
    omega_eff: float  # rad/s


def optical_spring(cavity: CavityParams, n_circ: float, mech: MechanicalParams) -> OpticalSpring:
    """Quasi-static optical spring of a detuned cavity in the bad-cavity limit."""
    if n_circ < 0:
        raise DomainError("n_circ must be non-negative")
    d = cavity.detuning
    k_opt = 2 * HBAR * cavity.coupling_g**2 * n_circ * d / (cavity.kappa**2 + d**2)
    wm = pendulum_mode(mech)
    w2 = wm**2 + k_opt / mech.effective_mass
    if w2 < 0:
        raise OpticalSpringInstability(f"anti-spring instability: K_opt = {k_opt:g} N/m exceeds the gravity restoring force")
    return OpticalSpring(k_opt, math.sqrt(w2))


def operating_point_spring(config: ExperimentConfig) -> OpticalSpring:
    n = intracavity_state(config.cavity, config.laser).n_circ
    return optical_spring(config.cavity, n, config.mech)


@dataclass(frozen=True)
class DetuningSweep:
    detuning_over_kappa: np.ndarray
    n_circ: np.ndarray
    k_opt: np.ndarray
    omega_eff: np.ndarray
    omega_m: float

    @property
    def f_eff(self) -> np.ndarray:
        return self.omega_eff / (2 * np.pi)

    @property
    def peak_detuning_over_kappa(self) -> float:
        return float(self.detuning_over_kappa[np.argmax(self.omega_eff)])


def detuning_sweep(cavity: CavityParams, laser: LaserParams, mech: MechanicalParams,
                   detuning_over_kappa: Sequence[float]) -> DetuningSweep:
    """Trapped resonance frequency versus detuning at fixed input power."""
    ratios = np.asarray(detuning_over_kappa, dtype=float)
    if np.any((ratios <= 0) | (ratios > 3)):
        raise DomainError("detuning grid must lie in (0, 3] linewidths")
    n, k, w = [], [], []
    for r in ratios:
        cav = replace(cavity, detuning=r * cavity.kappa)
        nc = intracavity_state(cav, laser).n_circ
        spring = optical_spring(cav, nc, mech)
        n.append(nc)
        k.append(spring.k_opt)
        w.append(spring.omega_eff)
    return DetuningSweep(ratios, np.array(n), np.array(k), np.array(w), pendulum_mode(mech))


@dataclass(frozen=True)
class LoopModel:
    h_pend: FrequencyResponse
    h_c: FrequencyResponse
    h_opt: FrequencyResponse
    h_pdh: FrequencyResponse
    h_pd: FrequencyResponse
    h_servo: FrequencyResponse
    h_act: FrequencyResponse
    n_s_psd: Callable[[np.ndarray], np.ndarray] | float = 0.0  # displacement PSD, m^2/Hz vs Hz

    @property
    def g1(self) -> FrequencyResponse:
        return cascade(self.h_pend, self.h_opt)

    @property
    def g2(self) -> FrequencyResponse:
        return cascade(self.h_pdh, self.h_pd, self.h_servo, self.h_act, self.h_c)

    def open_servo(self) -> "LoopModel":
        return replace(self, h_servo=FrequencyResponse.flat(0.0, "V", "V", "H_servo"))


def loop_gains(loop: LoopModel, omega):
    """(G1, G2) with G1 = H_pend H_opt and G2 = H_PDH H_PD H_servo H_act H_c."""
    g1, g2 = loop.g1, loop.g2
    for name, g in (("G1", g1), ("G2", g2)):
        if g.units_in != g.units_out:
            raise UnitError(f"{name} is not dimensionless: {g.units_in} -> {g.units_out}")
    return g1(omega), g2(omega)


@dataclass(frozen=True)
class Monitor1Transfer:
    from_force: Any  # V/N
    from_sensing: Any  # V/m


@dataclass(frozen=True)
class Monitor3Transfer:
    from_displacement: Any  # V/m
    pendulum_response: Any  # m/N, optical-spring closed


def monitor1_transfer(loop: LoopModel, omega) -> Monitor1Transfer:
    """Servo-output readout: G2 H_pend / (H_c H_act) (dF + n_s / H_c) / (1 - G1 - G2)."""
    g1, g2 = loop_gains(loop, omega)
    den = 1 - g1 - g2
    if np.any(np.abs(den) < SINGULAR_TOL):
        raise SingularLoopError(f"|1 - G1 - G2| below {SINGULAR_TOL:g}: loop marginally stable")
    hc = loop.h_c(omega)
    from_force = g2 * loop.h_pend(omega) / (hc * loop.h_act(omega) * den)
    return Monitor1Transfer(from_force, from_force / hc)


def pendulum_response(loop: LoopModel, omega):
    """Pendulum displacement per unit force with the optical spring closed: H_pend / (1 - G1)."""
    g1 = loop.g1(omega)
    return loop.h_pend(omega) / (1 - g1)


def monitor3_transfer(loop: LoopModel, omega) -> Monitor3Transfer:
    """PDH readout of (dx_pend + n_s) through H_PDH H_PD; valid only while |G2| < 0.1."""
    _, g2 = loop_gains(loop, omega)
    if np.any(np.abs(g2) >= G2_NEGLIGIBLE):
        raise AssumptionError(f"|G2| >= {G2_NEGLIGIBLE}: feedback not negligible for the displacement readout")
    return Monitor3Transfer(loop.h_pdh(omega) * loop.h_pd(omega), pendulum_response(loop, omega))


class SignalFlowGraph:
    """Linear signal-flow graph solved numerically at each frequency.

    Each node's value is the sum of its external input and of every incoming
    edge's gain times the source node value.
    """

    def __init__(self, nodes: Sequence[str]):
        self.nodes = list(nodes)
        self.index = {n: i for i, n in enumerate(self.nodes)}
        self.edges: list[tuple[str, str, FrequencyResponse | complex]] = []

    def connect(self, src: str, dst: str, gain) -> "SignalFlowGraph":
        self.edges.append((src, dst, gain))
        return self

    def solve(self, omega, source: str, target: str):
        w = np.atleast_1d(_check_omega(omega))
        n = len(self.nodes)
        a = np.zeros((w.size, n, n), dtype=complex)
        for src, dst, gain in self.edges:
            g = gain(w) if callable(gain) else np.full(w.size, complex(gain))
            a[:, self.index[dst], self.index[src]] += g
        m = np.eye(n)[None] - a
        u = np.zeros((w.size, n), dtype=complex)
        u[:, self.index[source]] = 1.0
        x = np.linalg.solve(m, u[..., None])[..., 0]
        out = x[:, self.index[target]]
        return out if np.ndim(omega) else complex(out[0])


def fig2a_graph(loop: LoopModel, sensing_injection: str = "force") -> SignalFlowGraph:
    """Node-level graph of the readout: pendulum, cavity, PDH chain, servo, actuator, controlled mirror.

    ``sensing_injection`` places the sensing noise either as an equivalent
    force n_s / H_c on the pendulum ("force", the placement behind the
    monitor1 expression) or added to the cavity length at the PDH input
    ("readout", the placement behind the monitor3 expression).
    """
    g = SignalFlowGraph(["dF", "n_s", "F_pend", "x_pend", "x_c", "dl", "sensed",
                         "P_pdh", "V_pd", "V_servo", "F_act"])
    g.connect("dF", "F_pend", 1.0)
    g.connect("F_pend", "x_pend", loop.h_pend)
    g.connect("x_pend", "dl", 1.0)
    g.connect("x_c", "dl", 1.0)
    g.connect("dl", "F_pend", loop.h_opt)
    g.connect("dl", "sensed", 1.0)
    g.connect("sensed", "P_pdh", loop.h_pdh)
    g.connect("P_pdh", "V_pd", loop.h_pd)
    g.connect("V_pd", "V_servo", loop.h_servo)
    g.connect("V_servo", "F_act", loop.h_act)
    g.connect("F_act", "x_c", loop.h_c)
    if sensing_injection == "force":
        hc = loop.h_c
        g.connect("n_s", "F_pend", lambda w: 1 / hc(w))
    elif sensing_injection == "readout":
        g.connect("n_s", "sensed", 1.0)
    else:
        raise ValueError(f"unknown sensing injection {sensing_injection!r}")
    return g


def calibrate_spectrum(raw: SpectralEstimate, transfer: FrequencyResponse, rtol: float = 1e-12,
                       units: str = "") -> SpectralEstimate:
    """Divide a readout ASD by |transfer| bin by bin; the DC bin is dropped."""
    sel = raw.freqs > 0
    f = raw.freqs[sel]
    mag = np.abs(transfer(2 * np.pi * f))
    bad = (mag <= rtol * np.max(mag)) | ~np.isfinite(mag)
    if np.any(bad):
        raise CalibrationError(f[bad])
    segs = None if raw.segments is None else raw.segments[:, sel] / mag**2
    return replace(raw, freqs=f, psd=raw.psd[sel] / mag**2, segments=segs,
                   units=units or transfer.units_in)


def apply_transfer(est: SpectralEstimate, transfer: FrequencyResponse) -> SpectralEstimate:
    """Multiply an ASD by |transfer|; the inverse of :func:`calibrate_spectrum`."""
    sel = est.freqs > 0
    f = est.freqs[sel]
    mag = np.abs(transfer(2 * np.pi * f))
    segs = None if est.segments is None else est.segments[:, sel] * mag**2
    return replace(est, freqs=f, psd=est.psd[sel] * mag**2, segments=segs, units=transfer.units_out)


def filter_series(ts: TimeSeries, transfer: FrequencyResponse) -> TimeSeries:
    """Pass a record through ``transfer`` by circular filtering in the Fourier domain."""
    n = len(ts)
    f = np.fft.rfftfreq(n, 1 / ts.sample_rate)
    spec = np.fft.rfft(ts.samples)
    h = np.zeros_like(spec)
    h[1:] = transfer(2 * np.pi * f[1:])
    out = np.fft.irfft(spec * h, n)
    return TimeSeries(out, ts.sample_rate, ts.seed, f"filtered({transfer.label}; {ts.provenance})")


# --- construction from configuration -------------------------------------------------------

BLOCK_UNITS = {
    "h_pdh": ("m", "W"),
    "h_pd": ("W", "V"),
    "h_servo": ("V", "V"),
    "h_act": ("V", "N"),
    "h_c": ("N", "m"),
}

DEFAULT_BLOCKS: dict[str, dict] = {
    "h_pdh": {"flat": 1.0e6},
    "h_pd": {"flat": 1.0e3},
    "h_servo": {"integrator": {"ugf_hz": 50.0}},
    "h_act": {"flat": 2.1e-5},
    # 100 g controlled mirror, free-mass response 1/(m s^2)
    "h_c": {"zpk": {"zeros": [], "poles": [0, 0], "gain": 10.0}},
}


def _complex(value, key: str) -> complex:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, str):
        try:
            return complex(value.replace(" ", ""))
        except ValueError:
            pass
    raise ConfigError(key, f"cannot read {value!r} as a number or [re, im] pair")


def parse_block_spec(spec: Mapping[str, Any], name: str, key: str | None = None) -> dict:
    """Validate a block description; returns a normalised copy."""
    key = key or f"loop.{name}"
    if not isinstance(spec, Mapping) or len(spec) != 1:
        raise ConfigError(key, "block must be exactly one of {flat: v}, {zpk: {...}}, {integrator: {...}}")
    (kind, body), = spec.items()
    if kind == "flat":
        return {"flat": _complex(body, f"{key}.flat")}
    if kind == "zpk":
        if not isinstance(body, Mapping):
            raise ConfigError(f"{key}.zpk", "expected a mapping with zeros, poles, gain")
        unknown = set(body) - {"zeros", "poles", "gain"}
        if unknown:
            raise ConfigError(f"{key}.zpk", f"unknown keys {sorted(unknown)}")
        zeros = [_complex(z, f"{key}.zpk.zeros") for z in body.get("zeros", [])]
        poles = [_complex(p, f"{key}.zpk.poles") for p in body.get("poles", [])]
        if "gain" not in body:
            raise ConfigError(f"{key}.zpk.gain", "missing")
        return {"zpk": {"zeros": zeros, "poles": poles, "gain": _complex(body["gain"], f"{key}.zpk.gain")}}
    if kind == "integrator":
        if name != "h_servo":
            raise ConfigError(key, "integrator form is only defined for h_servo")
        ugf = body.get("ugf_hz") if isinstance(body, Mapping) else None
        if not isinstance(ugf, (int, float)) or not ugf > 0:
            raise ConfigError(f"{key}.integrator.ugf_hz", "must be a positive number", "Hz")
        return {"integrator": {"ugf_hz": float(ugf)}}
    raise ConfigError(key, f"unknown block type {kind!r}")


def _block_from_spec(spec: dict, name: str) -> FrequencyResponse:
    uin, uout = BLOCK_UNITS[name]
    label = name.replace("h_", "H_")
    if "flat" in spec:
        return FrequencyResponse.flat(spec["flat"], uin, uout, label)
    z = spec["zpk"]
    return FrequencyResponse.zpk(z["zeros"], z["poles"], z["gain"], uin, uout, label)


def build_loop(config: ExperimentConfig) -> LoopModel:
    """Loop blocks for the configured operating point.

    H_pend is the pendulum susceptibility, H_opt the (flat) optical spring at
    the operating point. An integrator servo is scaled so |G2| = 1 at its
    unity-gain frequency.
    """
    specs = {**DEFAULT_BLOCKS, **config.loop.get("blocks", {})}
    specs = {k: parse_block_spec(v, k) for k, v in specs.items()}
    mech = config.mech
    h_pend = FrequencyResponse(lambda w: mech_susceptibility(mech, w), "N", "m", "H_pend")
    spring = operating_point_spring(config)
    h_opt = FrequencyResponse.flat(-spring.k_opt, "m", "N", "H_opt")
    blocks = {k: _block_from_spec(v, k) for k, v in specs.items() if "integrator" not in v}
    if "integrator" in specs["h_servo"]:
        w_u = 2 * np.pi * specs["h_servo"]["integrator"]["ugf_hz"]
        unit_servo = FrequencyResponse.flat(1.0, "V", "V")
        plant = abs(cascade(blocks["h_pdh"], blocks["h_pd"], unit_servo, blocks["h_act"],
                            blocks["h_c"])(w_u))
        gain = w_u / plant
        blocks["h_servo"] = FrequencyResponse(lambda w: gain / (1j * w), "V", "V", "H_servo")
    noise = config.noise
    m = mech.effective_mass

    def n_s_psd(f):
        # force-referred f^+1 sensing noise mapped back through the free-mass response
        f = np.asarray(f, dtype=float)
        asd_force = noise.sensing_anchor_asd * f / noise.sensing_anchor_hz
        return (asd_force / (m * (2 * np.pi * f) ** 2)) ** 2

    return LoopModel(h_pend=h_pend, h_c=blocks["h_c"], h_opt=h_opt, h_pdh=blocks["h_pdh"],
                     h_pd=blocks["h_pd"], h_servo=blocks["h_servo"], h_act=blocks["h_act"],
                     n_s_psd=n_s_psd)
