"""Seeded synthesis of test records: coloured noise, ringdowns and cavity sweeps.

Random streams come from numpy's PCG64 bit generator. Each synthesis block
draws from its own stream seeded by ``SeedSequence([seed, block_index])`` so
blocks can be generated independently and in any order.
"""
from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError

PRNG_NAME = "PCG64"
MAX_BLOCK = 1 << 18

_HEADER = struct.Struct("<dQq")  # sample_rate, length, seed


class AdiabaticityWarning(UserWarning):
    pass


@dataclass
class TimeSeries:
    samples: np.ndarray
    sample_rate: float
    seed: int | None = None
    provenance: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or self.samples.size < 2:
            raise DomainError("a time series needs at least two samples")
        if not self.sample_rate > 0:
            raise DomainError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate

    def __add__(self, other: "TimeSeries") -> "TimeSeries":
        if other.sample_rate != self.sample_rate or len(other) != len(self):
            raise DomainError("can only add series with equal rate and length")
        return TimeSeries(self.samples + other.samples, self.sample_rate, self.seed,
                          f"sum({self.provenance}; {other.provenance})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "value"])
            for t, v in zip(self.times, self.samples):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path, seed=None, provenance="") -> "TimeSeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t, v = data[:, 0], data[:, 1]
        dt = np.median(np.diff(t))
        return cls(v, 1.0 / dt, seed, provenance or f"csv:{Path(path).name}")

    def to_binary(self, path) -> None:
        """Little-endian layout: float64 sample_rate, uint64 length, int64 seed (-1 if none), float64 payload."""
        seed = -1 if self.seed is None else int(self.seed)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(float(self.sample_rate), self.samples.size, seed))
            fh.write(self.samples.astype("<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "TimeSeries":
        raw = Path(path).read_bytes()
        fs, n, seed = _HEADER.unpack_from(raw)
        payload = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size)
        return cls(payload.astype(float), fs, None if seed < 0 else seed, f"bin:{Path(path).name}")


def child_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit seed for a sub-stream identified by ``keys``."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def _block_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _psd_on_bins(target_psd, freqs: np.ndarray) -> np.ndarray:
    if callable(target_psd):
        values = np.asarray(target_psd(freqs), dtype=float)
        values = np.broadcast_to(values, freqs.shape).astype(float)
    else:
        values = np.full(freqs.shape, float(target_psd))
    if not np.all(np.isfinite(values)):
        bad = freqs[~np.isfinite(values)]
        raise DomainError(f"target PSD undefined at {bad[:5]} Hz")
    if np.any(values < 0):
        raise DomainError("target PSD must be non-negative")
    return values


def _synth_block(rng: np.random.Generator, n: int, fs: float, psd_bins: np.ndarray) -> np.ndarray:
    # psd_bins covers rfft bins 1..n//2; DC is left at zero
    scale = psd_bins * fs * n / 2  # E|X_k|^2 for interior bins
    coeff = np.zeros(n // 2 + 1, dtype=complex)
    re = rng.standard_normal(n // 2)
    im = rng.standard_normal(n // 2)
    coeff[1:] = np.sqrt(scale / 2) * (re + 1j * im)
    if n % 2 == 0:
        # Nyquist is its own mirror image: real, half the power of a full bin pair
        coeff[-1] = np.sqrt(scale[-1]) * re[-1]
    return np.fft.irfft(coeff, n)


def colored_noise(target_psd: Callable[[np.ndarray], np.ndarray] | float, fs: float,
                  duration: float, seed: int, max_block: int = MAX_BLOCK) -> TimeSeries:
    """Gaussian noise whose one-sided PSD follows ``target_psd``.

    ``target_psd`` is a constant or a callable of frequency in Hz; it is only
    evaluated for f > 0 (the record is zero-mean). Records longer than
    ``max_block`` samples are built from independent blocks cross-faded with a
    sine window at 50% overlap, which keeps the variance constant.
    """
    if not fs > 0:
        raise DomainError("fs must be positive")
    n = int(round(duration * fs))
    if n < 16:
        raise DomainError("duration * fs must be at least 16 samples")
    block = n if n <= max_block else max_block - (max_block % 2)
    if block == n:
        freqs = np.fft.rfftfreq(n, 1 / fs)[1:]
        x = _synth_block(_block_rng(seed, 0), n, fs, _psd_on_bins(target_psd, freqs))
        nblocks = 1
    else:
        hop = block // 2
        freqs = np.fft.rfftfreq(block, 1 / fs)[1:]
        psd_bins = _psd_on_bins(target_psd, freqs)
        window = np.sin(np.pi * (np.arange(block) + 0.5) / block)
        padded = n + 2 * hop
        nblocks = int(math.ceil((padded - block) / hop)) + 1
        acc = np.zeros(hop * (nblocks - 1) + block)
        for j in range(nblocks):
            acc[j * hop:j * hop + block] += window * _synth_block(_block_rng(seed, j), block, fs, psd_bins)
        x = acc[hop:hop + n]
    prov = f"colored_noise(prng={PRNG_NAME}, seed={seed}, fs={fs:g}, n={n}, blocks={nblocks})"
    return TimeSeries(x, fs, seed, prov)


@dataclass
class Ringdown:
    series: TimeSeries
    i: np.ndarray
    q: np.ndarray
    demod_omega: float
    lowpass_hz: float

    @property
    def envelope(self) -> np.ndarray:
        return np.hypot(self.i, self.q)


def demodulate_iq(x: np.ndarray, fs: float, omega: float, lowpass_hz: float, order: int = 4):
    """Mix down at ``omega`` and low-pass; returns (I, Q) with I + iQ = A exp(i phi) for A cos(wt + phi)."""
    from scipy import signal

    t = np.arange(len(x)) / fs
    mixed_i = 2 * x * np.cos(omega * t)
    mixed_q = -2 * x * np.sin(omega * t)
    sos = signal.butter(order, lowpass_hz, fs=fs, output="sos")
    return signal.sosfiltfilt(sos, mixed_i), signal.sosfiltfilt(sos, mixed_q)


def ringdown_series(omega_m: float, Q: float, amplitude: float, fs: float, duration: float,
                    additive_noise_rms: float = 0.0, seed: int = 0, phase: float = 0.0,
                    lowpass_hz: float | None = None) -> Ringdown:
    """Free decay A exp(-w t / 2Q) cos(w t + phase) plus white noise, with I/Q envelopes."""
    if not Q > 0.5:
        raise DomainError("Q must exceed 1/2 (underdamped)")
    f_m = omega_m / (2 * math.pi)
    if not fs > 4 * f_m:
        raise DomainError("fs must exceed four times the oscillation frequency")
    n = int(round(duration * fs))
    if n < 2:
        raise DomainError("record too short")
    t = np.arange(n) / fs
    gamma = 0.0 if math.isinf(Q) else omega_m / (2 * Q)
    x = amplitude * np.exp(-gamma * t) * np.cos(omega_m * t + phase)
    if additive_noise_rms > 0:
        x = x + additive_noise_rms * _block_rng(seed, 0).standard_normal(n)
    lp = 0.1 * f_m if lowpass_hz is None else lowpass_hz
    i, q = demodulate_iq(x, fs, omega_m, lp)
    prov = (f"ringdown(omega_m={omega_m:g}, Q={Q:g}, A={amplitude:g}, noise={additive_noise_rms:g}, "
            f"prng={PRNG_NAME}, seed={seed})")
    return Ringdown(TimeSeries(x, fs, seed, prov), i, q, omega_m, lp)


def lorentzian_sweep(kappa: float, sweep_rate: float, fs: float, noise_rms: float = 0.0,
                     seed: int = 0, span_linewidths: float = 10.0, amplitude: float = 1.0,
                     offset: float = 0.0) -> TimeSeries:
    """Transmitted power while the laser is swept linearly through resonance.

    ``kappa`` is the half linewidth in rad/s and ``sweep_rate`` is in Hz/s.
    The trace is centred on resonance and spans ``span_linewidths`` half
    linewidths either side.
    """
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    if not sweep_rate > 0:
        raise DomainError("sweep_rate must be positive")
    kappa_hz = kappa / (2 * math.pi)
    if sweep_rate > 0.1 * kappa_hz**2:
        warnings.warn(f"sweep rate {sweep_rate:g} Hz/s is not slow compared with "
                      f"(kappa/2pi)^2 = {kappa_hz**2:g} Hz/s", AdiabaticityWarning, stacklevel=2)
    half_span = span_linewidths * kappa_hz / sweep_rate  # s
    n = int(round(2 * half_span * fs))
    if n < 16:
        raise DomainError("sweep record too short for the sample rate")
    t = np.arange(n) / fs
    t_c = n / (2 * fs)
    detuning = 2 * math.pi * sweep_rate * (t - t_c)
    p = offset + amplitude / (1 + (detuning / kappa) ** 2)
    if noise_rms > 0:
        p = p + noise_rms * _block_rng(seed, 0).standard_normal(n)
    prov = (f"lorentzian_sweep(kappa={kappa:g}, sweep_rate={sweep_rate:g}, noise={noise_rms:g}, "
            f"prng={PRNG_NAME}, seed={seed})")
    return TimeSeries(p, fs, seed, prov)
