"""Spectral estimation and the fits used to characterise the experiment."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg, optimize, signal, special, stats

from .errors import DomainError, InsufficientDataError, NoResonanceError
from .synth import Ringdown, TimeSeries


class FitWarning(UserWarning):
    pass


@dataclass
class SpectralEstimate:
    """One-sided spectral density on a uniform frequency grid."""

    freqs: np.ndarray
    psd: np.ndarray
    n_segments: int
    window: str
    enbw: float  # Hz
    segment_duration: float  # s
    n_averages: float | None = None  # equivalent independent averages
    units: str = ""
    segments: np.ndarray | None = field(default=None, repr=False)  # (n_segments, n_freqs) PSDs
    # correlation of periodogram values j bins apart, j = 0, 1, ...; None means independent bins
    bin_correlation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_averages is None:
            self.n_averages = float(self.n_segments)

    def correlation_matrix(self, n: int) -> np.ndarray:
        """Correlation between ``n`` consecutive bins implied by the window."""
        rho = np.zeros(n)
        rho[0] = 1.0
        if self.bin_correlation is not None:
            m = min(n, self.bin_correlation.size)
            rho[:m] = self.bin_correlation[:m]
        return linalg.toeplitz(rho)

    @property
    def asd(self) -> np.ndarray:
        return np.sqrt(self.psd)

    def at(self, f: float, halfwidth_bins: int = 0):
        """PSD averaged over the bin nearest ``f`` and ``halfwidth_bins`` neighbours each side.

        Returns the mean and the number of independent bins it is worth, which
        is smaller than the bin count when the window correlates neighbours.
        """
        k = int(np.argmin(np.abs(self.freqs - f)))
        lo, hi = max(k - halfwidth_bins, 0), min(k + halfwidth_bins + 1, self.freqs.size)
        nb = hi - lo
        return float(np.mean(self.psd[lo:hi])), float(nb**2 / np.sum(self.correlation_matrix(nb)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency_hz", "asd", "psd", "n_segments"])
            for f, a, p in zip(self.freqs, self.asd, self.psd):
                w.writerow([repr(float(f)), repr(float(a)), repr(float(p)), self.n_segments])


@dataclass
class FitResult:
    params: dict[str, float]
    sigmas: dict[str, float]
    statistic: float = float("nan")
    p_value: float = float("nan")
    converged: bool = True
    flags: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.converged and "unreliable" not in self.flags:
            self.flags.append("unreliable")

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean({
            "parameters": [{"name": k, "value": v, "sigma": self.sigmas.get(k)} for k, v in self.params.items()],
            "statistic": self.statistic,
            "p_value": self.p_value,
            "converged": self.converged,
            "flags": self.flags,
            "extra": self.extra,
        })

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=True)


def window_enbw(window: np.ndarray, fs: float) -> float:
    """Equivalent noise bandwidth (Hz) of a window sampled at ``fs``."""
    return fs * np.sum(window**2) / np.sum(window) ** 2


def bin_correlation(window: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Correlation of periodogram bins j apart for Gaussian noise, |sum w^2 e^(-2 pi i j n/N)|^2 / (sum w^2)^2."""
    c = np.abs(np.fft.fft(window**2)) ** 2 / np.sum(window**2) ** 2
    half = c[: window.size // 2]
    keep = np.flatnonzero(half >= tol)
    return half[: keep[-1] + 1].copy()


def equivalent_averages(window: np.ndarray, step: int, n_segments: int) -> float:
    """Number of independent averages equivalent to ``n_segments`` overlapped segments.

    Uses the white-noise correlation between segments shifted by multiples of
    ``step`` samples.
    """
    n = window.size
    w2 = np.sum(window**2)
    total = 1.0
    for j in range(1, n_segments):
        shift = j * step
        if shift >= n:
            break
        rho = np.sum(window[:n - shift] * window[shift:]) / w2
        total += 2 * (1 - j / n_segments) * rho**2
    return n_segments / total


def welch_asd(ts: TimeSeries, segment_duration: float, window: str = "boxcar",
              overlap: float = 0.0, keep_segments: bool = False) -> SpectralEstimate:
    """Averaged modified periodogram, one-sided and density-normalised."""
    fs = ts.sample_rate
    nperseg = int(round(segment_duration * fs))
    if not 0 <= overlap < 1:
        raise DomainError("overlap must lie in [0, 1)")
    noverlap = int(round(overlap * nperseg))
    step = nperseg - noverlap
    if nperseg < 2 or len(ts) < nperseg + step:
        raise DomainError("record too short for two segments")
    win = signal.get_window(window, nperseg)
    freqs, _, seg = signal.spectrogram(ts.samples, fs=fs, window=win, nperseg=nperseg,
                                       noverlap=noverlap, detrend=False, scaling="density",
                                       mode="psd")
    seg = seg.T  # (segments, freqs)
    n_seg = seg.shape[0]
    return SpectralEstimate(
        freqs=freqs,
        psd=seg.mean(axis=0),
        n_segments=n_seg,
        window=window,
        enbw=window_enbw(win, fs),
        segment_duration=nperseg / fs,
        n_averages=equivalent_averages(win, step, n_seg),
        segments=seg if keep_segments else None,
        bin_correlation=bin_correlation(win),
    )


@dataclass
class RayleighTest:
    p_value: float
    statistic: float
    dof: int
    fitted_scale: float
    edges: np.ndarray
    counts: np.ndarray
    expected: float
    alpha: float

    @property
    def stationary(self) -> bool:
        return self.p_value > self.alpha


def rayleigh_stationarity_test(bin_magnitudes: Sequence[float], alpha: float = 0.01,
                               n_bins: int | None = None) -> RayleighTest:
    """Pearson chi-square test of spectral magnitudes against a Rayleigh law.

    The scale is the maximum-likelihood estimate; bins are equiprobable under
    the fitted law, and one degree of freedom is deducted for the scale.
    """
    x = np.asarray(bin_magnitudes, dtype=float)
    n = x.size
    if n < 20:
        raise InsufficientDataError(f"need at least 20 samples, got {n}")
    k = n_bins or max(5, n // 10)
    scale = math.sqrt(np.sum(x**2) / (2 * n))
    dof = k - 2
    expected = n / k
    if scale == 0:
        edges = np.zeros(k + 1)
        counts = np.zeros(k)
        counts[0] = n
        return RayleighTest(0.0, float("inf"), dof, 0.0, edges, counts, expected, alpha)
    probs = np.arange(1, k) / k
    inner = scale * np.sqrt(-2 * np.log1p(-probs))
    edges = np.concatenate([[0.0], inner, [np.inf]])
    counts = np.bincount(np.searchsorted(inner, x, side="right"), minlength=k).astype(float)
    chi2 = float(np.sum((counts - expected) ** 2) / expected)
    p = float(stats.chi2.sf(chi2, dof))
    return RayleighTest(p, chi2, dof, scale, edges, counts, expected, alpha)


def bin_magnitudes(est: SpectralEstimate, f: float) -> np.ndarray:
    """Per-segment ASD magnitudes at the bin nearest ``f``."""
    if est.segments is None:
        raise DomainError("estimate was computed without keep_segments=True")
    k = int(np.argmin(np.abs(est.freqs - f)))
    return np.sqrt(est.segments[:, k])


def fit_slope(est: SpectralEstimate, band: tuple[float, float]) -> FitResult:
    """Power-law exponent of the ASD over ``band`` by least squares in log-log.

    Each log-PSD bin has variance trigamma(K)/4 in log-ASD for K equivalent
    averages, and neighbouring bins are correlated as the window dictates, so
    the fit is generalised least squares with that covariance. The reduced
    chi-square of the residuals flags a single power law that does not
    describe the band.

    A rectangular window leaks enough power from steep spectra to bias the
    slope (an f^+1 ASD comes out near 0.95); use a tapered window there.
    """
    f_lo, f_hi = band
    if f_lo >= f_hi or f_hi <= est.freqs[1] or f_lo >= est.freqs[-1]:
        raise DomainError(f"band {band} lies outside the frequency grid")
    sel = (est.freqs >= f_lo) & (est.freqs <= f_hi) & (est.freqs > 0)
    if np.count_nonzero(sel) < 8:
        raise DomainError("fewer than 8 bins in band")
    f = est.freqs[sel]
    asd = est.asd[sel]
    if np.any(asd <= 0):
        raise DomainError("ASD must be positive across the band")
    x = np.log(f)
    y = np.log(asd)
    sigma = 0.5 * math.sqrt(special.polygamma(1, est.n_averages))
    # generalised least squares with the window's bin-to-bin correlation
    cov = sigma**2 * est.correlation_matrix(x.size)
    design = np.column_stack([np.ones_like(x), x])
    cf = linalg.cho_factor(cov)
    a = linalg.cho_solve(cf, design)
    pcov = np.linalg.inv(design.T @ a)
    intercept, slope = pcov @ (a.T @ y)
    resid = y - (intercept + slope * x)
    dof = x.size - 2
    chi2 = float(resid @ linalg.cho_solve(cf, resid))
    return FitResult(
        params={"exponent": float(slope), "log_amplitude": float(intercept)},
        sigmas={"exponent": float(math.sqrt(pcov[1, 1])), "log_amplitude": float(math.sqrt(pcov[0, 0]))},
        statistic=chi2 / dof,
        p_value=float(stats.chi2.sf(chi2, dof)),
        extra={"band": [f_lo, f_hi], "n_bins": int(x.size)},
    )


def _wls(design: np.ndarray, y: np.ndarray, sigma: np.ndarray, nonneg: bool):
    w = 1 / sigma
    a = design * w[:, None]
    b = y * w
    if nonneg:
        sol = optimize.lsq_linear(a, b, bounds=(0, np.inf), method="bvls").x
    else:
        sol = np.linalg.lstsq(a, b, rcond=None)[0]
    cov = np.linalg.pinv(a.T @ a)
    chi2 = float(np.sum((a @ sol - b) ** 2))
    return sol, cov, chi2


def fit_power_dependence(powers: Sequence[float], asd: Sequence[float], asd_sigma: Sequence[float],
                         model: str = "full", floors: dict[str, float] | None = None,
                         reweight: bool = False) -> FitResult:
    """Decompose ASD^2(P) = c0 + c1 P + c2 P^2 (single-sided PSD units).

    c0 holds power-independent noise (thermal and sensing), c1 the quantum
    back-action and c2 the classical intensity back-action. Components that
    come out negative are clamped at zero and listed in ``flags``.

    ``floors`` maps hypothesis names to a fixed c0; each is fitted with c0
    pinned and the chi-square difference is reported. ``reweight`` replaces
    the measured uncertainties by the same relative precision applied to the
    fitted curve, iterated to convergence.
    """
    p = np.asarray(powers, dtype=float)
    a = np.asarray(asd, dtype=float)
    sa = np.asarray(asd_sigma, dtype=float)
    if np.unique(p).size < 4:
        raise DomainError("need at least 4 distinct powers")
    if np.any(p < 0):
        raise DomainError("powers must be non-negative")
    names = {"full": ["c0", "c1", "c2"], "linear": ["c0", "c1"]}[model]
    design = np.column_stack([p**j for j in range(len(names))])
    y = a**2
    sy = 2 * a * sa
    if not np.any(y):
        zero = {k: 0.0 for k in names}
        return FitResult(zero, dict(zero), statistic=0.0, p_value=1.0)
    if np.any(sy <= 0):
        sy = np.where(sy > 0, sy, np.max(sy[sy > 0]) if np.any(sy > 0) else 1.0)

    sol_free, cov, chi2 = _wls(design, y, sy, nonneg=False)
    rel = sy / y
    if reweight:
        sol = sol_free
        for _ in range(20):
            model_y = np.clip(design @ sol, np.max(y) * 1e-12, None)
            sy = rel * model_y
            new, cov, chi2 = _wls(design, y, sy, nonneg=False)
            if np.allclose(new, sol, rtol=1e-12, atol=0):
                sol = new
                break
            sol = new
        sol_free = sol
    flags = []
    if np.any(sol_free < 0):
        sol, _, chi2 = _wls(design, y, sy, nonneg=True)
        flags += [f"{names[i]} clamped at 0" for i in np.flatnonzero(sol_free < 0)]
    else:
        sol = sol_free
    dof = y.size - len(names)
    extra: dict[str, Any] = {"powers": p, "asd": a, "asd_sigma": asd_sigma}
    if floors:
        comparison = {}
        for name, c0 in floors.items():
            yy = y - c0
            _, _, chi2_h = _wls(design[:, 1:], yy, sy, nonneg=True)
            comparison[name] = chi2_h
        best = min(comparison, key=comparison.get)
        extra["hypothesis_chi2"] = comparison
        extra["preferred_floor"] = best
        if len(comparison) == 2:
            (n1, v1), (n2, v2) = comparison.items()
            extra["delta_chi2"] = {f"{n1}-{n2}": v1 - v2}
    return FitResult(
        params={k: float(v) for k, v in zip(names, sol)},
        sigmas={k: float(math.sqrt(max(cov[i, i], 0))) for i, k in enumerate(names)},
        statistic=chi2,
        p_value=float(stats.chi2.sf(chi2, dof)) if dof > 0 else float("nan"),
        flags=flags,
        extra=extra,
    )


def _envelope_noise_floor(i: np.ndarray, q: np.ndarray, t: np.ndarray) -> float:
    z = i + 1j * q
    phase = np.unwrap(np.angle(z))
    coef = np.polyfit(t, phase, 1)
    rotated = z * np.exp(-1j * np.polyval(coef, t))
    return float(np.std(rotated.imag))


def fit_ringdown(env: Ringdown, trim: float | None = None, noise_floor: float | None = None) -> FitResult:
    """Quality factor and frequency from the I/Q envelopes of a free decay.

    The log-envelope is fitted with a straight line whose slope is -w_m/2Q.
    The residual phase drift of I + iQ gives the offset of w_m from the
    demodulation frequency. Samples are decimated to one per low-pass
    correlation time so the residuals are close to independent, and samples
    below three times the envelope noise floor are excluded.
    """
    fs = env.series.sample_rate
    n = env.i.size
    t = np.arange(n) / fs
    if trim is None:
        trim = 5.0 / env.lowpass_hz
    keep = (t >= trim) & (t <= t[-1] - trim)
    stride = max(1, int(fs / (2 * env.lowpass_hz)))
    idx = np.flatnonzero(keep)[::stride]
    if idx.size < 3:
        raise DomainError("envelope too short to fit after trimming")
    i, q, tt = env.i[idx], env.q[idx], t[idx]
    amp = np.hypot(i, q)
    floor = _envelope_noise_floor(i, q, tt) if noise_floor is None else noise_floor
    ok = amp > 3 * floor
    if np.count_nonzero(ok) < 3:
        raise DomainError("envelope never rises above three times the noise floor")
    i, q, tt, amp = i[ok], q[ok], tt[ok], amp[ok]
    y = np.log(amp)
    coef, cov = np.polyfit(tt, y, 1, cov="unscaled")
    resid = y - np.polyval(coef, tt)
    dof = max(tt.size - 2, 1)
    s2 = float(np.sum(resid**2) / dof)
    # noiseless input would leave only round-off; keep a tiny floor so sigma is defined
    s2 = max(s2, (1e-15 * np.max(np.abs(y))) ** 2 + 1e-300)
    gamma = -float(coef[0])
    sigma_gamma = math.sqrt(cov[0, 0] * s2)
    phase = np.unwrap(np.angle(i + 1j * q))
    dphi = float(np.polyfit(tt, phase, 1)[0])
    omega = env.demod_omega + dphi
    flags = []
    converged = True
    if gamma <= max(3 * sigma_gamma, 0) or gamma <= 0:
        warnings.warn("envelope is not decaying over the fit window; Q out of range", FitWarning, stacklevel=2)
        flags.append("non-decaying envelope: Q out of range")
        converged = False
        q_fac, sigma_q = float("inf"), float("inf")
    else:
        q_fac = omega / (2 * gamma)
        sigma_q = q_fac * sigma_gamma / gamma
    return FitResult(
        params={"Q": q_fac, "omega_m": omega, "decay_rate": gamma},
        sigmas={"Q": sigma_q, "decay_rate": sigma_gamma},
        statistic=s2,
        converged=converged,
        flags=flags,
        extra={"noise_floor": floor, "n_samples": int(tt.size)},
    )


def fit_ringdown_trials(envelopes: Sequence[Ringdown]) -> FitResult:
    """Fit each ringdown and summarise the Q estimates with a Gaussian.

    Also tests whether the spread of Q matches the per-trial uncertainties
    (chi-square of the estimates about their mean).
    """
    fits = [fit_ringdown(e) for e in envelopes]
    qs = np.array([f["Q"] for f in fits])
    sig = np.array([f.sigmas["Q"] for f in fits])
    if not np.all(np.isfinite(qs)):
        return FitResult({"Q_mean": float("nan"), "Q_sigma": float("nan")}, {}, converged=False,
                         flags=["some trials did not decay"], extra={"q_values": qs})
    mean, sd = stats.norm.fit(qs)
    chi2 = float(np.sum(((qs - qs.mean()) / sig) ** 2))
    dof = qs.size - 1
    return FitResult(
        params={"Q_mean": float(mean), "Q_sigma": float(sd)},
        sigmas={"Q_mean": float(sd / math.sqrt(qs.size))},
        statistic=chi2,
        p_value=float(stats.chi2.sf(chi2, dof)),
        extra={"q_values": qs, "q_sigmas": sig, "mean_trial_sigma": float(sig.mean())},
    )


def _lorentz(t, t0, tau, amp, off):
    return off + amp / (1 + ((t - t0) / tau) ** 2)


def fit_lorentzian(sweep: TimeSeries, sweep_rate: float) -> FitResult:
    """Half linewidth (rad/s) of a transmitted-power trace from a linear laser sweep."""
    y = sweep.samples
    t = sweep.times
    med = float(np.median(y))
    mad = 1.4826 * float(np.median(np.abs(y - med)))
    k = int(np.argmax(y))
    height = y[k] - med
    if height <= 0 or height <= 3 * mad:
        raise NoResonanceError("no peak above three times the trace RMS")
    half = med + height / 2
    above = np.flatnonzero(y >= half)
    width_t = max((above[-1] - above[0]) / sweep.sample_rate, 2 / sweep.sample_rate)
    p0 = [t[k], width_t / 2, height, med]
    scale = max(abs(height), 1e-300)
    x0 = [p0[0], p0[1], p0[2] / scale, p0[3] / scale]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", optimize.OptimizeWarning)
            popt, pcov, _, _, ier = optimize.curve_fit(
                lambda tt, t0, tau, amp, off: _lorentz(tt, t0, tau, amp * scale, off * scale),
                t, y, p0=x0, xtol=1e-14, ftol=1e-14, gtol=1e-14, maxfev=20000, full_output=True)
        converged = ier in (1, 2, 3, 4)
    except RuntimeError:
        popt, pcov, converged = np.array(x0), np.full((4, 4), np.inf), False
    t0, tau, amp, off = popt
    amp, off = amp * scale, off * scale
    tau = abs(tau)
    kappa = 2 * math.pi * sweep_rate * tau
    resid = y - _lorentz(t, t0, tau, amp, off)
    dof = y.size - 4
    if not np.all(np.isfinite(pcov)) and converged and np.sqrt(np.mean(resid**2)) <= 1e-9 * abs(amp):
        pcov = np.zeros((4, 4))  # exact fit: no scatter to propagate
    elif not np.all(np.isfinite(pcov)):
        converged = False
    perr = np.sqrt(np.abs(np.diag(pcov)))
    return FitResult(
        params={"kappa": kappa, "center_time": t0, "amplitude": amp, "offset": off},
        sigmas={"kappa": 2 * math.pi * sweep_rate * perr[1], "center_time": perr[0],
                "amplitude": perr[2] * scale, "offset": perr[3] * scale},
        statistic=float(np.sum(resid**2) / dof),
        converged=converged,
    )
