"""Static figures written next to the data files.

Everything renders through the Agg backend to PNG; nothing here opens a
window. Figure functions take already-computed results and a path.
"""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}
COLORS = {
    "total": "k",
    "qba": "tab:red",
    "classical": "tab:pink",
    "thermal": "tab:orange",
    "sensing": "tab:green",
    "phase": "tab:purple",
    "unknown": "tab:olive",
}


def _figure(nrows=1, ncols=1, width=5.0):
    golden = (math.sqrt(5) - 1) / 2
    fig, ax = plt.subplots(nrows, ncols, figsize=(width, width * golden * nrows / max(ncols, 1) * 1.1))
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    # no timestamps in the PNG metadata so reruns produce identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def budget_figure(budget, path, ratio_f: float | None = 325.0):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for name in budget.per_source:
            asd = budget.asd(name)
            if np.any(asd > 0):
                ax.loglog(budget.grid, asd, color=COLORS.get(name), label=name)
        ax.loglog(budget.grid, budget.asd("total"), color="k", lw=2, label="total")
        if ratio_f is not None:
            ax.axvline(ratio_f, color="0.5", ls=":", lw=0.8)
            ax.set_title(f"S_q/S_th at {ratio_f:g} Hz = {budget.ratio_at(ratio_f):.2f}")
        ax.set_xlabel("Frequency [Hz]")
        ax.set_ylabel("Force ASD [N/√Hz]")
        ax.legend(loc="best")
        return _save(fig, path)


def spectrum_figure(est, path, model=None, markers=(), ylabel="ASD", title=None):
    """Estimated ASD with optional model curves ``{label: (freqs, asd)}`` and vertical markers."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        sel = est.freqs > 0
        ax.loglog(est.freqs[sel], est.asd[sel], ".", ms=2, color="tab:blue", label="estimate")
        for label, (f, a) in (model or {}).items():
            ax.loglog(f, a, label=label, color=COLORS.get(label))
        for label, f in markers:
            ax.axvline(f, ls="--", lw=0.8, color="0.4")
            ax.annotate(label, (f, ax.get_ylim()[1]), fontsize=7, rotation=90, va="top", ha="right")
        ax.set_xlabel("Frequency [Hz]")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def sweep_figure(sweep, path, marker=None):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(sweep.detuning_over_kappa, sweep.f_eff, color="tab:blue")
        ax.axhline(sweep.omega_m / (2 * np.pi), color="0.5", ls=":", label="free pendulum")
        if marker is not None:
            ax.plot(*marker, "o", color="tab:red", label="operating point")
        ax.set_xlabel("Detuning / κ")
        ax.set_ylabel("Effective resonance [Hz]")
        ax.legend(loc="best")
        return _save(fig, path)


def lorentzian_figure(ts, fit, sweep_rate, path):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        t = ts.times
        x = 2 * np.pi * sweep_rate * (t - fit["center_time"]) / fit["kappa"]
        model = fit["offset"] + fit["amplitude"] / (1 + x**2)
        step = max(1, t.size // 4000)
        ax.plot(x[::step], ts.samples[::step], ".", ms=1.5, color="tab:blue", label="trace")
        ax.plot(x, model, color="tab:red", label=f"fit κ/2π = {fit['kappa'] / 2 / np.pi / 1e6:.4f} MHz")
        ax.set_xlabel("Detuning / κ")
        ax.set_ylabel("Transmitted power [arb.]")
        ax.legend(loc="best")
        return _save(fig, path)


def ringdown_figure(env, q_values, path):
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.8))
        t = env.series.times
        step = max(1, t.size // 4000)
        a1.plot(t[::step], env.i[::step], label="I")
        a1.plot(t[::step], env.q[::step], label="Q")
        a1.set_xlabel("Time [s]")
        a1.set_ylabel("Amplitude")
        a1.legend(loc="best")
        a2.hist(np.asarray(q_values) / 1e5, bins=min(10, max(3, len(q_values) // 2)), color="tab:blue")
        a2.set_xlabel("Q [1e5]")
        a2.set_ylabel("Count")
        return _save(fig, path)


def power_dependence_figure(points, curves, path, title=None):
    """``points``: {f: (powers, asd, sigma)}; ``curves``: {label: (powers, asd)}."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for f, (p, a, s) in points.items():
            ax.errorbar(np.asarray(p) * 1e3, a, yerr=s, fmt="o", ms=3, label=f"{f:g} Hz")
        for label, (p, a) in curves.items():
            ax.loglog(np.asarray(p) * 1e3, a, label=label)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("Input power [mW]")
        ax.set_ylabel("Force ASD [N/√Hz]")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def rayleigh_figure(tests, path):
    """``tests``: {label: (magnitudes, RayleighTest)}."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for label, (mags, res) in tests.items():
            hist, edges = np.histogram(mags, bins=30, density=True)
            centers = 0.5 * (edges[1:] + edges[:-1])
            ax.step(centers, hist, where="mid", label=f"{label} (p = {res.p_value:.2f})")
            x = np.linspace(0, edges[-1], 200)
            s = res.fitted_scale
            ax.plot(x, x / s**2 * np.exp(-x**2 / (2 * s**2)), color="tab:green", lw=0.8)
        ax.set_xlabel("Force ASD [N/√Hz]")
        ax.set_ylabel("Density")
        ax.legend(loc="best")
        return _save(fig, path)


def slopes_figure(powers, measured, sigma, models, path):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        p = np.asarray(powers) * 1e3
        xp = np.where(p > 0, p, np.min(p[p > 0]) / 3 if np.any(p > 0) else 1e-3)
        ax.errorbar(xp, measured, yerr=sigma, fmt="o", ms=3, color="tab:blue", label="synthetic")
        for label, vals in models.items():
            ax.plot(xp, vals, label=label)
        ax.set_xscale("log")
        ax.set_xlabel("Input power [mW]")
        ax.set_ylabel("ASD slope at 75 Hz")
        ax.legend(loc="best")
        return _save(fig, path)
