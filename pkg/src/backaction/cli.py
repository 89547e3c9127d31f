"""``backaction`` command line: budget, simulate, analyze, reproduce and rerun.

Exit codes: 0 success, 1 a verdict failed, 2 usage or configuration error,
3 numerical failure inside a pipeline stage. Outputs are staged in a hidden
directory under ``--out`` and moved into place only when the command
succeeds, so a failing run leaves no partial files behind.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import bin_magnitudes, fit_slope, rayleigh_stationarity_test, welch_asd
from .config import apply_overrides, config_from_dict, load_config, parse_yaml, reference_path
from .errors import ConfigError, DomainError, InsufficientDataError
from .model import ExperimentConfig
from .noisebudget import SOURCES, build_budget
from .synth import TimeSeries, child_seed, colored_noise

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Staging:
    """Collects outputs in a scratch directory inside ``out`` and publishes them atomically-ish."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.dir: Path | None = None

    def __enter__(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for p in sorted(self.dir.iterdir()):
                    target = self.out / p.name
                    if target.is_dir():
                        shutil.rmtree(target)
                    p.replace(target)
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)
        return False


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_yaml(value)
    return out


def _load(args) -> ExperimentConfig:
    path = args.config or reference_path()
    cfg = load_config(path)
    overrides = _parse_set(getattr(args, "set", None))
    if overrides:
        cfg = config_from_dict(apply_overrides(cfg.raw, overrides))
    return cfg


def _grid(args, cfg: ExperimentConfig) -> np.ndarray:
    if args.grid:
        try:
            lo, hi, n = args.grid.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
        except ValueError as exc:
            raise UsageError("--grid expects FMIN:FMAX:N") from exc
    else:
        g = cfg.raw.get("grid", {})
        lo, hi, n = float(g.get("f_min_hz", 10.0)), float(g.get("f_max_hz", 1000.0)), int(g.get("n_points", 400))
    if not (0 < lo < hi) or n < 2:
        raise UsageError("grid needs 0 < FMIN < FMAX and N >= 2")
    return np.geomspace(lo, hi, n)


def write_manifest(dir_: Path, command: list[str], cfg: ExperimentConfig, seed, outputs: dict[str, str]) -> Path:
    """``outputs`` maps file names (relative to the output directory) to their kind."""
    manifest = {
        "command": command,
        "config": cfg.raw,
        "seed": seed,
        "version": __version__,
        "numpy": np.__version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "outputs": [{"path": name, "kind": kind, "sha256": sha256(dir_ / name)}
                    for name, kind in sorted(outputs.items())],
    }
    path = dir_ / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


# --- commands ---------------------------------------------------------------------------------

def cmd_budget(args, argv) -> int:
    cfg = _load(args)
    grid = _grid(args, cfg)
    try:
        bud = build_budget(cfg, grid)
        report = bud.report()
    except (ValueError, ArithmeticError) as exc:
        raise StageError("budget", exc) from exc
    with Staging(args.out) as d:
        outputs = {"budget.json": "data"}
        if args.format == "json":
            report["spectrum"] = {"frequency_hz": grid.tolist(),
                                  **{f"asd_{k}": bud.asd(k).tolist() for k in ["total", *bud.per_source]}}
        else:
            bud.to_csv(d / "budget.csv")
            outputs["budget.csv"] = "data"
        (d / "budget.json").write_text(json.dumps(report, indent=2))
        if not args.no_plots:
            from .plotting import budget_figure
            budget_figure(bud, d / "budget.png")
            outputs["budget.png"] = "figure"
        write_manifest(d, argv, cfg, None, outputs)
    print(f"ratio_at(325 Hz) = {bud.ratio_at(325.0):.6g}")
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    cfg = _load(args)
    if args.sources:
        wanted = [s.strip() for s in args.sources.split(",") if s.strip()]
    else:
        wanted = list(SOURCES)
    bad = [s for s in wanted if s not in SOURCES + ("unknown",)]
    if bad:
        raise UsageError(f"unknown source(s) {', '.join(bad)}; valid names: {', '.join(SOURCES)}, unknown")
    if args.duration < args.segment:
        raise UsageError(f"duration {args.duration:g} s is shorter than one {args.segment:g} s segment")
    n = int(round(args.duration * args.fs))
    if n > args.max_samples:
        raise UsageError(f"{n} samples exceeds the limit of {args.max_samples} (--max-samples)")
    probe = build_budget(cfg, [1.0])
    if "unknown" in wanted and "unknown" not in probe.per_source:
        raise UsageError("source 'unknown' is disabled (noise.unknown_anchor_asd is 0)")

    def psd_for(name):
        return lambda f: 2 * build_budget(cfg, f).per_source[name]

    series = {}
    try:
        for name in wanted:
            idx = (SOURCES + ("unknown",)).index(name)
            series[name] = colored_noise(psd_for(name), args.fs, args.duration, child_seed(args.seed, idx))
        total = None
        for ts in series.values():
            total = ts if total is None else total + ts
        est = welch_asd(total, args.segment)
    except (DomainError, ArithmeticError) as exc:
        raise StageError("simulate", exc) from exc
    total.provenance = "sum(" + ", ".join(wanted) + ")"
    ext = "bin" if args.format == "bin" else "csv"
    with Staging(args.out) as d:
        outputs = {}
        for name, ts in [*series.items(), ("sum", total)]:
            fname = f"{name}.{ext}"
            (ts.to_binary if ext == "bin" else ts.to_csv)(d / fname)
            outputs[fname] = "data"
        est.to_csv(d / "sum_spectrum.csv")
        outputs["sum_spectrum.csv"] = "data"
        write_manifest(d, argv, cfg, args.seed, outputs)
    print(f"wrote {len(series) + 1} series of {n} samples to {args.out}")
    return EXIT_OK


def _read_series(path: Path) -> TimeSeries:
    if not path.exists():
        raise UsageError(f"input file {path} does not exist")
    try:
        if path.suffix == ".bin":
            return TimeSeries.from_binary(path)
        return TimeSeries.from_csv(path)
    except (ValueError, OSError) as exc:
        raise UsageError(f"cannot read time series from {path}: {exc}") from exc


def cmd_analyze(args, argv) -> int:
    ts = _read_series(Path(args.input))
    try:
        est = welch_asd(ts, args.segment, window=args.window, overlap=args.overlap,
                        keep_segments=args.rayleigh_at is not None)
        report = {"input": str(args.input), "sample_rate_hz": ts.sample_rate, "n_segments": est.n_segments,
                  "enbw_hz": est.enbw, "equivalent_averages": est.n_averages, "window": est.window}
        if args.slope_band:
            report["slope"] = fit_slope(est, tuple(args.slope_band)).to_dict()
        if args.rayleigh_at is not None:
            rt = rayleigh_stationarity_test(bin_magnitudes(est, args.rayleigh_at))
            report["rayleigh"] = {"frequency_hz": args.rayleigh_at, "p_value": rt.p_value,
                                  "statistic": rt.statistic, "dof": rt.dof, "stationary": rt.stationary}
    except InsufficientDataError as exc:
        raise UsageError(str(exc)) from exc
    except DomainError as exc:
        raise UsageError(str(exc)) from exc
    except ArithmeticError as exc:
        raise StageError("analyze", exc) from exc
    with Staging(args.out) as d:
        est.to_csv(d / "spectrum.csv")
        (d / "analysis.json").write_text(json.dumps(report, indent=2, default=float))
    print(json.dumps({k: v for k, v in report.items() if k in ("enbw_hz", "n_segments")}))
    return EXIT_OK


def _reproduce(cfg: ExperimentConfig, targets, out: Path, seed: int, jobs: int, plots: bool, argv) -> int:
    from .reproduce import run_target

    failed = []
    with Staging(out) as d:
        outputs = {}
        for name in targets:
            try:
                res = run_target(name, cfg, d, seed=seed, jobs=jobs, plots=plots)
            except ConfigError:
                raise
            except (DomainError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                raise StageError(f"reproduce {name}", exc) from exc
            for p in res.data_files:
                outputs[Path(p).name] = "verdict" if p.name.endswith("_verdict.json") else "data"
            for p in res.figures:
                outputs[Path(p).name] = "figure"
            print(f"{name}: {'PASS' if res.passed else 'FAIL'}")
            for c in res.checks:
                print(f"  {'ok ' if c.passed else 'BAD'} {c.name}: measured={c.measured} expected={c.expected} "
                      f"tolerance={c.tolerance}")
            if not res.passed:
                failed.append(name)
        write_manifest(d, argv, cfg, seed, outputs)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_reproduce(args, argv) -> int:
    from .reproduce import TARGETS

    cfg = _load(args)
    targets = list(TARGETS) if args.target == "all" else [args.target]
    return _reproduce(cfg, targets, Path(args.out), args.seed, args.jobs, not args.no_plots, argv)


def cmd_rerun(args, argv) -> int:
    """Re-execute a manifest's command into ``--out`` and compare the data files byte for byte."""
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        old_argv = manifest["command"]
        cfg = config_from_dict(manifest["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from exc
    old_args = build_parser().parse_args(old_argv)
    if old_args.command != "reproduce":
        raise UsageError("rerun supports manifests written by `reproduce`")
    from .reproduce import TARGETS

    targets = list(TARGETS) if old_args.target == "all" else [old_args.target]
    out = Path(args.out)
    code = _reproduce(cfg, targets, out, manifest["seed"], args.jobs, not old_args.no_plots, old_argv)
    mismatched = []
    for entry in manifest["outputs"]:
        if entry["kind"] == "figure":
            continue
        path = out / entry["path"]
        same = path.exists() and sha256(path) == entry["sha256"]
        print(f"{'identical' if same else 'DIFFERS  '} {entry['path']}")
        if not same:
            mismatched.append(entry["path"])
    if mismatched:
        return EXIT_FAIL
    return code


# --- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .reproduce import TARGETS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config (default: bundled reference)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value by dotted key, e.g. laser.input_power_w=0")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    p = argparse.ArgumentParser(prog="backaction", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("budget", parents=[common], help="force-noise budget on a frequency grid")
    b.add_argument("--grid", help="FMIN:FMAX:N, log spaced (default from config)")
    b.add_argument("--format", choices=["csv", "json"], default="csv",
                   help="csv: table plus JSON report; json: report with the spectrum embedded")

    s = sub.add_parser("simulate", parents=[common], help="synthesise per-source force time series")
    s.add_argument("--sources", help=f"comma-separated subset of {','.join(SOURCES)},unknown")
    s.add_argument("--duration", type=float, default=60.0, help="seconds")
    s.add_argument("--fs", type=float, default=2048.0, help="sample rate, Hz")
    s.add_argument("--segment", type=float, default=0.4, help="Welch segment for the check spectrum, s")
    s.add_argument("--max-samples", type=int, default=1 << 26)
    s.add_argument("--format", choices=["csv", "bin"], default="csv")

    a = sub.add_parser("analyze", parents=[common], help="Welch spectrum and tests for a recorded series")
    a.add_argument("input", help="time series (.csv with time_s,value or .bin)")
    a.add_argument("--segment", type=float, default=0.4)
    a.add_argument("--window", default="boxcar")
    a.add_argument("--overlap", type=float, default=0.0)
    a.add_argument("--slope-band", type=float, nargs=2, metavar=("FLO", "FHI"))
    a.add_argument("--rayleigh-at", type=float, metavar="HZ")
    a.add_argument("--format", choices=["csv", "json"], default="csv")

    r = sub.add_parser("reproduce", parents=[common], help="regenerate a headline result with a verdict")
    r.add_argument("target", choices=[*TARGETS, "all"])
    r.add_argument("--format", choices=["csv", "json"], default="csv")

    rr = sub.add_parser("rerun", help="repeat a reproduce run from its manifest and compare outputs")
    rr.add_argument("manifest", type=Path)
    rr.add_argument("--out", type=Path, required=True)
    rr.add_argument("--jobs", type=int, default=1)
    return p


COMMANDS = {"budget": cmd_budget, "simulate": cmd_simulate, "analyze": cmd_analyze,
            "reproduce": cmd_reproduce, "rerun": cmd_rerun}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"numerical error in {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
