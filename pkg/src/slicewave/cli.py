"""Command-line experiment runner.

    slicewave run -c config.toml --seed N --out dir/
    slicewave report dir/ [--out plots/]
    slicewave calibrate-tx -c config.toml [--target 15]
    slicewave selftest

SLICEWAVE_THREADS caps the worker pool used for sweep points.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import ConfigError, config_from_dict, load_config
from .dsp import DemodulationError
from .experiment import ExperimentConfig, SweepResult, calibrate_tx, config_hash, run_sweep, \
    stitch_test
from .channel import telemetry_csv
from .metrics import reports_csv, reports_json

__all__ = ["main", "write_results", "write_report"]

CONSTELLATION_DUMP_SYMBOLS = 4096


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[pkg] = version(pkg)
        except PackageNotFoundError:  # pragma: no cover
            out[pkg] = "unknown"
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _constellation_csv(y: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "pol", "re", "im"])
    for p, name in enumerate("xy"):
        for i, v in enumerate(y[p, :CONSTELLATION_DUMP_SYMBOLS]):
            w.writerow([i, name, f"{v.real:.6g}", f"{v.imag:.6g}"])
    return buf.getvalue()


def _manifest(out: Path, cfg: ExperimentConfig, files) -> None:
    entries = {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in sorted(files)}
    m = {"config_hash": config_hash(cfg), "scenario": cfg.scenario, "seed": cfg.seed,
         "versions": _versions(), "files": entries, "config": cfg.to_dict()}
    _write(out / "manifest.json", json.dumps(m, indent=2, sort_keys=True) + "\n")


def write_results(out, result: SweepResult) -> list[str]:
    """Write results.csv/json, constellation dumps, telemetry and manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    h = config_hash(cfg)
    reps = result.reports
    extra = {}
    if cfg.scenario == "b2b_sweep":
        extra["osnr_db"] = [p.extra["osnr_db"] for p in result.points]
    extra["config_hash"] = [h] * len(reps)
    files = ["results.csv", "results.json"]
    _write(out / "results.csv", reports_csv(reps, extra))
    _write(out / "results.json", reports_json(reps, extra, config_hash=h, scenario=cfg.scenario,
                                              seed=cfg.seed))
    if cfg.dump_constellations:
        (out / "constellations").mkdir(exist_ok=True)
        for i, p in enumerate(result.points):
            name = f"constellations/point_{i:02d}.csv"
            _write(out / name, _constellation_csv(p.constellation))
            files.append(name)
    if result.telemetry:
        _write(out / "telemetry.csv", telemetry_csv(result.telemetry))
        files.append("telemetry.csv")
    _manifest(out, cfg, files)
    return files + ["manifest.json"]


def write_report(results_dir, out=None) -> list[Path]:
    """Turn a results directory into plot-ready series and a summary."""
    src = Path(results_dir)
    path = src / "results.json"
    if not path.is_file():
        raise FileNotFoundError(f"no results in {src} (results.json missing)")
    try:
        data = json.loads(path.read_text())
        points = data["points"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise ValueError(f"corrupt results file {path}: {exc}") from None
    if not points:
        raise ValueError(f"no results in {src} (empty point list)")
    dst = Path(out) if out else src / "report"
    dst.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name, cols):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for p in points:
            w.writerow(["" if p.get(c) is None else _fmt(p.get(c)) for c in cols])
        _write(dst / name, buf.getvalue())
        written.append(dst / name)

    for p in points:
        p["air_tbps"] = p["air"] / 1e12
        p["net_tbps"] = p["net_bit_rate"] / 1e12
    table("bitrate_vs_distance.csv", ["distance_km", "air_tbps", "net_tbps"])
    if all("osnr_db" in p for p in points):
        table("snr_vs_osnr.csv", ["osnr_db", "snr_db"])
    const = sorted(str(f.relative_to(src)) for f in (src / "constellations").glob("*.csv")) \
        if (src / "constellations").is_dir() else []
    best = max(points, key=lambda p: p["net_bit_rate"])
    summary = {
        "scenario": data.get("scenario"),
        "config_hash": data.get("config_hash"),
        "n_points": len(points),
        "max_net_tbps": best["net_bit_rate"] / 1e12,
        "max_net_at_km": best["distance_km"],
        "snr_db_range": [min(p["snr_db"] for p in points), max(p["snr_db"] for p in points)],
        "constellation_files": const,
    }
    _write(dst / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(dst / "summary.json")
    return written


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


# --- commands ---------------------------------------------------------------------

def _load(args, **extra) -> ExperimentConfig:
    over = {"seed": getattr(args, "seed", None), "scenario": getattr(args, "scenario", None)}
    over.update(extra)
    if args.config:
        return load_config(args.config, **over)
    return config_from_dict({}, **over)


def _cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    if cfg.scenario in ("b2b_sweep", "transmission_sweep"):
        res = run_sweep(cfg)
        files = write_results(out, res)
        print(f"wrote {len(files)} files to {out}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    if cfg.scenario == "stitch_test":
        evm = stitch_test(cfg)
        _write(out / "results.csv", f"seed,evm_db,config_hash\n{cfg.seed},{evm:.6g},{h}\n")
        _write(out / "results.json", json.dumps({"scenario": cfg.scenario, "seed": cfg.seed,
                                                 "evm_db": evm, "config_hash": h},
                                                indent=2, sort_keys=True) + "\n")
        print(f"stitch EVM {evm:.2f} dB")
    else:
        floor, got = calibrate_tx(cfg)
        _write(out / "results.csv",
               f"target_db,floor_snr_db,achieved_db,config_hash\n"
               f"{cfg.calibration_target:.6g},{floor:.6g},{got:.6g},{h}\n")
        _write(out / "results.json", json.dumps(
            {"scenario": cfg.scenario, "seed": cfg.seed, "target_db": cfg.calibration_target,
             "floor_snr_db": floor, "achieved_db": got, "config_hash": h},
            indent=2, sort_keys=True) + "\n")
        print(f"tx floor {floor:.3f} dB gives loopback SNR {got:.3f} dB")
    _manifest(out, cfg, ["results.csv", "results.json"])
    return 0


def _cmd_report(args) -> int:
    for p in write_report(args.results, args.out):
        print(p)
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _load(args)
    floor, got = calibrate_tx(cfg, args.target)
    print(json.dumps({"floor_snr_db": round(floor, 4), "achieved_db": round(got, 4),
                      "target_db": cfg.calibration_target if args.target is None
                      else args.target}))
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slicewave",
                                 description="Two-slice OAWG/OAWM transmission simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the configured scenario")
    r.add_argument("-c", "--config", help="TOML config file")
    r.add_argument("--seed", type=int)
    r.add_argument("--scenario")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="derive plot series from a results directory")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    c = sub.add_parser("calibrate-tx", help="fit the Tx noise floor to a loopback SNR")
    c.add_argument("-c", "--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--target", type=float)
    c.set_defaults(func=_cmd_calibrate)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(func=_cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return 2
    except DemodulationError as exc:
        print(json.dumps({"error": "stage", "stage": exc.stage, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
