"""Command-line front end: ``qclab {analyze,modulus,counterexample,intrinsic}``.

Every run writes into ``<out>/<command>-<hash>`` a ``run-manifest.json``,
one ``<check>.check.json`` per check and plot-ready CSV files.  Exit codes:
0 when every check passes, 1 when a check fails, 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy as sp

from . import __version__
from .jetcalc import distortion_scan
from .modulus import PathFamily, density_csv, discrete_modulus
from .verify import (
    CheckResult,
    ConfigError,
    ExperimentConfig,
    check_analytic_definition,
    check_counterexample_llc,
    check_counterexample_regularity,
    check_distortion_bound,
    check_lower_modulus,
    check_measure_equality,
    check_metric_definition,
    check_metric_differential,
    check_upper_gradient,
    check_upper_regularity_bound,
)

logger = logging.getLogger("qclab")

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_CONFIGS = {
    "analyze": {"map": {"kind": "identity", "domain": {"lo": [0, 0], "hi": [1, 1]}}, "grid": {"resolution": 64}},
    "modulus": {
        "grid": {"lo": [0, 0], "hi": [2, 1], "resolution": 64},
        "modulus": {"family": {"source": "left-edge", "target": "right-edge"}, "expected": 0.5},
    },
    "counterexample": {
        "map": {"kind": "counterexample", "domain": {"lo": [-3, -3], "hi": [3, 3]}},
        "grid": {"resolution": 64},
        "counterexample": {"strips": 5, "nRange": [2, 6]},
    },
    "intrinsic": {"map": {"kind": "cylinder", "domain": {"lo": [0, 0], "hi": [3.141592653589793, 1]}}},
}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str
    output_dir: str
    config_hash: str
    seed: int
    started: str = ""
    finished: str = ""
    checks: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    exit_code: int | None = None

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "configPath": self.config_path,
            "outputDir": self.output_dir,
            "configHash": self.config_hash,
            "seed": self.seed,
            "version": __version__,
            "started": self.started,
            "finished": self.finished,
            "checks": self.checks,
            "artifacts": self.artifacts,
            "exitCode": self.exit_code,
        }


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Run:
    """Output directory of one command invocation."""

    def __init__(self, directory: Path, manifest: RunManifest):
        self.dir = directory
        self.manifest = manifest
        self.results: list[CheckResult] = []

    def write_csv(self, name: str, header, rows) -> str:
        path = self.dir / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.manifest.artifacts.append(name)
        return name

    def write_json(self, name: str, data) -> str:
        (self.dir / name).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        self.manifest.artifacts.append(name)
        return name

    def record(self, result: CheckResult, csv_name: str | None = None, header=None) -> None:
        rows = result.details.pop("rows", None)
        if csv_name and rows is not None:
            result.artifacts.append(self.write_csv(csv_name, header, rows))
        self.write_json(f"{result.name}.check.json", result.to_json())
        self.manifest.checks[result.name] = result.status
        self.results.append(result)
        logger.info("%-26s %-12s lhs=%.6g rhs=%.6g", result.name, result.status, result.lhs, result.rhs)


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: ExperimentConfig, run: Run) -> None:
    fmap = cfg.require_map()
    scan = distortion_scan(fmap, cfg.form, cfg.grid)
    header, rows = scan.csv_rows()
    run.write_csv("distortion.csv", header, rows)
    report = scan.to_json()
    report.update({"map": fmap.to_json(), "form": cfg.form.to_json(), "resolution": list(cfg.grid.shape)})
    run.write_json("distortion-report.json", report)
    run.record(check_analytic_definition(cfg, scan))
    if fmap.kind == "counterexample":
        run.record(check_distortion_bound(cfg, scan))
    run.record(
        check_upper_gradient(cfg),
        "upper-gradient.csv",
        ["path", "segments", "chord", "intrinsic", "integral", "ok"],
    )
    extra = cfg.sections["analyze"].get("extraChecks", [])
    if "metric_definition" in extra:
        run.record(check_metric_definition(cfg), "metric-definition.csv", _metric_header(fmap.n))
    if "upper_regularity_bound" in extra:
        run.record(check_upper_regularity_bound(cfg))


def _expected_value(value) -> float:
    try:
        return float(sp.sympify(value)) if isinstance(value, str) else float(value)
    except (sp.SympifyError, TypeError, ValueError) as exc:
        raise ConfigError(f"modulus.expected: cannot evaluate {value!r}") from exc


def cmd_modulus(cfg: ExperimentConfig, run: Run) -> None:
    sec = cfg.sections["modulus"]
    fam = sec.get("family", {"source": "left-edge", "target": "right-edge"})
    if "source" not in fam or "target" not in fam:
        raise ConfigError("modulus.family: needs source and target selectors")
    exponent = float(sec.get("exponent", cfg.grid.dim))
    tol = float(sec.get("tol", 1e-3))
    family = PathFamily(cfg.grid, fam["source"], fam["target"], "Gamma")
    t0 = time.perf_counter()
    try:
        res = discrete_modulus(family, exponent, tol, reach=int(sec.get("reach", 3)))
    except ValueError as exc:
        raise ConfigError(f"modulus.family: {exc}") from exc
    elapsed = time.perf_counter() - t0
    header, rows = density_csv(res, cfg.grid)
    run.write_csv("density.csv", header, rows)
    summary = res.to_json()
    summary.update({"exponent": exponent, "resolution": list(cfg.grid.shape), "seconds": elapsed})
    run.write_json("modulus.json", summary)
    ok = res.converged and res.certificate >= 1 - tol
    run.record(CheckResult("modulus_certificate", ok, res.certificate, 1 - tol, tol, details={"flag": res.flag, "iterations": res.iterations}))
    if "expected" in sec:
        want = _expected_value(sec["expected"])
        rtol = float(sec.get("expectedTolerance", cfg.tolerances["modulus"]))
        rel = abs(res.modulus / want - 1.0)
        run.record(CheckResult("modulus_value", rel <= rtol, res.modulus, want, rtol, details={"relativeError": rel}))
    if cfg.map is not None and sec.get("pushforward", True):
        run.record(check_lower_modulus(cfg), "lower-modulus.csv", ["resolution", "modDomain", "modImage", "K_emp", "ratio", "pass"])


def _metric_header(n: int) -> list[str]:
    return ["level"] + [f"x{i + 1}" for i in range(n)] + ["H", "jetRatio"]


def cmd_counterexample(cfg: ExperimentConfig, run: Run) -> None:
    fmap = cfg.require_map()
    if fmap.kind != "counterexample":
        raise ConfigError("map.kind: counterexample command needs the counterexample map")
    run.record(check_counterexample_regularity(cfg), "growth-measure.csv", ["N", "measure", "diskSum", "measureOverR2"])
    run.record(
        check_counterexample_llc(cfg),
        "growth-llc.csv",
        ["n", "radius", "c", "ratio", "points", "flatControl", "flag"],
    )
    run.record(check_metric_definition(cfg), "metric-definition.csv", _metric_header(fmap.n))


def cmd_intrinsic(cfg: ExperimentConfig, run: Run) -> None:
    cfg.require_map()
    run.record(check_measure_equality(cfg))
    run.record(check_metric_differential(cfg), "metric-differential.csv", ["x1", "x2", "v1", "v2", "md", "DfV"])


COMMANDS = {
    "analyze": cmd_analyze,
    "modulus": cmd_modulus,
    "counterexample": cmd_counterexample,
    "intrinsic": cmd_intrinsic,
}


# ---------------------------------------------------------------------------
# driver


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qclab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON configuration (built-in default when omitted)")
    p.add_argument("--out", default="runs", help="parent directory for run outputs")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--resolution", type=int, help="override grid.resolution")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path: str | None, command: str) -> tuple[dict, str]:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIGS[command])), "<default>"
    try:
        return json.loads(Path(path).read_text()), str(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def prepare_run_dir(out: Path, command: str, digest: str, force: bool) -> Path:
    directory = out / f"{command}-{digest[:12]}"
    if directory.exists():
        if not force:
            raise UsageError(f"run directory {directory} exists; use --force to overwrite")
        if not (directory / "run-manifest.json").exists():
            raise UsageError(f"{directory} is not a run directory; refusing to overwrite")
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    return directory


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        raw, cfg_path = load_config(args.config, args.command)
        cfg = ExperimentConfig.from_json(raw, seed=args.seed, resolution=args.resolution)
        digest = hashlib.sha256(f"{args.command}:{cfg.digest()}".encode()).hexdigest()
        directory = prepare_run_dir(Path(args.out), args.command, digest, args.force)
    except (ConfigError, UsageError) as exc:
        print(f"qclab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    manifest = RunManifest(args.command, cfg_path, str(directory), digest, cfg.seed, started=_timestamp())
    run = Run(directory, manifest)
    (directory / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    try:
        COMMANDS[args.command](cfg, run)
        code = EXIT_PASS if all(r.passed for r in run.results) else EXIT_FAIL
    except ConfigError as exc:
        print(f"qclab: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    manifest.finished = _timestamp()
    manifest.exit_code = code
    (directory / "run-manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    for r in run.results:
        print(f"{r.name:28s} {r.status}")
    print(f"run directory: {directory}")
    return code


if __name__ == "__main__":
    sys.exit(main())
