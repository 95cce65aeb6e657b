"""Acceptance criteria, each at its stated tolerance.  Every test prints one
PASS/FAIL line (also collected into the terminal summary)."""

from __future__ import annotations

import filecmp
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from qclab.cli import main
from qclab.domain import Box, GridDomain
from qclab.forms import ConstantForm, comass, two_form_comass
from qclab.jetcalc import MapSpec, distortion_scan
from qclab.modulus import PathFamily, discrete_modulus
from qclab.verify import (
    ExperimentConfig,
    check_counterexample_llc,
    check_counterexample_regularity,
    check_lower_modulus,
    check_measure_equality,
    check_metric_differential,
    check_upper_gradient,
)


def report(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def config(kind, lo, hi, resolution=32, **sections):
    data = {"map": {"kind": kind, "domain": {"lo": lo, "hi": hi}}, "grid": {"resolution": resolution}}
    data.update(sections)
    return ExperimentConfig.from_json(data)


def test_rectangle_modulus():
    grid = GridDomain(Box((0, 0), (2, 1)), 128)
    t0 = time.perf_counter()
    res = discrete_modulus(PathFamily(grid, "left-edge", "right-edge"), 2)
    dt = time.perf_counter() - t0
    ok = abs(res.modulus / 0.5 - 1) <= 0.02 and dt < 30
    report("rectangle modulus", ok, f"mod={res.modulus:.6f} (target 0.5 +- 2%), {dt:.1f}s (< 30s)")


def test_annulus_modulus():
    grid = GridDomain.annulus(1.0, math.e, 96)
    t0 = time.perf_counter()
    res = discrete_modulus(PathFamily(grid, "circle r=1", f"circle r={math.e!r}"), 2)
    dt = time.perf_counter() - t0
    ok = abs(res.modulus / (2 * math.pi) - 1) <= 0.05 and dt < 60
    report("annulus modulus", ok, f"mod={res.modulus:.5f} vs 2pi={2 * math.pi:.5f} (+- 5%), {dt:.1f}s (< 60s)")


def test_comass():
    simple = comass(ConstantForm.simple((1, 2), 3)).value
    w = ConstantForm(2, 4, (((1, 2), 1.0), ((3, 4), 1.0)))
    mixed = comass(w).value
    # brute-force frame oracle: best of many random orthonormal frames
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((200_000, 4, 2)))[0]
    brute = float(np.max(np.abs(w(Q))))
    ok = abs(simple - 1) <= 1e-6 and abs(mixed - 1) <= 1e-3 and abs(mixed - brute) <= 1e-3 and brute <= mixed + 1e-12
    report(
        "comass",
        ok,
        f"dx1^dx2 in R3 -> {simple:.9f}; dx1^dx2+dx3^dx4 -> {mixed:.9f} (frame oracle {brute:.6f}, skew oracle {two_form_comass(w):.6f})",
    )


def test_counterexample_distortion():
    f = MapSpec.counterexample((-3, -3), (3, 3))
    scan = distortion_scan(f, ConstantForm.simple((1, 2), 3), GridDomain(f.domain, 256))
    bound = 2 + f.profile.sup_bound(-3, 3)
    ok = scan.ess_sup_K <= bound + 1e-3 and scan.degenerate_fraction == 0
    report("counterexample distortion", ok, f"essSupK={scan.ess_sup_K:.6f} <= 2+sup(phi+phi')^2+1e-3={bound + 1e-3:.6f}")


def test_non_ahlfors_regularity():
    cfg = config("counterexample", [-3, -3], [3, 3], counterexample={"stripResolution": 96})
    r = check_counterexample_regularity(cfg, 10)
    m = r.details["measures"]
    per_n = all(m[k] >= k * r.details["diskArea"] * 0.95 for k in range(1, 11))
    ok = r.passed and per_n and r.details["strictlyIncreasing"]
    report("non-Ahlfors regularity", ok, f"measure(N=1..10)={np.round(m[1:], 3).tolist()}, disk area {r.details['diskArea']:.4f}")


def test_llc_failure():
    cfg = config("counterexample", [-3, -3], [3, 3])
    r = check_counterexample_llc(cfg, (2, 6))
    c = [float(v) for v in r.details["constants"]]
    ok = r.passed and r.details["growth"] >= 2 and max(r.details["controls"]) <= 1.1
    report("LLC failure", ok, f"c(n=2..6)={[round(v, 1) for v in c]}, growth {r.details['growth']:.2f} >= 2, flat control {max(r.details['controls']):.3f} <= 1.1")


@pytest.mark.parametrize(
    "kind,lo,hi,extra",
    [
        ("cylinder", [0, 0], [math.pi, 1], {}),
        ("graph", [0, 0], [1, 1], {"height": "0.5*sin(3*x1)*cos(2*x2)"}),
    ],
)
def test_metric_differential(kind, lo, hi, extra):
    data = {"map": {"kind": kind, "domain": {"lo": lo, "hi": hi}, **extra}, "intrinsic": {"blocks": 12, "subs": [3, 5]}}
    r = check_metric_differential(ExperimentConfig.from_json(data))
    meds = r.details["medians"]
    ok = r.passed and meds[-1] < 0.02 and meds[1] < meds[0]
    report(f"metric differential ({kind})", ok, f"median rel. error {meds[0]:.2e} -> {meds[1]:.2e} at {r.details['resolutions']} (< 2%, decreasing)")


@pytest.mark.parametrize(
    "kind,lo,hi",
    [("identity", [0, 0], [1, 1]), ("cylinder", [0, 0], [math.pi, 1]), ("counterexample", [-1, -1], [0, 0])],
)
def test_measure_equality(kind, lo, hi):
    r = check_measure_equality(config(kind, lo, hi))
    rel = r.details["relativeDifference"]
    report(f"measure equality ({kind})", r.passed and rel < 0.03, f"int J(md)={r.lhs:.6f}, area={r.rhs:.6f}, rel. diff {rel:.2e} (< 3%)")


@pytest.mark.parametrize(
    "kind,lo,hi",
    [("identity", [0, 0], [2, 1]), ("exp-plane", [0, 0], [1, math.pi]), ("counterexample", [-1, -1], [1, 1])],
)
def test_lower_modulus(kind, lo, hi):
    cfg = config(kind, lo, hi, modulus={"pushforwardResolutions": [16, 32]})
    r = check_lower_modulus(cfg)
    parts = [f"res {row[0]}: {row[1]:.4f} <= {row[3]:.4f}*{row[2]:.4f}*1.05 (ratio {row[4]:.4f})" for row in r.details["rows"]]
    report(f"lower modulus ({kind})", r.passed, "; ".join(parts))


@pytest.mark.parametrize(
    "kind,lo,hi",
    [("identity", [0, 0], [1, 1]), ("exp-plane", [-1, -1], [1, 1]), ("counterexample", [-2, -2], [2, 2])],
)
def test_upper_gradient(kind, lo, hi):
    r = check_upper_gradient(config(kind, lo, hi), paths=100)
    nviol = len(r.details["violations"])
    report(f"upper gradient ({kind})", r.passed and nviol == 0, f"100 polylines, {nviol} violations, worst ratio {r.lhs:.5f} (<= 1.01)")


def test_determinism(tmp_path):
    cfg = tmp_path / "cex.json"
    cfg.write_text(
        json.dumps(
            {
                "map": {"kind": "counterexample", "domain": {"lo": [-3, -3], "hi": [3, 3]}},
                "grid": {"resolution": 16},
                "counterexample": {"strips": 3, "nRange": [2, 4], "stripResolution": 48},
            }
        )
    )
    codes = [main(["counterexample", "--config", str(cfg), "--out", str(tmp_path / f"run{k}"), "--seed", "7"]) for k in (1, 2)]
    (d1,) = (tmp_path / "run1").iterdir()
    (d2,) = (tmp_path / "run2").iterdir()
    csvs = sorted(p.name for p in d1.glob("*.csv"))
    same = [filecmp.cmp(d1 / n, d2 / n, shallow=False) for n in csvs]
    ok = codes == [0, 0] and len(csvs) >= 3 and all(same) and d1.name == d2.name
    report("determinism", ok, f"{len(csvs)} CSV files byte-identical across two runs: {all(same)}")
