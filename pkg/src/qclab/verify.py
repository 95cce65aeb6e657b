"""Experiment configuration and the inequality checks built on the other
modules.  Every check returns a :class:`CheckResult` and is deterministic
given the configuration and its seed."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import Box, GridDomain
from .forms import ConstantForm
from .jetcalc import MapSpec, area_measure, distortion_scan, operator_norm
from .modulus import PathFamily, verify_lower_modulus
from .surface import (
    Seminorm2D,
    ball_measure,
    jacobian_of_seminorm,
    llc_constant,
    metric_differentials,
    point_distances,
    projection_multiplicity,
    triangulate,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCES = {
    "analytic": 1e-6,
    "degenerate_fraction": 0.01,
    "metric_drift": 0.05,
    "regularity": 0.05,
    "llc_growth": 2.0,
    "llc_flat": 1.1,
    "measure": 0.03,
    "md_median": 0.02,
    "regularity_drift": 0.10,
    "quadrature": 0.01,
    "lower_modulus": 0.05,
    "modulus": 0.02,
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# configuration


def _grid_from_json(data: dict | None, fmap: MapSpec | None, field_name: str = "grid") -> GridDomain:
    data = dict(data or {})
    res = data.get("resolution", 32)
    mask = data.get("mask")
    try:
        if mask:
            if mask.get("kind") != "annulus":
                raise ConfigError(f"{field_name}.mask.kind: only 'annulus' is supported")
            r_in, r_out = float(mask["r_inner"]), float(mask["r_outer"])
            if not 0 < r_in < r_out:
                raise ConfigError(f"{field_name}.mask: need 0 < r_inner < r_outer")
            return GridDomain.annulus(r_in, r_out, int(res))
        lo = data.get("lo", fmap.domain.lo if fmap else None)
        hi = data.get("hi", fmap.domain.hi if fmap else None)
        if lo is None or hi is None:
            raise ConfigError(f"{field_name}.lo/hi: required without a map")
        return GridDomain(Box(tuple(lo), tuple(hi)), res)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{field_name}: {exc}") from exc


@dataclass
class ExperimentConfig:
    map: MapSpec | None
    form: ConstantForm | None
    grid: GridDomain
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    seed: int = 0
    sections: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_json(cls, data: dict, *, seed: int | None = None, resolution: int | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        raw = json.loads(json.dumps(data))
        if resolution is not None:
            raw.setdefault("grid", {})["resolution"] = int(resolution)
        if seed is not None:
            raw["seed"] = int(seed)
        fmap = form = None
        if "map" in raw:
            try:
                fmap = MapSpec.from_json(raw["map"])
            except (ValueError, TypeError, KeyError) as exc:
                raise ConfigError(f"map: {exc}") from exc
        if "form" in raw:
            try:
                form = ConstantForm.from_json(raw["form"])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"form: {exc}") from exc
        elif fmap is not None:
            form = default_form(fmap)
        if fmap is not None and form is not None and (form.n, form.m) != (fmap.n, fmap.m):
            raise ConfigError(f"form: {form.n}-form on R^{form.m} does not match map R^{fmap.n} -> R^{fmap.m}")
        grid = _grid_from_json(raw.get("grid"), fmap)
        if fmap is not None and grid.mask is None:
            inside = np.all(np.asarray(grid.box.lo) >= np.asarray(fmap.domain.lo) - 1e-12) and np.all(
                np.asarray(grid.box.hi) <= np.asarray(fmap.domain.hi) + 1e-12
            )
            if not inside:
                raise ConfigError("grid: box must lie inside map.domain")
        tol = dict(DEFAULT_TOLERANCES)
        for k, v in (raw.get("tolerances") or {}).items():
            if k not in DEFAULT_TOLERANCES:
                raise ConfigError(f"tolerances.{k}: unknown tolerance")
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"tolerances.{k}: must be a positive number")
            tol[k] = float(v)
        s = raw.get("seed", 0)
        if not isinstance(s, int):
            raise ConfigError("seed: must be an integer")
        sections = {k: raw.get(k, {}) for k in ("analyze", "modulus", "counterexample", "intrinsic")}
        for k, v in sections.items():
            if not isinstance(v, dict):
                raise ConfigError(f"{k}: expected an object")
        return cls(fmap, form, grid, tol, s, sections, raw)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def rng(self, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])

    def require_map(self) -> MapSpec:
        if self.map is None:
            raise ConfigError("map: required for this command")
        return self.map


def default_form(fmap: MapSpec) -> ConstantForm:
    """dx1^...^dxn, except for the cylinder where -dx1^dx3 is positive on
    (0, pi) x R."""
    if fmap.kind == "cylinder":
        return ConstantForm(2, 3, (((1, 3), -1.0),))
    return ConstantForm.simple(tuple(range(1, fmap.n + 1)), fmap.m)


@dataclass
class CheckResult:
    name: str
    passed: bool
    lhs: float
    rhs: float
    tolerance: float
    artifacts: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    status: str = ""

    def __post_init__(self):
        if not self.status:
            self.status = "pass" if self.passed else "fail"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "pass": bool(self.passed),
            "status": self.status,
            "lhs": _num(self.lhs),
            "rhs": _num(self.rhs),
            "tolerance": self.tolerance,
            "artifacts": list(self.artifacts),
            "details": _clean(self.details),
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# analytic definition


def check_analytic_definition(cfg: ExperimentConfig, scan=None) -> CheckResult:
    """|Df(x)|^n <= K_emp mu_f(x) at every non-degenerate sample, with
    mu_f = sqrt(det Df^T Df) and K_emp the sampled essential sup of K."""
    fmap = cfg.require_map()
    tol = cfg.tolerances["analytic"]
    scan = scan or distortion_scan(fmap, cfg.form, cfg.grid)
    good = ~scan.degenerate
    n = cfg.form.n
    ratio = scan.op_norm[good] ** n / scan.cb_jac[good]
    lhs = float(ratio.max())
    K = scan.ess_sup_K
    details = {
        "essSupK": K,
        "p999K": scan.p999_K,
        "degenerateFraction": scan.degenerate_fraction,
        "maxViolationRatio": lhs / K,
        "empiricalC": scan.empirical_C,
    }
    if fmap.kind == "counterexample":
        lo, hi = cfg.grid.box.lo[1], cfg.grid.box.hi[1]
        details["distortionBound"] = 2.0 + fmap.profile.sup_bound(lo, hi)
    if scan.degenerate_fraction > cfg.tolerances["degenerate_fraction"]:
        return CheckResult("analytic_definition", False, lhs, K, tol, details=details, status="inconclusive")
    return CheckResult("analytic_definition", lhs <= K * (1 + tol), lhs, K, tol, details=details)


def check_distortion_bound(cfg: ExperimentConfig, scan=None, slack: float = 1e-3) -> CheckResult:
    """For the counterexample: essSupK <= 2 + sup (phi + phi')^2 + slack over
    the x2-range of the grid."""
    fmap = cfg.require_map()
    if fmap.kind != "counterexample":
        raise ValueError("distortion bound is specific to the counterexample map")
    scan = scan or distortion_scan(fmap, cfg.form, cfg.grid)
    lo, hi = cfg.grid.box.lo[1], cfg.grid.box.hi[1]
    bound = 2.0 + fmap.profile.sup_bound(lo, hi)
    K = scan.ess_sup_K
    return CheckResult("distortion_bound", K <= bound + slack, K, bound + slack, slack, details={"bound": bound})


# ---------------------------------------------------------------------------
# metric definition


def _sphere_directions(n: int, count: int, rng) -> np.ndarray:
    if n == 2:
        t = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(t), np.sin(t)])
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def metric_distortion(fmap: MapSpec, points: np.ndarray, radii, directions: np.ndarray) -> np.ndarray:
    """H_f(x, r) = max |f(y) - f(x)| / min |f(y) - f(x)| over |y - x| = r,
    per point (rows) and radius (columns)."""
    fx = fmap(points)
    out = np.empty((len(points), len(radii)))
    for j, r in enumerate(radii):
        Y = points[:, None, :] + r * directions[None]
        d = np.linalg.norm(fmap(Y) - fx[:, None, :], axis=2)
        lo = d.min(axis=1)
        if np.any(lo <= 0):
            bad = points[np.flatnonzero(lo <= 0)[0]]
            raise ValueError(f"l_f vanishes at x={bad.tolist()}, r={r:g}: map not injective at grid scale")
        out[:, j] = d.max(axis=1) / lo
    return out


def _extrapolate(values: np.ndarray, radii) -> np.ndarray:
    r = np.asarray(radii, dtype=float)
    if len(r) < 2:
        return values[:, -1]
    q = r[-2] / r[-1]
    return (q * values[:, -1] - values[:, -2]) / (q - 1)


def check_metric_definition(cfg: ExperimentConfig, radii=None, samples: int | None = None) -> CheckResult:
    """Sampled H_f(x, r) = L_f / l_f extrapolated to r -> 0, maximized over
    an s x s and a 2s x 2s lattice of points; passes when the two maxima
    differ by less than ``metric_drift``."""
    fmap = cfg.require_map()
    sec = cfg.sections.get("counterexample", {}) if fmap.kind == "counterexample" else cfg.sections.get("analyze", {})
    box = cfg.grid.box
    width = float(np.min(box.widths))
    radii = np.asarray(radii if radii is not None else sec.get("radii", [width * 2e-3, width * 1e-3]), dtype=float)
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be decreasing")
    s = int(samples or sec.get("metricSamples", 8))
    dirs = _sphere_directions(fmap.n, int(sec.get("directions", 256)), cfg.rng(1))
    maxima, rows = [], []
    for level, cnt in enumerate((s, 2 * s)):
        margin = 2 * radii[0]
        axes = [np.linspace(box.lo[k] + margin, box.hi[k] - margin, cnt) for k in range(fmap.n)]
        P = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        H = metric_distortion(fmap, P, radii, dirs)
        H0 = _extrapolate(H, radii)
        sv = np.linalg.svd(fmap.jacobian(P), compute_uv=False)
        jet_ratio = sv[:, 0] / sv[:, fmap.n - 1]
        maxima.append(float(H0.max()))
        for p, h, j in zip(P, H0, jet_ratio):
            rows.append([level, *p, h, j])
    coarse, fine = maxima
    drift = abs(fine / coarse - 1.0)
    tol = cfg.tolerances["metric_drift"]
    details = {"H_coarse": coarse, "H_fine": fine, "drift": drift, "radii": radii, "rows": rows}
    return CheckResult("metric_definition", bool(np.isfinite(fine) and drift < tol), fine, coarse, tol, details=details)


# ---------------------------------------------------------------------------
# counterexample: area growth and linear local connectivity


def staircase_disk(fmap: MapSpec) -> tuple[np.ndarray, float]:
    """Center f(1, -2 pi) and squared radius 4 - (phi(-2 pi) e)^2 of the
    planar disk cut from the plane by the radius-2 ball around it."""
    center = fmap(np.array([1.0, -2 * np.pi]))
    h = float(fmap.profile(-2 * np.pi)) * np.e
    return center, 4.0 - h * h


def strip_measures(fmap: MapSpec, N: int, resolution: int = 96) -> np.ndarray:
    """Measure of B(f(1, -2 pi), 2) intersected with f(U_k), k = 1..N.

    U_k is the branch of the logarithm of the disk V = {|z - e|^2 < r0^2}
    lying in the strip |x2 + 2 pi k| < pi; the mesh covers its bounding
    box and the ball measure is restricted to parameters in U_k.
    """
    center, r0sq = staircase_disk(fmap)
    rad = math.sqrt(r0sq)
    half_angle = math.asin(min(rad / math.e, 1.0))
    x1lo, x1hi = math.log(math.e - rad), math.log(math.e + rad)
    out = np.zeros(N)
    for k in range(1, N + 1):
        mid = -2 * np.pi * k
        lo = (x1lo - 1e-3, mid - half_angle - 1e-3)
        hi = (x1hi + 1e-3, mid + half_angle + 1e-3)
        mesh = triangulate(fmap.with_domain(lo, hi), GridDomain(Box(lo, hi), resolution), level=0)

        def in_strip(Q, mid=mid):
            z1 = np.exp(Q[:, 0]) * np.cos(Q[:, 1]) - np.e
            z2 = np.exp(Q[:, 0]) * np.sin(Q[:, 1])
            return (z1 * z1 + z2 * z2 < r0sq) & (np.abs(Q[:, 1] - mid) < np.pi)

        out[k - 1] = ball_measure(mesh, center, 2.0, "euclidean", param_mask=in_strip)
    return out


def check_counterexample_regularity(cfg: ExperimentConfig, N: int | None = None) -> CheckResult:
    """measure(B(f(1,-2pi), 2) cap f(U_1 u ... u U_N)) >= N pi r0^2 (1 - tol),
    checked for every N' <= N together with strict growth in N'."""
    fmap = cfg.require_map()
    if fmap.kind != "counterexample":
        raise ValueError("check needs the counterexample map")
    sec = cfg.sections.get("counterexample", {})
    N = int(sec.get("strips", 5) if N is None else N)
    tol = cfg.tolerances["regularity"]
    _, r0sq = staircase_disk(fmap)
    disk = math.pi * r0sq
    per = strip_measures(fmap, N, int(sec.get("stripResolution", 96))) if N > 0 else np.zeros(0)
    cum = np.concatenate([[0.0], np.cumsum(per)])
    rows = [[k, cum[k], k * disk, cum[k] / 4.0] for k in range(N + 1)]
    each_ok = all(cum[k] >= k * disk * (1 - tol) for k in range(N + 1))
    growing = bool(np.all(np.diff(cum) > 0))
    lhs = float(cum[-1])
    rhs = N * disk
    details = {"diskArea": disk, "r0squared": r0sq, "measures": cum, "ratioOverR2": cum / 4.0, "strictlyIncreasing": growing, "rows": rows}
    return CheckResult("counterexample_regularity", bool(each_ok and growing), lhs, rhs * (1 - tol), tol, details=details)


def llc_mesh(fmap: MapSpec, n_lo: int, n_hi: int, per_turn: int = 16, x1_cells: int = 20, x1_lo: float = 0.0):
    """Mesh over x1 in [x1_lo, 10], x2 in [-2 pi (n_hi + 1) - pi, -2 pi n_lo + pi]
    with grid nodes on every x2 = -2 pi k and on x1 = 10."""
    if per_turn % 2:
        raise ValueError("per_turn must be even so that nodes fall on multiples of 2 pi")
    lo = (x1_lo, -2 * np.pi * (n_hi + 1) - np.pi)
    hi = (10.0, -2 * np.pi * n_lo + np.pi)
    turns = n_hi + 2 - n_lo
    grid = GridDomain(Box(lo, hi), (x1_cells, turns * per_turn))
    return triangulate(fmap.with_domain(lo, hi), grid, level=0)


def check_counterexample_llc(cfg: ExperimentConfig, n_range=None) -> CheckResult:
    """LLC constants of B_n = B(f(10, -2 pi n), phi(-2 pi n) e^10) on one
    fixed mesh; passes when they increase strictly, c(n_max) / c(n_min)
    reaches ``llc_growth`` and the flat control stays below ``llc_flat``.
    Infinite constants (beyond c_max) count as growth."""
    fmap = cfg.require_map()
    if fmap.kind != "counterexample":
        raise ValueError("check needs the counterexample map")
    sec = cfg.sections.get("counterexample", {})
    n_lo, n_hi = (int(v) for v in (n_range or sec.get("nRange", [2, 6])))
    if not 1 <= n_lo < n_hi:
        raise ValueError("nRange must satisfy 1 <= n_min < n_max")
    per_turn = int(sec.get("llcPerTurn", 16))
    x1_cells = int(sec.get("llcX1Cells", 20))
    c_max = float(sec.get("cMax", 1e6))
    mesh = llc_mesh(fmap, n_lo, n_hi, per_turn, x1_cells)
    flat = MapSpec.linear([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], mesh.box.lo, mesh.box.hi)
    flat_mesh = triangulate(flat, GridDomain(mesh.box, (x1_cells, (n_hi + 2 - n_lo) * per_turn)), level=0)
    h = float(np.max(flat_mesh.param_spacing))
    ns = list(range(n_lo, n_hi + 1))
    rows, cs, controls = [], [], []
    for n in ns:
        x = np.array([10.0, -2 * np.pi * n])
        r = float(fmap.profile(-2 * np.pi * n)) * math.exp(10.0)
        res = llc_constant(mesh, fmap(x), r, c_max)
        # flat control: ball of a few mesh spacings around an interior node
        xc = np.array([5.0, -2 * np.pi * n])
        ctrl = llc_constant(flat_mesh, flat(xc), 2.5 * h, c_max)
        cs.append(res.constant)
        controls.append(ctrl.constant)
        rows.append([n, r, res.constant, res.ratio, res.n_points, ctrl.constant, res.flag])
    c = np.asarray(cs)
    finite = np.isfinite(c)
    increasing = all(b > a or math.isinf(b) for a, b in zip(c[:-1], c[1:]))
    growth = math.inf if not finite[-1] else float(c[-1] / c[0])
    tol = cfg.tolerances["llc_growth"]
    flat_ok = max(controls) <= cfg.tolerances["llc_flat"]
    details = {"n": ns, "constants": c, "controls": controls, "growth": growth, "strictlyIncreasing": increasing, "rows": rows}
    return CheckResult("counterexample_llc", bool(increasing and growth >= tol and flat_ok), growth, tol, tol, details=details)


# ---------------------------------------------------------------------------
# measure equality via metric differentials


def _quadrature_points(region: Box, blocks: int, sub: int) -> tuple[np.ndarray, GridDomain]:
    """Centers of a blocks x blocks partition of ``region``; with ``sub`` odd
    each center is also the center of a cell of the (blocks * sub) mesh."""
    if sub % 2 == 0:
        raise ValueError("sub-resolution factor must be odd")
    qgrid = GridDomain(region, blocks)
    return qgrid.centers(), GridDomain(region, blocks * sub)


def seminorm_field(fmap: MapSpec, mesh, X, directions: int = 64, radii=None, level: int | None = None):
    """md(f, x) sampled at ``directions`` angles for each x, plus the
    analytic |Df(x) v| and any convergence warnings."""
    V = Seminorm2D.directions(directions)
    res = metric_differentials(mesh, X, V, radii, level)
    md = np.array([r.value for r in res]).reshape(len(X), directions)
    warnings = sum(bool(r.warning) for r in res)
    exact = np.linalg.norm(np.einsum("bij,kj->bki", fmap.jacobian(X), V), axis=2)
    return V, md, exact, warnings


def check_measure_equality(cfg: ExperimentConfig, region: Box | None = None) -> CheckResult:
    """Integral of J(md(f, x)) over ``region`` against the euclidean area
    (Riemann sum of sqrt(det Df^T Df)); relative difference < ``measure``."""
    fmap = cfg.require_map()
    sec = cfg.sections.get("intrinsic", {})
    if region is None:
        reg = sec.get("region")
        region = Box(tuple(reg["lo"]), tuple(reg["hi"])) if reg else cfg.grid.box
    blocks = int(sec.get("blocks", 12))
    sub = int(sec.get("sub", 5))
    X, mgrid = _quadrature_points(region, blocks, sub)
    mesh = triangulate(fmap, mgrid, int(sec.get("level", 2)))
    V, md, exact, warnings = seminorm_field(fmap, mesh, X, int(sec.get("directions", 64)))
    J = np.array([jacobian_of_seminorm(Seminorm2D(row)) for row in md])
    intrinsic = float(J.sum() * region.volume / len(X))
    euclid = area_measure(fmap, mgrid)
    rel = abs(intrinsic - euclid) / euclid
    tol = cfg.tolerances["measure"]
    details = {"intrinsic": intrinsic, "euclidean": euclid, "meshArea": mesh.total_area, "relativeDifference": rel, "warnings": warnings}
    status = "inconclusive" if warnings else ""
    passed = rel < tol and not warnings
    return CheckResult("measure_equality", passed, intrinsic, euclid, tol, details=details, status=status)


def check_metric_differential(cfg: ExperimentConfig, resolutions=None) -> CheckResult:
    """Median relative error of md(f, x)(v) against |Df(x) v| below
    ``md_median`` at the finest resolution and not growing under refinement."""
    fmap = cfg.require_map()
    sec = cfg.sections.get("intrinsic", {})
    reg = sec.get("region")
    region = Box(tuple(reg["lo"]), tuple(reg["hi"])) if reg else cfg.grid.box
    blocks = int(sec.get("blocks", 12))
    subs = resolutions or sec.get("subs", [3, 5])
    medians, rows = [], []
    for level, sub in enumerate(subs):
        X, mgrid = _quadrature_points(region, blocks, int(sub))
        mesh = triangulate(fmap, mgrid, int(sec.get("level", 2)))
        V, md, exact, _ = seminorm_field(fmap, mesh, X, int(sec.get("directions", 64)))
        rel = np.abs(md - exact) / exact
        medians.append(float(np.median(rel)))
        if level == len(subs) - 1:
            for i, x in enumerate(X):
                for k, v in enumerate(V):
                    rows.append([*x, *v, md[i, k], exact[i, k]])
    tol = cfg.tolerances["md_median"]
    improving = all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(medians[:-1], medians[1:]))
    details = {"medians": medians, "resolutions": [blocks * int(s) for s in subs], "improving": improving, "rows": rows}
    return CheckResult("metric_differential", bool(medians[-1] < tol and improving), medians[-1], tol, tol, details=details)


# ---------------------------------------------------------------------------
# upper Ahlfors bound under finite projection multiplicity


def check_upper_regularity_bound(cfg: ExperimentConfig) -> CheckResult:
    """ball measure / r^n <= C_emp max_I N(f_I), with C_emp drifting less
    than ``regularity_drift`` between the grid and its refinement.

    N(f_I) is counted at sampled image points for every multi-index with a
    nonzero coefficient in the form."""
    fmap = cfg.require_map()
    if fmap.n != 2:
        raise ValueError("regularity check is implemented for surfaces (n = 2)")
    sec = cfg.sections.get("analyze", {})
    grid = cfg.grid
    rng = cfg.rng(2)
    lo, hi = np.asarray(grid.box.lo), np.asarray(grid.box.hi)
    xs = lo + (hi - lo) * (0.1 + 0.8 * rng.random((int(sec.get("multiplicitySamples", 6)), 2)))
    counts, unstable = [], False
    for I, _ in cfg.form.coeffs:
        for x in xs:
            y = fmap(x)[list(I.rows)]
            res = projection_multiplicity(fmap, I, y, grid)
            counts.append(res.count)
            unstable |= res.unstable
    maxN = max(counts)
    centers = lo + (hi - lo) * (0.2 + 0.6 * rng.random((int(sec.get("ballSamples", 8)), 2)))
    img = fmap(grid.centers())
    diam = float(np.max(np.ptp(img, axis=0)))
    radii = np.asarray(sec.get("ballRadii", [0.05 * diam, 0.1 * diam, 0.2 * diam]), dtype=float)
    consts = []
    for level, g in enumerate((grid, grid.refined(2))):
        mesh = triangulate(fmap, g, level=0)
        ratios = [ball_measure(mesh, fmap(c), r) / r**fmap.n for c in centers for r in radii]
        consts.append(max(ratios) / maxN)
    drift = abs(consts[1] / consts[0] - 1.0)
    tol = cfg.tolerances["regularity_drift"]
    details = {"maxN": maxN, "counts": counts, "C_emp": consts, "drift": drift, "radii": radii}
    if unstable:
        return CheckResult("upper_regularity_bound", False, drift, tol, tol, details=details, status="inconclusive")
    return CheckResult("upper_regularity_bound", drift < tol, drift, tol, tol, details=details)


# ---------------------------------------------------------------------------
# upper gradient inequality


def random_polylines(box: Box, count: int, rng, max_segments: int = 4, margin: float = 0.02) -> list[np.ndarray]:
    lo = np.asarray(box.lo) + margin * box.widths
    hi = np.asarray(box.hi) - margin * box.widths
    out = []
    for _ in range(count):
        k = int(rng.integers(1, max_segments + 1))
        out.append(lo + (hi - lo) * rng.random((k + 1, box.dim)))
    return out


def path_integral(fmap: MapSpec, path: np.ndarray, pieces: int = 8, order: int = 8) -> float:
    """Gauss-Legendre quadrature of |Df| along a polyline."""
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1)
    w = 0.5 * w
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        L = float(np.linalg.norm(b - a))
        s = (np.arange(pieces)[:, None] + t[None]) / pieces
        pts = a + s.reshape(-1, 1) * (b - a)
        total += L / pieces * float(np.sum(np.tile(w, pieces) * operator_norm(fmap.jacobian(pts))))
    return total


def check_upper_gradient(cfg: ExperimentConfig, paths: int | None = None) -> CheckResult:
    """|f(a) - f(b)| <= int_gamma |Df| ds and d(f(a), f(b)) <= int_gamma |Df| ds
    on seeded random polylines, allowing a ``quadrature`` relative slack.

    The integral is evaluated at two quadrature densities; their difference
    is reported as the quadrature error estimate."""
    fmap = cfg.require_map()
    sec = cfg.sections.get("analyze", {})
    count = int(paths or sec.get("paths", 100))
    tol = cfg.tolerances["quadrature"]
    polys = random_polylines(cfg.grid.box, count, cfg.rng(3))
    # Steiner error is scale-free, so the level (not the resolution) sets the
    # overestimate of intrinsic distances: about 3% at level 2, 0.3% at 4
    mesh = triangulate(fmap, GridDomain(cfg.grid.box, int(sec.get("meshResolution", 32))), int(sec.get("level", 4)))
    ends = np.array([[p[0], p[-1]] for p in polys])
    chord = np.linalg.norm(fmap(ends[:, 1]) - fmap(ends[:, 0]), axis=1)
    intrinsic = point_distances(mesh, ends[:, 0], ends[:, 1][:, None, :])[:, 0]
    rows, violations, quad_err = [], [], 0.0
    for i, p in enumerate(polys):
        rhs = path_integral(fmap, p)
        fine = path_integral(fmap, p, pieces=16)
        quad_err = max(quad_err, abs(rhs - fine) / max(fine, 1e-300))
        ok = chord[i] <= rhs * (1 + tol) and intrinsic[i] <= rhs * (1 + tol)
        rows.append([i, len(p) - 1, chord[i], intrinsic[i], rhs, int(ok)])
        if not ok:
            violations.append({"path": i, "vertices": p.tolist(), "chord": chord[i], "intrinsic": intrinsic[i], "integral": rhs})
    worst = max(max(r[2], r[3]) / r[4] for r in rows)
    details = {"paths": count, "violations": violations, "worstRatio": worst, "quadratureError": quad_err, "rows": rows}
    return CheckResult("upper_gradient", not violations, worst, 1.0 + tol, tol, details=details)


# ---------------------------------------------------------------------------
# lower modulus inequality


def check_lower_modulus(cfg: ExperimentConfig, resolutions=None) -> CheckResult:
    """mod Gamma <= K_emp mod f(Gamma) (1 + tol) for the configured family at
    two grid resolutions."""
    fmap = cfg.require_map()
    sec = cfg.sections.get("modulus", {})
    fam = sec.get("family", {"source": "left-edge", "target": "right-edge"})
    res_list = resolutions or sec.get("pushforwardResolutions", [16, 32])
    tol = cfg.tolerances["lower_modulus"]
    reports, rows = [], []
    for r in res_list:
        grid = cfg.grid.with_resolution(int(r))
        family = PathFamily(grid, fam["source"], fam["target"], "Gamma")
        rep = verify_lower_modulus(fmap, cfg.form, family, tol, reach=int(sec.get("reach", 3)), level=sec.get("level"))
        reports.append(rep)
        rows.append([int(r), rep.mod_domain, rep.mod_image, rep.K_emp, rep.ratio, int(rep.passed)])
    worst = max(rep.ratio for rep in reports)
    details = {"reports": [rep.to_json() for rep in reports], "rows": rows}
    return CheckResult("lower_modulus", all(rep.passed for rep in reports), worst, 1.0 + tol, tol, details=details)


__all__ = [
    "CheckResult",
    "ConfigError",
    "ExperimentConfig",
    "check_analytic_definition",
    "check_counterexample_llc",
    "check_counterexample_regularity",
    "check_distortion_bound",
    "check_lower_modulus",
    "check_measure_equality",
    "check_metric_definition",
    "check_metric_differential",
    "check_upper_gradient",
    "check_upper_regularity_bound",
    "default_form",
]
