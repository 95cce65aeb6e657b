from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qclab.domain import Box, GridDomain
from qclab.forms import MultiIndex
from qclab.jetcalc import MapSpec
from qclab.surface import (
    LLCResult,
    Seminorm2D,
    ball_measure,
    intrinsic_distance,
    jacobian_of_seminorm,
    llc_constant,
    llc_constant_bisection,
    metric_differential,
    metric_differentials,
    point_distances,
    projection_multiplicity,
    triangulate,
)

FLAT = MapSpec.identity((0, 0), (1, 1), m=3)
FLAT_MESH = triangulate(FLAT, GridDomain(FLAT.domain, 16))
BUMP = MapSpec.graph("0.3*sin(3*x1)*cos(2*x2)", (0, 0), (1, 1))
BUMP_MESH = triangulate(BUMP, GridDomain(BUMP.domain, 12))


def test_triangulation_invariants():
    m = BUMP_MESH
    assert m.n_triangles == 2 * 12 * 12 and m.n_vertices == 13 * 13
    assert np.all(m.areas > 0)
    e = m.edges
    assert np.allclose(m.edge_lengths, np.linalg.norm(m.vertices[e[:, 0]] - m.vertices[e[:, 1]], axis=1))
    # parameter coordinates are exactly the grid nodes, one vertex each
    assert len(np.unique(m.params.round(12), axis=0)) == m.n_vertices
    assert np.allclose(m.vertices, BUMP(m.params))


def test_masked_triangulation_and_zero_area_report():
    ann = GridDomain.annulus(0.5, 1.0, 16)
    mesh = triangulate(MapSpec.identity((-1, -1), (1, 1)), ann)
    assert mesh.n_triangles == 2 * int(ann.active().sum())
    squash = MapSpec.linear([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="zero-area"):
        triangulate(squash, GridDomain(squash.domain, 4))


def test_off_and_json_export(tmp_path):
    text = FLAT_MESH.to_off()
    lines = text.splitlines()
    assert lines[0] == "OFF" and lines[1] == f"{FLAT_MESH.n_vertices} {FLAT_MESH.n_triangles} 0"
    assert len(lines) == 2 + FLAT_MESH.n_vertices + FLAT_MESH.n_triangles
    FLAT_MESH.save(tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert np.array_equal(np.asarray(data["triangles"]), FLAT_MESH.triangles)


@given(st.integers(0, 168), st.integers(0, 168))
def test_intrinsic_dominates_chordal(p, q):
    d = intrinsic_distance(BUMP_MESH, p, q)
    assert d >= np.linalg.norm(BUMP_MESH.vertices[p] - BUMP_MESH.vertices[q]) - 1e-12


@pytest.mark.parametrize("level,bound", [(1, 0.05), (2, 0.035), (4, 0.005)])
def test_flat_steiner_error_shrinks_with_level(level, bound):
    d = intrinsic_distance(FLAT_MESH, 0, np.arange(FLAT_MESH.n_vertices), level)
    chord = np.linalg.norm(FLAT_MESH.vertices - FLAT_MESH.vertices[0], axis=1)
    rel = (d[1:] - chord[1:]) / chord[1:]
    assert rel.min() >= -1e-12 and rel.max() < bound


def test_same_and_adjacent_triangle_distances_are_exact():
    h = 1 / 16
    base = np.array([[3.3 * h, 5.2 * h]])
    # two targets in the base triangle, one in the triangle across its edge
    same = np.array([[[3.6 * h, 5.3 * h], [3.9 * h, 5.8 * h], [4.2 * h, 5.6 * h]]])
    d = point_distances(FLAT_MESH, base, same)
    assert np.allclose(d, np.linalg.norm(same[0] - base[0], axis=1), atol=1e-12)


def test_cylinder_geodesics_match_developed_plane():
    # oracle: the cylinder is developable; geodesics are straight in (x1, x2)
    cyl = MapSpec.cylinder((0, 0), (math.pi, 1))
    mesh = triangulate(cyl, GridDomain(cyl.domain, 48), level=4)
    rng = np.random.default_rng(3)
    a = rng.uniform([0.1, 0.1], [3.0, 0.9], (20, 2))
    b = rng.uniform([0.1, 0.1], [3.0, 0.9], (20, 2))
    d = point_distances(mesh, a, b[:, None, :])[:, 0]
    exact = np.linalg.norm(a - b, axis=1)
    assert np.allclose(d, exact, rtol=0.01)


def test_metric_differential_on_cylinder_converges():
    cyl = MapSpec.cylinder((0, 0), (math.pi, 1))
    errs = []
    for res in (15, 45):
        mesh = triangulate(cyl, GridDomain(cyl.domain, res))
        h = mesh.param_spacing
        x = mesh.box.lo + (np.floor((np.array([1.3, 0.45]) - mesh.box.lo) / h) + 0.5) * h
        V = Seminorm2D.directions(16)
        md = np.array([r.value for r in metric_differentials(mesh, x[None], V)])
        exact = np.linalg.norm(V @ cyl.jacobian(x).T, axis=1)
        errs.append(np.median(np.abs(md - exact) / exact))
    assert errs[1] < errs[0] < 0.02


def test_metric_differential_rejects_leaving_domain():
    with pytest.raises(ValueError, match="leaves the domain"):
        metric_differential(FLAT, FLAT_MESH, np.array([0.0, 0.5]), np.array([-1.0, 0.0]))


@given(st.floats(0.2, 3), st.floats(0.2, 3), st.floats(-1, 1))
def test_jacobian_of_linear_seminorm_is_abs_det(a, b, c):
    # |A v| has unit ball of area pi / |det A|, so J = |det A|
    A = np.array([[a, c], [0.0, b]])
    assert jacobian_of_seminorm(Seminorm2D.from_matrix(A, 512)) == pytest.approx(abs(np.linalg.det(A)), rel=1e-9)


def test_seminorm_validation():
    with pytest.raises(ValueError):
        Seminorm2D(np.ones(10))
    with pytest.raises(ValueError):
        Seminorm2D(-np.ones(64))
    assert jacobian_of_seminorm(Seminorm2D(np.r_[0.0, np.ones(63)])) == 0.0


def test_flat_ball_measure():
    mesh = triangulate(FLAT, GridDomain(FLAT.domain, 64))
    c = np.array([0.5, 0.5, 0.0])
    for r in (0.1, 0.3):
        assert ball_measure(mesh, c, r) == pytest.approx(math.pi * r * r, rel=0.01)
    with pytest.raises(ValueError):
        ball_measure(mesh, c, 0.0)


@given(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.05, 0.4))
def test_intrinsic_ball_inside_euclidean_ball(s, t, r):
    v = BUMP_MESH.vertex_at([round(s * 12) / 12, round(t * 12) / 12])
    c = BUMP_MESH.vertices[v]
    assert ball_measure(BUMP_MESH, v, r, "intrinsic") <= ball_measure(BUMP_MESH, c, r) * (1 + 1e-9) + 1e-12


def test_param_mask_restricts_measure():
    mesh = triangulate(FLAT, GridDomain(FLAT.domain, 32))
    c = np.array([0.5, 0.5, 0.0])
    full = ball_measure(mesh, c, 0.3)
    half = ball_measure(mesh, c, 0.3, param_mask=lambda Q: Q[:, 0] < 0.5)
    assert half == pytest.approx(full / 2, rel=1e-9)


@given(st.integers(0, 168), st.floats(0.05, 0.6))
def test_llc_union_find_matches_bisection(v, r):
    c = BUMP_MESH.vertices[v]
    fast = llc_constant(BUMP_MESH, c, r)
    slow = llc_constant_bisection(BUMP_MESH, c, r)
    assert fast.constant == pytest.approx(slow, rel=1e-6)


def test_flat_llc_is_near_one():
    mesh = triangulate(FLAT, GridDomain(FLAT.domain, 32))
    for r in (0.05, 0.1, 0.2):
        res = llc_constant(mesh, np.array([0.5, 0.5, 0.0]), r)
        assert isinstance(res, LLCResult) and res.constant <= 1.1


def test_llc_constant_flags_beyond_cap():
    f = MapSpec.counterexample((0, -9 * math.pi), (10, math.pi))
    mesh = triangulate(f, GridDomain(f.domain, (20, 80)), level=0)
    x = np.array([10.0, -4 * math.pi])
    res = llc_constant(mesh, f(x), float(f.profile(x[1])) * math.exp(10), c_max=100.0)
    assert math.isinf(res.constant) and res.ratio > 100 and res.flag


def test_projection_multiplicity_oracles():
    cyl = MapSpec.cylinder((0.1, 0), (math.pi - 0.1, 1))
    r = projection_multiplicity(cyl, MultiIndex((1, 3)), cyl(np.array([1.0, 0.5]))[[0, 2]], GridDomain(cyl.domain, 16))
    assert r.count == 1 and not r.unstable
    # exp covers each point of the punctured plane once per 2 pi in x2
    f = MapSpec.counterexample((-1, -3 * math.pi + 0.3), (1, 3 * math.pi - 0.3))
    y = f(np.array([0.2, 0.5]))[:2]
    assert projection_multiplicity(f, MultiIndex((1, 2)), y, GridDomain(f.domain, 24)).count == 3
    strip = f.with_domain((-1, -math.pi + 0.1), (1, math.pi - 0.1))
    assert projection_multiplicity(strip, MultiIndex((1, 2)), y, GridDomain(strip.domain, 24)).count == 1


def test_intrinsic_distance_is_continuous_in_the_parameter():
    # d(f(x), f(y)) -> 0 as |x - y| -> 0, bounded by sup|Df| |x - y| (+ Steiner slack)
    f = MapSpec.counterexample((-1, -1), (1, 1))
    mesh = triangulate(f, GridDomain(f.domain, 24), level=3)
    x = np.array([[0.13, -0.21]])
    bound = float(np.linalg.svd(f.jacobian(np.array([1.0, 0.0])), compute_uv=False)[0])
    prev = math.inf
    for step in (0.4, 0.1, 0.02, 0.005):
        y = x + step * np.array([[0.6, 0.8]])
        d = float(point_distances(mesh, x, y[:, None, :])[0, 0])
        assert d <= 1.02 * bound * step and d < prev
        prev = d
