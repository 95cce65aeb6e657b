from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qclab.domain import Box, GridDomain
from qclab.forms import ConstantForm
from qclab.jetcalc import (
    ConsistencyError,
    MapSpec,
    Profile,
    area_measure,
    cb_jacobian,
    differential,
    distortion_scan,
    fd_jacobian,
    operator_norm,
    pointwise_distortion,
)

W12 = ConstantForm.simple((1, 2), 3)
coord = st.floats(-2.5, 2.5, allow_nan=False)


# -- profile -----------------------------------------------------------------


@pytest.mark.parametrize("kind", ["algebraic", "tanh"])
def test_profile_is_increasing_bounded_and_positive(kind):
    p = Profile(kind)
    t = np.linspace(-15, 15, 3001)
    v = p(t)
    assert np.all(v > 0) and np.all(v < 2 * p.a)
    assert np.all(np.diff(v) > 0)
    assert np.allclose(p.deriv(t[1:-1]), (p(t[2:]) - p(t[:-2])) / (t[2] - t[0]), rtol=1e-3, atol=1e-12)


def test_algebraic_profile_has_no_cancellation_far_left():
    # oracle: 50-digit evaluation of a (1 + t / sqrt(1 + t^2))
    p = Profile("algebraic")
    mpmath.mp.dps = 50
    for t in (-10.0, -1e3, -1e6):
        exact = float(mpmath.mpf(p.a) * (1 + mpmath.mpf(t) / mpmath.sqrt(1 + mpmath.mpf(t) ** 2)))
        assert float(p(t)) == pytest.approx(exact, rel=1e-12)


def test_profile_validation():
    with pytest.raises(ValueError):
        Profile("cubic")
    with pytest.raises(ValueError):
        Profile("tanh", a=0.0)
    with pytest.raises(ValueError):
        MapSpec.counterexample(a=10.0)


# -- maps ----------------------------------------------------------------------


def test_map_validation():
    with pytest.raises(ValueError, match="n <= m"):
        MapSpec("identity", 3, 2, Box((0, 0, 0), (1, 1, 1)))
    with pytest.raises(ValueError):
        MapSpec.from_json({"kind": "warp", "domain": {"lo": [0, 0], "hi": [1, 1]}})
    with pytest.raises(ValueError):
        MapSpec("linear", 2, 3, Box((0, 0), (1, 1)), {"M": [[1, 0]]})
    with pytest.raises(ValueError, match="unknown symbols"):
        MapSpec.graph("x1 + y").jacobian(np.zeros(2))


def test_map_json_roundtrip():
    f = MapSpec.counterexample(profile="tanh")
    g = MapSpec.from_json(f.to_json())
    X = np.random.default_rng(0).uniform(-2, 2, (10, 2))
    assert np.array_equal(f(X), g(X))


MAPS = [
    MapSpec.counterexample(),
    MapSpec.exp_plane(),
    MapSpec.cylinder(),
    MapSpec.graph("sin(x1) * x2**2", (-1, -1), (1, 1)),
    MapSpec.linear([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]], (-1, -1), (1, 1)),
    MapSpec("user-expression", 2, 3, Box((-1, -1), (1, 1)), {"components": ["x1*x2", "exp(x1)", "cos(x2)"]}),
]


@pytest.mark.parametrize("fmap", MAPS, ids=lambda f: f.kind)
@given(st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_closed_form_differential_matches_central_differences(fmap, s, t):
    lo, hi = np.asarray(fmap.domain.lo), np.asarray(fmap.domain.hi)
    x = lo + (hi - lo) * np.array([s, t])
    D = differential(fmap, x).Df
    F = differential(fmap, x, method="fd").Df
    assert np.allclose(D, F, rtol=1e-6, atol=1e-6 * (1 + np.abs(D).max()))


def test_fd_error_is_second_order():
    f = MapSpec.counterexample()
    x = np.array([0.3, -0.7])
    exact = f.jacobian(x)
    errs = [np.abs(fd_jacobian(f, x, h) - exact).max() for h in (1e-2, 5e-3, 2.5e-3)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(3.5 < r < 4.5 for r in ratios)


def test_differential_near_boundary_names_axis():
    f = MapSpec.identity()
    with pytest.raises(ValueError, match="axis 2"):
        differential(f, np.array([0.5, 1.0]))


# -- distortion ----------------------------------------------------------------


@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=6, max_size=6))
def test_cb_jacobian_equals_product_of_singular_values(vals):
    D = np.asarray(vals).reshape(3, 2)
    s = np.linalg.svd(D, compute_uv=False)
    assert cb_jacobian(D) == pytest.approx(s[0] * s[1], rel=1e-7, abs=1e-7)
    assert cb_jacobian(D) <= operator_norm(D) ** 2 * (1 + 1e-12) + 1e-12


def test_cb_jacobian_detects_inconsistency(monkeypatch):
    import qclab.jetcalc as jc

    monkeypatch.setattr(jc, "all_minors", lambda D: np.zeros(D.shape[:-2] + (3,)) + 5.0)
    with pytest.raises(ConsistencyError):
        jc.cb_jacobian(np.eye(3, 2))


def test_control_maps_have_unit_or_forced_distortion():
    grid = GridDomain(Box((0, 0), (1, 1)), 16)
    ident = distortion_scan(MapSpec.identity(), ConstantForm.simple((1, 2), 2), grid)
    assert ident.ess_sup_K == 1.0 and ident.degenerate_fraction == 0.0
    stretch = MapSpec.linear([[2.0, 0.0], [0.0, 1.0]])
    assert distortion_scan(stretch, ConstantForm.simple((1, 2), 2), grid).ess_sup_K == pytest.approx(2.0)


def test_degenerate_points_and_all_degenerate_error():
    assert pointwise_distortion(ConstantForm.simple((1, 2), 2), np.diag([1.0, -1.0])) is None
    flip = MapSpec.linear([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="nonpositive everywhere"):
        distortion_scan(flip, ConstantForm.simple((1, 2), 2), GridDomain(Box((0, 0), (1, 1)), 8))
    cyl = MapSpec.cylinder((-1, 0), (2, 1))
    rep = distortion_scan(cyl, ConstantForm(2, 3, (((1, 3), -1.0),)), GridDomain(cyl.domain, 30))
    assert 0 < rep.degenerate_fraction < 0.5
    assert np.all(rep.degenerate_points[:, 0] < 0)


def _counterexample_K_oracle(f, X):
    # closed-form eigenvalues of the 2x2 Gram matrix e^{2x1} [[1+p^2, p q], [p q, 1+q^2]]
    p, q = f.profile(X[:, 1]), f.profile.deriv(X[:, 1])
    tr = 2 + p * p + q * q
    det = (1 + p * p) * (1 + q * q) - (p * q) ** 2
    lam = (tr + np.sqrt(tr * tr - 4 * det)) / 2
    return lam  # |Df|^2 / (star f* omega) with star = e^{2 x1}


def test_counterexample_distortion_against_closed_form():
    f = MapSpec.counterexample()
    grid = GridDomain(f.domain, 64)
    rep = distortion_scan(f, W12, grid)
    assert np.allclose(rep.K, _counterexample_K_oracle(f, rep.x), rtol=1e-12)
    assert np.allclose(rep.star, np.exp(2 * rep.x[:, 0]), rtol=1e-12)
    assert rep.ess_sup_K <= 2 + f.profile.sup_bound(-3, 3)


@given(coord, coord)
def test_pointwise_K_at_least_one(a, b):
    f = MapSpec.counterexample()
    K = pointwise_distortion(W12, f.jacobian(np.array([a, b])), 1.0)
    assert K >= 1.0 - 1e-12


def test_area_measure_oracles():
    assert area_measure(MapSpec.cylinder(), GridDomain(Box((0, 0), (math.pi, 1)), 32)) == pytest.approx(math.pi, rel=1e-12)
    # exp-plane: area of {1 <= |z| <= e, 0 <= arg <= pi} = pi (e^2 - 1) / 2
    f = MapSpec.exp_plane((0, 0), (1, math.pi))
    assert area_measure(f, GridDomain(f.domain, 200)) == pytest.approx(math.pi * (math.e**2 - 1) / 2, rel=1e-4)
