from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qclab.forms import (
    ComassBudget,
    ConstantForm,
    MultiIndex,
    all_minors,
    all_multi_indices,
    comass,
    hadamard_bound,
    minor,
    pullback_star,
    two_form_comass,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_multi_index_validation():
    assert MultiIndex((1, 3)).rows == (0, 2)
    with pytest.raises(ValueError):
        MultiIndex((2, 1))
    with pytest.raises(ValueError):
        MultiIndex((0, 1))
    with pytest.raises(ValueError):
        MultiIndex((1, 4)).check(3)


def test_all_multi_indices_count():
    assert len(all_multi_indices(2, 4)) == 6
    assert all_multi_indices(1, 3)[0] == MultiIndex((1,))


@given(arrays(float, (4, 4), elements=finite))
def test_minor_matches_numpy_det(A):
    for n in (1, 2, 3, 4):
        rows = tuple(range(1, n + 1))
        want = np.linalg.det(A[:n, :n]) if n > 1 else A[0, 0]
        assert minor(A[:, :n], MultiIndex(rows)) == pytest.approx(want, abs=1e-9 * (1 + abs(want)))


@given(arrays(float, (5, 2), elements=finite))
def test_cauchy_binet_identity(D):
    # sum of squared maximal minors equals the Gram determinant
    J = all_minors(D)
    assert np.sum(J**2) == pytest.approx(np.linalg.det(D.T @ D), rel=1e-9, abs=1e-9)


def test_form_normalization_and_json_roundtrip():
    w = ConstantForm(2, 3, (((2, 3), 1.0), ((1, 2), 2.0), ((1, 2), -1.0), ((1, 3), 0.0)))
    assert [I.indices for I, _ in w.coeffs] == [(1, 2), (2, 3)]
    assert ConstantForm.from_json(w.to_json()) == w
    with pytest.raises(ValueError):
        ConstantForm(2, 3, (((1, 2), 1.0), ((1, 2), -1.0)))
    with pytest.raises(ValueError):
        ConstantForm(3, 2, (((1, 2, 3), 1.0),))
    with pytest.raises(ValueError):
        ConstantForm(2, 3, (((1,), 1.0),))


def test_pullback_star_of_identity_and_shape_check():
    w = ConstantForm.simple((1, 2), 3)
    D = np.array([[1.0, 0], [0, 1], [0, 0]])
    assert pullback_star(w, D) == 1.0
    with pytest.raises(ValueError):
        pullback_star(w, np.eye(2))


@given(arrays(float, (3, 2), elements=finite), arrays(float, (3,), elements=finite))
def test_pullback_is_linear_in_the_form(D, c):
    forms = [ConstantForm.simple(I.indices, 3) for I in all_multi_indices(2, 3)]
    total = sum(ci * pullback_star(f, D) for ci, f in zip(c, forms))
    if np.any(c != 0):
        mixed = ConstantForm(2, 3, tuple((f.coeffs[0][0], ci) for f, ci in zip(forms, c)))
        assert pullback_star(mixed, D) == pytest.approx(total, abs=1e-9)


def test_comass_simple_form_is_exact():
    res = comass(ConstantForm.simple((1, 2), 3, -2.5))
    assert res.value == 2.5 and res.converged and res.method == "analytic"


def test_comass_symplectic_form_against_skew_oracle():
    w = ConstantForm(2, 4, (((1, 2), 1.0), ((3, 4), 1.0)))
    res = comass(w)
    assert res.converged
    assert res.value == pytest.approx(two_form_comass(w), abs=1e-6)
    assert res.value == pytest.approx(1.0, abs=1e-6)
    # the reported frame attains the value
    F = res.frame
    assert np.allclose(F.T @ F, np.eye(2), atol=1e-12)
    assert abs(w(F)) == pytest.approx(res.value, rel=1e-12)


@given(arrays(float, (6,), elements=st.floats(-2, 2, allow_nan=False)).filter(lambda c: np.max(np.abs(c)) > 0.1))
def test_comass_of_two_forms_matches_spectral_oracle(c):
    w = ConstantForm(2, 4, tuple((I, ci) for I, ci in zip(all_multi_indices(2, 4), c)))
    res = comass(w, ComassBudget(starts=16, samples=256))
    assert res.value == pytest.approx(two_form_comass(w), rel=1e-6)
    assert res.value <= res.upper_bound + 1e-12


def test_comass_three_form_dominates_random_frames():
    coeffs = tuple((I, float(k % 3) - 1.0) for k, I in enumerate(all_multi_indices(3, 5)))
    w = ConstantForm(3, 5, tuple((I, c) for I, c in coeffs if c))
    res = comass(w)
    rng = np.random.default_rng(7)
    Q = np.linalg.qr(rng.standard_normal((20000, 5, 3)))[0]
    assert np.max(np.abs(w(Q))) <= res.value + 1e-9
    assert res.value <= res.upper_bound


@given(st.floats(0.1, 10))
def test_comass_is_homogeneous(t):
    w = ConstantForm(2, 4, (((1, 2), 1.0), ((3, 4), 0.5), ((1, 3), 0.25)))
    base = comass(w, ComassBudget(starts=16, samples=256)).value
    assert comass(w.scaled(t), ComassBudget(starts=16, samples=256)).value == pytest.approx(t * base, rel=1e-6)


@given(arrays(float, (4, 2), elements=finite))
def test_pullback_bounded_by_hadamard(D):
    w = ConstantForm(2, 4, (((1, 2), 1.0), ((3, 4), 1.0)))
    assert abs(pullback_star(w, D)) <= hadamard_bound(1.0, D) * (1 + 1e-9) + 1e-12


def test_form_evaluation_is_alternating():
    w = ConstantForm(2, 3, (((1, 2), 1.0), ((2, 3), 3.0)))
    rng = np.random.default_rng(1)
    for _ in range(10):
        V = rng.standard_normal((3, 2))
        assert w(V[:, ::-1]) == pytest.approx(-w(V))
    for perm in itertools.permutations(range(2)):
        V = np.eye(3)[:, list(perm)]
        assert abs(w(V)) in (0.0, 1.0)
