"""Constant-coefficient n-forms in R^m: minors, pullbacks and comass."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Strictly increasing 1-based index tuple ``(i1, ..., in)``."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("empty multi-index")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"multi-index {idx} is not strictly increasing")
        if idx[0] < 1:
            raise ValueError(f"multi-index {idx} has entries below 1")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def check(self, m: int) -> None:
        if self.indices[-1] > m:
            raise ValueError(f"multi-index {self.indices} out of range for R^{m}")

    @property
    def rows(self) -> tuple[int, ...]:
        """0-based row positions."""
        return tuple(i - 1 for i in self.indices)

    def __str__(self) -> str:
        return "dx" + "^dx".join(str(i) for i in self.indices)


@lru_cache(maxsize=None)
def all_multi_indices(n: int, m: int) -> tuple[MultiIndex, ...]:
    """All increasing n-subsets of {1..m} in lexicographic order."""
    return tuple(MultiIndex(tuple(c)) for c in itertools.combinations(range(1, m + 1), n))


def _det(A: np.ndarray) -> np.ndarray:
    """Determinant over the last two axes; explicit formulas for n <= 3."""
    n = A.shape[-1]
    if n == 1:
        return A[..., 0, 0].copy()
    if n == 2:
        return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    if n == 3:
        return (
            A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
            - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
            + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
        )
    return np.linalg.det(A)


def minor(D: np.ndarray, index: MultiIndex) -> np.ndarray:
    """J_I(D): determinant of the rows ``index`` of the (..., m, n) matrix D."""
    D = np.asarray(D, dtype=float)
    return _det(D[..., list(index.rows), :])


def all_minors(D: np.ndarray) -> np.ndarray:
    """All maximal minors of (..., m, n) matrices, ordered as
    :func:`all_multi_indices`; shape (..., C(m, n))."""
    D = np.asarray(D, dtype=float)
    m, n = D.shape[-2:]
    if n > m:
        raise ValueError(f"matrix of shape {m}x{n} has no maximal minors")
    return np.stack([minor(D, I) for I in all_multi_indices(n, m)], axis=-1)


@dataclass(frozen=True)
class ConstantForm:
    """``sum_I c_I dx_I`` with constant coefficients, an n-form on R^m.

    ``coeffs`` is stored as a sorted tuple of ``(MultiIndex, c)`` with zero
    coefficients dropped.
    """

    n: int
    m: int
    coeffs: tuple[tuple[MultiIndex, float], ...]

    def __post_init__(self):
        n, m = int(self.n), int(self.m)
        if n < 1 or n > m:
            raise ValueError(f"need 1 <= n <= m, got n={n}, m={m}")
        raw = self.coeffs.items() if isinstance(self.coeffs, dict) else self.coeffs
        merged: dict[MultiIndex, float] = {}
        for I, c in raw:
            I = I if isinstance(I, MultiIndex) else MultiIndex(tuple(I))
            if len(I) != n:
                raise ValueError(f"multi-index {I.indices} has length {len(I)}, expected {n}")
            I.check(m)
            if not np.isfinite(c):
                raise ValueError(f"coefficient of {I} is not finite")
            merged[I] = merged.get(I, 0.0) + float(c)
        items = tuple(sorted((I, c) for I, c in merged.items() if c != 0.0))
        if not items:
            raise ValueError("form vanishes identically")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "coeffs", items)

    @classmethod
    def simple(cls, indices, m: int, c: float = 1.0) -> "ConstantForm":
        return cls(len(indices), m, ((MultiIndex(tuple(indices)), c),))

    @classmethod
    def from_json(cls, data: dict) -> "ConstantForm":
        try:
            terms = [(tuple(t["I"]), float(t["c"])) for t in data["coeffs"]]
            return cls(int(data["n"]), int(data["m"]), tuple(terms))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed form description: {exc}") from exc

    def to_json(self) -> dict:
        return {"n": self.n, "m": self.m, "coeffs": [{"I": list(I.indices), "c": c} for I, c in self.coeffs]}

    @property
    def is_simple(self) -> bool:
        return len(self.coeffs) == 1

    def dense(self) -> np.ndarray:
        """Coefficient vector over :func:`all_multi_indices`."""
        index = {I: k for k, I in enumerate(all_multi_indices(self.n, self.m))}
        out = np.zeros(len(index))
        for I, c in self.coeffs:
            out[index[I]] = c
        return out

    def scaled(self, factor: float) -> "ConstantForm":
        return ConstantForm(self.n, self.m, tuple((I, factor * c) for I, c in self.coeffs))

    def __call__(self, V: np.ndarray) -> np.ndarray:
        """Evaluate on the columns of (..., m, n) frames."""
        V = np.asarray(V, dtype=float)
        out = np.zeros(V.shape[:-2])
        for I, c in self.coeffs:
            out = out + c * minor(V, I)
        return out

    def __str__(self) -> str:
        return " + ".join(f"{c:g}*{I}" for I, c in self.coeffs)


def pullback_star(form: ConstantForm, Df) -> np.ndarray | float:
    """Density of ``f* omega`` against dx1^...^dxn: ``sum_I c_I J_I(Df)``.

    ``Df`` may be a :class:`~qclab.jetcalc.Jet` or an array of shape
    (..., m, n).
    """
    D = np.asarray(getattr(Df, "Df", Df), dtype=float)
    if D.shape[-2:] != (form.m, form.n):
        raise ValueError(f"differential of shape {D.shape[-2:]} does not match a {form.n}-form on R^{form.m}")
    val = form(D)
    return float(val) if val.ndim == 0 else val


# ---------------------------------------------------------------------------
# comass


@dataclass(frozen=True)
class ComassBudget:
    starts: int = 64
    max_steps: int = 2000
    tol: float = 1e-8
    samples: int = 4096
    seed: int = 0


@dataclass
class ComassResult:
    """``value`` is attained at ``frame`` (so it is a certified lower bound
    of the comass); ``upper_bound`` is sum |c_I|."""

    value: float
    frame: np.ndarray
    converged: bool
    method: str
    upper_bound: float
    start_values: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def __float__(self) -> float:
        return self.value

    @property
    def lower_bound(self) -> float:
        return self.value


def _polar(V: np.ndarray) -> np.ndarray:
    U, _, Wt = np.linalg.svd(V, full_matrices=False)
    return U @ Wt


def _frame_gradient(form: ConstantForm, V: np.ndarray) -> np.ndarray:
    """Euclidean gradient of V -> form(V).  The form is linear in each
    column, so column j of the gradient is form evaluated with v_j replaced
    by each basis vector."""
    m, n = V.shape
    G = np.empty_like(V)
    trial = np.repeat(V[None], m, axis=0)
    for j in range(n):
        t = trial.copy()
        t[:, :, j] = np.eye(m)
        G[:, j] = form(t)
    return G


def _ascend(form: ConstantForm, V: np.ndarray, budget: ComassBudget) -> tuple[np.ndarray, float, bool]:
    """Projected gradient ascent of |form| over orthonormal frames.

    The form is linear in each column, so for column j the gradient g_j
    projected onto the orthogonal complement of the other columns and
    normalized is the exact maximizer along that block.  Sweeps over the
    columns until the frame moves less than ``budget.tol``.
    """
    V = _polar(V)
    if form(V) < 0:
        V[:, 0] *= -1
    n = V.shape[1]
    for _ in range(budget.max_steps):
        old = V.copy()
        for j in range(n):
            g = _frame_gradient(form, V)[:, j]
            others = np.delete(V, j, axis=1)
            g = g - others @ (others.T @ g)
            norm = np.linalg.norm(g)
            if norm > 0:
                V[:, j] = g / norm
        V = _polar(V)
        if np.linalg.norm(V - old) < budget.tol:
            return V, float(form(V)), True
    return V, float(form(V)), False


def comass(form: ConstantForm, budget: ComassBudget | None = None) -> ComassResult:
    """Comass: sup of |form(v1..vn)| over orthonormal frames.

    Single-term forms ``c dx_I`` return |c| exactly.  Otherwise the sup is
    approximated by projected gradient ascent from ``budget.starts`` random
    frames together with ``budget.samples`` random frames; the best value is
    returned with the frame attaining it.  ``converged`` is False if the best
    start ran out of steps or if fewer than two starts reached the best value.
    """
    budget = budget or ComassBudget()
    upper = float(sum(abs(c) for _, c in form.coeffs))
    if form.is_simple:
        (I, c), = form.coeffs
        frame = np.zeros((form.m, form.n))
        frame[list(I.rows), range(form.n)] = 1.0
        return ComassResult(abs(c), frame, True, "analytic", upper)

    rng = np.random.default_rng(budget.seed)
    m, n = form.m, form.n
    best_val, best_frame = -1.0, None
    if budget.samples:
        Q = np.linalg.qr(rng.standard_normal((budget.samples, m, n)))[0]
        vals = np.abs(form(Q))
        k = int(np.argmax(vals))
        best_val, best_frame = float(vals[k]), Q[k]

    finals, flags = [], []
    for _ in range(budget.starts):
        V, val, ok = _ascend(form, rng.standard_normal((m, n)), budget)
        finals.append(val)
        flags.append(ok)
        if val > best_val:
            best_val, best_frame = val, V
    finals = np.asarray(finals)
    # re-evaluate on the exactly orthonormalized frame so the value is attained
    best_frame = _polar(best_frame)
    best_val = float(abs(form(best_frame)))
    if finals.size:
        near = np.abs(finals - best_val) <= 1e-6 * max(best_val, 1.0)
        converged = bool(near.sum() >= 2 and all(f for f, nb in zip(flags, near) if nb))
    else:
        converged = False
    if not converged:
        logger.warning("comass search did not converge for %s (best %.10g)", form, best_val)
    return ComassResult(best_val, best_frame, converged, "search", upper, finals)


def two_form_comass(form: ConstantForm) -> float:
    """Comass of a 2-form via its skew matrix: the largest singular value.

    Independent of :func:`comass`; used as a cross-check.
    """
    if form.n != 2:
        raise ValueError("only defined for 2-forms")
    A = np.zeros((form.m, form.m))
    for I, c in form.coeffs:
        i, j = I.rows
        A[i, j] += c
        A[j, i] -= c
    return float(np.linalg.norm(A, 2))


def hadamard_bound(form_comass: float, Df) -> np.ndarray:
    """comass * product of the n largest singular values of Df."""
    D = np.asarray(getattr(Df, "Df", Df), dtype=float)
    s = np.linalg.svd(D, compute_uv=False)
    return form_comass * np.prod(s[..., : D.shape[-1]], axis=-1)
