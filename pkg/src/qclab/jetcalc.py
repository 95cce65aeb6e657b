"""Parametrized maps f: Omega in R^n -> R^m, their jets, distortion and area."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp

from .domain import Box, GridDomain
from .forms import ConstantForm, all_minors, comass, pullback_star

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# height profiles for the spiral-staircase map


@dataclass(frozen=True)
class Profile:
    """Smooth, bounded, increasing phi: R -> (0, 2a) with phi(t) -> 0 as
    t -> -inf.

    ``algebraic``: a (1 + t / sqrt(1 + t^2)), decays like a / (2 t^2).
    ``tanh``: a (1 + tanh t), decays like 2a e^{2t}.
    """

    kind: str = "algebraic"
    a: float = 1.0 / (40.0 * np.e)

    def __post_init__(self):
        if self.kind not in ("algebraic", "tanh"):
            raise ValueError(f"unknown profile {self.kind!r}")
        if not self.a > 0:
            raise ValueError("profile amplitude must be positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "tanh":
            return self.a * (1.0 + np.tanh(t))
        # 1 + t/sqrt(1+t^2) = 1/(sqrt(1+t^2)(sqrt(1+t^2) - t)) avoids cancellation for t << 0
        s = np.sqrt(1.0 + t * t)
        return np.where(t < 0, self.a / (s * (s - t)), self.a * (1.0 + t / s))

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "tanh":
            return self.a / np.cosh(t) ** 2
        return self.a * (1.0 + t * t) ** -1.5

    def sup_bound(self, lo: float, hi: float, samples: int = 20001) -> float:
        """sup of (phi + phi')^2 on [lo, hi] (dense sampling plus the
        bounded maximizer around the best sample)."""
        from scipy.optimize import minimize_scalar

        t = np.linspace(lo, hi, samples)
        g = (self(t) + self.deriv(t)) ** 2
        k = int(np.argmax(g))
        a, b = t[max(k - 1, 0)], t[min(k + 1, samples - 1)]
        best = float(g[k])
        if b > a:
            res = minimize_scalar(lambda s: -float((self(s) + self.deriv(s)) ** 2), bounds=(a, b), method="bounded")
            best = max(best, -float(res.fun))
        return best

    def to_json(self) -> dict:
        return {"kind": self.kind, "a": self.a}


# ---------------------------------------------------------------------------
# maps


MAP_KINDS = ("identity", "linear", "graph", "counterexample", "exp-plane", "cylinder", "user-expression")


@dataclass(frozen=True)
class MapSpec:
    """A builtin or user-supplied map on a box.

    ``params`` by kind:

    * ``identity``: none (m = n; ``m > n`` pads with zeros)
    * ``linear``: ``M`` (m x n matrix), optional ``offset`` (length m)
    * ``graph``: ``height`` expression in x1..xn; f(x) = (x, height(x))
    * ``counterexample``: ``profile`` ("algebraic" | "tanh") and ``a``;
      f(x1, x2) = (e^x1 cos x2, e^x1 sin x2, phi(x2) e^x1)
    * ``exp-plane``: (e^x1 cos x2, e^x1 sin x2, 0)
    * ``cylinder``: (cos x1, sin x1, x2)
    * ``user-expression``: ``components``, a list of m expressions in x1..xn
    """

    kind: str
    n: int
    m: int
    domain: Box
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}; expected one of {', '.join(MAP_KINDS)}")
        n, m = int(self.n), int(self.m)
        if n < 1 or n > m:
            raise ValueError(f"map needs 1 <= n <= m, got n={n}, m={m}")
        if self.domain.dim != n:
            raise ValueError(f"domain is {self.domain.dim}-dimensional, map has n={n}")
        fixed = {"counterexample": (2, 3), "exp-plane": (2, 3), "cylinder": (2, 3)}
        if self.kind in fixed and (n, m) != fixed[self.kind]:
            raise ValueError(f"{self.kind} map requires (n, m) = {fixed[self.kind]}")
        if self.kind == "graph" and m != n + 1:
            raise ValueError("graph map requires m = n + 1")
        if self.kind == "linear":
            M = np.asarray(self.params.get("M"), dtype=float)
            if M.shape != (m, n):
                raise ValueError(f"linear map matrix must have shape ({m}, {n}), got {M.shape}")
        if self.kind == "counterexample":
            prof = self.profile
            if not prof(-2 * np.pi) * np.e < 0.1:
                raise ValueError("profile must satisfy phi(-2 pi) e < 1/10")
        if self.kind == "user-expression" and len(self.params.get("components", ())) != m:
            raise ValueError(f"user-expression map needs {m} components")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls, lo=(0.0, 0.0), hi=(1.0, 1.0), m: int | None = None) -> "MapSpec":
        box = Box(tuple(lo), tuple(hi))
        return cls("identity", box.dim, m or box.dim, box)

    @classmethod
    def linear(cls, M, lo=(0.0, 0.0), hi=(1.0, 1.0), offset=None) -> "MapSpec":
        M = np.asarray(M, dtype=float)
        params = {"M": M.tolist()}
        if offset is not None:
            params["offset"] = list(map(float, offset))
        return cls("linear", M.shape[1], M.shape[0], Box(tuple(lo), tuple(hi)), params)

    @classmethod
    def counterexample(cls, lo=(-3.0, -3.0), hi=(3.0, 3.0), profile: str = "algebraic", a: float | None = None):
        params = {"profile": profile, "a": float(a) if a is not None else 1.0 / (40.0 * np.e)}
        return cls("counterexample", 2, 3, Box(tuple(lo), tuple(hi)), params)

    @classmethod
    def exp_plane(cls, lo=(-1.0, -1.0), hi=(1.0, 1.0)) -> "MapSpec":
        return cls("exp-plane", 2, 3, Box(tuple(lo), tuple(hi)))

    @classmethod
    def cylinder(cls, lo=(0.0, 0.0), hi=(np.pi, 1.0)) -> "MapSpec":
        return cls("cylinder", 2, 3, Box(tuple(lo), tuple(hi)))

    @classmethod
    def graph(cls, height: str, lo=(0.0, 0.0), hi=(1.0, 1.0)) -> "MapSpec":
        box = Box(tuple(lo), tuple(hi))
        return cls("graph", box.dim, box.dim + 1, box, {"height": height})

    @classmethod
    def from_json(cls, data: dict) -> "MapSpec":
        try:
            kind = data["kind"]
            dom = data["domain"]
            box = Box(tuple(dom["lo"]), tuple(dom["hi"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed map description: missing {exc}") from exc
        params = {k: v for k, v in data.items() if k not in ("kind", "n", "m", "domain")}
        n = int(data.get("n", box.dim))
        if kind == "linear":
            M = np.asarray(params.get("M"), dtype=float)
            m_default = M.shape[0] if M.ndim == 2 else n
        elif kind in ("counterexample", "exp-plane", "cylinder"):
            m_default = 3
        elif kind == "graph":
            m_default = n + 1
        elif kind == "user-expression":
            m_default = len(params.get("components", ()))
        else:
            m_default = n
        return cls(kind, n, int(data.get("m", m_default)), box, params)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "n": self.n, "m": self.m, "domain": self.domain.to_json()}
        out.update(self.params)
        return out

    def with_domain(self, lo, hi) -> "MapSpec":
        return MapSpec(self.kind, self.n, self.m, Box(tuple(lo), tuple(hi)), dict(self.params))

    # -- evaluation ---------------------------------------------------------

    @cached_property
    def profile(self) -> Profile:
        return Profile(self.params.get("profile", "algebraic"), float(self.params.get("a", 1.0 / (40.0 * np.e))))

    @cached_property
    def _symbolic(self):
        xs = sp.symbols(" ".join(f"x{i + 1}" for i in range(self.n)))
        xs = (xs,) if self.n == 1 else tuple(xs)
        local = {f"x{i + 1}": s for i, s in enumerate(xs)}
        if self.kind == "graph":
            comps = [*xs, sp.sympify(self.params["height"], locals=local)]
        else:
            comps = [sp.sympify(c, locals=local) for c in self.params["components"]]
        extra = set().union(*(c.free_symbols for c in comps)) - set(xs)
        if extra:
            raise ValueError(f"expression uses unknown symbols {sorted(map(str, extra))}")
        jac = sp.Matrix(comps).jacobian(sp.Matrix(xs))
        f = sp.lambdify(xs, comps, "numpy")
        J = sp.lambdify(xs, jac.tolist(), "numpy")
        return f, J

    def __call__(self, X) -> np.ndarray:
        """Evaluate at points of shape (..., n); returns (..., m)."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n:
            raise ValueError(f"points must have last axis {self.n}")
        k = self.kind
        if k == "identity":
            out = np.zeros(X.shape[:-1] + (self.m,))
            out[..., : self.n] = X
            return out
        if k == "linear":
            out = X @ np.asarray(self.params["M"], dtype=float).T
            return out + np.asarray(self.params.get("offset", np.zeros(self.m)), dtype=float)
        x1, x2 = (X[..., 0], X[..., 1]) if self.n >= 2 else (X[..., 0], None)
        if k in ("counterexample", "exp-plane"):
            r = np.exp(x1)
            z = self.profile(x2) * r if k == "counterexample" else np.zeros_like(r)
            return np.stack([r * np.cos(x2), r * np.sin(x2), z], axis=-1)
        if k == "cylinder":
            return np.stack([np.cos(x1), np.sin(x1), x2], axis=-1)
        f, _ = self._symbolic
        cols = [np.broadcast_to(np.asarray(c, dtype=float), X.shape[:-1]) for c in f(*np.moveaxis(X, -1, 0))]
        return np.stack(cols, axis=-1)

    def jacobian(self, X) -> np.ndarray:
        """Closed-form differential at points (..., n); returns (..., m, n)."""
        X = np.asarray(X, dtype=float)
        shape = X.shape[:-1]
        k = self.kind
        if k == "identity":
            return np.broadcast_to(np.eye(self.m, self.n), shape + (self.m, self.n)).copy()
        if k == "linear":
            return np.broadcast_to(np.asarray(self.params["M"], dtype=float), shape + (self.m, self.n)).copy()
        D = np.zeros(shape + (self.m, self.n))
        if k in ("counterexample", "exp-plane", "cylinder"):
            x1, x2 = X[..., 0], X[..., 1]
        if k in ("counterexample", "exp-plane"):
            r = np.exp(x1)
            c, s = np.cos(x2), np.sin(x2)
            D[..., 0, 0], D[..., 0, 1] = r * c, -r * s
            D[..., 1, 0], D[..., 1, 1] = r * s, r * c
            if k == "counterexample":
                D[..., 2, 0] = self.profile(x2) * r
                D[..., 2, 1] = self.profile.deriv(x2) * r
            return D
        if k == "cylinder":
            D[..., 0, 0] = -np.sin(x1)
            D[..., 1, 0] = np.cos(x1)
            D[..., 2, 1] = 1.0
            return D
        _, J = self._symbolic
        rows = J(*np.moveaxis(X, -1, 0))
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                D[..., i, j] = v
        return D


# ---------------------------------------------------------------------------
# jets


@dataclass
class Jet:
    x: np.ndarray
    value: np.ndarray
    Df: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        self.Df = np.asarray(self.Df, dtype=float)
        if self.Df.shape != (self.value.shape[-1], self.x.shape[-1]):
            raise ValueError(f"Df has shape {self.Df.shape}, expected {(self.value.shape[-1], self.x.shape[-1])}")
        if not (np.all(np.isfinite(self.Df)) and np.all(np.isfinite(self.value))):
            raise ValueError("jet has non-finite entries")


def default_step(x) -> float:
    return 1e-5 * (1.0 + float(np.linalg.norm(x)))


def fd_jacobian(fmap: MapSpec, X, h) -> np.ndarray:
    """Central differences (f(x + h e_j) - f(x - h e_j)) / 2h at points (..., n).

    ``h`` is a scalar or an array broadcastable to the point shape (...).
    """
    X = np.asarray(X, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), X.shape[:-1])[..., None]
    cols = []
    for j in range(fmap.n):
        e = np.zeros(fmap.n)
        e[j] = 1.0
        cols.append((fmap(X + h * e) - fmap(X - h * e)) / (2 * h))
    return np.stack(cols, axis=-1)


def differential(fmap: MapSpec, x, h: float | None = None, method: str = "analytic") -> Jet:
    """Jet of ``fmap`` at ``x``.

    ``method="analytic"`` returns the closed-form differential; ``"fd"``
    returns central differences with step ``h`` (default 1e-5 (1 + |x|)).
    In both cases ``x`` must lie inside the domain with margin ``h``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (fmap.n,):
        raise ValueError(f"point must have {fmap.n} coordinates")
    h = default_step(x) if h is None else float(h)
    lo, hi = np.asarray(fmap.domain.lo), np.asarray(fmap.domain.hi)
    for k in range(fmap.n):
        if x[k] - h < lo[k] or x[k] + h > hi[k]:
            raise ValueError(f"point too close to the domain boundary along axis {k + 1} (x{k + 1}={x[k]:g}, step {h:g})")
    if method == "analytic":
        D = fmap.jacobian(x)
    elif method == "fd":
        D = fd_jacobian(fmap, x, h)
    else:
        raise ValueError(f"unknown method {method!r}")
    return Jet(x, fmap(x), D)


def operator_norm(Df) -> np.ndarray | float:
    """Largest singular value of (..., m, n) matrices."""
    D = np.asarray(getattr(Df, "Df", Df), dtype=float)
    s = np.linalg.svd(D, compute_uv=False)[..., 0]
    return float(s) if s.ndim == 0 else s


class ConsistencyError(RuntimeError):
    pass


def cb_jacobian(Df) -> np.ndarray | float:
    """sqrt(det(Df^T Df)), cross-checked against sqrt(sum_I J_I^2).

    The two squared values must agree to 1e-10 relative (plus a rounding
    floor proportional to |Df|^(2n)); otherwise :class:`ConsistencyError`.
    """
    D = np.asarray(getattr(Df, "Df", Df), dtype=float)
    n = D.shape[-1]
    G = np.swapaxes(D, -1, -2) @ D
    gram = np.linalg.det(G)
    minors_sq = np.sum(all_minors(D) ** 2, axis=-1)
    scale = np.linalg.norm(D, axis=(-2, -1)) ** (2 * n)
    bad = np.abs(gram - minors_sq) > 1e-10 * np.maximum(gram, minors_sq) + 1e3 * np.finfo(float).eps * scale
    if np.any(bad):
        raise ConsistencyError(f"Gram determinant and minor sum disagree at {int(np.sum(bad))} point(s)")
    out = np.sqrt(np.maximum(gram, 0.0))
    return float(out) if out.ndim == 0 else out


def pointwise_distortion(form: ConstantForm, jet, form_comass: float | None = None) -> float | None:
    """K(x) = comass * |Df|^n / (star f* omega), or ``None`` when the
    pullback density is <= 0."""
    c = float(comass(form).value) if form_comass is None else float(form_comass)
    D = np.asarray(getattr(jet, "Df", jet), dtype=float)
    star = pullback_star(form, D)
    if not star > 0:
        return None
    return c * operator_norm(D) ** form.n / star


# ---------------------------------------------------------------------------
# scans


@dataclass
class DistortionReport:
    x: np.ndarray
    K: np.ndarray  # nan at degenerate samples
    star: np.ndarray
    op_norm: np.ndarray
    cb_jac: np.ndarray
    comass: float
    ess_sup_K: float
    p999_K: float
    empirical_C: float
    degenerate: np.ndarray  # boolean mask

    @property
    def degenerate_points(self) -> np.ndarray:
        return self.x[self.degenerate]

    @property
    def degenerate_fraction(self) -> float:
        return float(np.mean(self.degenerate)) if self.degenerate.size else 0.0

    def to_json(self) -> dict:
        return {
            "samples": int(len(self.K)),
            "comass": self.comass,
            "essSupK": self.ess_sup_K,
            "p999K": self.p999_K,
            "empiricalC": self.empirical_C,
            "degenerateCount": int(self.degenerate.sum()),
            "degenerateFraction": self.degenerate_fraction,
            "degeneratePoints": self.degenerate_points[:1000].tolist(),
        }

    def csv_rows(self):
        header = [f"x{i + 1}" for i in range(self.x.shape[1])] + ["K", "starPullback", "opNorm", "cbJac"]
        rows = np.column_stack([self.x, self.K, self.star, self.op_norm, self.cb_jac])
        return header, rows


def distortion_scan(fmap: MapSpec, form: ConstantForm, grid: GridDomain, form_comass: float | None = None) -> DistortionReport:
    """Pointwise distortion at the centers of the active grid cells."""
    if form.m != fmap.m or form.n != fmap.n:
        raise ValueError(f"form is an {form.n}-form on R^{form.m}, map goes R^{fmap.n} -> R^{fmap.m}")
    if not (np.all(np.asarray(grid.box.lo) >= np.asarray(fmap.domain.lo) - 1e-12)
            and np.all(np.asarray(grid.box.hi) <= np.asarray(fmap.domain.hi) + 1e-12)):
        raise ValueError("scan grid is not contained in the map domain")
    c = float(comass(form).value) if form_comass is None else float(form_comass)
    X = grid.centers()[grid.active()]
    D = fmap.jacobian(X)
    star = pullback_star(form, D)
    op = operator_norm(D)
    cb = cb_jacobian(D)
    n = form.n
    # Hadamard: product of singular values <= largest^n
    if np.any(cb > op**n * (1 + 1e-12) + 1e-300):
        raise ConsistencyError("Cauchy-Binet Jacobian exceeds |Df|^n")
    degenerate = ~(star > 0)
    if np.all(degenerate):
        raise ValueError("form pullback nonpositive everywhere")
    K = np.full(len(X), np.nan)
    K[~degenerate] = c * op[~degenerate] ** n / star[~degenerate]
    good = K[~degenerate]
    return DistortionReport(
        x=X,
        K=K,
        star=star,
        op_norm=op,
        cb_jac=cb,
        comass=c,
        ess_sup_K=float(good.max()),
        p999_K=float(np.percentile(good, 99.9)),
        empirical_C=float(np.max(cb[~degenerate] / star[~degenerate])),
        degenerate=degenerate,
    )


def area_measure(fmap: MapSpec, region: GridDomain) -> float:
    """Riemann sum of sqrt(det Df^T Df) over the active cell centers."""
    X = region.centers()[region.active()]
    return float(np.sum(cb_jacobian(fmap.jacobian(X))) * region.cell_volume)
