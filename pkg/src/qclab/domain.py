"""Axis-aligned boxes and cell grids in R^n."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("box corners must have equal, nonzero length")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} -> {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return np.subtract(self.hi, self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x, margin: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.add(self.lo, margin)) and np.all(x <= np.subtract(self.hi, margin)))

    def scaled(self, factor: float) -> "Box":
        return Box(tuple(factor * v for v in self.lo), tuple(factor * v for v in self.hi))

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


MaskFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GridDomain:
    """A box split into ``resolution`` cells per axis, optionally masked.

    ``mask`` receives cell centers of shape (N, n) and returns a boolean
    array; cells where it is False are not part of the domain.
    """

    box: Box
    resolution: tuple[int, ...]
    mask: MaskFn | None = field(default=None, compare=False)
    mask_name: str = ""

    def __post_init__(self):
        res = tuple(int(r) for r in np.broadcast_to(self.resolution, (self.box.dim,)))
        if any(r < 4 for r in res):
            raise ValueError(f"resolution must be >= 4 per axis, got {res}")
        object.__setattr__(self, "resolution", res)

    @classmethod
    def rectangle(cls, lo: Sequence[float], hi: Sequence[float], resolution) -> "GridDomain":
        return cls(Box(tuple(lo), tuple(hi)), resolution)

    @classmethod
    def annulus(cls, r_inner: float, r_outer: float, resolution: int) -> "GridDomain":
        """Cells of the square [-R, R]^2 whose centers satisfy r <= |x| <= R."""

        def keep(c):
            rad = np.hypot(c[:, 0], c[:, 1])
            return (rad >= r_inner) & (rad <= r_outer)

        box = Box((-r_outer, -r_outer), (r_outer, r_outer))
        return cls(box, (resolution, resolution), keep, f"annulus {r_inner} {r_outer}")

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def spacing(self) -> np.ndarray:
        return self.box.widths / np.asarray(self.resolution)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    def axis_centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return self.box.lo[axis] + h * (np.arange(self.resolution[axis]) + 0.5)

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.linspace(self.box.lo[axis], self.box.hi[axis], self.resolution[axis] + 1)

    def centers(self) -> np.ndarray:
        """All cell centers in C order, shape (prod(resolution), n)."""
        axes = [self.axis_centers(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def active(self) -> np.ndarray:
        """Boolean flag per cell (C order)."""
        if self.mask is None:
            return np.ones(int(np.prod(self.resolution)), dtype=bool)
        return np.asarray(self.mask(self.centers()), dtype=bool)

    def neighbor_offsets(self, reach: int = 1) -> list[tuple[int, ...]]:
        """Primitive integer steps with max-norm <= ``reach``, each undirected
        step listed once (first nonzero component positive).

        ``reach=1`` is the (3^n - 1)-neighborhood, ``reach=2`` adds the
        knight moves in 2-d.
        """
        offs = []
        rng = range(-reach, reach + 1)
        for off in itertools.product(rng, repeat=self.dim):
            if not any(off) or next(v for v in off if v != 0) < 0:
                continue
            if np.gcd.reduce(np.abs(off)) != 1:
                continue
            offs.append(off)
        return offs

    def scaled(self, factor: float) -> "GridDomain":
        mask = None
        if self.mask is not None:
            inner = self.mask
            mask = lambda c: inner(c / factor)  # noqa: E731
        return GridDomain(self.box.scaled(factor), self.resolution, mask, self.mask_name)

    def refined(self, factor: int = 2) -> "GridDomain":
        return GridDomain(self.box, tuple(factor * r for r in self.resolution), self.mask, self.mask_name)

    def with_resolution(self, resolution) -> "GridDomain":
        return GridDomain(self.box, resolution, self.mask, self.mask_name)
