"""Discrete n-modulus of curve families on cell grids and image surfaces."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .domain import GridDomain
from .pathgraph import ModulusSolution, PathGraph, solve_modulus

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# boundary selectors


_EDGE_NAMES = {
    "left-edge": (0, "lo"),
    "right-edge": (0, "hi"),
    "bottom-edge": (1, "lo"),
    "top-edge": (1, "hi"),
}
_CIRCLE_RE = re.compile(r"^circle\s+r\s*=\s*([-+0-9.eE]+)$")


def select_cells(grid: GridDomain, selector) -> tuple[np.ndarray, np.ndarray]:
    """Resolve a boundary selector on a grid.

    Returns flat (C order) indices of the selected active cells and, for
    each, the distance from its center to the selected boundary (the part
    of a path between boundary and cell center).

    Selectors: ``"left-edge"``, ``"right-edge"``, ``"bottom-edge"``,
    ``"top-edge"``, ``"face a=<axis> side=lo|hi"``, ``"circle r=<R>"`` and
    ``{"cells": [[i, j, ...], ...]}`` (zero stub length).
    """
    active = grid.active()
    centers = grid.centers()
    if isinstance(selector, dict):
        idx = np.ravel_multi_index(np.asarray(selector["cells"], dtype=int).T, grid.shape)
        if not np.all(active[idx]):
            raise ValueError("selector names inactive cells")
        return np.unique(idx), np.zeros(len(np.unique(idx)))
    sel = str(selector).strip()
    m = re.match(r"^face\s+a\s*=\s*(\d+)\s+side\s*=\s*(lo|hi)$", sel)
    if sel in _EDGE_NAMES or m:
        axis, side = _EDGE_NAMES[sel] if sel in _EDGE_NAMES else (int(m.group(1)), m.group(2))
        if axis >= grid.dim:
            raise ValueError(f"selector {sel!r} needs axis {axis} in a {grid.dim}-d grid")
        ijk = np.array(np.unravel_index(np.arange(active.size), grid.shape))
        edge_ix = 0 if side == "lo" else grid.shape[axis] - 1
        on = (ijk[axis] == edge_ix) & active
        bound = grid.box.lo[axis] if side == "lo" else grid.box.hi[axis]
        idx = np.flatnonzero(on)
        return idx, np.abs(centers[idx, axis] - bound)
    m = _CIRCLE_RE.match(sel)
    if m:
        radius = float(m.group(1))
        signed = np.linalg.norm(centers, axis=1) - radius
        near = np.zeros(active.size, dtype=bool)
        ijk = np.unravel_index(np.arange(active.size), grid.shape)
        for off in grid.neighbor_offsets():
            for sgn in (1, -1):
                nb = [ijk[k] + sgn * off[k] for k in range(grid.dim)]
                ok = np.all([(nb[k] >= 0) & (nb[k] < grid.shape[k]) for k in range(grid.dim)], axis=0)
                flat = np.ravel_multi_index([np.where(ok, nb[k], 0) for k in range(grid.dim)], grid.shape)
                crosses = ok & (np.sign(signed[flat]) != np.sign(signed))
                near |= crosses
        idx = np.flatnonzero(near & active)
        return idx, np.abs(signed[idx])
    raise ValueError(f"unknown boundary selector {selector!r}")


# ---------------------------------------------------------------------------
# path families


@dataclass
class PathFamily:
    """All paths in ``ambient`` joining ``source`` to ``target``.

    ``ambient`` is a :class:`GridDomain` (selectors resolved with
    :func:`select_cells`) or a :class:`~qclab.surface.SurfaceMesh` (selectors
    are vertex index arrays).
    """

    ambient: Any
    source: Any
    target: Any
    label: str = ""

    def on_grid(self) -> bool:
        return isinstance(self.ambient, GridDomain)


@dataclass
class Density:
    values: np.ndarray
    exponent: float
    support: str = "cell"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density must be finite and nonnegative")
        self.values = v


@dataclass
class ModulusResult:
    modulus: float
    density: Density
    certificate: float
    lower_bound: float = 0.0
    iterations: int = 0
    n_paths: int = 0
    flag: str = ""
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "modulus": _jsonable(self.modulus),
            "lower_bound": _jsonable(self.lower_bound),
            "certificate": _jsonable(self.certificate),
            "certificate_residual": _jsonable(1.0 - self.certificate),
            "iterations": self.iterations,
            "n_paths": self.n_paths,
            "flag": self.flag,
            "converged": self.converged,
        }


def _jsonable(x):
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def step_traversal(offset, spacing) -> list[tuple[tuple[int, ...], float]]:
    """Cells crossed by the segment between the centers of cell 0 and cell
    ``offset``, with the euclidean length inside each.

    Returns ``[(relative_cell, length), ...]`` in path order.
    """
    off = np.asarray(offset, dtype=float)
    h = np.asarray(spacing, dtype=float)
    ts = [0.0, 1.0]
    for k, d in enumerate(off):
        if d == 0:
            continue
        for j in range(1, int(abs(d)) + 1):
            ts.append((j - 0.5) / abs(d))
    ts = np.unique(ts)
    total = float(np.linalg.norm(off * h))
    out = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        mid = 0.5 + 0.5 * (t0 + t1) * off
        out.append((tuple(int(v) for v in np.floor(mid)), (t1 - t0) * total))
    return out


def grid_path_graph(grid: GridDomain, source, target, reach: int = 2) -> tuple[PathGraph, np.ndarray]:
    """Path graph on active cell centers.

    Steps are the primitive integer offsets with max-norm <= ``reach``
    (``reach=1``: 8-connected in 2-d; ``reach=2``: adds knight moves).  A
    step is charged the exact length of its segment inside every cell it
    crosses; it is only present if all those cells are active.  Returns the
    graph and the flat indices of the active cells (graph cell k is grid
    cell ``active_idx[k]``).
    """
    active = grid.active()
    active_idx = np.flatnonzero(active)
    compact = np.full(active.size, -1, dtype=np.int64)
    compact[active_idx] = np.arange(len(active_idx))
    n_act = len(active_idx)
    src_node, tgt_node = n_act, n_act + 1
    shape = np.asarray(grid.shape)[:, None]
    ijk = np.array(np.unravel_index(active_idx, grid.shape))

    us, vs, cell_blocks, len_blocks, counts = [], [], [], [], []
    for off in grid.neighbor_offsets(reach):
        trav = step_traversal(off, grid.spacing)
        ok = np.ones(n_act, dtype=bool)
        flats = []
        for rel, _ in trav:
            nb = ijk + np.asarray(rel)[:, None]
            inside = np.all((nb >= 0) & (nb < shape), axis=0)
            flat = np.ravel_multi_index(np.where(inside, nb, 0), grid.shape)
            ok &= inside & active[flat]
            flats.append(flat)
        a = np.flatnonzero(ok)
        us.append(a)
        vs.append(compact[flats[-1][ok]])
        cells = np.stack([compact[f[ok]] for f in flats], axis=1)
        cell_blocks.append(cells.ravel())
        len_blocks.append(np.tile([ln for _, ln in trav], len(a)))
        counts.append(np.full(len(a), len(trav)))

    s_idx, s_stub = select_cells(grid, source)
    t_idx, t_stub = select_cells(grid, target)
    s_c, t_c = compact[s_idx], compact[t_idx]
    ns, nt = len(s_c), len(t_c)

    edge_u = np.concatenate(us + [np.full(ns, src_node), t_c])
    edge_v = np.concatenate(vs + [s_c, np.full(nt, tgt_node)])
    cnt = np.concatenate(counts + [np.ones(ns + nt, dtype=np.int64)])
    var_ptr = np.concatenate([[0], np.cumsum(cnt)])
    pair_cell = np.concatenate(cell_blocks + [s_c, t_c])
    pair_len = np.concatenate(len_blocks + [s_stub, t_stub])
    g = PathGraph.from_arrays(
        n_act + 2,
        np.full(n_act, grid.cell_volume),
        edge_u,
        edge_v,
        np.arange(len(edge_u)),
        var_ptr,
        pair_cell,
        pair_len,
        src_node,
        tgt_node,
    )
    return g, active_idx


def mesh_path_graph(mesh, source, target, level: int | None = None) -> PathGraph:
    """Path graph on the Steiner graph of a surface mesh.

    Cells are triangles with their areas as measure.  A segment through a
    triangle is charged to it; a segment on a mesh edge may be charged to
    either triangle sharing the edge.  ``source`` and ``target`` are vertex
    index arrays.
    """
    g = mesh.steiner(level)
    src = np.unique(np.asarray(source, dtype=np.int64))
    tgt = np.unique(np.asarray(target, dtype=np.int64))
    N = g.n_nodes
    s_node, t_node = N, N + 1
    two = g.seg_tri[:, 1] >= 0
    n_seg = len(g.seg_u)
    # variants: one per segment, a second one for shared mesh edges
    var_edge = np.concatenate([np.arange(n_seg), np.flatnonzero(two)])
    var_cell = np.concatenate([g.seg_tri[:, 0], g.seg_tri[two, 1]])
    var_len = np.concatenate([g.seg_len, g.seg_len[two]])
    order = np.argsort(var_edge, kind="stable")
    var_edge, var_cell, var_len = var_edge[order], var_cell[order], var_len[order]
    # zero-length stubs joining the two terminals
    n_stub = len(src) + len(tgt)
    edge_u = np.concatenate([g.seg_u, np.full(len(src), s_node), tgt])
    edge_v = np.concatenate([g.seg_v, src, np.full(len(tgt), t_node)])
    var_edge = np.concatenate([var_edge, n_seg + np.arange(n_stub)])
    var_cell = np.concatenate([var_cell, np.zeros(n_stub, dtype=np.int64)])
    var_len = np.concatenate([var_len, np.zeros(n_stub)])
    return PathGraph.from_arrays(
        N + 2,
        mesh.areas,
        edge_u,
        edge_v,
        var_edge,
        np.arange(len(var_edge) + 1),
        var_cell,
        var_len,
        s_node,
        t_node,
    )


def select_vertices(mesh, selector) -> np.ndarray:
    """Vertex indices of a mesh for a selector: an index list, ``{"vertices":
    [...]}``, or one of the edge selectors of the parameter box."""
    if isinstance(selector, dict) and "vertices" in selector:
        selector = selector["vertices"]
    if not isinstance(selector, str):
        idx = np.unique(np.asarray(selector, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= mesh.n_vertices):
            raise ValueError("vertex index out of range")
        return idx
    sel = selector.strip()
    m = re.match(r"^face\s+a\s*=\s*(\d+)\s+side\s*=\s*(lo|hi)$", sel)
    if sel in _EDGE_NAMES or m:
        axis, side = _EDGE_NAMES[sel] if sel in _EDGE_NAMES else (int(m.group(1)), m.group(2))
        if mesh.box is None:
            raise ValueError("edge selectors need a grid-generated mesh")
        bound = mesh.box.lo[axis] if side == "lo" else mesh.box.hi[axis]
        tol = 1e-9 * max(1.0, float(np.max(np.abs(mesh.box.widths))))
        return np.flatnonzero(np.abs(mesh.params[:, axis] - bound) <= tol)
    raise ValueError(f"unknown vertex selector {selector!r}")


def _solution_to_result(sol: ModulusSolution, exponent: float, support: str, extra=None) -> ModulusResult:
    return ModulusResult(
        modulus=sol.modulus,
        density=Density(np.nan_to_num(sol.density, nan=0.0), exponent, support),
        certificate=sol.min_path_length,
        lower_bound=sol.lower_bound,
        iterations=sol.iterations,
        n_paths=sol.n_paths,
        flag=sol.flag if sol.converged else (sol.flag or "not converged"),
        converged=sol.converged,
        extra=extra or {},
    )


def discrete_modulus(
    family: PathFamily, exponent: float = 2.0, tol: float = 1e-3, reach: int = 3, level: int | None = None, max_iter: int = 500
) -> ModulusResult:
    """Discrete ``exponent``-modulus of a path family on a grid or mesh.

    On a grid the density is constant on cells and paths follow straight
    steps between cell centers (primitive offsets up to ``reach``); on a
    mesh the density is constant on triangles and paths run in the Steiner
    graph of subdivision ``level``.  Returns the energy of a certified
    admissible density (every path has density length >= 1 after scaling),
    so the value is an upper bound for the discrete problem; the dual value
    of the last subproblem is reported as ``lower_bound``.

    Flags: ``"degenerate family"`` (+inf) when source and target overlap,
    ``"empty family"`` (0) when they are not connected.
    """
    if exponent < 1:
        raise ValueError("exponent must be >= 1")
    if family.on_grid():
        grid = family.ambient
        s_idx, _ = select_cells(grid, family.source)
        t_idx, _ = select_cells(grid, family.target)
        overlap = np.intersect1d(s_idx, t_idx).size > 0
        support = "cell"
    else:
        mesh = family.ambient
        s_idx = select_vertices(mesh, family.source)
        t_idx = select_vertices(mesh, family.target)
        overlap = np.intersect1d(s_idx, t_idx).size > 0
        support = "triangle"
    if s_idx.size == 0 or t_idx.size == 0:
        raise ValueError("source and target must be nonempty")
    if overlap:
        n_cells = int(family.ambient.active().sum()) if family.on_grid() else family.ambient.n_triangles
        return ModulusResult(np.inf, Density(np.zeros(n_cells), exponent, support), 0.0, np.inf, 0, 0, "degenerate family", True)
    if family.on_grid():
        graph, active_idx = grid_path_graph(grid, family.source, family.target, reach)
        sol = solve_modulus(graph, exponent, tol, max_iter)
        return _solution_to_result(sol, exponent, support, {"active_cells": active_idx})
    graph = mesh_path_graph(mesh, s_idx, t_idx, level)
    sol = solve_modulus(graph, exponent, tol, max_iter)
    return _solution_to_result(sol, exponent, support)


def density_csv(result: ModulusResult, ambient) -> tuple[list[str], np.ndarray]:
    """Rows (cell or triangle centers, density) for plotting."""
    rho = result.density.values
    if isinstance(ambient, GridDomain):
        X = ambient.centers()[result.extra.get("active_cells", np.flatnonzero(ambient.active()))]
        header = [f"x{i + 1}" for i in range(ambient.dim)] + ["rho"]
    else:
        X = ambient.params[ambient.triangles].mean(axis=1)
        header = [f"x{i + 1}" for i in range(X.shape[1])] + ["rho", "area"]
        return header, np.column_stack([X, rho, ambient.areas])
    return header, np.column_stack([X, rho])


# ---------------------------------------------------------------------------
# image families and the lower modulus inequality


def _selector_vertices(grid: GridDomain, mesh, selector) -> np.ndarray:
    if isinstance(selector, str) and (selector.strip() in _EDGE_NAMES or selector.strip().startswith("face")):
        return select_vertices(mesh, selector)
    # cell-based selectors: the corners of the selected cells
    idx, _ = select_cells(grid, selector)
    ijk = np.array(np.unravel_index(idx, grid.shape))
    out = []
    for di in (0, 1):
        for dj in (0, 1):
            out.append(mesh.node_vertex[ijk[0] + di, ijk[1] + dj])
    v = np.unique(np.concatenate(out))
    if np.any(v < 0):
        raise ValueError("vertex correspondence missing for selected cells")
    return v


def pushforward_family(family: PathFamily, fmap, mesh) -> PathFamily:
    """The image family f(Gamma) on the triangulated image of the grid.

    ``mesh`` must be the triangulation of ``fmap`` over ``family.ambient``
    (same box and node lattice); source and target become vertex sets.
    """
    if not family.on_grid():
        raise ValueError("push-forward starts from a grid family")
    grid = family.ambient
    if mesh.node_shape is None or tuple(mesh.node_shape) != tuple(r + 1 for r in grid.shape) or mesh.box != grid.box:
        raise ValueError("vertex correspondence missing: mesh is not the triangulation of the family's grid")
    if not np.allclose(mesh.vertices, fmap(mesh.params), rtol=1e-12, atol=1e-12):
        raise ValueError("vertex correspondence missing: mesh vertices are not images of its parameters")
    src = _selector_vertices(grid, mesh, family.source)
    tgt = _selector_vertices(grid, mesh, family.target)
    label = f"f({family.label})" if family.label else "image family"
    return PathFamily(mesh, src, tgt, label)


@dataclass
class LowerModulusReport:
    mod_domain: float
    mod_image: float
    K_emp: float
    tol: float
    passed: bool
    domain: ModulusResult
    image: ModulusResult

    @property
    def ratio(self) -> float:
        """mod Gamma / (K mod f(Gamma)); the check passes when <= 1 + tol."""
        return self.mod_domain / (self.K_emp * self.mod_image)

    def to_json(self) -> dict:
        return {
            "modDomain": self.mod_domain,
            "modImage": self.mod_image,
            "K_emp": self.K_emp,
            "ratio": self.ratio,
            "tol": self.tol,
            "pass": self.passed,
            "domainSolver": self.domain.to_json(),
            "imageSolver": self.image.to_json(),
        }


def verify_lower_modulus(fmap, form, family: PathFamily, tol: float = 0.05, reach: int = 3, level: int | None = None) -> LowerModulusReport:
    """Check mod Gamma <= K_emp mod f(Gamma) (1 + tol) for a grid family.

    K_emp is the maximum sampled distortion on the family's grid; the image
    modulus is computed on the triangulated image with triangle areas as
    measure.
    """
    from .jetcalc import distortion_scan
    from .surface import triangulate

    grid = family.ambient
    scan = distortion_scan(fmap, form, grid)
    if scan.degenerate.any():
        raise ValueError(f"map is degenerate on {int(scan.degenerate.sum())} grid cells")
    mesh = triangulate(fmap, grid, level if level is not None else 2)
    image = pushforward_family(family, fmap, mesh)
    dom = discrete_modulus(family, form.n, reach=reach)
    img = discrete_modulus(image, form.n, level=level)
    K = scan.ess_sup_K
    passed = bool(dom.modulus <= K * img.modulus * (1 + tol))
    return LowerModulusReport(dom.modulus, img.modulus, K, tol, passed, dom, img)
