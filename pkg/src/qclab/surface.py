"""Triangulated image surfaces: intrinsic distances, metric differentials,
Hausdorff measure of balls, linear local connectivity and projection
multiplicity.

A :class:`SurfaceMesh` is the image of a (possibly masked) parameter grid
with two triangles per cell.  Intrinsic distances are computed on a Steiner
graph: every triangle edge carries ``2**level - 1`` equally spaced interior
points, and all pairs of points on the boundary of a common triangle are
joined by the straight segment through it.  The levels are nested, so
distances never increase when the level goes up.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .domain import Box, GridDomain
from .forms import MultiIndex
from .jetcalc import MapSpec

logger = logging.getLogger(__name__)

# sub-triangle centroids (barycentric) used to clip triangles against balls
_CLIP_SPLIT = 4


def _subtriangle_centroids(s: int = _CLIP_SPLIT) -> np.ndarray:
    """Barycentric centroids of the s^2 congruent sub-triangles."""
    out = []
    for i in range(s):
        for j in range(s - i):
            out.append(((i + 1 / 3) / s, (j + 1 / 3) / s))
            if i + j < s - 1:
                out.append(((i + 2 / 3) / s, (j + 2 / 3) / s))
    uv = np.array(out)
    return np.column_stack([1 - uv.sum(axis=1), uv])


# ---------------------------------------------------------------------------
# mesh


@dataclass
class SteinerGraph:
    """Distance graph on mesh vertices plus Steiner points.

    ``seg_tri`` holds, per segment, the triangle it crosses and, for
    segments lying on a mesh edge, the second triangle sharing that edge
    (-1 otherwise).
    """

    level: int
    points: np.ndarray  # (N, m)
    node_params: np.ndarray  # (N, n)
    seg_u: np.ndarray
    seg_v: np.ndarray
    seg_len: np.ndarray
    seg_tri: np.ndarray  # (S, 2)
    tri_nodes: np.ndarray  # (T, 3 + 3k) boundary nodes of each triangle

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        n = self.n_nodes
        return sparse.csr_matrix((self.seg_len, (self.seg_u, self.seg_v)), shape=(n, n))


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # (V, m)
    params: np.ndarray  # (V, n)
    triangles: np.ndarray  # (T, 3)
    box: Box | None = None
    node_shape: tuple[int, int] | None = None
    node_vertex: np.ndarray | None = None  # (nx+1, ny+1) vertex id or -1
    cell_tris: np.ndarray | None = None  # (nx, ny, 2) triangle id or -1
    level: int = 2
    _steiner: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.params = np.asarray(self.params, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if len(self.vertices) != len(self.params):
            raise ValueError("vertices and parameter coordinates differ in length")
        bad = np.flatnonzero(~(self.areas > 0))
        if bad.size:
            raise ValueError(f"degenerate triangles: {bad[:10].tolist()}")

    # -- geometry -----------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        P = self.vertices[self.triangles]
        a, b = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        g = np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b) - np.einsum("ij,ij->i", a, b) ** 2
        return 0.5 * np.sqrt(np.maximum(g, 0.0))

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def _edges(self):
        sides = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        lo, hi = sides.min(axis=1), sides.max(axis=1)
        keys = lo * self.n_vertices + hi
        uniq, inv = np.unique(keys, return_inverse=True)
        edges = np.column_stack([uniq // self.n_vertices, uniq % self.n_vertices])
        T = self.n_triangles
        tri_edges = inv.reshape(3, T).T
        forward = (sides[:, 0] < sides[:, 1]).reshape(3, T).T
        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        tri_ids = np.tile(np.arange(T), 3)
        order = np.argsort(inv, kind="stable")
        first = np.ones(len(order), dtype=bool)
        first[1:] = inv[order][1:] != inv[order][:-1]
        edge_tris[inv[order][first], 0] = tri_ids[order][first]
        edge_tris[inv[order][~first], 1] = tri_ids[order][~first]
        return edges, tri_edges, forward, edge_tris

    @property
    def edges(self) -> np.ndarray:
        return self._edges[0]

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @cached_property
    def param_spacing(self) -> np.ndarray:
        if self.box is None or self.node_shape is None:
            raise ValueError("mesh does not come from a parameter grid")
        return self.box.widths / (np.asarray(self.node_shape) - 1)

    # -- Steiner graph ------------------------------------------------------

    def steiner(self, level: int | None = None) -> SteinerGraph:
        level = self.level if level is None else int(level)
        if level < 0:
            raise ValueError("subdivision level must be >= 0")
        if level not in self._steiner:
            self._steiner[level] = self._build_steiner(level)
        return self._steiner[level]

    def _build_steiner(self, level: int) -> SteinerGraph:
        k = 2**level - 1
        edges, tri_edges, forward, edge_tris = self._edges
        V, T = self.n_vertices, self.n_triangles
        # Steiner nodes, edge e point j (1..k) at fraction j/(k+1) from edges[e,0]
        fr = np.arange(1, k + 1) / (k + 1)
        a, b = edges[:, 0], edges[:, 1]
        st_pts = (1 - fr)[None, :, None] * self.vertices[a][:, None] + fr[None, :, None] * self.vertices[b][:, None]
        st_par = (1 - fr)[None, :, None] * self.params[a][:, None] + fr[None, :, None] * self.params[b][:, None]
        points = np.concatenate([self.vertices, st_pts.reshape(-1, self.vertices.shape[1])])
        node_params = np.concatenate([self.params, st_par.reshape(-1, self.params.shape[1])])

        # local boundary nodes per triangle: 3 corners then k points per side
        # (side s runs from corner s to corner s+1)
        nloc = 3 + 3 * k
        tri_nodes = np.empty((T, nloc), dtype=np.int64)
        tri_nodes[:, :3] = self.triangles
        side_of = [{0, 2}, {0, 1}, {1, 2}]
        for s in range(3):
            e = tri_edges[:, s]
            for j in range(1, k + 1):
                jj = np.where(forward[:, s], j, k + 1 - j)
                tri_nodes[:, 3 + s * k + j - 1] = V + e * k + jj - 1
                side_of.append({s})
        interior = [(i, j) for i in range(nloc) for j in range(i + 1, nloc) if not (side_of[i] & side_of[j])]
        li, lj = np.array(interior, dtype=np.int64).T if interior else (np.zeros(0, int), np.zeros(0, int))
        iu = tri_nodes[:, li].ravel()
        iv = tri_nodes[:, lj].ravel()
        itri = np.repeat(np.arange(T), len(li))

        # along-edge segments, shared by the triangles on both sides
        chain = np.concatenate([a[:, None], V + np.arange(len(edges))[:, None] * k + np.arange(k)[None], b[:, None]], axis=1)
        eu = chain[:, :-1].ravel()
        ev = chain[:, 1:].ravel()
        etri = np.repeat(edge_tris, k + 1, axis=0)

        u = np.concatenate([iu, eu])
        v = np.concatenate([iv, ev])
        seg_tri = np.concatenate([np.column_stack([itri, np.full(len(itri), -1)]), etri])
        length = np.linalg.norm(points[u] - points[v], axis=1)
        return SteinerGraph(level, points, node_params, u, v, length, seg_tri, tri_nodes)

    # -- point location -----------------------------------------------------

    def locate(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Triangle and barycentric coordinates of parameter points (N, 2)."""
        if self.cell_tris is None:
            raise ValueError("point location needs a grid-generated mesh")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        h = self.param_spacing
        rel = (X - np.asarray(self.box.lo)) / h
        nx, ny = self.cell_tris.shape[:2]
        i = np.clip(np.floor(rel[:, 0]).astype(int), 0, nx - 1)
        j = np.clip(np.floor(rel[:, 1]).astype(int), 0, ny - 1)
        s, t = rel[:, 0] - i, rel[:, 1] - j
        upper = t > s
        tri = self.cell_tris[i, j, upper.astype(int)]
        bary = np.where(
            upper[:, None],
            np.column_stack([1 - t, s, t - s]),
            np.column_stack([1 - s, s - t, t]),
        )
        tol = 1e-9
        if np.any(tri < 0) or np.any(bary < -tol) or np.any(rel < -tol) or np.any(rel[:, 0] > nx + tol) or np.any(rel[:, 1] > ny + tol):
            raise ValueError("parameter point outside the triangulated region")
        return tri, np.clip(bary, 0.0, 1.0)

    def surface_point(self, X) -> np.ndarray:
        """Points of the piecewise linear surface over parameter points."""
        tri, bary = self.locate(X)
        return np.einsum("ij,ijk->ik", bary, self.vertices[self.triangles[tri]])

    def nearest_vertex(self, y) -> int:
        return int(np.argmin(np.linalg.norm(self.vertices - np.asarray(y, dtype=float), axis=1)))

    def vertex_at(self, x) -> int:
        """Vertex whose parameter coordinates equal ``x`` (to rounding)."""
        d = np.linalg.norm(self.params - np.asarray(x, dtype=float), axis=1)
        k = int(np.argmin(d))
        scale = float(np.min(self.param_spacing)) if self.node_shape else 1.0
        if d[k] > 1e-6 * scale:
            raise ValueError(f"no vertex at parameter point {np.asarray(x).tolist()}")
        return k

    # -- export -------------------------------------------------------------

    def to_off(self) -> str:
        buf = io.StringIO()
        buf.write("OFF\n")
        buf.write(f"{self.n_vertices} {self.n_triangles} 0\n")
        np.savetxt(buf, self.vertices, fmt="%.17g")
        np.savetxt(buf, np.column_stack([np.full(self.n_triangles, 3), self.triangles]), fmt="%d")
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "params": self.params.tolist(),
            "triangles": self.triangles.tolist(),
        }

    def save(self, path) -> None:
        path = str(path)
        with open(path, "w") as fh:
            if path.endswith(".json"):
                json.dump(self.to_json(), fh)
            else:
                fh.write(self.to_off())


def triangulate(fmap: MapSpec, grid: GridDomain, level: int = 2) -> SurfaceMesh:
    """Image of the grid nodes under ``fmap``, two triangles per active cell
    (diagonal from the lower-left to the upper-right corner)."""
    if grid.dim != 2 or fmap.n != 2:
        raise ValueError("triangulation needs a 2-dimensional parameter grid")
    nx, ny = grid.shape
    active = grid.active().reshape(nx, ny)
    used = np.zeros((nx + 1, ny + 1), dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            used[di : di + nx, dj : dj + ny] |= active
    node_vertex = np.full((nx + 1, ny + 1), -1, dtype=np.int64)
    node_vertex[used] = np.arange(int(used.sum()))
    gx, gy = np.meshgrid(grid.axis_nodes(0), grid.axis_nodes(1), indexing="ij")
    params = np.column_stack([gx[used], gy[used]])
    ci, cj = np.nonzero(active)
    v00 = node_vertex[ci, cj]
    v10 = node_vertex[ci + 1, cj]
    v01 = node_vertex[ci, cj + 1]
    v11 = node_vertex[ci + 1, cj + 1]
    tris = np.empty((2 * len(ci), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])
    cell_tris = np.full((nx, ny, 2), -1, dtype=np.int64)
    cell_tris[ci, cj, 0] = np.arange(0, 2 * len(ci), 2)
    cell_tris[ci, cj, 1] = np.arange(1, 2 * len(ci), 2)
    verts = fmap(params)
    try:
        return SurfaceMesh(verts, params, tris, grid.box, (nx + 1, ny + 1), node_vertex, cell_tris, level)
    except ValueError:
        P = verts[tris]
        area = 0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1)
        bad = np.flatnonzero(~(area > 0)) // 2
        cells = sorted({(int(ci[c]), int(cj[c])) for c in bad})
        raise ValueError(f"zero-area triangles in cells {cells[:10]}") from None


# ---------------------------------------------------------------------------
# intrinsic distances


def _check_connected(g: SteinerGraph) -> None:
    ncomp, _ = csgraph.connected_components(g.matrix, directed=False)
    if ncomp > 1:
        raise ValueError(f"mesh is disconnected ({ncomp} components)")


def intrinsic_distance(mesh: SurfaceMesh, p: int, q, level: int | None = None) -> float | np.ndarray:
    """Steiner-graph distance between vertex ``p`` and vertex (or vertices) ``q``."""
    g = mesh.steiner(level)
    _check_connected(g)
    d = csgraph.dijkstra(g.matrix, directed=False, indices=int(p))
    out = d[np.asarray(q, dtype=np.int64)]
    return float(out) if out.ndim == 0 else out


def vertex_distances(mesh: SurfaceMesh, p: int, level: int | None = None, limit: float = np.inf) -> np.ndarray:
    """Distances from vertex ``p`` to all vertices (inf beyond ``limit``)."""
    g = mesh.steiner(level)
    d = csgraph.dijkstra(g.matrix, directed=False, indices=int(p), limit=limit)
    return d[: mesh.n_vertices]


def _unfold(pa, pb, a, b):
    """Shortest length from pa to pb through the segment [a, b] when pa and
    pb lie in the two triangles sharing that edge (pointwise over rows)."""
    e = b - a
    L = np.linalg.norm(e, axis=-1)
    t = e / L[..., None]
    sa = np.einsum("...i,...i->...", pa - a, t)
    sb = np.einsum("...i,...i->...", pb - a, t)
    da = np.linalg.norm(pa - a - sa[..., None] * t, axis=-1)
    db = np.linalg.norm(pb - a - sb[..., None] * t, axis=-1)
    w = da + db
    s = np.where(w > 0, sa + (sb - sa) * np.divide(da, w, out=np.zeros_like(w), where=w > 0), sa)
    s = np.clip(s, 0.0, L)
    return np.hypot(s - sa, da) + np.hypot(s - sb, db)


def point_distances(mesh: SurfaceMesh, base, targets, level: int | None = None, batch: int = 32) -> np.ndarray:
    """Intrinsic distances between parameter points on the mesh surface.

    ``base`` has shape (B, 2) and ``targets`` (B, K, 2); returns (B, K).
    Each point is inserted into the Steiner graph and joined by straight
    segments to the boundary nodes of its triangle.  A base/target pair in
    the same triangle is also joined directly, and a pair in two triangles
    sharing an edge by the shortest path across that edge, so such pairs
    get their exact piecewise-linear surface distance.
    """
    g = mesh.steiner(level)
    base = np.atleast_2d(np.asarray(base, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(len(base), -1, base.shape[1])
    B, K = targets.shape[:2]
    allp = np.concatenate([base, targets.reshape(-1, base.shape[1])])
    tri, bary = mesh.locate(allp)
    pos = np.einsum("ij,ijk->ik", bary, mesh.vertices[mesh.triangles[tri]])
    N0 = g.n_nodes
    qid = N0 + np.arange(len(allp))
    nb = g.tri_nodes[tri]  # (Q, nloc)
    link_u = np.repeat(qid, nb.shape[1])
    link_v = nb.ravel()
    link_len = np.linalg.norm(pos[:, None, :] - g.points[nb], axis=2).ravel()

    # direct base-target links
    bt = tri[:B].repeat(K)
    tt = tri[B:]
    bpos = pos[:B].repeat(K, axis=0)
    tpos = pos[B:]
    d_direct = np.full(B * K, np.inf)
    same = bt == tt
    d_direct[same] = np.linalg.norm(bpos[same] - tpos[same], axis=1)
    shared = _shared_edge(mesh, bt, tt)
    adj = (shared >= 0) & ~same
    if np.any(adj):
        ed = mesh.edges[shared[adj]]
        d_direct[adj] = _unfold(bpos[adj], tpos[adj], mesh.vertices[ed[:, 0]], mesh.vertices[ed[:, 1]])
    has = np.isfinite(d_direct)
    du = qid[:B].repeat(K)[has]
    dv = qid[B:][has]

    n_tot = N0 + len(allp)
    M = sparse.csr_matrix(
        (
            np.concatenate([g.seg_len, link_len, d_direct[has]]),
            (np.concatenate([g.seg_u, link_u, du]), np.concatenate([g.seg_v, link_v, dv])),
        ),
        shape=(n_tot, n_tot),
    )
    diam = float(np.max(mesh.edge_lengths))
    out = np.empty((B, K))
    for s in range(0, B, batch):
        idx = np.arange(s, min(s + batch, B))
        lim = _search_limit(mesh, pos[idx], pos[B:].reshape(B, K, -1)[idx], diam)
        d = csgraph.dijkstra(M, directed=False, indices=qid[idx], limit=lim)
        out[idx] = d[np.arange(len(idx))[:, None], qid[B:].reshape(B, K)[idx]]
    miss = ~np.isfinite(out)
    if np.any(miss):
        rows = np.unique(np.nonzero(miss)[0])
        d = csgraph.dijkstra(M, directed=False, indices=qid[rows])
        out[rows] = d[np.arange(len(rows))[:, None], qid[B:].reshape(B, K)[rows]]
        if np.any(~np.isfinite(out)):
            raise ValueError("mesh is disconnected between query points")
    return out


def _search_limit(mesh, bpos, tpos, diam) -> float:
    # only a pruning radius: targets left unreached are recomputed unbounded
    return float(4.0 * np.max(np.linalg.norm(tpos - bpos[:, None], axis=2)) + 4.0 * diam)


def _shared_edge(mesh: SurfaceMesh, t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Edge id shared by triangles t1[i], t2[i], or -1."""
    _, tri_edges, _, _ = mesh._edges
    e1, e2 = tri_edges[t1], tri_edges[t2]
    out = np.full(len(t1), -1, dtype=np.int64)
    for a in range(3):
        for b in range(3):
            hit = (e1[:, a] == e2[:, b]) & (t1 != t2)
            out[hit] = e1[hit, a]
    return out


# ---------------------------------------------------------------------------
# metric differentials and the Jacobian of a seminorm


@dataclass
class MetricDifferential:
    value: float
    ratios: np.ndarray
    radii: np.ndarray
    warning: str = ""


def default_radii(mesh: SurfaceMesh) -> np.ndarray:
    """Radii below half a parameter cell: from the cell center, x + r v stays
    inside the two triangles of that cell."""
    h = float(np.min(mesh.param_spacing))
    return h * np.array([0.4, 0.2, 0.1])


def metric_differentials(mesh: SurfaceMesh, X, V, radii=None, level: int | None = None) -> list[MetricDifferential]:
    """Limit of d(f(x + r v), f(x)) / r as r -> 0 for each x in X (B, 2) and
    each unit vector in V (K, 2); the list is row-major over (x, v).

    The ratios at the given decreasing radii are extrapolated to r = 0 with
    Richardson's rule for a linear error term using the two smallest radii.
    Ratios that vary non-monotonically by more than 1e-6 relative produce a
    warning.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    r = default_radii(mesh) if radii is None else np.asarray(radii, dtype=float)
    if np.any(np.diff(r) >= 0) or np.any(r <= 0):
        raise ValueError("radii must be positive and strictly decreasing")
    T = X[:, None, None, :] + r[None, None, :, None] * V[None, :, None, :]
    d = point_distances(mesh, X, T.reshape(len(X), -1, 2), level).reshape(len(X), len(V), len(r))
    ratios = d / r
    out = []
    for row in ratios.reshape(-1, len(r)):
        if len(r) >= 2:
            q = r[-2] / r[-1]
            val = (q * row[-1] - row[-2]) / (q - 1.0)
        else:
            val = row[-1]
        diffs = np.diff(row)
        warn = ""
        scale = max(abs(row[-1]), 1e-300)
        if len(row) > 2 and np.any(diffs[:-1] * diffs[1:] < 0) and np.max(np.abs(diffs)) > 1e-6 * scale:
            warn = "non-monotone ratios"
        out.append(MetricDifferential(float(max(val, 0.0)), row, r, warn))
    return out


def metric_differential(fmap: MapSpec, mesh: SurfaceMesh, x, v, radii=None, level: int | None = None) -> MetricDifferential:
    """md(f, x)(v) estimated from intrinsic distances on ``mesh``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    r = default_radii(mesh) if radii is None else np.asarray(radii, dtype=float)
    for rr in r:
        if not fmap.domain.contains(x + rr * v):
            raise ValueError(f"x + r v leaves the domain for r = {rr:g}")
    res = metric_differentials(mesh, x[None], v[None], r, level)[0]
    if res.warning:
        logger.warning("metric differential at %s along %s: %s", x.tolist(), v.tolist(), res.warning)
    return res


@dataclass(frozen=True)
class Seminorm2D:
    """Samples md(v_k) at v_k = (cos t_k, sin t_k), t_k = 2 pi k / K."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or len(s) < 64:
            raise ValueError("need at least 64 angular samples")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("seminorm samples must be finite and nonnegative")
        object.__setattr__(self, "samples", s)

    @staticmethod
    def directions(count: int) -> np.ndarray:
        t = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(t), np.sin(t)])

    @classmethod
    def from_function(cls, fn, count: int = 256) -> "Seminorm2D":
        return cls(np.asarray([fn(v) for v in cls.directions(count)], dtype=float))

    @classmethod
    def from_matrix(cls, A, count: int = 256) -> "Seminorm2D":
        return cls(np.linalg.norm(cls.directions(count) @ np.asarray(A, dtype=float).T, axis=1))


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def jacobian_of_seminorm(s: Seminorm2D, n: int = 2) -> float:
    """omega_n n / integral over the circle of md(v)^(-n) (periodic
    trapezoid rule); 0 if md vanishes in some sampled direction."""
    if n != 2:
        raise ValueError("angular quadrature is implemented for n = 2")
    md = s.samples
    if np.any(md == 0):
        return 0.0
    integral = 2 * np.pi * float(np.mean(md ** (-float(n))))
    return unit_ball_volume(n) * n / integral


# ---------------------------------------------------------------------------
# ball measure


def ball_measure(mesh: SurfaceMesh, center, r: float, metric: str = "euclidean", param_mask=None, level: int | None = None) -> float:
    """Area of the part of the mesh inside a ball.

    Every triangle is split into 16 congruent sub-triangles; a sub-triangle
    counts if its centroid is in the ball.  ``metric="euclidean"`` uses the
    ambient distance to ``center`` (a point of R^m).  ``metric="intrinsic"``
    uses Steiner-graph distances from the vertex ``center`` (an int, or a
    point whose nearest vertex is taken), interpolated linearly inside each
    triangle.  ``param_mask``, if given, maps parameter points (N, n) to a
    boolean array and restricts the measure to sub-triangles whose centroid
    parameter passes it.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    bary = _subtriangle_centroids()
    tris = mesh.triangles
    sub_area = mesh.areas / len(bary)
    if metric == "euclidean":
        c = np.asarray(center, dtype=float)
        # skip triangles that cannot meet the ball
        P = mesh.vertices[tris]
        mid = P.mean(axis=1)
        rad = np.max(np.linalg.norm(P - mid[:, None], axis=2), axis=1)
        near = np.flatnonzero(np.linalg.norm(mid - c, axis=1) <= r + rad)
        pts = np.einsum("sj,tjk->tsk", bary, P[near])
        inside = np.linalg.norm(pts - c, axis=2) < r
    elif metric == "intrinsic":
        src = int(center) if np.ndim(center) == 0 else mesh.nearest_vertex(center)
        # an interpolated value below r needs a vertex closer than 12 r
        dist = vertex_distances(mesh, src, level, limit=12.0 * r)
        dv = dist[tris]
        near = np.flatnonzero(np.min(dv, axis=1) < r)
        inside = (bary @ dv[near].T).T < r
    else:
        raise ValueError(f"unknown metric {metric!r}")
    if param_mask is not None:
        Q = np.einsum("sj,tjk->tsk", bary, mesh.params[tris[near]])
        inside &= np.asarray(param_mask(Q.reshape(-1, Q.shape[-1])), dtype=bool).reshape(inside.shape)
    return float(np.sum(inside.sum(axis=1) * sub_area[near]))


# ---------------------------------------------------------------------------
# linear local connectivity


@dataclass
class LLCResult:
    constant: float
    ratio: float
    n_points: int
    flag: str = ""

    def to_json(self) -> dict:
        c = self.constant
        return {"constant": "inf" if math.isinf(c) else c, "ratio": self.ratio, "n_points": self.n_points, "flag": self.flag}


def _mesh_edge_graph(mesh: SurfaceMesh):
    e = mesh.edges
    return e[:, 0], e[:, 1]


def llc_constant(mesh: SurfaceMesh, center, r: float, c_max: float = 1e6) -> LLCResult:
    """Smallest c such that the mesh vertices in B(center, r) are joined by
    mesh-edge paths whose vertices stay in B(center, c r).

    Vertices are added in order of distance from ``center`` while a
    union-find structure tracks the components of the edges between added
    vertices; the answer is the distance at which all sample vertices first
    share a component, divided by r (this is the bottleneck value of the
    minimax path problem, solved exactly).  A ball path never leaves the
    ball between two vertices because the ball is convex.  If the ratio
    exceeds ``c_max`` the constant is +inf with a flag, and ``ratio`` keeps
    the finite value.
    """
    c = np.asarray(center, dtype=float)
    d = np.linalg.norm(mesh.vertices - c, axis=1)
    sample = np.flatnonzero(d <= r)
    if len(sample) < 2:
        return LLCResult(1.0, 1.0, len(sample), "fewer than two sample points")
    order = np.argsort(d, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    u, v = _mesh_edge_graph(mesh)
    # each edge becomes usable once its later endpoint is added
    when = np.maximum(rank[u], rank[v])
    eorder = np.argsort(when, kind="stable")
    parent = np.arange(mesh.n_vertices)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    remaining = len(sample)
    in_sample = np.zeros(mesh.n_vertices, dtype=bool)
    in_sample[sample] = True
    count = np.zeros(mesh.n_vertices, dtype=np.int64)
    count[sample] = 1
    ptr = 0
    threshold = None
    for step, vert in enumerate(order):
        while ptr < len(eorder) and when[eorder[ptr]] <= step:
            e = eorder[ptr]
            ra, rb = find(u[e]), find(v[e])
            if ra != rb:
                parent[rb] = ra
                count[ra] += count[rb]
                if count[ra] == len(sample):
                    remaining = 0
            ptr += 1
        if step >= rank[sample].max() and remaining == 0:
            threshold = d[vert]
            break
    if threshold is None:
        return LLCResult(math.inf, math.inf, len(sample), "sample points lie in different components of the mesh")
    ratio = float(threshold / r)
    if ratio > c_max:
        return LLCResult(math.inf, ratio, len(sample), f"exceeds c_max={c_max:g}")
    return LLCResult(ratio, ratio, len(sample))


def llc_constant_bisection(mesh: SurfaceMesh, center, r: float, c_max: float = 1e6, rtol: float = 1e-9) -> float:
    """Same quantity as :func:`llc_constant` by bisection over c, testing
    connectivity of the mesh restricted to B(center, c r) each time."""
    c = np.asarray(center, dtype=float)
    d = np.linalg.norm(mesh.vertices - c, axis=1)
    sample = np.flatnonzero(d <= r)
    if len(sample) < 2:
        return 1.0
    u, v = _mesh_edge_graph(mesh)

    def joined(cc):
        keep = d <= cc * r
        ok = keep[u] & keep[v]
        n = mesh.n_vertices
        G = sparse.csr_matrix((np.ones(int(ok.sum())), (u[ok], v[ok])), shape=(n, n))
        _, lab = csgraph.connected_components(G, directed=False)
        return len(np.unique(lab[sample])) == 1

    lo, hi = 0.0, 1.0
    while not joined(hi):
        lo, hi = hi, 2 * hi
        if hi > 2 * c_max:
            return math.inf
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if joined(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# projection multiplicity


@dataclass
class MultiplicityResult:
    count: int
    roots: np.ndarray
    flags: list[str]
    recount: int | None = None

    @property
    def unstable(self) -> bool:
        return "unstable" in self.flags


def _preimages(fmap: MapSpec, I: MultiIndex, y: np.ndarray, grid: GridDomain) -> tuple[np.ndarray, bool]:
    rows = list(I.rows)
    mesh_params_x, mesh_params_y = grid.axis_nodes(0), grid.axis_nodes(1)
    gx, gy = np.meshgrid(mesh_params_x, mesh_params_y, indexing="ij")
    P = np.stack([gx, gy], axis=-1)
    F = fmap(P)[..., rows]
    nx, ny = grid.shape
    corners = [
        (P[:-1, :-1], P[1:, :-1], P[1:, 1:]),
        (P[:-1, :-1], P[1:, 1:], P[:-1, 1:]),
    ]
    fcorners = [
        (F[:-1, :-1], F[1:, :-1], F[1:, 1:]),
        (F[:-1, :-1], F[1:, 1:], F[:-1, 1:]),
    ]
    starts = []
    on_edge = False
    for (p0, p1, p2), (f0, f1, f2) in zip(corners, fcorners):
        a = (f1 - f0).reshape(-1, 2)
        b = (f2 - f0).reshape(-1, 2)
        rhs = (y - f0).reshape(-1, 2)
        det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        ok = np.abs(det) > 0
        l1 = np.where(ok, (rhs[:, 0] * b[:, 1] - rhs[:, 1] * b[:, 0]) / np.where(ok, det, 1), -1)
        l2 = np.where(ok, (a[:, 0] * rhs[:, 1] - a[:, 1] * rhs[:, 0]) / np.where(ok, det, 1), -1)
        l0 = 1 - l1 - l2
        tol = 1e-9
        hit = ok & (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        if np.any(hit & ((np.abs(l0) <= tol) | (np.abs(l1) <= tol) | (np.abs(l2) <= tol))):
            on_edge = True
        q = l0[:, None] * p0.reshape(-1, 2) + l1[:, None] * p1.reshape(-1, 2) + l2[:, None] * p2.reshape(-1, 2)
        starts.append(q[hit])
    starts = np.concatenate(starts) if starts else np.zeros((0, 2))
    lo, hi = np.asarray(grid.box.lo), np.asarray(grid.box.hi)
    roots = []
    for x in starts:
        for _ in range(50):
            D = fmap.jacobian(x)[rows]
            r = fmap(x)[rows] - y
            try:
                dx = np.linalg.solve(D, r)
            except np.linalg.LinAlgError:
                break
            x = x - dx
            if np.linalg.norm(dx) <= 1e-14 * (1 + np.linalg.norm(x)):
                break
        if np.linalg.norm(fmap(x)[rows] - y) <= 1e-9 * (1 + np.linalg.norm(y)) and np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9):
            roots.append(x)
    roots = np.array(roots).reshape(-1, 2)
    if len(roots):
        h = float(np.min(grid.spacing))
        keep = []
        for x in roots:
            if all(np.linalg.norm(x - k) > 1e-6 * h for k in keep):
                keep.append(x)
        roots = np.array(keep)
    return roots, on_edge


def projection_multiplicity(fmap: MapSpec, I: MultiIndex, y, grid: GridDomain, recount: bool = True) -> MultiplicityResult:
    """Number of preimages of ``y`` under f_I = pi_I o f on the grid box.

    Candidate roots come from the piecewise linear interpolant of f_I on the
    grid triangles (two per cell); each is polished by Newton's method and
    duplicates are merged.  The count is repeated on the grid refined twice
    and flagged ``unstable`` if it differs; a root found on a triangle
    boundary is counted once and flagged ``boundary``.
    """
    if fmap.n != 2 or len(I) != 2:
        raise ValueError("projection multiplicity is implemented for n = 2")
    I.check(fmap.m)
    y = np.asarray(y, dtype=float)
    roots, on_edge = _preimages(fmap, I, y, grid)
    flags = ["boundary"] if on_edge else []
    again = None
    if recount:
        again = len(_preimages(fmap, I, y, grid.refined(2))[0])
        if again != len(roots):
            flags.append("unstable")
    return MultiplicityResult(len(roots), roots, flags, again)
