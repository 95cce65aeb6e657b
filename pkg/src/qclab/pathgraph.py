"""Density-weighted path graphs and the constraint-generation modulus solver.

A :class:`PathGraph` is a graph whose edge costs depend linearly on a
piecewise constant density ``rho`` defined on "cells" (grid cells or mesh
triangles).  Each edge has one or more *variants*; a variant is a list of
``(cell, length)`` pairs and costs ``sum(rho[cell] * length)``.  The edge
cost is the cheapest variant.  Several variants let a segment lying on the
common boundary of two cells be charged to either of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

# added to every edge cost so that zero-density edges stay in the graph and
# ties break toward euclidean-short paths
_TIE_EPS = 1e-12


@dataclass
class PathGraph:
    n_nodes: int
    cell_measure: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    var_edge: np.ndarray
    var_ptr: np.ndarray
    pair_cell: np.ndarray
    pair_len: np.ndarray
    source: int
    target: int
    _edge_lookup: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, n_nodes, cell_measure, edges, source, target) -> "PathGraph":
        """``edges`` is an iterable of ``(u, v, variants)`` with ``variants`` a
        list of lists of ``(cell, length)``.  Duplicate (u, v) pairs are merged
        by pooling their variants."""
        merged: dict[tuple[int, int], list] = {}
        for u, v, variants in edges:
            key = (u, v) if u < v else (v, u)
            merged.setdefault(key, []).extend(variants)
        return cls._from_merged(n_nodes, cell_measure, merged, source, target)

    @classmethod
    def from_arrays(cls, n_nodes, cell_measure, u, v, var_edge, var_ptr, pair_cell, pair_len, source, target):
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        g = cls(
            n_nodes=int(n_nodes),
            cell_measure=np.asarray(cell_measure, dtype=float),
            edge_u=np.minimum(u, v),
            edge_v=np.maximum(u, v),
            var_edge=np.asarray(var_edge, dtype=np.int64),
            var_ptr=np.asarray(var_ptr, dtype=np.int64),
            pair_cell=np.asarray(pair_cell, dtype=np.int64),
            pair_len=np.asarray(pair_len, dtype=float),
            source=int(source),
            target=int(target),
        )
        g._index()
        return g

    @classmethod
    def _from_merged(cls, n_nodes, cell_measure, merged, source, target):
        us, vs, var_edge, var_ptr, cells, lens = [], [], [], [0], [], []
        for e, ((u, v), variants) in enumerate(sorted(merged.items())):
            us.append(u)
            vs.append(v)
            for var in variants:
                var_edge.append(e)
                for c, ln in var:
                    cells.append(c)
                    lens.append(ln)
                var_ptr.append(len(cells))
        return cls.from_arrays(n_nodes, cell_measure, us, vs, var_edge, var_ptr, cells, lens, source, target)

    def _index(self):
        keys = self.edge_u * self.n_nodes + self.edge_v
        order = np.argsort(keys)
        self._sorted_keys = keys[order]
        self._sorted_edges = order
        pair_var = np.repeat(np.arange(len(self.var_edge)), np.diff(self.var_ptr))
        self._pair_var = pair_var
        self._target_edges = np.flatnonzero((self.edge_u == self.target) | (self.edge_v == self.target))
        self._source_edges = np.flatnonzero((self.edge_u == self.source) | (self.edge_v == self.source))

    @property
    def n_cells(self) -> int:
        return len(self.cell_measure)

    @property
    def n_edges(self) -> int:
        return len(self.edge_u)

    def edge_costs(self, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cost of each edge under ``rho`` and the index of the variant used."""
        var_cost = np.bincount(
            self._pair_var, weights=rho[self.pair_cell] * self.pair_len, minlength=len(self.var_edge)
        )
        cost = np.full(self.n_edges, np.inf)
        np.minimum.at(cost, self.var_edge, var_cost)
        # first variant achieving the minimum, deterministic
        is_min = var_cost <= cost[self.var_edge]
        choice = np.full(self.n_edges, -1, dtype=np.int64)
        idx = np.flatnonzero(is_min)[::-1]
        choice[self.var_edge[idx]] = idx
        return cost, choice

    def geometric_length(self) -> np.ndarray:
        """Euclidean length of each edge (length of its first variant)."""
        first = np.zeros(self.n_edges, dtype=np.int64)
        first[self.var_edge[::-1]] = np.arange(len(self.var_edge))[::-1]
        plen = np.bincount(self._pair_var, weights=self.pair_len, minlength=len(self.var_edge))
        return plen[first]

    def _matrix(self, cost):
        w = cost + _TIE_EPS * (self.geometric_length() + 1e-6)
        return sparse.csr_matrix((w, (self.edge_u, self.edge_v)), shape=(self.n_nodes, self.n_nodes))

    def shortest(self, rho: np.ndarray, both: bool = False):
        """Dijkstra from the source (and the target if ``both``) under ``rho``.

        Returns (dist, predecessors, edge_cost, variant_choice); with ``both``
        dist and predecessors have one row per root.
        """
        cost, choice = self.edge_costs(rho)
        roots = [self.source, self.target] if both else self.source
        dist, pred = csgraph.dijkstra(self._matrix(cost), directed=False, indices=roots, return_predecessors=True)
        return dist, pred, cost, choice

    def edge_ids(self, nodes: np.ndarray) -> np.ndarray:
        a, b = nodes[:-1], nodes[1:]
        keys = np.minimum(a, b) * self.n_nodes + np.maximum(a, b)
        pos = np.searchsorted(self._sorted_keys, keys)
        return self._sorted_edges[pos]

    def path_row(self, nodes: np.ndarray, choice: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell lengths (cells, lengths) traversed by a node path."""
        vars_ = choice[self.edge_ids(nodes)]
        starts, stops = self.var_ptr[vars_], self.var_ptr[vars_ + 1]
        counts = stops - starts
        idx = np.repeat(starts - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
        return self.pair_cell[idx], self.pair_len[idx]

    @staticmethod
    def _walk(pred, start, root):
        nodes = [start]
        while nodes[-1] != root:
            nodes.append(pred[nodes[-1]])
        return nodes

    def candidate_paths(self, rho: np.ndarray):
        """Shortest source->target path through each edge at either end.

        Returns (paths, choice, shortest_length) with ``paths`` a list of
        (rho_length, node_path) sorted by length, without duplicates.
        """
        dist, pred, cost, choice = self.shortest(rho, both=True)
        found: dict[bytes, tuple[float, np.ndarray]] = {}
        for end, other in ((self.target, 0), (self.source, 1)):
            ends = self._target_edges if end == self.target else self._source_edges
            root = self.source if other == 0 else self.target
            for e in ends:
                f = self.edge_u[e] if self.edge_v[e] == end else self.edge_v[e]
                total = dist[other, f] + cost[e]
                if not np.isfinite(total):
                    continue
                nodes = np.array(self._walk(pred[other], f, root), dtype=np.int64)
                nodes = np.concatenate([nodes[::-1], [end]]) if end == self.target else np.concatenate([[end], nodes])
                found.setdefault(nodes.tobytes(), (float(total), nodes))
        out = sorted(found.values(), key=lambda t: (t[0], t[1][1], t[1][-2]))
        return out, choice, float(dist[0, self.target])


@dataclass
class ModulusSolution:
    modulus: float
    lower_bound: float
    density: np.ndarray
    min_path_length: float
    iterations: int
    n_paths: int
    converged: bool
    flag: str = ""

    @property
    def certificate_residual(self) -> float:
        return 1.0 - self.min_path_length


def _solve_dual(A, w, p, lam0, *, gtol=1e-10, maxiter=20000):
    """Maximize the dual of ``min sum w rho^p s.t. A rho >= 1`` over lambda >= 0.

    With s = A^T lambda the inner minimizer is rho = (s / (p w))^(1/(p-1))
    and the dual gradient is 1 - A rho.  Returns (lambda, rho, dual_value).
    """
    q = p / (p - 1.0)

    def rho_of(lam):
        s = np.maximum(A.T @ lam, 0.0)
        return (s / (p * w)) ** (1.0 / (p - 1.0)), s

    def negdual(lam):
        rho, s = rho_of(lam)
        val = lam.sum() - (p - 1.0) * np.sum(w * (s / (p * w)) ** q)
        return -val, A @ rho - 1.0

    res = optimize.minimize(
        negdual,
        lam0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * len(lam0),
        options={"maxiter": maxiter, "maxcor": 10, "ftol": 1e-15, "gtol": gtol},
    )
    lam = res.x
    rho, _ = rho_of(lam)
    return lam, rho, -res.fun


def _solve_lp(A, w):
    res = optimize.linprog(w, A_ub=-A, b_ub=-np.ones(A.shape[0]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP subproblem failed: {res.message}")
    return -res.ineqlin.marginals, res.x, float(res.fun)


def solve_modulus(graph: PathGraph, p: float = 2.0, tol: float = 1e-3, max_iter: int = 500) -> ModulusSolution:
    """Discrete p-modulus of all source->target paths in ``graph``.

    Constraint generation: the active set holds paths found as density
    weighted shortest paths; each round solves the convex subproblem over the
    active set, drops paths whose multiplier vanished, and adds every
    source->target path shorter than ``1 - tol``.  Terminates once the
    shortest path has density length >= 1 - tol, which certifies that
    ``density / min_path_length`` is admissible.  The returned modulus is
    the energy of that admissible density (an upper bound); the dual value
    of the last subproblem is a lower bound.
    """
    if p < 1:
        raise ValueError("exponent must be >= 1")
    w = graph.cell_measure
    # first round uses euclidean shortest paths
    rho = np.ones(graph.n_cells)
    rows: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
    lam = np.zeros(0)
    lower = 0.0
    lmin = 0.0
    gtol = 0.1 * tol
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        cands, choice, _ = graph.candidate_paths(rho)
        if not cands:
            return ModulusSolution(0.0, 0.0, np.zeros(graph.n_cells), np.inf, it, 0, True, "empty family")
        first = not rows
        lmin = 0.0 if first else cands[0][0]
        if lmin >= 1.0 - tol:
            converged = True
            break
        added = 0
        for total, nodes in cands:
            if not first and total >= 1.0 - tol:
                break
            # the same node path with other variant choices is a different
            # constraint, so rows are keyed by the variants used
            key = choice[graph.edge_ids(nodes)].tobytes()
            if key in rows:
                continue
            rows[key] = graph.path_row(nodes, choice)
            added += 1
        if added == 0:
            if gtol < 1e-14:
                logger.warning("stalled at iteration %d (min length %.6g)", it, lmin)
                break
            # violated paths are all active: the last solve was too loose
            gtol *= 1e-2
        keys = list(rows)
        A = _assemble([rows[k][0] for k in keys], [rows[k][1] for k in keys], graph.n_cells)
        if p == 1:
            lam, rho, lower = _solve_lp(A, w)
        else:
            lam0 = np.concatenate([lam, np.zeros(A.shape[0] - len(lam))])
            lam, rho, lower = _solve_dual(A, w, p, lam0, gtol=gtol)
        slack = A @ rho - 1.0
        keep = (lam > 0) | (slack < tol)
        for k, kp in zip(keys, keep):
            if not kp:
                del rows[k]
        lam = lam[keep]
        logger.debug("iter %d: %d paths (%d kept), dual %.8g, min length %.6g", it, len(keys), keep.sum(), lower, lmin)
    density = rho / lmin if lmin > 0 else np.full_like(rho, np.nan)
    upper = float(np.sum(w * density**p))
    return ModulusSolution(upper, float(lower), density, float(lmin), it, len(rows), converged)


def _assemble(cells_rows, lens_rows, n_cells):
    indptr = np.zeros(len(cells_rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(c) for c in cells_rows])
    A = sparse.csr_matrix(
        (np.concatenate(lens_rows), np.concatenate(cells_rows), indptr), shape=(len(cells_rows), n_cells)
    )
    A.sum_duplicates()
    return A
