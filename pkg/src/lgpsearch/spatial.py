"""k-d tree over Theta-scaled design points.

Points are stored pre-multiplied by Theta so plain Euclidean queries realise
the kernel metric.  Two query shapes are supported: k nearest neighbours
outside an excluded set, and the union of closed balls around several
centres.  Distances are always compared as squared distances computed
exactly like :meth:`KernelSpec.cross_scaled` does, so results agree with a
linear scan bit for bit.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

DEFAULT_LEAF_SIZE = 16
# bounding-box shortcuts only fire with this relative slack; points near a
# ball's boundary are always decided by their own squared distance
_BOX_SLACK = 1e-9


class KDTree:
    def __init__(self, points, leaf_size: int = DEFAULT_LEAF_SIZE):
        pts = np.ascontiguousarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("cannot build a k-d tree on an empty point set")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.points = pts
        self.leaf_size = int(leaf_size)
        n, d = pts.shape
        self.n, self.d = n, d
        order = np.arange(n)
        starts, ends, lefts, rights, los, his = [], [], [], [], [], []

        def new_node(s, e):
            seg = pts[order[s:e]]
            starts.append(s)
            ends.append(e)
            lefts.append(-1)
            rights.append(-1)
            los.append(seg.min(axis=0))
            his.append(seg.max(axis=0))
            return len(starts) - 1

        stack = [new_node(0, n)]
        while stack:
            node = stack.pop()
            s, e = starts[node], ends[node]
            if e - s <= self.leaf_size:
                continue
            spread = his[node] - los[node]
            axis = int(np.argmax(spread))
            if spread[axis] == 0.0:
                continue
            idx = order[s:e]
            # ties on the split coordinate go by lower dataset index
            idx = idx[np.lexsort((idx, pts[idx, axis]))]
            order[s:e] = idx
            mid = s + (e - s) // 2
            left = new_node(s, mid)
            right = new_node(mid, e)
            lefts[node], rights[node] = left, right
            stack.append(right)
            stack.append(left)

        self.order = order
        self.starts = np.array(starts)
        self.ends = np.array(ends)
        self.lefts = np.array(lefts)
        self.rights = np.array(rights)
        self.lo = np.array(los)
        self.hi = np.array(his)

    @property
    def n_nodes(self) -> int:
        return len(self.starts)

    def leaves(self):
        return [i for i in range(self.n_nodes) if self.lefts[i] < 0]

    def leaf_members(self, node: int) -> np.ndarray:
        return self.order[self.starts[node]:self.ends[node]]

    def _box_min_d2(self, node: int, q: np.ndarray) -> float:
        gap = np.maximum(np.maximum(self.lo[node] - q, q - self.hi[node]), 0.0)
        return float(gap @ gap)

    def _box_max_d2(self, node: int, q: np.ndarray) -> float:
        far = np.maximum(np.abs(q - self.lo[node]), np.abs(self.hi[node] - q))
        return float(far @ far)

    def knn_excluding(self, query, k: int, excluded=None) -> np.ndarray:
        """Indices of the ``k`` nearest points not excluded, ascending by (distance, index).

        ``excluded`` is a boolean mask of length N or an iterable of indices.
        """
        q = np.asarray(query, dtype=float).reshape(-1)
        mask = _as_mask(excluded, self.n)
        available = self.n - (int(mask.sum()) if mask is not None else 0)
        if k > available:
            raise ValueError(f"k={k} exceeds the {available} non-excluded points")
        if k <= 0:
            return np.zeros(0, dtype=int)
        best: list[tuple[float, int]] = []  # max-heap of (-d2, -index)
        frontier = [(self._box_min_d2(0, q), 0)]
        while frontier:
            bound, node = heapq.heappop(frontier)
            if len(best) == k and bound > -best[0][0]:
                break
            left = self.lefts[node]
            if left >= 0:
                for child in (left, self.rights[node]):
                    cb = self._box_min_d2(child, q)
                    if len(best) < k or cb <= -best[0][0]:
                        heapq.heappush(frontier, (cb, child))
                continue
            ids = self.leaf_members(node)
            if mask is not None:
                ids = ids[~mask[ids]]
            if ids.size == 0:
                continue
            d2 = _sqsum(self.points[ids] - q)
            for dist, i in zip(d2.tolist(), ids.tolist()):
                item = (-dist, -i)
                if len(best) < k:
                    heapq.heappush(best, item)
                elif item > best[0]:
                    heapq.heapreplace(best, item)
        ranked = sorted((-a, -b) for a, b in best)
        return np.array([i for _, i in ranked], dtype=int)

    def within_radius_of_any(self, centers, radius: float, excluded=None,
                             scratch: np.ndarray | None = None) -> np.ndarray:
        """Sorted indices inside the union of closed balls ``||u - c|| <= radius``.

        ``scratch`` may be a caller-owned boolean array of length N; it is
        cleared and used as the shared visited bitmap.
        """
        mask = _as_mask(excluded, self.n)
        if math.isinf(radius):
            if mask is None:
                return np.arange(self.n)
            return np.flatnonzero(~mask)
        if radius < 0 or math.isnan(radius):
            raise ValueError(f"radius must be >= 0, got {radius}")
        if scratch is None:
            hit = np.zeros(self.n, dtype=bool)
        else:
            hit = scratch
            hit[:] = False
        r2 = radius * radius
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        # breadth-first over (node, centre) pairs, one tree level per pass
        nodes = np.zeros(centers.shape[0], dtype=int)
        cids = np.arange(centers.shape[0])
        while nodes.size:
            c = centers[cids]
            lo, hi = self.lo[nodes], self.hi[nodes]
            gap = np.maximum(np.maximum(lo - c, c - hi), 0.0)
            near = _sqsum(gap) <= r2 * (1.0 + _BOX_SLACK)
            nodes, cids, c, lo, hi = nodes[near], cids[near], c[near], lo[near], hi[near]
            far = np.maximum(np.abs(c - lo), np.abs(hi - c))
            inside = _sqsum(far) < r2 * (1.0 - _BOX_SLACK)
            for node in np.unique(nodes[inside]):
                hit[self.order[self.starts[node]:self.ends[node]]] = True
            rest = ~inside
            nodes, cids = nodes[rest], cids[rest]
            leaf = self.lefts[nodes] < 0
            if leaf.any():
                ln, lc = nodes[leaf], cids[leaf]
                counts = self.ends[ln] - self.starts[ln]
                offs = np.repeat(self.starts[ln] - np.cumsum(counts) + counts, counts)
                ids = self.order[np.arange(counts.sum()) + offs]
                owner = np.repeat(lc, counts)
                d2 = _sqsum(self.points[ids] - centers[owner])
                hit[ids[d2 <= r2]] = True
            inner = ~leaf
            nodes = np.concatenate([self.lefts[nodes[inner]], self.rights[nodes[inner]]])
            cids = np.concatenate([cids[inner], cids[inner]])
        if mask is not None:
            hit &= ~mask
        return np.flatnonzero(hit)


def _sqsum(diff: np.ndarray) -> np.ndarray:
    """Row-wise sum of squares accumulated coordinate by coordinate."""
    out = diff[:, 0] * diff[:, 0]
    for c in range(1, diff.shape[1]):
        out = out + diff[:, c] * diff[:, c]
    return out


def _as_mask(excluded, n: int) -> np.ndarray | None:
    if excluded is None:
        return None
    if isinstance(excluded, np.ndarray) and excluded.dtype == bool:
        if excluded.shape != (n,):
            raise ValueError("excluded mask has the wrong length")
        return excluded
    mask = np.zeros(n, dtype=bool)
    idx = np.fromiter(excluded, dtype=int)
    if idx.size:
        mask[idx] = True
    return mask


def build(points, leaf_size: int = DEFAULT_LEAF_SIZE) -> KDTree:
    return KDTree(points, leaf_size)


def linear_knn_excluding(points: np.ndarray, query, k: int, excluded=None) -> np.ndarray:
    """Brute-force counterpart of :meth:`KDTree.knn_excluding`."""
    q = np.asarray(query, dtype=float).reshape(-1)
    n = points.shape[0]
    mask = _as_mask(excluded, n)
    d2 = _sqsum(points - q)
    ids = np.arange(n)
    if mask is not None:
        ids, d2 = ids[~mask], d2[~mask]
    if k > ids.size:
        raise ValueError(f"k={k} exceeds the {ids.size} non-excluded points")
    sel = np.lexsort((ids, d2))[:k]
    return ids[sel]


def linear_within_radius_of_any(points: np.ndarray, centers, radius: float,
                                excluded=None) -> np.ndarray:
    """Brute-force counterpart of :meth:`KDTree.within_radius_of_any`."""
    n = points.shape[0]
    mask = _as_mask(excluded, n)
    if math.isinf(radius):
        hit = np.ones(n, dtype=bool)
    else:
        r2 = radius * radius
        hit = np.zeros(n, dtype=bool)
        for c in np.atleast_2d(np.asarray(centers, dtype=float)):
            hit |= _sqsum(points - c) <= r2
    if mask is not None:
        hit &= ~mask
    return np.flatnonzero(hit)
