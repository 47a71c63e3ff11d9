"""Exact point-to-surface queries accelerated by an AABB tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import Mesh

__all__ = [
    "FaceBVH",
    "Projection",
    "brute_force_projection",
    "closest_point_on_triangles",
    "nearest_face_projection",
    "project_points",
]


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, vectorised.

    All arguments broadcast to shape (n, 3). Follows the Voronoi-region
    case analysis of Ericson, *Real-Time Collision Detection* (2004).

    Returns
    -------
    points : ndarray (n, 3)
    bary : ndarray (n, 3)
        Barycentric weights (w1, w2, w3), nonnegative and summing to 1.
        Vertex regions give exact one-hot weights.
    """
    p, a, b, c = np.broadcast_arrays(
        *(np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (p, a, b, c))
    )
    n = p.shape[0]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    v = np.zeros(n)
    w = np.zeros(n)
    done = np.zeros(n, dtype=bool)

    def take(mask, vv, ww):
        nonlocal done
        m = mask & ~done
        v[m] = vv[m] if np.ndim(vv) else vv
        w[m] = ww[m] if np.ndim(ww) else ww
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), 0.0, 0.0)
        take((d3 >= 0) & (d4 <= d3), 1.0, 0.0)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), d1 / (d1 - d3), 0.0)
        take((d6 >= 0) & (d5 <= d6), 0.0, 1.0)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), 0.0, d2 / (d2 - d6))
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 1.0 - t, t)
        denom = va + vb + vc
        take(np.ones(n, dtype=bool), vb / denom, vc / denom)
    # degenerate triangles can leave NaNs; fall back to the nearest corner
    bad = ~(np.isfinite(v) & np.isfinite(w))
    if np.any(bad):
        dist = np.stack(
            [np.einsum("ij,ij->i", x - p, x - p) for x in (a, b, c)], axis=1
        )[bad]
        k = np.argmin(dist, axis=1)
        v[bad] = (k == 1).astype(float)
        w[bad] = (k == 2).astype(float)
    v = np.clip(v, 0.0, 1.0)
    w = np.clip(w, 0.0, 1.0)
    s = v + w
    over = s > 1.0
    v[over] /= s[over]
    w[over] /= s[over]
    u = 1.0 - v - w
    u = np.where(u < 0.0, 0.0, u)
    bary = np.stack([u, v, w], axis=1)
    pts = a + v[:, None] * ab + w[:, None] * ac
    # exact corners for one-hot weights
    pts = np.where((u == 1.0)[:, None], a, pts)
    pts = np.where((v == 1.0)[:, None], b, pts)
    pts = np.where((w == 1.0)[:, None], c, pts)
    return pts, bary


@dataclass
class Projection:
    face: np.ndarray
    bary: np.ndarray
    point: np.ndarray
    distance: np.ndarray


class FaceBVH:
    """Median-split AABB tree over the faces of a mesh.

    The tree only prunes; every candidate leaf face is tested with the
    exact closest-point routine, so query results match an exhaustive
    scan. Ties in distance go to the lowest face index.
    """

    def __init__(self, mesh: Mesh, leaf_size: int = 8):
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces
        tri = v[f]
        self._a, self._b, self._c = tri[:, 0], tri[:, 1], tri[:, 2]
        lo_f = tri.min(axis=1)
        hi_f = tri.max(axis=1)
        cen = tri.mean(axis=1)
        self._centroid_tree = cKDTree(cen) if len(f) else None

        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(f))
        # iterative build: (node id, slice start, slice stop)
        stack = [(0, 0, len(f))]
        lo.append(None); hi.append(None); left.append(-1); right.append(-1)
        start.append(0); count.append(0)
        while stack:
            node, s0, s1 = stack.pop()
            idx = order[s0:s1]
            lo[node] = lo_f[idx].min(axis=0)
            hi[node] = hi_f[idx].max(axis=0)
            if s1 - s0 <= leaf_size:
                start[node], count[node] = s0, s1 - s0
                continue
            ext = cen[idx].max(axis=0) - cen[idx].min(axis=0)
            axis = int(np.argmax(ext))
            srt = idx[np.argsort(cen[idx, axis], kind="stable")]
            order[s0:s1] = srt
            mid = (s0 + s1) // 2
            for child_range in ((s0, mid), (mid, s1)):
                cid = len(lo)
                lo.append(None); hi.append(None); left.append(-1); right.append(-1)
                start.append(0); count.append(0)
                if child_range[0] == s0:
                    left[node] = cid
                else:
                    right[node] = cid
                stack.append((cid, *child_range))
        self._lo = np.array(lo)
        self._hi = np.array(hi)
        self._left = np.array(left)
        self._right = np.array(right)
        self._start = np.array(start)
        self._count = np.array(count)
        self._order = order

    def query(self, points) -> Projection:
        """Batched traversal over all queries at once.

        Pairs of (query, node) are expanded breadth-first and discarded when
        the node's box is farther than the query's current best distance.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        _, fi = self._centroid_tree.query(points)
        fi = np.asarray(fi, dtype=np.int64)
        proj, bary = closest_point_on_triangles(points, self._a[fi], self._b[fi], self._c[fi])
        d2 = np.einsum("ij,ij->i", proj - points, proj - points)
        face = fi.copy()

        q = np.arange(n)
        nodes = np.zeros(n, dtype=np.int64)
        while len(q):
            diff = np.maximum(self._lo[nodes] - points[q], 0.0) + np.maximum(
                points[q] - self._hi[nodes], 0.0
            )
            keep = np.einsum("ij,ij->i", diff, diff) <= d2[q]
            q, nodes = q[keep], nodes[keep]
            leaf = self._left[nodes] < 0
            lq, ln = q[leaf], nodes[leaf]
            if len(lq):
                cnt = self._count[ln]
                qq = np.repeat(lq, cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                ff = self._order[np.repeat(self._start[ln], cnt) + offs]
                pts, bcs = closest_point_on_triangles(
                    points[qq], self._a[ff], self._b[ff], self._c[ff]
                )
                dd = np.einsum("ij,ij->i", pts - points[qq], pts - points[qq])
                # lexicographic (distance, face) minimum per query
                o = np.lexsort((ff, dd, qq))
                qq, ff, dd, pts, bcs = qq[o], ff[o], dd[o], pts[o], bcs[o]
                first = np.ones(len(qq), dtype=bool)
                first[1:] = qq[1:] != qq[:-1]
                qq, ff, dd, pts, bcs = qq[first], ff[first], dd[first], pts[first], bcs[first]
                better = (dd < d2[qq]) | ((dd == d2[qq]) & (ff < face[qq]))
                qb = qq[better]
                d2[qb] = dd[better]
                face[qb] = ff[better]
                proj[qb] = pts[better]
                bary[qb] = bcs[better]
            iq, inn = q[~leaf], nodes[~leaf]
            q = np.concatenate([iq, iq])
            nodes = np.concatenate([self._left[inn], self._right[inn]])
        return Projection(face, bary, proj, np.sqrt(d2))


def nearest_face_projection(point, mesh: Mesh, bvh: FaceBVH | None = None):
    """Closest surface point of ``mesh`` to a single query point.

    Returns ``(face_id, (w1, w2, w3), projected_point)``.
    """
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    res = (bvh or FaceBVH(mesh)).query(np.asarray(point, dtype=np.float64)[None])
    return int(res.face[0]), tuple(res.bary[0].tolist()), res.point[0]


def project_points(points, mesh: Mesh, bvh: FaceBVH | None = None) -> Projection:
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    return (bvh or FaceBVH(mesh)).query(points)


def brute_force_projection(points, mesh: Mesh) -> Projection:
    """Exhaustive per-face scan; reference for testing the tree."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v, f = mesh.vertices, mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    out_f = np.empty(len(points), dtype=np.int64)
    out_b = np.empty((len(points), 3))
    out_p = np.empty((len(points), 3))
    out_d = np.empty(len(points))
    for i, p in enumerate(points):
        pts, bcs = closest_point_on_triangles(p, a, b, c)
        d2 = np.einsum("ij,ij->i", pts - p, pts - p)
        k = int(np.argmin(d2))
        out_f[i], out_b[i], out_p[i], out_d[i] = k, bcs[k], pts[k], np.sqrt(d2[k])
    return Projection(out_f, out_b, out_p, out_d)
