"""Parametric meshes used by the synthetic scene and the tests."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh


def grid_faces(rows: int, cols: int, wrap: bool = False) -> np.ndarray:
    """Triangulate a rows x cols vertex grid (row-major ids).

    With ``wrap`` the last column connects back to the first (a tube).
    """
    faces = []
    ncol = cols if wrap else cols - 1
    for r in range(rows - 1):
        for c in range(ncol):
            c1 = (c + 1) % cols
            a = r * cols + c
            b = r * cols + c1
            d = (r + 1) * cols + c
            e = (r + 1) * cols + c1
            faces.append((a, b, d))
            faces.append((b, e, d))
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def tube(radius=0.22, top=0.05, bottom=-0.45, n_around=48, n_down=24, center=(0.0, 0.0), flare=0.0) -> Mesh:
    """Open cylinder along y, outward-facing; row 0 is the top rim.

    ``flare`` widens the radius linearly towards the bottom rim (a skirt).
    """
    ys = np.linspace(top, bottom, n_down)
    t = np.linspace(0.0, 1.0, n_down)
    ang = 2.0 * np.pi * np.arange(n_around) / n_around
    r = radius * (1.0 + flare * t)
    x = center[0] + r[:, None] * np.cos(ang)[None, :]
    z = center[1] + r[:, None] * np.sin(ang)[None, :]
    y = np.repeat(ys[:, None], n_around, axis=1)
    v = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    return Mesh(v, grid_faces(n_down, n_around, wrap=True))


def tube_rims(n_around: int, n_down: int) -> dict:
    """Seed ids for the top ("waist") and bottom ("hem") rims of :func:`tube`."""
    last = (n_down - 1) * n_around
    return {"waist": [0, 1], "hem": [last, last + 1]}


def uv_sphere(radius=1.0, n_lat=12, n_lon=24, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Closed sphere with single pole vertices, outward-facing."""
    verts = [(0.0, radius, 0.0)]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2.0 * np.pi * j / n_lon
            verts.append((radius * np.sin(th) * np.cos(ph), radius * np.cos(th), radius * np.sin(th) * np.sin(ph)))
    verts.append((0.0, -radius, 0.0))
    v = np.array(verts) + np.asarray(center)
    faces = []
    for j in range(n_lon):
        faces.append((0, 1 + (j + 1) % n_lon, 1 + j))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a = 1 + i * n_lon + j
            b = 1 + i * n_lon + (j + 1) % n_lon
            c = a + n_lon
            d = b + n_lon
            faces += [(a, b, c), (b, d, c)]
    south = len(v) - 1
    base = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append((south, base + j, base + (j + 1) % n_lon))
    return Mesh(v, np.array(faces))


def capsule(p0, p1, radius, n_around=16, n_cyl=12, n_cap=4) -> Mesh:
    """Closed capsule from ``p0`` to ``p1`` with hemispherical caps."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    a = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    w = np.cross(a, u)
    # profile: (distance along axis, ring radius), pole to pole
    prof = []
    for i in range(1, n_cap + 1):
        phi = 0.5 * np.pi * i / n_cap
        prof.append((-radius * np.cos(phi), radius * np.sin(phi)))
    for i in range(1, n_cyl):
        prof.append((length * i / n_cyl, radius))
    for i in range(n_cap - 1, 0, -1):
        phi = 0.5 * np.pi * i / n_cap
        prof.append((length + radius * np.cos(phi), radius * np.sin(phi)))
    ang = 2.0 * np.pi * np.arange(n_around) / n_around
    verts = [p0 - radius * a]
    for s, r in prof:
        ring = p0 + s * a + r * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)
        verts.extend(ring)
    verts.append(p1 + radius * a)
    v = np.array(verts)
    nr = len(prof)
    faces = []
    for j in range(n_around):
        faces.append((0, 1 + j, 1 + (j + 1) % n_around))
    for i in range(nr - 1):
        for j in range(n_around):
            a0 = 1 + i * n_around + j
            b0 = 1 + i * n_around + (j + 1) % n_around
            faces += [(a0, a0 + n_around, b0), (b0, a0 + n_around, b0 + n_around)]
    last = len(v) - 1
    base = 1 + (nr - 1) * n_around
    for j in range(n_around):
        faces.append((last, base + (j + 1) % n_around, base + j))
    m = Mesh(v, np.array(faces))
    return _orient_outward(m)


def box(lo, hi, n=4) -> Mesh:
    """Closed axis-aligned box, each side split into an n x n grid."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n + 1)
    verts = []
    faces = []
    for ax in range(3):
        for side in (0, 1):
            o1, o2 = [k for k in range(3) if k != ax]
            base = len(verts)
            for i in t:
                for j in t:
                    p = np.empty(3)
                    p[ax] = hi[ax] if side else lo[ax]
                    p[o1] = lo[o1] + i * (hi[o1] - lo[o1])
                    p[o2] = lo[o2] + j * (hi[o2] - lo[o2])
                    verts.append(p)
            g = grid_faces(n + 1, n + 1) + base
            faces.extend(g.tolist())
    v = np.array(verts)
    f = np.array(faces)
    # weld duplicated edge/corner vertices
    key = np.round(v, 12)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    first = np.full(len(uniq), -1)
    for i, k in enumerate(inv.ravel()):
        if first[k] < 0:
            first[k] = i
    f = inv.ravel()[f]
    m = Mesh(v[first], f)
    return _orient_outward(m, per_face=True)


def _orient_outward(m: Mesh, per_face: bool = False) -> Mesh:
    """Flip faces whose normal points towards the mesh centroid."""
    v, f = m.vertices, m.faces.copy()
    cen = v.mean(axis=0)
    fc = v[f].mean(axis=1)
    dots = np.einsum("ij,ij->i", m.face_cross, fc - cen)
    if per_face:
        flip = dots < 0
        f[flip] = f[flip][:, [0, 2, 1]]
    elif np.sum(dots) < 0:
        f = f[:, [0, 2, 1]]
    return Mesh(v, f)


def merge(*meshes: Mesh) -> Mesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return Mesh(np.concatenate(verts), np.concatenate(faces))
