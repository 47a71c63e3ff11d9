import numpy as np
import pytest
from conftest import noisy_tube, wavy_sheet
from hypothesis import given, settings
from hypothesis import strategies as st

from garmesh import container
from garmesh.bvh import (
    FaceBVH,
    brute_force_projection,
    closest_point_on_triangles,
    nearest_face_projection,
    project_points,
)
from garmesh.container import ContainerError
from garmesh.mesh import Mesh
from garmesh.primitives import uv_sphere
from garmesh.spatial import knn, nearest, scatter_add


def _dense_closest(p, a, b, c, n=401):
    """Grid search over the triangle, used only as a coarse sanity oracle."""
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return np.min(np.linalg.norm(pts - p, axis=1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_closest_point_is_on_triangle_and_no_farther_than_grid(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 3))
    if np.linalg.norm(np.cross(b - a, c - a)) < 1e-2:
        return
    p = rng.normal(size=3) * 2
    pts, bary = closest_point_on_triangles(p[None], a[None], b[None], c[None])
    assert np.all(bary >= 0) and abs(bary.sum() - 1) < 1e-12
    recon = bary[0, 0] * a + bary[0, 1] * b + bary[0, 2] * c
    assert np.linalg.norm(recon - pts[0]) < 1e-9
    assert np.linalg.norm(pts[0] - p) <= _dense_closest(p, a, b, c) + 1e-12


def test_centroid_projection_is_uniform():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    m = Mesh(v, [[0, 1, 2]])
    face, w, pt = nearest_face_projection(v.mean(axis=0) + [0, 0, 0.7], m)
    assert face == 0
    assert np.allclose(w, 1 / 3, atol=1e-12)
    assert np.allclose(pt, v.mean(axis=0), atol=1e-12)


def test_vertex_query_is_one_hot():
    m = noisy_tube()
    proj = project_points(m.vertices, m)
    assert np.all(proj.distance == 0)
    hot = np.isclose(proj.bary, 1.0).sum(axis=1)
    assert np.all(hot == 1)
    for i in range(m.n_vertices):
        f = m.faces[proj.face[i]]
        assert f[np.argmax(proj.bary[i])] == i


@pytest.mark.parametrize("seed", range(3))
def test_bvh_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = uv_sphere(1.0, 14, 28)
    q = rng.normal(size=(1000, 3)) * rng.uniform(0.2, 2.0, size=(1000, 1))
    fast = FaceBVH(m, leaf_size=4).query(q)
    slow = brute_force_projection(q, m)
    assert np.abs(fast.distance - slow.distance).max() < 1e-12
    assert np.array_equal(fast.face, slow.face)


def test_bvh_tie_goes_to_lowest_face():
    # two coplanar faces share an edge; a point above the edge is equidistant
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    m = Mesh(v, [[1, 3, 2], [0, 1, 2]])
    proj = FaceBVH(m).query(np.array([[0.5, 0.5, 1.0]]))
    assert proj.face[0] == 0


# -- KNN --------------------------------------------------------------------------


def test_knn_matches_brute_force_with_ties():
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3), -1).reshape(-1, 3)
    q = g[::7] + 0.5
    idx, d2 = knn(q, g, 6)
    full = ((q[:, None] - g[None]) ** 2).sum(-1)
    order = np.lexsort((np.broadcast_to(np.arange(len(g)), full.shape), full), axis=1)[:, :6]
    assert np.array_equal(idx, order)
    assert np.array_equal(d2, np.take_along_axis(full, order, axis=1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 12))
def test_knn_property(seed, k):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.normal(size=(60, 3)), 1)  # rounding forces many ties
    q = np.round(rng.normal(size=(20, 3)), 1)
    idx, d2 = knn(q, pts, k)
    full = ((q[:, None] - pts[None]) ** 2).sum(-1)
    order = np.lexsort((np.broadcast_to(np.arange(len(pts)), full.shape), full), axis=1)[:, :k]
    assert np.array_equal(idx, order)


def test_knn_errors():
    with pytest.raises(ValueError):
        knn(np.zeros((1, 3)), np.zeros((0, 3)), 1)
    with pytest.raises(ValueError):
        knn(np.zeros((1, 3)), np.zeros((3, 3)), 4)


def test_nearest_and_scatter_add():
    pts = np.array([[0, 0, 0], [1, 0, 0]], float)
    i, d2 = nearest(np.array([[0.9, 0, 0], [0.5, 0, 0]]), pts)
    assert i.tolist() == [1, 0] and d2[0] == pytest.approx(0.01)
    out = scatter_add(3, np.array([0, 2, 0]), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    assert out.tolist() == [[6.0, 8.0], [0.0, 0.0], [3.0, 4.0]]


# -- container --------------------------------------------------------------------


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a": rng.normal(size=(4, 5)), "b": np.arange(3.0), "c": np.array(2.5)}
    container.save(tmp_path / "x.bin", t, kind="demo", meta={"k": 1})
    back, meta = container.load(tmp_path / "x.bin", kind="demo")
    assert meta == {"k": 1}
    for k in t:
        assert np.array_equal(back[k], t[k]) and back[k].shape == t[k].shape


def test_container_header_layout():
    raw = container.dumps({"x": np.array([1.0, 2.0])}, kind="demo")
    assert raw[:8] == b"GMSHTNSR"
    assert int.from_bytes(raw[8:12], "little") == 1
    n = int.from_bytes(raw[12:16], "little")
    assert np.frombuffer(raw[16 + n:], "<f8").tolist() == [1.0, 2.0]


def test_container_rejects_corruption():
    raw = container.dumps({"x": np.ones(4)}, kind="demo")
    with pytest.raises(ContainerError):
        container.loads(b"BADMAGIC" + raw[8:])
    with pytest.raises(ContainerError):
        container.loads(raw[:-8])
    with pytest.raises(ContainerError):
        container.loads(raw, kind="other")


def test_wavy_sheet_projection_oracle():
    m = wavy_sheet(7, 7, seed=5)
    rng = np.random.default_rng(5)
    q = rng.uniform(-0.2, 1.2, size=(300, 3))
    a, b = project_points(q, m), brute_force_projection(q, m)
    assert np.array_equal(a.face, b.face)
    assert np.abs(a.point - b.point).max() < 1e-12
