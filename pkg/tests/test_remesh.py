import numpy as np
import pytest
from conftest import noisy_tube, wavy_sheet

from garmesh.bvh import brute_force_projection
from garmesh.errors import InputError, TopologyMismatchError
from garmesh.mesh import Mesh
from garmesh.primitives import tube
from garmesh.remesh import BarycentricMap, apply_barycentric_map, build_barycentric_map
from garmesh.synth import skirt


def random_affine(rng):
    while True:
        a = rng.normal(size=(3, 3))
        if abs(np.linalg.det(a)) > 0.2:
            return a, rng.normal(size=3)


def test_identity_map_reproduces_template():
    t = noisy_tube(seed=2)
    bmap = build_barycentric_map(t, t)
    assert np.isclose(bmap.weights, 1.0).sum(axis=1).tolist() == [1] * t.n_vertices
    out = apply_barycentric_map(bmap, t)
    assert np.abs(out.vertices - t.vertices).max() < 1e-9
    assert np.array_equal(out.faces, t.faces)


def test_vertex_above_centroid_gets_uniform_weights():
    reg = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), [[0, 1, 2]])
    tpl = Mesh(np.array([[1 / 3, 1 / 3, 0.4], [2, 2, 0], [2, 3, 0]]), [[0, 1, 2]])
    bmap = build_barycentric_map(tpl, reg)
    assert np.allclose(bmap.weights[0], 1 / 3, atol=1e-12)


def test_map_matches_exhaustive_scan():
    reg = skirt(0.22, 0.3, 0.05, -0.45, 20, 10, wave=0.1)
    tpl = skirt(0.23, 0.25, 0.06, -0.44, 27, 13)
    bmap = build_barycentric_map(tpl, reg)
    slow = brute_force_projection(tpl.vertices, reg)
    assert np.array_equal(bmap.face_ids, slow.face)
    assert np.abs(bmap.weights - slow.bary).max() < 1e-12


def test_weights_are_convex_even_off_surface():
    reg = tube(0.2, 0.1, -0.1, 10, 4)
    tpl = tube(0.5, 0.4, -0.4, 14, 6)  # entirely outside the registered surface
    w = build_barycentric_map(tpl, reg).weights
    assert np.all(w >= 0) and np.abs(w.sum(axis=1) - 1).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_affine_equivariance(seed):
    rng = np.random.default_rng(seed)
    reg = noisy_tube(seed=seed)
    tpl = skirt(0.31, 0.1, 0.3, -0.3, 15, 7)
    bmap = build_barycentric_map(tpl, reg)
    frame = reg.with_vertices(reg.vertices + rng.normal(0, 0.02, reg.vertices.shape))
    a, t = random_affine(rng)
    lhs = apply_barycentric_map(bmap, frame.with_vertices(frame.vertices @ a.T + t)).vertices
    rhs = apply_barycentric_map(bmap, frame).vertices @ a.T + t
    assert np.abs(lhs - rhs).max() < 1e-9


def test_topology_mismatch():
    reg = noisy_tube()
    bmap = build_barycentric_map(reg, reg)
    with pytest.raises(TopologyMismatchError):
        apply_barycentric_map(bmap, tube(0.3, 0.3, -0.3, 13, 8))
    flipped = Mesh(reg.vertices, reg.faces[:, ::-1])
    with pytest.raises(TopologyMismatchError):
        apply_barycentric_map(bmap, flipped)


def test_save_load_round_trip(tmp_path):
    reg, tpl = wavy_sheet(seed=1), wavy_sheet(6, 7, seed=2)
    bmap = build_barycentric_map(tpl, reg)
    bmap.save(tmp_path / "map.json")
    back = BarycentricMap.load(tmp_path / "map.json")
    assert np.array_equal(back.face_ids, bmap.face_ids)
    assert np.array_equal(back.weights, bmap.weights)
    assert np.array_equal(apply_barycentric_map(back, reg).vertices, apply_barycentric_map(bmap, reg).vertices)


def test_malformed_map_rejected():
    with pytest.raises(InputError):
        BarycentricMap.from_dict({"face_ids": [0]})
    d = build_barycentric_map(wavy_sheet(), wavy_sheet()).to_dict()
    d["face_ids"][0] = 10_000
    with pytest.raises(InputError):
        BarycentricMap.from_dict(d)
