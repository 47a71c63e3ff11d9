import numpy as np
import pytest
from conftest import noisy_tube, wavy_sheet
from hypothesis import given, settings
from hypothesis import strategies as st

from garmesh.errors import MeshError, ObjParseError
from garmesh.mesh import (
    Mesh,
    build_laplacian,
    dihedral_angles,
    extract_boundary_loops,
    label_boundary_loops,
    load_boundary_labels,
    load_obj,
    save_obj,
)
from garmesh.primitives import box, capsule, tube, uv_sphere


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- construction --------------------------------------------------------------


def test_rejects_out_of_range_and_degenerate_faces():
    v = np.zeros((3, 3))
    with pytest.raises(MeshError):
        Mesh(v, [[0, 1, 3]])
    with pytest.raises(MeshError):
        Mesh(v, [[0, 1, 1]])
    with pytest.raises(MeshError):
        Mesh(np.full((3, 3), np.nan), [[0, 1, 2]])


def test_arrays_are_read_only():
    m = wavy_sheet()
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


def test_vertex_normals_unit_and_zero_star_flagged():
    m = noisy_tube()
    n = np.linalg.norm(m.vertex_normals, axis=1)
    assert np.all(np.abs(n - 1) < 1e-9)
    assert not m.zero_normal_mask.any()
    # an isolated vertex has an empty star
    v = np.vstack([m.vertices, [[5.0, 5.0, 5.0]]])
    m2 = Mesh(v, m.faces)
    assert m2.zero_normal_mask[-1]
    assert np.all(m2.vertex_normals[-1] == 0)


def test_tube_normals_point_outward():
    m = tube(0.3, 0.3, -0.3, 16, 6)
    radial = m.vertices * np.array([1.0, 0.0, 1.0])
    assert np.all(np.einsum("ij,ij->i", m.vertex_normals, radial) > 0)


@pytest.mark.parametrize("mesh", [uv_sphere(), capsule((0, 0, 0), (0, 1, 0), 0.2), box((0, 0, 0), (1, 2, 3))])
def test_closed_primitives_are_watertight_and_outward(mesh):
    assert np.all(mesh.edge_face_counts == 2)
    c = mesh.vertices.mean(axis=0)
    assert np.einsum("ij,ij->", mesh.vertex_normals, mesh.vertices - c) > 0


# -- OBJ -------------------------------------------------------------------------


def test_minimal_obj(tmp_path):
    m = load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert m.n_vertices == 3 and m.n_faces == 1
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_index_out_of_range_reports_line(tmp_path):
    with pytest.raises(ObjParseError) as exc:
        load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n"))
    assert exc.value.line == 4
    assert str(exc.value).split(": ")[0].endswith(":4")


def test_obj_rejects_quads(tmp_path):
    with pytest.raises(ObjParseError, match="triangular"):
        load_obj(write(tmp_path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"))


def test_obj_bad_number_reports_line(tmp_path):
    with pytest.raises(ObjParseError) as exc:
        load_obj(write(tmp_path, "# c\nv 0 0 0\nv 1 x 0\n"))
    assert exc.value.line == 3


def test_obj_ignores_normals_and_texture_indices(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nf 1/1/1 2/1/1 -1/1/1\n"
    m = load_obj(write(tmp_path, text))
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_missing_file(tmp_path):
    with pytest.raises(ObjParseError):
        load_obj(tmp_path / "nope.obj")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e6))
def test_obj_round_trip_is_exact(tmp_path_factory, seed, scale):
    rng = np.random.default_rng(seed)
    m = wavy_sheet(4, 5, seed=seed)
    m = m.with_vertices(m.vertices * scale + rng.normal(size=3))
    p = tmp_path_factory.mktemp("obj") / "r.obj"
    save_obj(m, p)
    back = load_obj(p)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_save_obj_leaves_no_temp_files(tmp_path):
    save_obj(wavy_sheet(), tmp_path / "out" / "a.obj")
    assert [p.name for p in (tmp_path / "out").iterdir()] == ["a.obj"]


# -- boundaries ------------------------------------------------------------------


def test_sphere_has_no_boundary():
    assert extract_boundary_loops(uv_sphere()) == []


def test_tube_has_two_loops():
    loops = extract_boundary_loops(tube(0.3, 0.3, -0.3, 16, 5))
    assert [len(l) for l in loops] == [16, 16]


def test_single_triangle_loop():
    loops = extract_boundary_loops(Mesh(np.eye(3), [[0, 1, 2]]))
    assert len(loops) == 1 and sorted(loops[0].vertex_ids) == [0, 1, 2]


def test_loops_partition_boundary_edges():
    m = wavy_sheet(6, 7)
    loops = extract_boundary_loops(m)
    boundary = {tuple(e) for e in m.edges[m.edge_face_counts == 1].tolist()}
    walked = []
    for loop in loops:
        ids = list(loop.vertex_ids)
        for a, b in zip(ids, ids[1:] + ids[:1]):
            walked.append((min(a, b), max(a, b)))
    assert sorted(walked) == sorted(boundary)
    assert len(set(walked)) == len(walked)


def test_non_manifold_edge_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    m = Mesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    with pytest.raises(MeshError, match="non-manifold"):
        extract_boundary_loops(m)


def test_label_loops_from_seeds(tmp_path):
    m = tube(0.3, 0.3, -0.3, 10, 4)
    seeds = {"waist": [0, 1], "hem": [30, 31]}
    p = tmp_path / "labels.json"
    p.write_text('{"waist": [0, 1], "hem": [30, 31]}')
    assert load_boundary_labels(p) == seeds
    loops = label_boundary_loops(m, seeds)
    assert loops["waist"].vertex_ids == tuple(range(10))
    assert loops["hem"].vertex_ids[:2] == (30, 31)
    with pytest.raises(MeshError):
        label_boundary_loops(m, {"bad": [15]})
    with pytest.raises(MeshError):
        label_boundary_loops(m, {"a": [0], "b": [1]})


# -- Laplacian -------------------------------------------------------------------


def test_cotangent_unit_square_by_hand():
    # two right triangles; the diagonal 0-2 has both opposite angles at 90 deg
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    m = Mesh(v, [[0, 1, 2], [0, 2, 3]])
    L = build_laplacian(m, "cotangent").todense()
    expected = np.array(
        [
            [-1.0, 0.5, 0.0, 0.5],
            [0.5, -1.0, 0.5, 0.0],
            [0.0, 0.5, -1.0, 0.5],
            [0.5, 0.0, 0.5, -1.0],
        ]
    )
    assert np.allclose(L, expected, atol=1e-15)


def test_uniform_tetrahedron():
    # the neighbours of each vertex average to -v/3, so L v = -4/3 v; only the
    # centroid (a constant field) is annihilated
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)
    m = Mesh(v, [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    L = build_laplacian(m, "uniform")
    assert np.abs(L @ v + 4.0 / 3.0 * v).max() < 1e-12
    centroid = np.tile(v.mean(axis=0), (4, 1))
    assert np.abs(L @ centroid).max() < 1e-12


@pytest.mark.parametrize("kind", ["cotangent", "uniform"])
@pytest.mark.parametrize("seed", range(4))
def test_laplacian_rows_and_pattern(kind, seed):
    m = noisy_tube(seed=seed)
    L = build_laplacian(m, kind)
    assert np.abs(L @ np.ones(m.n_vertices)).max() < 1e-9
    # stored entries (explicit zeros included) cover exactly the 1-ring plus diagonal
    stored = L.matrix.tocoo()
    got = set(zip(stored.row.tolist(), stored.col.tolist()))
    ring = m.adjacency.tocoo()
    want = set(zip(ring.row.tolist(), ring.col.tolist())) | {(i, i) for i in range(m.n_vertices)}
    assert got == want


def test_uniform_off_diagonal_is_inverse_degree():
    m = noisy_tube()
    L = build_laplacian(m, "uniform").todense()
    deg = m.vertex_degree
    i, j = m.edges[0]
    assert L[i, j] == pytest.approx(1.0 / deg[i])
    assert L[j, i] == pytest.approx(1.0 / deg[j])


def test_cotangent_rejects_zero_area_face():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float)
    m = Mesh(v, [[0, 1, 2], [0, 1, 3]])
    with pytest.raises(MeshError):
        build_laplacian(m, "cotangent")
    build_laplacian(m, "uniform")


def test_cotangent_matches_dense_oracle():
    m = wavy_sheet(5, 6, seed=3)
    L = build_laplacian(m, "cotangent").todense()
    v = m.vertices
    W = np.zeros((m.n_vertices, m.n_vertices))
    for f in m.faces:
        for k in range(3):
            i, j, o = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            a, b = v[i] - v[o], v[j] - v[o]
            cot = np.dot(a, b) / np.linalg.norm(np.cross(a, b))
            W[i, j] += cot / 2
            W[j, i] += cot / 2
    oracle = W - np.diag(W.sum(axis=1))
    assert np.abs(L - oracle).max() < 1e-12


def test_dihedral_angles():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    folded = Mesh(v, [[0, 1, 2], [1, 0, 3]])
    assert dihedral_angles(folded) == pytest.approx([np.pi / 2])
    flat = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, -1, 0]], float), [[0, 1, 2], [1, 0, 3]])
    assert dihedral_angles(flat) == pytest.approx([0.0], abs=1e-12)
