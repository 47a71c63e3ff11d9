"""Triangle mesh container, OBJ I/O, boundary loops and Laplacians."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import MeshError, ObjParseError

__all__ = [
    "BoundaryLoop",
    "LaplacianOperator",
    "Mesh",
    "atomic_write_bytes",
    "atomic_write_text",
    "build_laplacian",
    "dihedral_angles",
    "extract_boundary_loops",
    "label_boundary_loops",
    "load_boundary_labels",
    "load_obj",
    "save_obj",
]


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


_TOPOLOGY_CACHES = ("_edge_data", "interior_edge_faces", "adjacency", "vertex_degree")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
        Vertex positions in meters.
    faces : array_like, shape (F, 3)
        Vertex indices of each triangle.

    Derived quantities (edges, normals, adjacency) are computed lazily and
    cached; the mesh is safe to share between threads once built.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face with repeated vertex index")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinate")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> Mesh:
        """Same connectivity, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(
                f"vertex array shape {vertices.shape} does not match {self.vertices.shape}"
            )
        out = Mesh(vertices, self.faces)
        # connectivity-only caches stay valid
        for name in _TOPOLOGY_CACHES:
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    def same_topology(self, other: Mesh) -> bool:
        return self.n_vertices == other.n_vertices and np.array_equal(self.faces, other.faces)

    # -- edges -------------------------------------------------------------

    @cached_property
    def _edge_data(self):
        f = self.faces
        he = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
        key = np.sort(he, axis=1)
        edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return edges.reshape(-1, 2), inverse.ravel(), counts, he

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (E, 2)."""
        return self._edge_data[0]

    @property
    def edge_face_counts(self) -> np.ndarray:
        return self._edge_data[2]

    @cached_property
    def interior_edge_faces(self) -> np.ndarray:
        """Pairs of face indices sharing an interior edge, shape (I, 2).

        Also exposes the shared edge's vertex ids through
        :attr:`interior_edges` in the same order.
        """
        edges, inverse, counts, _ = self._edge_data
        face_of_he = np.repeat(np.arange(self.n_faces), 3)
        order = np.argsort(inverse, kind="stable")
        sorted_edge = inverse[order]
        starts = np.searchsorted(sorted_edge, np.arange(len(edges)))
        interior = np.flatnonzero(counts == 2)
        first = face_of_he[order[starts[interior]]]
        second = face_of_he[order[starts[interior] + 1]]
        return np.stack([first, second], axis=1)

    @property
    def interior_edges(self) -> np.ndarray:
        return self.edges[self.edge_face_counts == 2]

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency (no self loops)."""
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    @cached_property
    def vertex_degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    # -- normals -----------------------------------------------------------

    @cached_property
    def face_cross(self) -> np.ndarray:
        """Unnormalised face normals (twice the area vector)."""
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    @property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        c = self.face_cross
        n = np.linalg.norm(c, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(n > 0, c / np.where(n > 0, n, 1.0), 0.0)
        return out

    @cached_property
    def _vertex_normal_data(self):
        acc = np.zeros_like(self.vertices)
        c = self.face_cross
        for k in range(3):
            np.add.at(acc, self.faces[:, k], c)
        norm = np.linalg.norm(acc, axis=1)
        zero = norm == 0.0
        normals = np.zeros_like(acc)
        normals[~zero] = acc[~zero] / norm[~zero, None]
        return _readonly(normals), _readonly(zero)

    @property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted unit vertex normals; zero where the star has no area."""
        return self._vertex_normal_data[0]

    @property
    def zero_normal_mask(self) -> np.ndarray:
        return self._vertex_normal_data[1]

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def dihedral_angles(mesh: Mesh) -> np.ndarray:
    """Angle in radians between the normals of the two faces at each interior edge.

    Ordered like :attr:`Mesh.interior_edges`; 0 means the faces are coplanar.
    """
    n = mesh.face_normals
    pair = mesh.interior_edge_faces
    c = np.einsum("ij,ij->i", n[pair[:, 0]], n[pair[:, 1]])
    s = np.linalg.norm(np.cross(n[pair[:, 0]], n[pair[:, 1]]), axis=1)
    return np.arctan2(s, c)


@dataclass(frozen=True)
class BoundaryLoop:
    vertex_ids: tuple
    label: str = ""

    def __len__(self):
        return len(self.vertex_ids)

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self.vertex_ids, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    kind: str
    matrix: sparse.csr_matrix = field(repr=False)

    def __matmul__(self, x):
        return self.matrix @ x

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=np.float64)

    def todense(self):
        return self.matrix.toarray()


# -- OBJ ----------------------------------------------------------------------


def load_obj(path) -> Mesh:
    """Read an ASCII OBJ with ``v`` and triangular ``f`` records.

    Normals, texture coordinates and groups are ignored. Face entries of
    the form ``i/j/k`` use only the position index; negative indices are
    resolved relative to the vertices read so far.
    """
    path = Path(path)
    verts = []
    faces = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise ObjParseError(f"cannot read file: {exc.strerror}", path=path) from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            if len(tokens) < 4:
                raise ObjParseError("vertex record needs 3 coordinates", path, lineno)
            try:
                verts.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise ObjParseError(f"bad vertex coordinate in {raw!r}", path, lineno) from None
        elif tag == "f":
            if len(tokens) != 4:
                raise ObjParseError(
                    f"only triangular faces are supported, got {len(tokens) - 1} vertices",
                    path,
                    lineno,
                )
            idx = []
            for t in tokens[1:]:
                try:
                    i = int(t.split("/", 1)[0])
                except ValueError:
                    raise ObjParseError(f"bad face index {t!r}", path, lineno) from None
                if i < 0:
                    i = len(verts) + i
                else:
                    i -= 1
                if i < 0 or i >= len(verts):
                    raise ObjParseError(f"face index {t} out of range", path, lineno)
                idx.append(i)
            faces.append(idx)
    if not verts:
        raise ObjParseError("no vertices", path=path)
    try:
        return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise ObjParseError(str(exc), path=path) from None


def format_obj(mesh: Mesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def save_obj(mesh: Mesh, path) -> None:
    # repr() round-trips float64 exactly, which keeps outputs byte-stable
    atomic_write_text(path, format_obj(mesh))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- boundary loops -----------------------------------------------------------


def extract_boundary_loops(mesh: Mesh) -> list[BoundaryLoop]:
    """Return every closed cycle of boundary edges, largest first.

    Each loop starts at its smallest vertex id and follows the orientation
    of the faces that own its edges. Raises :class:`MeshError` for edges
    shared by more than two faces.
    """
    edges, inverse, counts, he = mesh._edge_data
    if np.any(counts > 2):
        bad = edges[np.argmax(counts > 2)]
        raise MeshError(f"non-manifold edge ({bad[0]}, {bad[1]}) used by more than two faces")
    boundary_he = he[counts[inverse] == 1]
    if len(boundary_he) == 0:
        return []
    outgoing: dict[int, list[int]] = {}
    for a, b in boundary_he.tolist():
        outgoing.setdefault(a, []).append(b)
    for lst in outgoing.values():
        lst.sort()
    loops = []
    remaining = len(boundary_he)
    while remaining:
        start = min(v for v, lst in outgoing.items() if lst)
        cycle = [start]
        cur = outgoing[start].pop(0)
        remaining -= 1
        while cur != start:
            cycle.append(cur)
            nxt = outgoing.get(cur)
            if not nxt:
                raise MeshError(f"boundary is not closed at vertex {cur}")
            cur = nxt.pop(0)
            remaining -= 1
        loops.append(cycle)
    loops.sort(key=lambda c: (-len(c), min(c)))
    return [BoundaryLoop(tuple(c)) for c in loops]


def label_boundary_loops(mesh: Mesh, seeds: dict) -> dict[str, BoundaryLoop]:
    """Attach labels to boundary loops from seed vertex ids.

    ``seeds`` maps a label to an ordered list of vertex ids lying on one
    loop. The labelled loop is rotated to start at the first seed and, when
    a second seed is given, oriented so the walk reaches it before wrapping.
    """
    loops = extract_boundary_loops(mesh)
    where = {}
    for li, loop in enumerate(loops):
        for pos, v in enumerate(loop.vertex_ids):
            where[v] = (li, pos)
    out = {}
    used = {}
    for label, ids in seeds.items():
        ids = [int(i) for i in ids]
        if not ids:
            raise MeshError(f"boundary label {label!r} has no seed vertices")
        hits = [where.get(i) for i in ids]
        if any(h is None for h in hits):
            missing = [i for i, h in zip(ids, hits) if h is None]
            raise MeshError(f"boundary label {label!r}: seed vertices {missing} are not on a boundary")
        li = hits[0][0]
        if any(h[0] != li for h in hits):
            raise MeshError(f"boundary label {label!r}: seeds span several loops")
        if li in used:
            raise MeshError(f"labels {used[li]!r} and {label!r} select the same loop")
        used[li] = label
        cyc = list(loops[li].vertex_ids)
        p0 = hits[0][1]
        cyc = cyc[p0:] + cyc[:p0]
        if len(ids) > 1 and len(cyc) > 2:
            fwd = cyc.index(ids[1])
            if fwd > len(cyc) - fwd:
                cyc = [cyc[0]] + cyc[1:][::-1]
        out[label] = BoundaryLoop(tuple(cyc), label)
    return out


def load_boundary_labels(path) -> dict[str, list[int]]:
    """Read a JSON sidecar ``{label: [seed vertex ids...]}``."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise MeshError(f"{path}: boundary label file must hold a JSON object")
    return {str(k): [int(i) for i in v] for k, v in data.items()}


# -- Laplacian ----------------------------------------------------------------


def _cotangent_weights(mesh: Mesh):
    v = mesh.vertices
    f = mesh.faces
    areas2 = np.linalg.norm(mesh.face_cross, axis=1)
    if np.any(areas2 <= 0.0):
        bad = int(np.argmax(areas2 <= 0.0))
        raise MeshError(f"zero-area face {bad} in cotangent Laplacian")
    rows, cols, vals = [], [], []
    for k in range(3):
        # angle at corner k is opposite edge (k+1, k+2)
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        u = v[i] - v[o]
        w = v[j] - v[o]
        cot = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def build_laplacian(mesh: Mesh, kind: str = "cotangent") -> LaplacianOperator:
    """Assemble the sparse vertex Laplacian.

    ``kind="cotangent"`` uses w_ij = (cot a_ij + cot b_ij) / 2, with a single
    cotangent on boundary edges. ``kind="uniform"`` uses w_ij = 1/deg(i).
    Diagonals hold minus the row sum, so constants are annihilated.
    """
    n = mesh.n_vertices
    if kind == "cotangent":
        r, c, w = _cotangent_weights(mesh)
    elif kind == "uniform":
        e = mesh.edges
        r = np.concatenate([e[:, 0], e[:, 1]])
        c = np.concatenate([e[:, 1], e[:, 0]])
        deg = np.bincount(r, minlength=n).astype(np.float64)
        w = 1.0 / deg[r]
    else:
        raise ValueError(f"unknown Laplacian kind {kind!r}")
    diag = -np.bincount(r, weights=w, minlength=n)
    idx = np.arange(n)
    lap = sparse.coo_matrix(
        (np.concatenate([w, diag]), (np.concatenate([r, idx]), np.concatenate([c, idx]))),
        shape=(n, n),
    ).tocsr()
    lap.sum_duplicates()
    lap.sort_indices()
    return LaplacianOperator(kind, lap)
