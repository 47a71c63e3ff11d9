"""Barycentric re-meshing of a sequence onto template connectivity."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bvh import FaceBVH
from .errors import InputError, TopologyMismatchError
from .mesh import Mesh, atomic_write_text


@dataclass(frozen=True, eq=False)
class BarycentricMap:
    """For each template vertex, a face of the registered mesh and weights on it.

    ``faces`` are the registered mesh's vertex triples; the map is replayed on
    any frame that shares that connectivity.
    """

    face_ids: np.ndarray
    weights: np.ndarray
    template_faces: np.ndarray
    registered_faces: np.ndarray
    registered_vertex_count: int

    def to_dict(self) -> dict:
        return {
            "format": "barycentric-map/1",
            "registered_vertex_count": int(self.registered_vertex_count),
            "registered_faces": self.registered_faces.tolist(),
            "template_faces": self.template_faces.tolist(),
            "face_ids": self.face_ids.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> BarycentricMap:
        try:
            m = cls(
                np.asarray(d["face_ids"], dtype=np.int64),
                np.asarray(d["weights"], dtype=np.float64).reshape(-1, 3),
                np.asarray(d["template_faces"], dtype=np.int64).reshape(-1, 3),
                np.asarray(d["registered_faces"], dtype=np.int64).reshape(-1, 3),
                int(d["registered_vertex_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed barycentric map: {exc}") from None
        if len(m.face_ids) != len(m.weights):
            raise InputError("barycentric map: face_ids and weights differ in length")
        if len(m.face_ids) and (m.face_ids.min() < 0 or m.face_ids.max() >= len(m.registered_faces)):
            raise InputError("barycentric map: face id out of range")
        return m

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> BarycentricMap:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_barycentric_map(template: Mesh, registered: Mesh) -> BarycentricMap:
    """Project every template vertex onto its nearest registered face."""
    proj = FaceBVH(registered).query(template.vertices)
    return BarycentricMap(
        proj.face, proj.bary, template.faces.copy(), registered.faces.copy(), registered.n_vertices
    )


def apply_barycentric_map(bmap: BarycentricMap, frame: Mesh) -> Mesh:
    """Rebuild a frame on template connectivity from the stored weights."""
    if frame.n_vertices != bmap.registered_vertex_count or not np.array_equal(
        frame.faces, bmap.registered_faces
    ):
        raise TopologyMismatchError(
            "frame topology differs from the registered mesh the map was built on"
        )
    tri = frame.vertices[frame.faces[bmap.face_ids]]
    w = bmap.weights
    verts = w[:, 0, None] * tri[:, 0] + w[:, 1, None] * tri[:, 1] + w[:, 2, None] * tri[:, 2]
    return Mesh(verts, bmap.template_faces)
