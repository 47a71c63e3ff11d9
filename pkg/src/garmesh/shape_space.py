"""PCA garment shape space: mean shape plus orthonormal components."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import container
from .errors import InputError, TopologyMismatchError
from .mesh import Mesh, atomic_write_text

KIND = "shape-space"


class RankDeficientError(InputError):
    pass


@dataclass(frozen=True, eq=False)
class ShapeSpace:
    """Linear garment model ``x = mean + components @ alpha``.

    ``mean`` is the flattened (3N,) mean shape, ``components`` a (3N, d)
    matrix with orthonormal columns, ``singular_values`` the matching
    singular values of the centred training data, in descending order.
    """

    mean: np.ndarray
    components: np.ndarray
    faces: np.ndarray
    singular_values: np.ndarray

    @property
    def d(self) -> int:
        return self.components.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.mean) // 3

    def check_mesh(self, mesh: Mesh):
        if mesh.n_vertices != self.n_vertices or not np.array_equal(mesh.faces, self.faces):
            raise TopologyMismatchError("mesh topology does not match the shape space")

    def save(self, path) -> None:
        container.save(
            path,
            {
                "mean": self.mean[None, :],
                "components": self.components,
                "faces": self.faces.astype(np.float64),
                "singular_values": self.singular_values[None, :],
            },
            kind=KIND,
            meta={"d": self.d, "n_vertices": self.n_vertices},
        )

    @classmethod
    def load(cls, path) -> ShapeSpace:
        t, _ = container.load(path, kind=KIND)
        try:
            return cls(
                t["mean"].ravel(),
                t["components"],
                t["faces"].astype(np.int64),
                t["singular_values"].ravel(),
            )
        except KeyError as exc:
            raise InputError(f"{path}: shape space missing tensor {exc}") from None


def fit_pca(meshes, d: int | None = None) -> ShapeSpace:
    """Fit mean and top-``d`` principal directions by SVD of centred data.

    ``d`` defaults to ``min(64, len(meshes) - 1)``. Each component is
    signed so that its largest-magnitude entry is positive.
    """
    meshes = list(meshes)
    if len(meshes) < 2:
        raise InputError("PCA needs at least two meshes")
    ref = meshes[0]
    for m in meshes[1:]:
        if not ref.same_topology(m):
            raise TopologyMismatchError("all training meshes must share topology")
    x = np.stack([m.vertices.ravel() for m in meshes])
    s_count, dim = x.shape
    if d is None:
        d = min(64, s_count - 1)
    d = int(d)
    if d < 1 or d > min(dim, s_count):
        raise InputError(f"component count d={d} out of range [1, {min(dim, s_count)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    tol = max(xc.shape) * np.finfo(np.float64).eps * max(sv[0] if len(sv) else 0.0, np.abs(x).max(), 1.0)
    rank = int(np.sum(sv > tol))
    if d > rank:
        raise RankDeficientError(
            f"centred training data has rank {rank}; cannot extract d={d} components"
        )
    comps = vt[:d].T.copy()
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(d)])
    comps *= signs
    return ShapeSpace(mean, comps, ref.faces.copy(), sv[:d].copy())


def encode(space: ShapeSpace, mesh: Mesh) -> np.ndarray:
    space.check_mesh(mesh)
    return space.components.T @ (mesh.vertices.ravel() - space.mean)


def decode(space: ShapeSpace, alpha) -> Mesh:
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.shape != (space.d,):
        raise InputError(f"coefficient vector has length {alpha.size}, expected {space.d}")
    return Mesh((space.mean + space.components @ alpha).reshape(-1, 3), space.faces)


def save_alpha(path, alpha) -> None:
    atomic_write_text(path, json.dumps({"alpha": [float(a) for a in np.ravel(alpha)]}))


def load_alpha(path) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("alpha")
    if not isinstance(data, list):
        raise InputError(f"{path}: expected {{'alpha': [...]}}")
    return np.asarray(data, dtype=np.float64)
