"""Skeleton kinematics, linear blend skinning and interpolated garment weights."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import container
from .errors import InputError
from .mesh import Mesh, atomic_write_text, load_obj, save_obj
from .shape_space import ShapeSpace, decode
from .spatial import knn

WEIGHTS_KIND = "skinning-weights"

__all__ = [
    "Pose",
    "PoseSequence",
    "Skeleton",
    "interpolate_skinning_weights",
    "linear_blend_skin",
    "load_poses",
    "load_skeleton",
    "pose_body",
    "pose_skeleton",
    "rodrigues",
    "save_poses",
    "save_skeleton",
    "skin_garment",
]


def _check_weights(w, name="weights"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise InputError(f"{name} must be a 2-D vertex x joint matrix")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError(f"{name} must be finite and nonnegative")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
        raise InputError(f"{name} rows must sum to 1")
    return w


@dataclass(frozen=True, eq=False)
class Skeleton:
    joints: np.ndarray
    parents: np.ndarray
    names: tuple
    body_mesh: Mesh
    body_weights: np.ndarray

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        p = np.asarray(self.parents, dtype=np.int64).ravel()
        if len(p) != len(j):
            raise InputError("parents must have one entry per joint")
        names = tuple(self.names) if self.names else tuple(f"joint{i}" for i in range(len(j)))
        if len(names) != len(j):
            raise InputError("names must have one entry per joint")
        w = _check_weights(self.body_weights, "body weights")
        if w.shape != (self.body_mesh.n_vertices, len(j)):
            raise InputError(
                f"body weights shape {w.shape} != ({self.body_mesh.n_vertices}, {len(j)})"
            )
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "parents", p)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "body_weights", w)
        object.__setattr__(self, "order", _topological_order(p))

    @property
    def n_joints(self) -> int:
        return len(self.joints)


def _topological_order(parents):
    roots = np.flatnonzero(parents == -1)
    if len(roots) != 1:
        raise InputError(f"skeleton needs exactly one root (parent -1), found {len(roots)}")
    n = len(parents)
    if np.any((parents < -1) | (parents >= n)):
        raise InputError("parent index out of range")
    children = [[] for _ in range(n)]
    for j, p in enumerate(parents):
        if p >= 0:
            children[p].append(j)
    order = []
    stack = [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise InputError("skeleton parents contain a cycle or disconnected joints")
    return tuple(order)


@dataclass(frozen=True)
class Pose:
    theta: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        rt = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(rt))):
            raise InputError("pose values must be finite")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "root_translation", rt)

    @classmethod
    def zero(cls, n_joints: int) -> Pose:
        return cls(np.zeros((n_joints, 3)), np.zeros(3))


@dataclass(frozen=True)
class PoseSequence:
    fps: float
    frames: tuple

    def __len__(self):
        return len(self.frames)


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrices from axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = r / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    kmat = np.stack(
        [zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1
    ).reshape(r.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), kmat.shape)
    rot = eye + s * kmat + (1.0 - c) * (kmat @ kmat)
    return np.where((theta > 0)[..., None], rot, eye)


def pose_skeleton(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Per-joint 4x4 transforms taking rest-pose space to posed space.

    Joint j rotates by ``rodrigues(theta_j)`` about its rest position, then
    inherits its parent's transform; the root is finally translated by
    ``pose.root_translation``.
    """
    if pose.theta.shape != (skeleton.n_joints, 3):
        raise InputError(
            f"pose has {len(pose.theta)} joint rotations, skeleton has {skeleton.n_joints}"
        )
    rots = rodrigues(pose.theta)
    out = np.empty((skeleton.n_joints, 4, 4))
    for j in skeleton.order:
        local = np.eye(4)
        local[:3, :3] = rots[j]
        local[:3, 3] = skeleton.joints[j] - rots[j] @ skeleton.joints[j]
        p = skeleton.parents[j]
        if p < 0:
            local[:3, 3] += pose.root_translation
            out[j] = local
        else:
            out[j] = out[p] @ local
    return out


def linear_blend_skin(vertices, weights, transforms) -> np.ndarray:
    """Blend per-joint rigid transforms of each vertex by its weight row."""
    v = np.asarray(vertices, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(transforms, dtype=np.float64)
    if w.shape[0] != len(v) or w.shape[1] != len(t):
        raise InputError(
            f"weights {w.shape} do not match {len(v)} vertices x {len(t)} transforms"
        )
    blend = np.einsum("nj,jab->nab", w, t[:, :3, :])
    # written as v + sum_j w_j (T_j v - v), equal to sum_j w_j T_j v for unit row
    # sums but exactly v under identity transforms
    lin = blend[:, :, :3] - w.sum(axis=1)[:, None, None] * np.eye(3)
    return v + np.einsum("nab,nb->na", lin, v) + blend[:, :, 3]


def interpolate_skinning_weights(
    garment_vertices,
    skeleton: Skeleton,
    K: int = 256,
    smoothing_iters: int = 10,
    smoothing_step: float = 0.5,
    garment_mesh: Mesh | None = None,
    exponent: float = 1.0,
    eps: float = 1e-8,
) -> np.ndarray:
    """Garment skinning weights from the K nearest rest-pose body vertices.

    Neighbour rows are combined with inverse-distance weights
    ``1 / (d + eps) ** exponent``; a neighbour at exactly zero distance
    takes the whole weight. The result is then smoothed over the garment
    graph ``smoothing_iters`` times with
    ``row <- (1 - s) * row + s * mean(neighbour rows)``, renormalising rows
    after each round.
    """
    gv = np.asarray(garment_vertices, dtype=np.float64)
    body = skeleton.body_mesh.vertices
    if not 1 <= int(K) <= len(body):
        raise InputError(f"K={K} out of range [1, {len(body)}]")
    if smoothing_iters < 0:
        raise InputError("smoothing_iters must be >= 0")
    if smoothing_iters > 0:
        if garment_mesh is None:
            raise InputError("garment mesh required for weight smoothing")
        if not 0 < smoothing_step <= 1:
            raise InputError("smoothing_step must lie in (0, 1]")
        if garment_mesh.n_vertices != len(gv):
            raise InputError("garment mesh vertex count differs from garment vertices")
    idx, d2 = knn(gv, body, int(K), tree=cKDTree(body))
    dist = np.sqrt(d2)
    iw = 1.0 / (dist + eps) ** exponent
    exact = dist == 0.0
    hit = exact.any(axis=1)
    iw[hit] = exact[hit].astype(np.float64)
    iw /= iw.sum(axis=1, keepdims=True)
    rows = skeleton.body_weights[idx]
    w = np.einsum("nk,nkj->nj", iw, rows)
    # neighbours that agree pass their row through without rounding
    same = np.all(rows == rows[:, :1], axis=(1, 2))
    w[same] = rows[same, 0]
    if smoothing_iters > 0:
        adj = garment_mesh.adjacency
        deg = garment_mesh.vertex_degree.astype(np.float64)
        has = deg > 0
        s = float(smoothing_step)
        for _ in range(int(smoothing_iters)):
            nb = adj @ w
            nb[has] /= deg[has, None]
            w = np.where(has[:, None], (1.0 - s) * w + s * nb, w)
            w /= w.sum(axis=1, keepdims=True)
    return w


def pose_body(skeleton: Skeleton, pose: Pose) -> Mesh:
    t = pose_skeleton(skeleton, pose)
    body = skeleton.body_mesh
    return body.with_vertices(linear_blend_skin(body.vertices, skeleton.body_weights, t))


def skin_garment(
    space: ShapeSpace,
    alpha,
    skeleton: Skeleton,
    poses,
    K: int = 256,
    smoothing_iters: int = 10,
    smoothing_step: float = 0.5,
    exponent: float = 1.0,
    weights=None,
):
    """Pose the canonical garment ``decode(alpha)`` for one or many poses.

    Skinning weights are interpolated once on the rest-pose garment unless
    ``weights`` is given. Returns a mesh for a single :class:`Pose`, or a
    list of meshes for a sequence.
    """
    canonical = decode(space, alpha)
    if weights is None:
        weights = interpolate_skinning_weights(
            canonical.vertices, skeleton, K, smoothing_iters, smoothing_step, canonical, exponent
        )
    single = isinstance(poses, Pose)
    seq = [poses] if single else list(poses)
    out = [
        canonical.with_vertices(
            linear_blend_skin(canonical.vertices, weights, pose_skeleton(skeleton, p))
        )
        for p in seq
    ]
    return out[0] if single else out


# -- file formats -----------------------------------------------------------


def load_skeleton(path) -> Skeleton:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        body = load_obj(path.parent / data["bodyMesh"])
        t, _ = container.load(path.parent / data["bodyWeights"], kind=WEIGHTS_KIND)
        return Skeleton(
            np.asarray(data["joints"], dtype=np.float64),
            np.asarray(data["parents"], dtype=np.int64),
            tuple(data.get("names", ())),
            body,
            t["weights"],
        )
    except KeyError as exc:
        raise InputError(f"{path}: skeleton file missing field {exc}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def save_skeleton(path, skeleton: Skeleton, body_name="body.obj", weights_name="body_weights.bin"):
    path = Path(path)
    save_obj(skeleton.body_mesh, path.parent / body_name)
    container.save(path.parent / weights_name, {"weights": skeleton.body_weights}, kind=WEIGHTS_KIND)
    data = {
        "joints": skeleton.joints.tolist(),
        "parents": skeleton.parents.tolist(),
        "names": list(skeleton.names),
        "bodyMesh": body_name,
        "bodyWeights": weights_name,
    }
    atomic_write_text(path, json.dumps(data, indent=1))


def load_poses(path) -> PoseSequence:
    try:
        with open(path) as fh:
            data = json.load(fh)
        frames = tuple(
            Pose(np.asarray(f["theta"], dtype=np.float64), np.asarray(f.get("rootTranslation", [0, 0, 0])))
            for f in data["frames"]
        )
        fps = float(data.get("fps", 30.0))
    except KeyError as exc:
        raise InputError(f"{path}: pose file missing field {exc}") from None
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    if not fps > 0:
        raise InputError(f"{path}: fps must be positive")
    return PoseSequence(fps, frames)


def save_poses(path, seq: PoseSequence) -> None:
    data = {
        "fps": seq.fps,
        "frames": [
            {"rootTranslation": p.root_translation.tolist(), "theta": p.theta.tolist()}
            for p in seq.frames
        ],
    }
    atomic_write_text(path, json.dumps(data, indent=1))
