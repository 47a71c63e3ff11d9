"""Supervision terms and evaluation metrics.

Meshes are in meters. ``M1``, ``M2`` and the one-way Chamfer distance are
reported in millimeters, the acceleration error ``M3`` in m/s^2.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, TopologyMismatchError
from .mesh import LaplacianOperator, Mesh
from .spatial import nearest

MM = 1000.0

__all__ = [
    "LossWeights",
    "SequenceMetrics",
    "aggregate_posed_loss",
    "canonical_l2",
    "canonical_loss",
    "cross_entropy",
    "evaluate_sequence",
    "interpenetration_loss",
    "laplacian_regularization",
    "one_way_chamfer",
    "posed_loss",
    "temporal_constraint",
]


def _same_topology(a: Mesh, b: Mesh, what="meshes"):
    if a.n_vertices != b.n_vertices or not np.array_equal(a.faces, b.faces):
        raise TopologyMismatchError(f"{what} do not share topology")


def cross_entropy(probabilities, labels) -> float:
    """Mean negative log-probability of the true class (clamped at 1e-12)."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or len(y) != len(p):
        raise InputError("probabilities must be (n, classes) with one label per row")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InputError("each probability row must sum to 1")
    if np.any((y < 0) | (y >= p.shape[1])):
        raise InputError("label out of range")
    picked = np.clip(p[np.arange(len(y)), y.astype(np.int64)], 1e-12, 1.0)
    return float(-np.mean(np.log(picked)))


def interpenetration_loss(garment: Mesh, body: Mesh, body_tree: cKDTree | None = None) -> float:
    """Mean over garment vertices of ``relu(-n_b . (x - v_b))``.

    ``(v_b, n_b)`` are the position and outward normal of the nearest body
    vertex.
    """
    if garment.n_vertices == 0 or body.n_vertices == 0:
        raise InputError("interpenetration loss needs non-empty meshes")
    idx, _ = nearest(garment.vertices, body.vertices, body_tree)
    off = garment.vertices - body.vertices[idx]
    s = -np.einsum("ij,ij->i", body.vertex_normals[idx], off)
    return float(np.mean(np.maximum(s, 0.0)))


def laplacian_regularization(pred: Mesh, gt: Mesh, lap: LaplacianOperator, clamp: bool = False) -> float:
    """Mean over vertices of ``|L pred|_i - |L gt|_i`` (signed).

    With ``clamp`` each per-vertex difference is clipped at zero from below,
    so only excess roughness is penalised.
    """
    _same_topology(pred, gt)
    if lap.matrix.shape[0] != pred.n_vertices:
        raise TopologyMismatchError("Laplacian size does not match the meshes")
    a = np.linalg.norm(lap.matrix @ pred.vertices, axis=1)
    b = np.linalg.norm(lap.matrix @ gt.vertices, axis=1)
    diff = a - b
    if clamp:
        diff = np.maximum(diff, 0.0)
    return float(np.mean(diff))


def temporal_constraint(sequence) -> float:
    """Average over consecutive frame pairs of mean squared vertex motion."""
    seq = list(sequence)
    if len(seq) < 2:
        raise InputError("temporal constraint needs at least two frames")
    for m in seq[1:]:
        _same_topology(seq[0], m, "sequence frames")
    x = np.stack([m.vertices for m in seq])
    d = np.diff(x, axis=0)
    per_pair = np.einsum("tij,tij->ti", d, d).mean(axis=1)
    return float(per_pair.sum() / (len(seq) - 1))


def mean_squared_vertex_error(pred: Mesh, gt: Mesh) -> float:
    _same_topology(pred, gt)
    d = pred.vertices - gt.vertices
    return float(np.einsum("ij,ij->i", d, d).mean())


@dataclass
class LossWeights:
    """Term weights ``lambda1`` ... ``lambda9`` and per-iteration weights."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    lambda7: float = 1.0
    lambda8: float = 1.0
    lambda9: float = 1.0
    iteration_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def __post_init__(self):
        vals = [getattr(self, f"lambda{i}") for i in range(1, 10)] + list(self.iteration_weights)
        if any((not np.isfinite(v)) or v < 0 for v in vals):
            raise InputError("loss weights must be finite and nonnegative")

    def canonical(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5])

    def posed(self) -> np.ndarray:
        return np.array([self.lambda6, self.lambda7, self.lambda8, self.lambda9])

    @classmethod
    def from_dict(cls, d: dict) -> LossWeights:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)


CANONICAL_TERMS = ("ce", "alpha", "vertex", "interpenetration", "laplacian")
POSED_TERMS = ("vertex", "interpenetration", "laplacian", "temporal")


def canonical_loss(
    probabilities,
    labels,
    alpha_pred,
    alpha_gt,
    garment_pred: Mesh,
    garment_gt: Mesh,
    body: Mesh,
    lap: LaplacianOperator,
    weights: LossWeights | None = None,
):
    """Weighted canonical-stage objective.

    Returns ``(total, breakdown)``; ``total`` equals the dot product of the
    breakdown (in :data:`CANONICAL_TERMS` order) with ``lambda1..lambda5``.
    """
    weights = weights or LossWeights()
    ap = np.asarray(alpha_pred, dtype=np.float64)
    ag = np.asarray(alpha_gt, dtype=np.float64)
    if ap.shape != ag.shape:
        raise InputError("predicted and ground-truth coefficients differ in length")
    terms = {
        "ce": cross_entropy(probabilities, labels),
        "alpha": float(np.sum((ap - ag) ** 2)),
        "vertex": mean_squared_vertex_error(garment_pred, garment_gt),
        "interpenetration": interpenetration_loss(garment_pred, body),
        "laplacian": laplacian_regularization(garment_pred, garment_gt, lap),
    }
    vec = np.array([terms[k] for k in CANONICAL_TERMS])
    return float(np.dot(weights.canonical(), vec)), terms


def posed_loss(pred_seq, gt_seq, body_seq, lap: LaplacianOperator, weights: LossWeights | None = None):
    """Weighted posed-stage objective for one refinement iteration.

    Per-frame terms are averaged over frames; the temporal term acts on the
    predicted sequence. Returns ``(total, breakdown)``.
    """
    weights = weights or LossWeights()
    pred_seq, gt_seq, body_seq = list(pred_seq), list(gt_seq), list(body_seq)
    if not (len(pred_seq) == len(gt_seq) == len(body_seq)) or not pred_seq:
        raise InputError("prediction, ground truth and body sequences must align")
    terms = {
        "vertex": float(np.mean([mean_squared_vertex_error(p, g) for p, g in zip(pred_seq, gt_seq)])),
        "interpenetration": float(
            np.mean([interpenetration_loss(p, b) for p, b in zip(pred_seq, body_seq)])
        ),
        "laplacian": float(
            np.mean([laplacian_regularization(p, g, lap) for p, g in zip(pred_seq, gt_seq)])
        ),
        "temporal": temporal_constraint(pred_seq) if len(pred_seq) > 1 else 0.0,
    }
    vec = np.array([terms[k] for k in POSED_TERMS])
    return float(np.dot(weights.posed(), vec)), terms


def aggregate_posed_loss(per_iteration, iteration_weights) -> float:
    """Weighted sum of per-iteration posed losses."""
    losses = np.asarray(per_iteration, dtype=np.float64)
    w = np.asarray(iteration_weights, dtype=np.float64)
    if losses.shape != w.shape:
        raise InputError(f"{len(losses)} iteration losses but {len(w)} weights")
    return float(np.dot(w, losses))


# -- metrics ------------------------------------------------------------------


@dataclass
class SequenceMetrics:
    M1: float | None
    M2: float
    M3: float
    oneWayCD: float | None
    per_frame_M2: list
    per_frame_M3: list
    per_frame_oneWayCD: list | None = None
    units: dict = field(
        default_factory=lambda: {"M1": "mm", "M2": "mm", "M3": "m/s^2", "oneWayCD": "mm"}
    )

    def to_dict(self) -> dict:
        return asdict(self)


def canonical_l2(pred: Mesh, gt: Mesh) -> float:
    """Mean per-vertex Euclidean distance, in millimeters."""
    _same_topology(pred, gt)
    return float(np.linalg.norm(pred.vertices - gt.vertices, axis=1).mean() * MM)


def accelerations(x, fps: float):
    """Central second differences scaled by fps^2 for interior frames."""
    return (x[2:] - 2.0 * x[1:-1] + x[:-2]) * (fps * fps)


def one_way_chamfer(reconstruction, cloud) -> float:
    """Mean distance from reconstruction vertices to the nearest cloud point (mm)."""
    r = reconstruction.vertices if isinstance(reconstruction, Mesh) else np.asarray(reconstruction, dtype=np.float64)
    c = np.asarray(cloud, dtype=np.float64)
    if len(r) == 0 or len(c) == 0:
        raise InputError("one-way Chamfer needs non-empty inputs")
    _, d2 = nearest(r, c)
    return float(np.sqrt(d2).mean() * MM)


def evaluate_sequence(
    pred,
    gt,
    fps: float = 30.0,
    canonical_pred: Mesh | None = None,
    canonical_gt: Mesh | None = None,
    clouds=None,
) -> SequenceMetrics:
    """Posed L2 (M2), acceleration error (M3) and optional M1 / one-way CD.

    M1 is computed when both canonical meshes are given; the one-way
    Chamfer distance when one point cloud per frame is given.
    """
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise InputError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 3:
        raise InputError("acceleration error needs at least three frames")
    if not fps > 0:
        raise InputError("fps must be positive")
    for p, g in zip(pred, gt):
        _same_topology(p, g, "predicted and ground-truth frames")
        _same_topology(pred[0], p, "sequence frames")
    xp = np.stack([m.vertices for m in pred])
    xg = np.stack([m.vertices for m in gt])
    per_m2 = np.linalg.norm(xp - xg, axis=2).mean(axis=1) * MM
    # second difference of the residual; equal to the difference of the two
    # accelerations but with fewer roundings
    da = accelerations(xp - xg, fps)
    per_m3 = np.linalg.norm(da, axis=2).mean(axis=1)
    m1 = None
    if canonical_pred is not None and canonical_gt is not None:
        m1 = canonical_l2(canonical_pred, canonical_gt)
    cd = per_cd = None
    if clouds is not None:
        clouds = list(clouds)
        if len(clouds) != len(pred):
            raise InputError("need one point cloud per predicted frame")
        per_cd = [one_way_chamfer(p, c) for p, c in zip(pred, clouds)]
        cd = float(np.mean(per_cd))
    return SequenceMetrics(
        M1=m1,
        M2=float(per_m2.mean()),
        M3=float(per_m3.mean()),
        oneWayCD=cd,
        per_frame_M2=per_m2.tolist(),
        per_frame_M3=per_m3.tolist(),
        per_frame_oneWayCD=per_cd,
    )
