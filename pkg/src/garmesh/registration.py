"""Boundary-aware non-rigid registration of a garment onto a template.

The objective is a weighted sum of a symmetric Chamfer term, an edge-length
term, a normal-consistency term and a Chamfer term restricted to labelled
boundary loops. Every term returns its value together with the analytic
gradient with respect to the source vertices.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, MeshError, NumericalError
from .mesh import BoundaryLoop, Mesh, label_boundary_loops
from .spatial import nearest, scatter_add

logger = logging.getLogger(__name__)

__all__ = [
    "RegistrationConfig",
    "RegistrationReport",
    "boundary_chamfer_loss",
    "chamfer_loss",
    "edge_length_loss",
    "normal_consistency_loss",
    "register",
    "registration_loss",
]


def chamfer_loss(a, b, tree_b: cKDTree | None = None, tree_a: cKDTree | None = None):
    """Symmetric squared-distance Chamfer between point sets A and B.

    Returns ``(value, grad)`` where ``grad`` is d value / d A with B held
    fixed. Both nearest-neighbour directions contribute to the gradient.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise InputError("Chamfer distance needs two non-empty point sets")
    ia, _ = nearest(a, b, tree_b)
    ib, _ = nearest(b, a, tree_a)
    da = a - b[ia]
    db = b - a[ib]
    na, nb = len(a), len(b)
    value = float(np.einsum("ij,ij->", da, da) / na + np.einsum("ij,ij->", db, db) / nb)
    grad = (2.0 / na) * da + scatter_add(na, ib, (-2.0 / nb) * db)
    return value, grad


def edge_lengths(vertices, edges):
    d = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def edge_length_loss(mesh: Mesh, rest_lengths):
    """Mean squared deviation of edge lengths from ``rest_lengths``.

    ``rest_lengths`` is either one value per edge of ``mesh.edges`` or a
    scalar target shared by all edges.
    """
    v = mesh.vertices
    e = mesh.edges
    d = v[e[:, 0]] - v[e[:, 1]]
    length = np.sqrt(np.einsum("ij,ij->i", d, d))
    rest = np.broadcast_to(np.asarray(rest_lengths, dtype=np.float64), length.shape)
    diff = length - rest
    value = float(np.mean(diff**2))
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(length > 0, 2.0 * diff / (len(e) * length), 0.0)
    ge = coef[:, None] * d
    n = mesh.n_vertices
    grad = scatter_add(n, e[:, 0], ge) - scatter_add(n, e[:, 1], ge)
    return value, grad


def normal_consistency_loss(mesh: Mesh):
    """Mean over interior edges of 1 - cos(angle between adjacent face normals)."""
    pairs = mesh.interior_edge_faces
    if len(pairs) == 0:
        raise MeshError("normal consistency needs at least one interior edge")
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    c = np.cross(e1, e2)
    cn = np.linalg.norm(c, axis=1)
    if np.any(cn <= 0.0):
        raise MeshError(f"zero-area face {int(np.argmax(cn <= 0.0))}")
    n = c / cn[:, None]
    n1 = n[pairs[:, 0]]
    n2 = n[pairs[:, 1]]
    m = len(pairs)
    cos = np.einsum("ij,ij->i", n1, n2)
    value = float(np.mean(1.0 - cos))
    # d value / d n_face, accumulated over every interior edge the face touches
    g_n = scatter_add(len(f), pairs[:, 0], -n2 / m) + scatter_add(len(f), pairs[:, 1], -n1 / m)
    # through normalisation: dn/dc = (I - n n^T) / |c|
    g_c = (g_n - np.einsum("ij,ij->i", g_n, n)[:, None] * n) / cn[:, None]
    g_b = np.cross(e2, g_c)
    g_cc = np.cross(g_c, e1)
    nv = mesh.n_vertices
    grad = (
        scatter_add(nv, f[:, 1], g_b)
        + scatter_add(nv, f[:, 2], g_cc)
        - scatter_add(nv, f[:, 0], g_b + g_cc)
    )
    return value, grad


def _resolve(loops: dict, label: str, which: str) -> BoundaryLoop:
    try:
        loop = loops[label]
    except KeyError:
        raise InputError(f"unresolved {which} boundary label {label!r}") from None
    if len(loop) == 0:
        raise InputError(f"{which} boundary label {label!r} resolves to an empty loop")
    return loop


def boundary_chamfer_loss(source: Mesh, source_loops: dict, target: Mesh, target_loops: dict, pairs):
    """Mean over label pairs of the Chamfer distance between paired loops."""
    pairs = list(pairs)
    if not pairs:
        return 0.0, np.zeros_like(source.vertices)
    grad = np.zeros_like(source.vertices)
    total = 0.0
    for src_label, tgt_label in pairs:
        s_ids = _resolve(source_loops, src_label, "source").ids
        t_ids = _resolve(target_loops, tgt_label, "target").ids
        val, g = chamfer_loss(source.vertices[s_ids], target.vertices[t_ids])
        total += val
        np.add.at(grad, s_ids, g)
    k = len(pairs)
    return total / k, grad / k


@dataclass
class RegistrationConfig:
    """Weights and optimiser settings for :func:`register`.

    ``edge_length_mode`` is ``"relative"`` (each edge keeps its initial
    source length) or ``"absolute"`` (every edge is pulled towards the mean
    initial edge length). ``source_boundaries``/``target_boundaries`` map
    loop labels to seed vertex ids, see :func:`~garmesh.mesh.label_boundary_loops`.
    """

    lambda_c: float = 1.0
    lambda_e: float = 10.0
    lambda_n: float = 0.1
    lambda_b: float = 1.0
    step_size: float = 1e-3
    max_iterations: int = 2000
    convergence_tol: float = 1e-6
    chamfer_samples: int = 0
    boundary_pairs: list = field(default_factory=list)
    source_boundaries: dict = field(default_factory=dict)
    target_boundaries: dict = field(default_factory=dict)
    edge_length_mode: str = "relative"
    max_backoff: int = 30
    step_growth: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.boundary_pairs = [tuple(p) for p in self.boundary_pairs]
        self.validate()

    def validate(self):
        lams = (self.lambda_c, self.lambda_e, self.lambda_n, self.lambda_b)
        if any(not np.isfinite(x) or x < 0 for x in lams):
            raise InputError("loss weights must be finite and nonnegative")
        if not any(x > 0 for x in lams):
            raise InputError("at least one loss weight must be positive")
        if not self.step_size > 0:
            raise InputError("step_size must be positive")
        if int(self.max_iterations) < 1:
            raise InputError("max_iterations must be a positive integer")
        if not self.convergence_tol > 0:
            raise InputError("convergence_tol must be positive")
        if int(self.chamfer_samples) < 0:
            raise InputError("chamfer_samples must be >= 0")
        if self.edge_length_mode not in ("relative", "absolute"):
            raise InputError(f"unknown edge_length_mode {self.edge_length_mode!r}")
        for p in self.boundary_pairs:
            if len(p) != 2:
                raise InputError(f"boundary pair {p!r} must have two labels")

    @classmethod
    def from_dict(cls, data: dict) -> RegistrationConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["boundary_pairs"] = [list(p) for p in self.boundary_pairs]
        return d


@dataclass
class RegistrationReport:
    history: list
    vertices: np.ndarray
    iterations: int
    converged: bool
    stop_reason: str

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "final": self.history[-1] if self.history else None,
            "history": self.history,
        }


class _Objective:
    def __init__(self, source, target, cfg, source_loops, target_loops):
        self.faces = source.faces
        self.source = source
        self.target = target
        self.cfg = cfg
        self.source_loops = source_loops
        self.target_loops = target_loops
        self.target_tree = cKDTree(target.vertices)
        if cfg.edge_length_mode == "relative":
            self.rest = edge_lengths(source.vertices, source.edges)
        else:
            self.rest = float(np.mean(edge_lengths(source.vertices, source.edges)))
        self.has_interior = len(source.interior_edge_faces) > 0
        self.rng = np.random.default_rng(cfg.seed)
        self.sample = None

    def resample(self):
        k = int(self.cfg.chamfer_samples)
        if k <= 0:
            self.sample = None
            return
        ns, nt = self.source.n_vertices, self.target.n_vertices
        s = np.sort(self.rng.choice(ns, size=min(k, ns), replace=False))
        t = np.sort(self.rng.choice(nt, size=min(k, nt), replace=False))
        self.sample = (s, t)

    def __call__(self, x):
        cfg = self.cfg
        mesh = self.source.with_vertices(x)
        terms = {}
        grad = np.zeros_like(x)
        if cfg.lambda_c > 0:
            if self.sample is None:
                val, g = chamfer_loss(x, self.target.vertices, self.target_tree)
            else:
                s, t = self.sample
                val, gs = chamfer_loss(x[s], self.target.vertices[t])
                g = np.zeros_like(x)
                g[s] = gs
            terms["cd"] = val
            grad += cfg.lambda_c * g
        else:
            terms["cd"] = 0.0
        if cfg.lambda_e > 0:
            val, g = edge_length_loss(mesh, self.rest)
            terms["el"] = val
            grad += cfg.lambda_e * g
        else:
            terms["el"] = 0.0
        if cfg.lambda_n > 0 and self.has_interior:
            val, g = normal_consistency_loss(mesh)
            terms["nc"] = val
            grad += cfg.lambda_n * g
        else:
            terms["nc"] = 0.0
        if cfg.lambda_b > 0 and cfg.boundary_pairs:
            val, g = boundary_chamfer_loss(
                mesh, self.source_loops, self.target, self.target_loops, cfg.boundary_pairs
            )
            terms["bcd"] = val
            grad += cfg.lambda_b * g
        else:
            terms["bcd"] = 0.0
        terms["total"] = float(
            cfg.lambda_c * terms["cd"]
            + cfg.lambda_e * terms["el"]
            + cfg.lambda_n * terms["nc"]
            + cfg.lambda_b * terms["bcd"]
        )
        return terms, grad


def registration_loss(source: Mesh, target: Mesh, cfg: RegistrationConfig, source_loops=None, target_loops=None, rest_from: Mesh | None = None):
    """Evaluate the weighted registration objective once.

    ``rest_from`` supplies the mesh whose edge lengths act as rest lengths
    (defaults to ``source`` itself).
    """
    source_loops, target_loops = _loops(source, target, cfg, source_loops, target_loops)
    obj = _Objective(rest_from or source, target, cfg, source_loops, target_loops)
    return obj(source.vertices.copy())


def _loops(source, target, cfg, source_loops, target_loops):
    if cfg.boundary_pairs and cfg.lambda_b > 0:
        if source_loops is None:
            source_loops = label_boundary_loops(source, cfg.source_boundaries)
        if target_loops is None:
            target_loops = label_boundary_loops(target, cfg.target_boundaries)
        for s, t in cfg.boundary_pairs:
            _resolve(source_loops, s, "source")
            _resolve(target_loops, t, "target")
    return source_loops or {}, target_loops or {}


def register(
    source: Mesh,
    target: Mesh,
    cfg: RegistrationConfig | None = None,
    source_loops: dict | None = None,
    target_loops: dict | None = None,
) -> RegistrationReport:
    """Deform ``source`` onto ``target`` by Adam descent on the registration loss.

    A trial step that raises the loss is retried with half the step size
    (the reduced step is kept), so accepted iterates never increase the
    loss. Stops after ``max_iterations``, when the relative loss change
    drops below ``convergence_tol``, or when no step size in
    ``max_backoff`` halvings decreases the loss.

    Raises
    ------
    NumericalError
        If the loss or gradient becomes non-finite; the partial report is
        attached as ``exc.report``.
    """
    cfg = cfg or RegistrationConfig()
    source_loops, target_loops = _loops(source, target, cfg, source_loops, target_loops)
    obj = _Objective(source, target, cfg, source_loops, target_loops)

    x = source.vertices.copy()
    obj.resample()
    try:
        terms, grad = obj(x)
    except NumericalError as exc:
        raise NumericalError(str(exc), RegistrationReport([], x, 0, False, "diverged")) from exc
    history = [dict(terms, step=0.0)]
    if not np.isfinite(terms["total"]) or not np.all(np.isfinite(grad)):
        raise NumericalError("initial registration loss is not finite",
                             RegistrationReport(history, x, 0, False, "diverged"))

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = float(cfg.step_size)
    converged = False
    reason = "max_iterations"
    it = 0
    for it in range(1, int(cfg.max_iterations) + 1):
        if terms["total"] == 0.0:
            converged, reason = True, "zero_loss"
            it -= 1
            break
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        direction = (m / (1 - beta1**it)) / (np.sqrt(v / (1 - beta2**it)) + eps)
        accepted = False
        for _ in range(int(cfg.max_backoff) + 1):
            x_new = x - lr * direction
            try:
                new_terms, new_grad = obj(x_new)
            except MeshError:
                # a face collapsed under the trial step; treat as an increase
                lr *= 0.5
                continue
            except NumericalError as exc:
                raise NumericalError(
                    f"registration diverged at iteration {it}: {exc}",
                    RegistrationReport(history, x, it - 1, False, "diverged"),
                ) from exc
            if not np.isfinite(new_terms["total"]) or not np.all(np.isfinite(new_grad)):
                raise NumericalError(
                    f"registration loss became non-finite at iteration {it}",
                    RegistrationReport(history, x, it - 1, False, "diverged"),
                )
            if new_terms["total"] <= terms["total"]:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            converged, reason = True, "no_descent"
            it -= 1
            break
        prev = terms["total"]
        x, terms, grad = x_new, new_terms, new_grad
        history.append(dict(terms, step=lr))
        lr = min(lr * cfg.step_growth, float(cfg.step_size))
        if abs(prev - terms["total"]) <= cfg.convergence_tol * max(abs(prev), 1e-300):
            converged, reason = True, "tolerance"
            break
        if cfg.chamfer_samples:
            obj.resample()
            terms, grad = obj(x)
    logger.debug("registration stopped after %d iterations (%s)", it, reason)
    return RegistrationReport(history, x, it, converged, reason)
