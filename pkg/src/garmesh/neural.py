"""Forward-only neural operators for posed-garment refinement.

Nothing here is trained. Weights come from a tensor container (or from
:func:`init_refine_weights` for tests), and every operator is a plain numpy
function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import container
from .errors import InputError, NumericalError, TopologyMismatchError
from .mesh import Mesh
from .spatial import nearest

WEIGHTS_KIND = "neural-weights"
DEFAULT_RADII = (0.05, 0.1, 0.2)
DEFAULT_MAX_SAMPLES = (16, 32, 64)

__all__ = [
    "FeatureGrid",
    "NeuralWeights",
    "ball_query",
    "ball_query_padded",
    "build_feature_grid",
    "encode_body_surface",
    "farthest_point_sample",
    "gather_body_features",
    "gather_body_samples",
    "gather_garment_features",
    "gcn_layer",
    "init_refine_weights",
    "iterative_refine",
    "mlp",
    "pool_garment_features",
    "softmax",
    "temporal_attention",
]


def _points(x, name="points"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise InputError(f"{name} must be an (n, 3) array, got {x.shape}")
    return x


# -- neighbourhoods -----------------------------------------------------------


def ball_query_padded(centers, points, radius: float, max_samples: int, tree: cKDTree | None = None):
    """Padded form of :func:`ball_query`.

    Returns ``(indices, counts)`` where ``indices`` is (m, max_samples). Row
    ``i`` holds ``counts[i]`` hits in ascending (distance, index) order,
    padded by repeating the first hit.
    """
    centers = _points(centers, "centers")
    points = _points(points)
    if len(points) == 0:
        raise InputError("ball query on an empty point set")
    if not radius > 0:
        raise InputError("radius must be positive")
    if max_samples < 1:
        raise InputError("max_samples must be >= 1")
    max_samples = int(max_samples)
    tree = tree if tree is not None else cKDTree(points)
    r2 = float(radius) ** 2
    out = np.empty((len(centers), max_samples), dtype=np.int64)
    counts = np.empty(len(centers), dtype=np.int64)
    # slightly widened search, then the exact d2 <= r^2 test below decides
    cand = tree.query_ball_point(centers, float(radius) * (1.0 + 1e-9) + 1e-15)
    fallback = []
    for i, c in enumerate(cand):
        c = np.asarray(c, dtype=np.int64)
        if len(c):
            d2 = ((points[c] - centers[i]) ** 2).sum(axis=1)
            keep = d2 <= r2
            c, d2 = c[keep], d2[keep]
        if len(c) == 0:
            fallback.append(i)
            continue
        order = np.lexsort((c, d2))[:max_samples]
        hits = c[order]
        out[i, : len(hits)] = hits
        out[i, len(hits):] = hits[0]
        counts[i] = len(hits)
    if fallback:
        fb = np.asarray(fallback)
        idx, _ = nearest(centers[fb], points, tree)
        out[fb] = idx[:, None]
        counts[fb] = 1
    return out, counts


def ball_query(centers, points, radius: float, max_samples: int, tree: cKDTree | None = None):
    """Up to ``max_samples`` point indices within ``radius`` of each center.

    Hits are ordered by ascending distance, ties by lower index. A center
    with no point in range gets its single global nearest point.
    """
    idx, counts = ball_query_padded(centers, points, radius, max_samples, tree)
    return [idx[i, : counts[i]].copy() for i in range(len(idx))]


def farthest_point_sample(points, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of size ``n`` starting at ``start``.

    Ties go to the lowest index (``argmax`` returns the first maximum).
    """
    points = _points(points)
    if not 1 <= n <= len(points):
        raise InputError(f"cannot sample {n} of {len(points)} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    d2 = ((points - points[start]) ** 2).sum(axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(d2))
        chosen[k] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


@dataclass
class FeatureGrid:
    """Multi-level down-sampled garment points with per-point features."""

    levels: list
    radii: tuple = DEFAULT_RADII
    max_samples: tuple = DEFAULT_MAX_SAMPLES

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        self.max_samples = tuple(int(s) for s in self.max_samples)
        if not (len(self.levels) == len(self.radii) == len(self.max_samples)) or not self.levels:
            raise InputError("levels, radii and max_samples must have the same nonzero length")
        if any(r <= 0 for r in self.radii) or any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise InputError("radii must be positive and strictly increasing")
        if any(s < 1 for s in self.max_samples):
            raise InputError("max_samples must be >= 1")
        lv = []
        for pts, feat in self.levels:
            pts = _points(pts)
            feat = np.asarray(feat, dtype=np.float64)
            if feat.ndim != 2 or len(feat) != len(pts) or len(pts) == 0:
                raise InputError("each level needs one feature row per point")
            lv.append((pts, feat))
        if len({f.shape[1] for _, f in lv}) != 1:
            raise InputError("feature width must agree across levels")
        self.levels = lv

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def feature_dim(self) -> int:
        return self.levels[0][1].shape[1]


def build_feature_grid(points, radii=DEFAULT_RADII, max_samples=DEFAULT_MAX_SAMPLES, ratio: int = 4) -> FeatureGrid:
    """Feature hierarchy from a garment point cloud.

    Level ``l`` keeps ``ceil(n / ratio**l)`` farthest-point samples. Each
    point's feature is the offset from the point to the centroid of its
    ball neighbourhood in the full cloud (radius of that level).
    """
    points = _points(points)
    if len(points) == 0:
        raise InputError("cannot build a feature grid from an empty cloud")
    tree = cKDTree(points)
    levels = []
    for lvl, (r, s) in enumerate(zip(radii, max_samples)):
        n = max(1, -(-len(points) // ratio**lvl))
        sub = points[farthest_point_sample(points, n)] if lvl else points
        idx, counts = ball_query_padded(sub, points, r, s, tree)
        valid = np.arange(idx.shape[1])[None, :] < counts[:, None]
        gathered = points[idx] * valid[..., None]
        centroid = gathered.sum(axis=1) / counts[:, None]
        levels.append((sub, centroid - sub))
    return FeatureGrid(levels, tuple(radii), tuple(max_samples))


# -- weights ------------------------------------------------------------------


def plan_shapes(plan: dict) -> dict:
    """Tensor name -> shape required by a layer plan."""
    p = plan
    try:
        J = int(p["iterations"])
        g_in = int(p["garment_levels"]) * (3 + int(p["garment_feature_dim"]))
        b_in = int(p["body_levels"]) * 6
        pool = [int(x) for x in p["pool_hidden"]]
        body = [int(x) for x in p["body_hidden"]]
        gcn = [int(x) for x in p["gcn_hidden"]]
        att = int(p["attention_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"incomplete layer plan: {exc}") from None
    if J < 1 or not pool or not body or not gcn or att < 1:
        raise InputError("layer plan needs >= 1 iteration and nonempty layer lists")
    shapes = {}

    def dense(prefix, dims, bias="b"):
        for l, (a, b) in enumerate(zip(dims, dims[1:])):
            shapes[f"{prefix}.{l}.W"] = (a, b)
            shapes[f"{prefix}.{l}.{bias}"] = (b,)

    for j in range(J):
        dense(f"iter{j}.pool", [g_in] + pool)
        dense(f"iter{j}.body", [b_in] + body)
        dense(f"iter{j}.gcn", [pool[-1] + body[-1] + 3 + att] + gcn + [3], bias="B")
        if j > 0:
            for name in ("Wq", "Wk", "Wv"):
                shapes[f"iter{j}.attn.{name}"] = (gcn[-1], att)
    return shapes


@dataclass
class NeuralWeights:
    """Named tensors plus the layer plan they must agree with.

    The plan keys are ``iterations``, ``garment_levels``,
    ``garment_feature_dim``, ``body_levels``, ``pool_hidden``,
    ``body_hidden``, ``gcn_hidden`` and ``attention_dim``.
    """

    tensors: dict
    plan: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}
        self.validate()

    def __getitem__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise InputError(f"missing weight tensor {name!r}") from None

    def expected_shapes(self) -> dict:
        return plan_shapes(self.plan)

    def validate(self):
        if not self.plan:
            return
        want = self.expected_shapes()
        missing = sorted(set(want) - set(self.tensors))
        if missing:
            raise InputError(f"weights missing tensors: {missing[:5]}")
        for k, shape in want.items():
            if self.tensors[k].shape != shape:
                raise InputError(f"tensor {k} has shape {self.tensors[k].shape}, plan needs {shape}")

    def layers(self, prefix: str, bias: str = "b"):
        out, l = [], 0
        while f"{prefix}.{l}.W" in self.tensors:
            out.append((self.tensors[f"{prefix}.{l}.W"], self.tensors[f"{prefix}.{l}.{bias}"]))
            l += 1
        return out

    def save(self, path) -> None:
        container.save(path, self.tensors, kind=WEIGHTS_KIND, meta={"plan": self.plan})

    @classmethod
    def load(cls, path) -> NeuralWeights:
        tensors, meta = container.load(path, kind=WEIGHTS_KIND)
        return cls(tensors, meta.get("plan", {}))


def init_refine_weights(
    plan: dict | None = None,
    seed: int = 0,
    scale: float = 0.1,
    zero_output: bool = False,
) -> NeuralWeights:
    """Random weights for a refinement network (shape and invariant tests).

    ``zero_output`` zeroes the final GCN layer of every iteration, which
    makes the displacements exactly zero.
    """
    full = {
        "iterations": 3,
        "garment_levels": 3,
        "garment_feature_dim": 3,
        "body_levels": 3,
        "pool_hidden": [32, 16],
        "body_hidden": [32, 16],
        "gcn_hidden": [32, 16],
        "attention_dim": 8,
    }
    full.update(plan or {})
    rng = np.random.default_rng(seed)
    shapes = plan_shapes(full)
    n_gcn = len(full["gcn_hidden"])
    tensors = {}
    for name, shape in shapes.items():
        fan_in = shape[0] if len(shape) == 2 else 1
        t = rng.standard_normal(shape) * (scale / np.sqrt(fan_in))
        if zero_output and name.split(".")[1] == "gcn" and name.split(".")[2] == str(n_gcn):
            t = np.zeros(shape)
        tensors[name] = t
    return NeuralWeights(tensors, full)


# -- layers -------------------------------------------------------------------


def _rowwise_matmul(x, w):
    # column-by-column accumulation: each output row depends only on its own
    # input row, in a fixed order, so row permutations commute exactly
    out = np.zeros((x.shape[0], w.shape[1]))
    for f in range(x.shape[1]):
        out += x[:, f:f + 1] * w[f][None, :]
    return out


def mlp(x, layers, final_activation: bool = False):
    """Dense layers with ReLU in between; the last layer stays linear."""
    h = np.asarray(x, dtype=np.float64)
    for i, (W, b) in enumerate(layers):
        if h.shape[-1] != W.shape[0]:
            raise InputError(f"MLP layer {i} expects width {W.shape[0]}, got {h.shape[-1]}")
        h = h @ W + b
        if i < len(layers) - 1 or final_activation:
            h = np.maximum(h, 0.0)
    return h


def gather_garment_features(vertices, grid: FeatureGrid) -> np.ndarray:
    """Max-pooled ``(relative coordinate || feature)`` per level, concatenated."""
    v = _points(vertices, "vertices")
    parts = []
    for (pts, feat), r, s in zip(grid.levels, grid.radii, grid.max_samples):
        idx, _ = ball_query_padded(v, pts, r, s)
        rel = pts[idx] - v[:, None, :]
        parts.append(np.concatenate([rel, feat[idx]], axis=2).max(axis=1))
    return np.concatenate(parts, axis=1)


def pool_garment_features(vertices, grid: FeatureGrid, layers=None) -> np.ndarray:
    """Per-vertex garment features; ``layers`` is a list of (W, b) or None."""
    g = gather_garment_features(vertices, grid)
    return mlp(g, layers) if layers else g


def gather_body_samples(vertices, body: Mesh, radius: float, max_samples: int, tree: cKDTree | None = None):
    """Unreduced ``(relative coordinate || body normal)`` samples, (n, s, 6).

    Also returns the padded body-vertex indices.
    """
    v = _points(vertices, "vertices")
    idx, _ = ball_query_padded(v, body.vertices, radius, max_samples, tree)
    rel = body.vertices[idx] - v[:, None, :]
    return idx, np.concatenate([rel, body.vertex_normals[idx]], axis=2)


def gather_body_features(vertices, body: Mesh, radii=DEFAULT_RADII, max_samples=DEFAULT_MAX_SAMPLES) -> np.ndarray:
    if len(radii) != len(max_samples):
        raise InputError("radii and max_samples lengths differ")
    tree = cKDTree(body.vertices)
    parts = [gather_body_samples(vertices, body, r, s, tree)[1].max(axis=1) for r, s in zip(radii, max_samples)]
    return np.concatenate(parts, axis=1)


def encode_body_surface(vertices, body: Mesh, radii=DEFAULT_RADII, max_samples=DEFAULT_MAX_SAMPLES, layers=None):
    """Per-vertex features of the nearby posed body surface."""
    g = gather_body_features(vertices, body, radii, max_samples)
    return mlp(g, layers) if layers else g


def _neighbor_table(A):
    A = sparse.csr_matrix(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise InputError("adjacency must be square")
    if (A != A.T).nnz:
        raise InputError("adjacency must be symmetric")
    A = A.copy()
    A.setdiag(0)
    A.eliminate_zeros()
    A = (A != 0).astype(np.int64).tocsr()
    deg = np.diff(A.indptr)
    width = int(deg.max(initial=0)) + 1
    table = np.full((n, width), -1, dtype=np.int64)
    table[:, 0] = np.arange(n)
    rows = np.repeat(np.arange(n), deg)
    slot = np.arange(A.nnz) - A.indptr[rows] + 1
    table[rows, slot] = A.indices
    return table, deg + 1


def gcn_layer(H, A, W, B, activation: bool = True, table=None):
    """``relu(D^-1 (A + I) H W + B)`` on a symmetric 0/1 adjacency ``A``.

    Neighbour sums are taken over values sorted within each row, so the
    result does not depend on vertex labelling: permuting ``H`` and ``A``
    consistently permutes the output bit for bit.
    """
    H = np.asarray(H, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if H.ndim != 2 or W.ndim != 2 or H.shape[1] != W.shape[0] or B.shape[-1] != W.shape[1]:
        raise InputError(f"shape mismatch: H {H.shape}, W {W.shape}, B {B.shape}")
    tbl, cnt = table if table is not None else _neighbor_table(A)
    if len(tbl) != len(H):
        raise InputError(f"adjacency has {len(tbl)} nodes, features have {len(H)}")
    padded = np.concatenate([H, np.zeros((1, H.shape[1]))])
    g = np.sort(padded[tbl], axis=1)  # (n, width, f); -1 slots read the zero row
    acc = g[:, 0].copy()
    for k in range(1, g.shape[1]):
        acc += g[:, k]
    out = _rowwise_matmul(acc / cnt[:, None], W) + B
    return np.maximum(out, 0.0) if activation else out


def gcn_stack(H, table, layers):
    """Run GCN layers (ReLU on all but the last); returns (output, penultimate)."""
    h = H
    for i, (W, B) in enumerate(layers):
        last = i == len(layers) - 1
        if last:
            penult = h
        h = gcn_layer(h, None, W, B, activation=not last, table=table)
    return h, penult


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def temporal_attention(F, Wq, Wk, Wv):
    """Fuse per-frame features across time.

    ``F`` is (T, n, c): per-frame features of n vertices, treated as one
    flattened vector per frame. Q, K and V apply the same (c, a) map to
    every vertex. Returns ``(V', attention)`` with
    ``attention = softmax(Q K^T / sqrt(T))`` over the key axis.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3:
        raise InputError("temporal features must be (frames, vertices, channels)")
    for W in (Wq, Wk, Wv):
        if W.shape[0] != F.shape[2]:
            raise InputError(f"projection expects {W.shape[0]} channels, got {F.shape[2]}")
    T = F.shape[0]
    if T < 1:
        raise InputError("need at least one frame")
    Q, K, V = F @ Wq, F @ Wk, F @ Wv
    logits = np.einsum("snc,tnc->st", Q, K) / np.sqrt(T)
    att = softmax(logits, axis=1)
    return np.einsum("st,tnc->snc", att, V), att


# -- refinement ---------------------------------------------------------------


@dataclass
class RefineResult:
    meshes: list
    displacements: list  # per iteration, (T, n, 3)


def iterative_refine(
    proposals,
    grids,
    bodies,
    weights: NeuralWeights,
    iterations: int | None = None,
    body_radii=DEFAULT_RADII,
    body_max_samples=DEFAULT_MAX_SAMPLES,
) -> RefineResult:
    """Refine a posed proposal sequence by accumulated predicted displacements.

    Iteration ``j`` works on ``M_p + sum_{i<j} D_i``: it pools garment and
    body features, appends vertex coordinates and the temporal attention of
    the previous iteration's penultimate GCN features (zeros at ``j = 0``),
    and the GCN stack outputs ``D_j``. Faces never change.
    """
    proposals, grids, bodies = list(proposals), list(grids), list(bodies)
    T = len(proposals)
    if T == 0 or len(grids) != T or len(bodies) != T:
        raise InputError("proposals, grids and bodies must have the same nonzero length")
    base = proposals[0]
    for m in proposals[1:]:
        if not base.same_topology(m):
            raise TopologyMismatchError("proposal frames do not share topology")
    plan = weights.plan
    J = int(plan.get("iterations", 1)) if iterations is None else int(iterations)
    if J < 1 or J > int(plan.get("iterations", J)):
        raise InputError(f"weights hold {plan.get('iterations')} iteration blocks, {J} requested")
    if int(plan.get("body_levels", len(body_radii))) != len(body_radii):
        raise InputError("body radii do not match the layer plan")
    att_dim = int(plan["attention_dim"])
    table = _neighbor_table(base.adjacency)
    n = base.n_vertices
    x = np.stack([m.vertices for m in proposals])
    disps = []
    prev_penult = None
    for j in range(J):
        pool_l = weights.layers(f"iter{j}.pool")
        body_l = weights.layers(f"iter{j}.body")
        gcn_l = weights.layers(f"iter{j}.gcn", bias="B")
        if prev_penult is None:
            temporal = np.zeros((T, n, att_dim))
        else:
            temporal, _ = temporal_attention(
                prev_penult, weights[f"iter{j}.attn.Wq"], weights[f"iter{j}.attn.Wk"], weights[f"iter{j}.attn.Wv"]
            )
        D = np.empty_like(x)
        penult = []
        for t in range(T):
            feats = np.concatenate(
                [
                    pool_garment_features(x[t], grids[t], pool_l),
                    encode_body_surface(x[t], bodies[t], body_radii, body_max_samples, body_l),
                    x[t],
                    temporal[t],
                ],
                axis=1,
            )
            with np.errstate(over="ignore", invalid="ignore"):
                # overflow surfaces in the finiteness check below
                D[t], p = gcn_stack(feats, table, gcn_l)
            penult.append(p)
        if not np.all(np.isfinite(D)):
            raise NumericalError(f"non-finite displacement in refinement iteration {j + 1}")
        disps.append(D)
        x = x + D
        prev_penult = np.stack(penult)
    return RefineResult([base.with_vertices(x[t]) for t in range(T)], disps)
