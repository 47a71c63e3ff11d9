"""Synthetic two-leg scene: skeleton, body, skirt garments, poses and clouds.

Everything is a deterministic function of the seed. Units are meters.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .mesh import Mesh, atomic_write_text, save_obj
from .primitives import box, capsule, merge, tube, tube_rims
from .skinning import (
    Pose,
    PoseSequence,
    Skeleton,
    interpolate_skinning_weights,
    linear_blend_skin,
    pose_body,
    pose_skeleton,
    save_poses,
    save_skeleton,
)

GARMENT, BODY = 1, 0

HIP_X = 0.1
HIP_Y = -0.08
LEG_RADIUS = 0.07
LEG_BOTTOM = -0.9


@dataclass
class SynthConfig:
    seed: int = 0
    frames: int = 8
    fps: float = 30.0
    points_per_frame: int = 2000
    incompleteness: float = 0.0
    label_error: float = 0.0
    n_train: int = 6
    template_around: int = 32
    template_down: int = 16
    swing_amplitude: float = 0.5
    swing_hz: float = 1.0
    garment_fraction: float = 0.6
    hole_radius: float = 0.08

    def __post_init__(self):
        if not 0.0 <= self.incompleteness < 1.0:
            raise InputError("incompleteness must lie in [0, 1)")
        if not 0.0 <= self.label_error < 1.0:
            raise InputError("label_error must lie in [0, 1)")
        if self.frames < 1 or self.points_per_frame < 1:
            raise InputError("frames and points_per_frame must be positive")
        if self.n_train < 2:
            raise InputError("need at least two training garments")
        if not self.fps > 0:
            raise InputError("fps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticScene:
    skeleton: Skeleton
    template: Mesh
    template_labels: dict
    garments: list  # (mesh, labels); index 0 is the evaluation garment
    poses: PoseSequence
    gt_frames: list
    clouds: list  # (points (n, 3), labels (n,))
    config: SynthConfig = field(default_factory=SynthConfig)


def two_leg_skeleton() -> Skeleton:
    """Root at the pelvis plus two hips; body is a pelvis box and two capsule legs."""
    joints = np.array([[0.0, 0.0, 0.0], [HIP_X, HIP_Y, 0.0], [-HIP_X, HIP_Y, 0.0]])
    pelvis = box((-0.16, -0.1, -0.09), (0.16, 0.06, 0.09), n=4)
    legs = [capsule((sx * HIP_X, HIP_Y, 0.0), (sx * HIP_X, LEG_BOTTOM, 0.0), LEG_RADIUS) for sx in (1, -1)]
    body = merge(pelvis, *legs)
    w = np.zeros((body.n_vertices, 3))
    w[: pelvis.n_vertices, 0] = 1.0
    off = pelvis.n_vertices
    for j, leg in zip((1, 2), legs):
        y = leg.vertices[:, 1]
        # blend from root to hip over the top of the thigh
        s = np.clip((HIP_Y + 0.02 - y) / 0.12, 0.0, 1.0)
        rows = slice(off, off + leg.n_vertices)
        w[rows, j] = s
        w[rows, 0] = 1.0 - s
        off += leg.n_vertices
    return Skeleton(joints, [-1, 0, 0], ("root", "hip_left", "hip_right"), body, w)


def skirt(radius=0.22, flare=0.3, top=0.05, bottom=-0.45, n_around=32, n_down=16, wave=0.0, lobes=3, phase=0.0) -> Mesh:
    """Flared tube skirt with an optional ``lobes``-fold radial wave."""
    m = tube(radius, top, bottom, n_around, n_down, flare=flare)
    if wave:
        v = m.vertices.copy()
        ang = np.arctan2(v[:, 2], v[:, 0])
        t = (top - v[:, 1]) / (top - bottom)
        scale = 1.0 + wave * t * np.cos(lobes * ang + phase)
        v[:, 0] *= scale
        v[:, 2] *= scale
        m = m.with_vertices(v)
    return m


def swing_poses(frames: int, fps: float, amplitude: float = 0.5, hz: float = 1.0) -> PoseSequence:
    """Legs swinging in antiphase about the x axis."""
    out = []
    for t in range(frames):
        a = amplitude * np.sin(2.0 * np.pi * hz * t / fps)
        theta = np.zeros((3, 3))
        theta[1, 0] = a
        theta[2, 0] = -a
        out.append(Pose(theta, np.zeros(3)))
    return PoseSequence(float(fps), tuple(out))


def hip_rotation_pose(angle: float = np.pi / 4, joint: int = 1) -> Pose:
    theta = np.zeros((3, 3))
    theta[joint, 0] = angle
    return Pose(theta, np.zeros(3))


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform random points on a mesh."""
    a = mesh.face_areas
    f = rng.choice(mesh.n_faces, size=n, p=a / a.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[f]]
    return (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]


def crop_holes(points, fraction: float, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask after cutting spherical holes.

    Holes centred on random surviving points are cut until exactly
    ``round(fraction * n)`` points are gone; the last hole only removes the
    points closest to its centre.
    """
    n = len(points)
    target = int(round(fraction * n))
    keep = np.ones(n, dtype=bool)
    removed = 0
    while removed < target:
        alive = np.flatnonzero(keep)
        c = points[alive[rng.integers(len(alive))]]
        d2 = ((points[alive] - c) ** 2).sum(axis=1)
        inside = alive[d2 <= radius * radius]
        order = np.argsort(((points[inside] - c) ** 2).sum(axis=1), kind="stable")
        cut = inside[order[: target - removed]]
        keep[cut] = False
        removed += len(cut)
    return keep


def flip_labels(labels, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Flip exactly ``round(rate * n)`` binary labels chosen at random."""
    labels = np.asarray(labels).copy()
    k = int(round(rate * len(labels)))
    if k:
        idx = rng.choice(len(labels), size=k, replace=False)
        labels[idx] = 1 - labels[idx]
    return labels


def _lag(vertices, t, fps, amp=0.006):
    # small travelling wave standing in for cloth dynamics the skinning misses
    y = vertices[:, 1]
    depth = np.clip((0.05 - y) / 0.5, 0.0, 1.0)
    ang = np.arctan2(vertices[:, 2], vertices[:, 0])
    w = amp * depth * np.sin(2.0 * np.pi * t / fps - 4.0 * depth + ang)
    out = vertices.copy()
    out[:, 2] += w
    return out


def make_scene(cfg: SynthConfig | None = None) -> SyntheticScene:
    cfg = cfg or SynthConfig()
    root = np.random.SeedSequence(cfg.seed)
    shape_ss, cloud_ss = root.spawn(2)
    rng = np.random.default_rng(shape_ss)
    skel = two_leg_skeleton()
    ta, td = cfg.template_around, cfg.template_down
    template = skirt(n_around=ta, n_down=td)
    garments = []
    for _ in range(cfg.n_train + 1):
        na = int(rng.integers(ta - 6, ta + 9))
        nd = int(rng.integers(td - 3, td + 5))
        m = skirt(
            radius=0.22 * (1.0 + rng.uniform(-0.06, 0.06)),
            flare=0.3 + rng.uniform(-0.1, 0.1),
            bottom=-0.45 + rng.uniform(-0.04, 0.04),
            n_around=na,
            n_down=nd,
            wave=rng.uniform(0.0, 0.05),
            lobes=int(rng.integers(2, 5)),
            phase=rng.uniform(0, 2 * np.pi),
        )
        garments.append((m, tube_rims(na, nd)))
    poses = swing_poses(cfg.frames, cfg.fps, cfg.swing_amplitude, cfg.swing_hz)
    target = garments[0][0]
    w = interpolate_skinning_weights(target.vertices, skel, K=32, smoothing_iters=10, garment_mesh=target)
    gt = []
    for t, p in enumerate(poses.frames):
        rest = _lag(target.vertices, t, cfg.fps)
        gt.append(target.with_vertices(linear_blend_skin(rest, w, pose_skeleton(skel, p))))
    clouds = []
    for t, (ss, p) in enumerate(zip(cloud_ss.spawn(cfg.frames), poses.frames)):
        crng = np.random.default_rng(ss)
        n_g = int(round(cfg.garment_fraction * cfg.points_per_frame))
        pts = np.concatenate(
            [sample_surface(gt[t], n_g, crng), sample_surface(pose_body(skel, p), cfg.points_per_frame - n_g, crng)]
        )
        lab = np.concatenate([np.full(n_g, GARMENT), np.full(cfg.points_per_frame - n_g, BODY)])
        if cfg.incompleteness > 0:
            keep = crop_holes(pts, cfg.incompleteness, cfg.hole_radius, crng)
            pts, lab = pts[keep], lab[keep]
        lab = flip_labels(lab, cfg.label_error, crng)
        clouds.append((pts, lab))
    return SyntheticScene(skel, template, tube_rims(ta, td), garments, poses, gt, clouds, cfg)


# -- I/O ----------------------------------------------------------------------


def format_cloud(points, labels) -> str:
    return "".join(f"{x!r} {y!r} {z!r} {int(l)}\n" for (x, y, z), l in zip(np.asarray(points).tolist(), labels))


def save_cloud(path, points, labels) -> None:
    atomic_write_text(path, format_cloud(points, labels))


def load_cloud(path):
    """Read ``x y z label`` lines; returns (points, labels)."""
    try:
        data = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    if data.size == 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64)
    if data.shape[1] != 4:
        raise InputError(f"{path}: expected 4 columns 'x y z label', got {data.shape[1]}")
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: non-finite values")
    lab = data[:, 3]
    if np.any(lab != np.round(lab)) or np.any(lab < 0):
        raise InputError(f"{path}: labels must be nonnegative integers")
    return data[:, :3].copy(), lab.astype(np.int64)


def frame_name(t: int, ext: str) -> str:
    return f"frame_{t:04d}.{ext}"


def write_scene(scene: SyntheticScene, out) -> dict:
    """Write the scene under ``out``; returns a manifest of relative paths."""
    out = Path(out)
    save_skeleton(out / "skeleton.json", scene.skeleton)
    save_poses(out / "poses.json", scene.poses)
    save_obj(scene.template, out / "template.obj")
    atomic_write_text(out / "template_labels.json", json.dumps(scene.template_labels))
    garments = []
    for i, (m, lab) in enumerate(scene.garments):
        name = f"garments/garment_{i:02d}"
        save_obj(m, out / f"{name}.obj")
        atomic_write_text(out / f"{name}_labels.json", json.dumps(lab))
        garments.append(name)
    for t, m in enumerate(scene.gt_frames):
        save_obj(m, out / "gt" / frame_name(t, "obj"))
    for t, (p, l) in enumerate(scene.clouds):
        save_cloud(out / "clouds" / frame_name(t, "txt"), p, l)
    manifest = {
        "skeleton": "skeleton.json",
        "poses": "poses.json",
        "template": "template.obj",
        "templateLabels": "template_labels.json",
        "garments": garments,
        "target": garments[0],
        "train": garments[1:],
        "gt": "gt",
        "clouds": "clouds",
        "frames": len(scene.gt_frames),
        "pointsPerFrame": [len(p) for p, _ in scene.clouds],
        "config": asdict(scene.config),
    }
    atomic_write_text(out / "scene.json", json.dumps(manifest, indent=1))
    return manifest
