"""Stage orchestration for the synthetic end-to-end run.

Stages run in a fixed order inside one work directory and each writes a
JSON report under ``reports/``. Every stochastic choice derives from the
single config seed, so two runs with the same config produce identical
bytes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synth as synth_mod
from .errors import GarmeshError, InputError, NumericalError
from .mesh import (
    atomic_write_text,
    build_laplacian,
    load_boundary_labels,
    load_obj,
    save_obj,
)
from .metrics import LossWeights, evaluate_sequence, posed_loss
from .neural import (
    NeuralWeights,
    build_feature_grid,
    init_refine_weights,
    iterative_refine,
)
from .registration import RegistrationConfig, register
from .remesh import BarycentricMap, apply_barycentric_map, build_barycentric_map
from .shape_space import ShapeSpace, decode, encode, fit_pca, load_alpha, save_alpha
from .skinning import load_poses, load_skeleton, pose_body, skin_garment

log = logging.getLogger(__name__)

STAGES = ("synth", "register", "remesh", "fit-pca", "encode", "skin", "refine", "eval")


class StageError(GarmeshError):
    """A pipeline stage failed; ``cause`` keeps the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def dump_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


@dataclass
class PipelineConfig:
    workdir: str = "run"
    seed: int = 0
    fps: float = 30.0
    stages: list = field(default_factory=lambda: list(STAGES))
    synth: dict = field(default_factory=dict)
    registration: dict = field(default_factory=lambda: {"max_iterations": 500})
    pca: dict = field(default_factory=dict)
    skinning: dict = field(default_factory=lambda: {"K": 64, "smoothing_iters": 10, "smoothing_step": 0.5})
    refine: dict = field(default_factory=lambda: {"enabled": False})
    loss_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise InputError(f"unknown stages {bad}; choose from {list(STAGES)}")
        if not self.fps > 0:
            raise InputError("fps must be positive")
        if int(self.seed) != self.seed or not 0 <= int(self.seed) < 2**64:
            raise InputError("seed must be an unsigned 64-bit integer")
        self.seed = int(self.seed)
        # fail early on malformed sub-configs
        self.synth_config()
        self.registration_config({}, {})
        LossWeights.from_dict(self.loss_weights)
        unknown = set(self.skinning) - {"K", "smoothing_iters", "smoothing_step", "exponent"}
        unknown |= set(self.pca) - {"d"}
        unknown |= set(self.refine) - {"enabled", "weights", "iterations", "radii", "max_samples", "init", "plan"}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def synth_config(self) -> synth_mod.SynthConfig:
        d = dict(self.synth)
        d.update(seed=self.seed, fps=self.fps)
        return synth_mod.SynthConfig.from_dict(d)

    def registration_config(self, source_labels, target_labels) -> RegistrationConfig:
        d = {"boundary_pairs": [["waist", "waist"], ["hem", "hem"]], "seed": self.seed}
        d.update(self.registration)
        d["source_boundaries"] = source_labels
        d["target_boundaries"] = target_labels
        if not source_labels or not target_labels:
            d["boundary_pairs"] = []
        return RegistrationConfig.from_dict(d)


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.scene = self.root / "scene"
        self.reports = {}

    # paths
    def p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def manifest(self) -> dict:
        return read_json(self.scene / "scene.json")

    def _frames(self, sub, ext="obj"):
        files = sorted((self.p(sub)).glob(f"frame_*.{ext}"))
        if not files:
            raise InputError(f"no frames found in {self.p(sub)}")
        return files

    def run(self) -> dict:
        for stage in STAGES:
            if stage not in self.cfg.stages:
                continue
            log.info("stage %s", stage)
            try:
                report = getattr(self, "stage_" + stage.replace("-", "_"))()
            except GarmeshError as exc:
                raise StageError(stage, exc) from exc
            except (ValueError, OSError, FloatingPointError) as exc:
                raise StageError(stage, exc) from exc
            self.reports[stage] = report
            dump_json(self.p("reports", f"{stage}.json"), report)
        return self.reports

    # stages
    def stage_synth(self):
        scfg = self.cfg.synth_config()
        scene = synth_mod.make_scene(scfg)
        m = synth_mod.write_scene(scene, self.scene)
        return {"stage": "synth", "frames": m["frames"], "pointsPerFrame": m["pointsPerFrame"],
                "garments": m["garments"], "config": m["config"]}

    def stage_register(self):
        man = self.manifest()
        template = load_obj(self.scene / man["template"])
        t_labels = load_boundary_labels(self.scene / man["templateLabels"])
        out = []
        for name in man["garments"]:
            src = load_obj(self.scene / f"{name}.obj")
            s_labels = load_boundary_labels(self.scene / f"{name}_labels.json")
            rep = register(src, template, self.cfg.registration_config(s_labels, t_labels))
            save_obj(src.with_vertices(rep.vertices), self.p("registered", Path(name).name + ".obj"))
            out.append({
                "garment": name,
                "iterations": rep.iterations,
                "stop_reason": rep.stop_reason,
                "initial": rep.history[0],
                "final": rep.history[-1],
            })
        return {"stage": "register", "garments": out}

    def stage_remesh(self):
        man = self.manifest()
        template = load_obj(self.scene / man["template"])
        out = []
        for name in man["garments"]:
            base = Path(name).name
            src = load_obj(self.scene / f"{name}.obj")
            reg = load_obj(self.p("registered", base + ".obj"))
            bmap = build_barycentric_map(template, reg)
            bmap.save(self.p("maps", base + ".json"))
            save_obj(apply_barycentric_map(bmap, src), self.p("remeshed", base + ".obj"))
            out.append({"garment": name, "template_vertices": template.n_vertices})
        # ground-truth frames share the target garment's topology
        tmap = BarycentricMap.load(self.p("maps", Path(man["target"]).name + ".json"))
        gt = sorted((self.scene / man["gt"]).glob("frame_*.obj"))
        for f in gt:
            save_obj(apply_barycentric_map(tmap, load_obj(f)), self.p("gt_remeshed", f.name))
        return {"stage": "remesh", "garments": out, "gt_frames": len(gt)}

    def stage_fit_pca(self):
        man = self.manifest()
        meshes = [load_obj(self.p("remeshed", Path(n).name + ".obj")) for n in man["train"]]
        space = fit_pca(meshes, self.cfg.pca.get("d"))
        space.save(self.p("space.bin"))
        sv = space.singular_values
        return {"stage": "fit-pca", "samples": len(meshes), "d": space.d,
                "singular_values": sv.tolist(),
                "explained": (sv**2 / max(float(np.sum(sv**2)), 1e-300)).tolist()}

    def stage_encode(self):
        man = self.manifest()
        space = ShapeSpace.load(self.p("space.bin"))
        target = load_obj(self.p("remeshed", Path(man["target"]).name + ".obj"))
        alpha = encode(space, target)
        save_alpha(self.p("alpha.json"), alpha)
        save_obj(decode(space, alpha), self.p("canonical.obj"))
        return {"stage": "encode", "alpha": alpha.tolist()}

    def stage_skin(self):
        man = self.manifest()
        space = ShapeSpace.load(self.p("space.bin"))
        alpha = load_alpha(self.p("alpha.json"))
        skel = load_skeleton(self.scene / man["skeleton"])
        poses = load_poses(self.scene / man["poses"])
        sk = self.cfg.skinning
        frames = skin_garment(space, alpha, skel, poses.frames, int(sk.get("K", 64)),
                              int(sk.get("smoothing_iters", 10)), float(sk.get("smoothing_step", 0.5)),
                              float(sk.get("exponent", 1.0)))
        for t, (m, pose) in enumerate(zip(frames, poses.frames)):
            save_obj(m, self.p("proposals", synth_mod.frame_name(t, "obj")))
            save_obj(pose_body(skel, pose), self.p("bodies", synth_mod.frame_name(t, "obj")))
        return {"stage": "skin", "frames": len(frames), "K": int(sk.get("K", 64))}

    def _garment_clouds(self):
        man = self.manifest()
        out = []
        for f in sorted((self.scene / man["clouds"]).glob("frame_*.txt")):
            pts, lab = synth_mod.load_cloud(f)
            out.append(pts[lab == synth_mod.GARMENT])
        return out

    def stage_refine(self):
        rc = self.cfg.refine
        if not rc.get("enabled", False):
            return {"stage": "refine", "enabled": False}
        proposals = [load_obj(f) for f in self._frames("proposals")]
        bodies = [load_obj(f) for f in self._frames("bodies")]
        clouds = self._garment_clouds()
        radii = tuple(rc.get("radii", (0.05, 0.1, 0.2)))
        samples = tuple(rc.get("max_samples", (16, 32, 64)))
        weights = load_or_init_weights(rc, len(radii), self.cfg.seed)
        grids = [build_feature_grid(c, radii, samples) for c in clouds]
        res = iterative_refine(proposals, grids, bodies, weights, rc.get("iterations"), radii, samples)
        for t, m in enumerate(res.meshes):
            save_obj(m, self.p("refined", synth_mod.frame_name(t, "obj")))
        return {"stage": "refine", "enabled": True, "iterations": len(res.displacements),
                "max_displacement": [float(np.abs(d).max()) for d in res.displacements]}

    def stage_eval(self):
        man = self.manifest()
        refined = self.cfg.refine.get("enabled", False)
        pred = [load_obj(f) for f in self._frames("refined" if refined else "proposals")]
        gt = [load_obj(f) for f in self._frames("gt_remeshed")]
        bodies = [load_obj(f) for f in self._frames("bodies")]
        canon = load_obj(self.p("canonical.obj"))
        canon_gt = load_obj(self.p("remeshed", Path(man["target"]).name + ".obj"))
        metrics = evaluate_sequence(pred, gt, self.cfg.fps, canon, canon_gt, self._garment_clouds())
        lw = LossWeights.from_dict(self.cfg.loss_weights)
        total, terms = posed_loss(pred, gt, bodies, build_laplacian(canon_gt, "cotangent"), lw)
        result = metrics.to_dict()
        result["posed_loss"] = {"total": total, "terms": terms}
        values = [v for k, v in result.items() if k in ("M1", "M2", "M3", "oneWayCD") and v is not None]
        if not all(np.isfinite(values)):
            raise NumericalError("non-finite metric")
        dump_json(self.p("metrics.json"), result)
        return {"stage": "eval", **result}


def load_or_init_weights(rc: dict, levels: int, seed: int) -> NeuralWeights:
    """Weights from ``rc["weights"]`` or freshly initialised per ``rc["init"]``."""
    if rc.get("weights"):
        return NeuralWeights.load(rc["weights"])
    plan = {"iterations": int(rc.get("iterations") or 3), "garment_levels": levels, "body_levels": levels}
    plan.update(rc.get("plan", {}))
    init = rc.get("init", "zero")
    if init not in ("zero", "random"):
        raise InputError(f"refine init must be 'zero' or 'random', got {init!r}")
    return init_refine_weights(plan, seed=seed, zero_output=init == "zero")


def run_pipeline(cfg: PipelineConfig | dict) -> dict:
    """Run the configured stages; returns the per-stage reports."""
    if isinstance(cfg, dict):
        cfg = PipelineConfig.from_dict(cfg)
    pipe = Pipeline(cfg)
    dump_json(pipe.p("reports", "config.json"), cfg.to_dict())
    return pipe.run()


def robustness_sweep(cfg: PipelineConfig | dict, incompleteness=(0.0, 0.25, 0.5), label_error=(0.0, 0.25, 0.5)) -> dict:
    """Full pipeline over a grid of cloud incompleteness and label error.

    Each setting runs in its own sub-directory. Metrics are recorded, and
    so is whether they degrade monotonically along each axis, without
    asserting it.
    """
    if isinstance(cfg, dict):
        cfg = PipelineConfig.from_dict(cfg)
    root = Path(cfg.workdir)
    rows = []
    for inc in incompleteness:
        for err in label_error:
            d = asdict(cfg)
            d["workdir"] = str(root / f"inc{inc:g}_err{err:g}")
            d["synth"] = dict(d["synth"], incompleteness=float(inc), label_error=float(err))
            reports = run_pipeline(d)
            m = reports["eval"]
            rows.append({"incompleteness": float(inc), "label_error": float(err),
                         "M1": m["M1"], "M2": m["M2"], "M3": m["M3"], "oneWayCD": m["oneWayCD"],
                         "finite": all(np.isfinite([m["M2"], m["M3"], m["oneWayCD"]]))})

    def monotone(key, fixed_key, fixed_vals):
        out = {}
        for fv in fixed_vals:
            seq = [r[key] for r in rows if r[fixed_key] == fv]
            out[f"{fixed_key}={fv:g}"] = bool(all(b >= a for a, b in zip(seq, seq[1:])))
        return out

    summary = {
        "rows": rows,
        "all_finite": all(r["finite"] for r in rows),
        "monotone_in_incompleteness": monotone("oneWayCD", "label_error", label_error),
        "monotone_in_label_error": monotone("oneWayCD", "incompleteness", incompleteness),
    }
    dump_json(root / "robustness.json", summary)
    return summary
