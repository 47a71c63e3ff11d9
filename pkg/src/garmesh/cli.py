"""Command-line entry point.

Every subcommand accepts ``--config file.json`` whose keys use the same
names as the long flags (dashes or underscores). Precedence is built-in
defaults, then the config file, then flags given on the command line.
All inputs are loaded and checked before any output is written.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import synth as synth_mod
from .errors import GarmeshError, InputError, NumericalError
from .mesh import load_boundary_labels, load_obj, save_obj
from .metrics import evaluate_sequence
from .neural import (
    DEFAULT_MAX_SAMPLES,
    DEFAULT_RADII,
    NeuralWeights,
    build_feature_grid,
    iterative_refine,
)
from .pipeline import (
    PipelineConfig,
    StageError,
    dump_json,
    load_or_init_weights,
    robustness_sweep,
    run_pipeline,
)
from .registration import RegistrationConfig, register
from .remesh import apply_barycentric_map, build_barycentric_map
from .shape_space import ShapeSpace, decode, encode, fit_pca, load_alpha, save_alpha
from .skinning import load_poses, load_skeleton, skin_garment

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("garmesh")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return EXIT_NUMERICAL
    return EXIT_INPUT


# -- option handling ----------------------------------------------------------

DEFAULTS = {
    "register": {"max_iterations": 2000, "step_size": 1e-3, "pairs": None, "source_labels": None,
                 "target_labels": None, "report": None, "seed": 0},
    "remesh": {"frames": [], "map": None},
    "fit-pca": {"components": None},
    "skin": {"K": 256, "smoothing_iters": 10, "smoothing_step": 0.5, "exponent": 1.0},
    "refine": {"iters": 3, "radii": list(DEFAULT_RADII), "max_samples": list(DEFAULT_MAX_SAMPLES),
               "label": synth_mod.GARMENT},
    "eval": {"fps": 30.0, "clouds": None, "canonical_pred": None, "canonical_gt": None},
    "synth": {"seed": 0, "frames": 8, "fps": 30.0, "points": 2000, "incompleteness": 0.0, "label_noise": 0.0},
    "init-weights": {"seed": 0, "zero": False, "iters": 3, "levels": 3},
}


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"config {path}: expected a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags into one dict."""
    opts = dict(DEFAULTS.get(command, {}))
    opts.update(_load_config(getattr(args, "config", None)))
    for k, v in vars(args).items():
        if k in ("config", "func", "command", "verbose"):
            continue
        if v is not None:
            opts[k] = v
    return opts


def _require(opts, *keys):
    missing = [k for k in keys if opts.get(k) in (None, "", [])]
    if missing:
        raise InputError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _frame_files(directory, ext):
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{d} is not a directory")
    files = sorted(d.glob(f"*.{ext}"))
    if not files:
        raise InputError(f"no .{ext} files in {d}")
    return files


def _parse_pairs(spec):
    if spec is None:
        return []
    if isinstance(spec, list):
        return [tuple(p) for p in spec]
    pairs = []
    for item in str(spec).split(","):
        if ":" not in item:
            raise InputError(f"boundary pair {item!r} must look like source_label:target_label")
        pairs.append(tuple(item.split(":", 1)))
    return pairs


# -- commands -----------------------------------------------------------------


def cmd_register(o):
    _require(o, "source", "target", "out")
    source = load_obj(o["source"])
    target = load_obj(o["target"])
    reg = {k: o[k] for k in RegistrationConfig.__dataclass_fields__ if k in o}
    reg["boundary_pairs"] = _parse_pairs(o.get("pairs") or o.get("boundary_pairs"))
    # seed ids come from sidecar files or directly from the config
    if o.get("source_labels"):
        reg["source_boundaries"] = load_boundary_labels(o["source_labels"])
    if o.get("target_labels"):
        reg["target_boundaries"] = load_boundary_labels(o["target_labels"])
    if reg["boundary_pairs"] and not (reg.get("source_boundaries") and reg.get("target_boundaries")):
        raise InputError("boundary pairs need --source-labels and --target-labels (or boundaries in --config)")
    cfg = RegistrationConfig.from_dict(reg)
    rep = register(source, target, cfg)
    save_obj(source.with_vertices(rep.vertices), o["out"])
    if o.get("report"):
        dump_json(o["report"], rep.to_dict())
    log.info("registered in %d iterations (%s)", rep.iterations, rep.stop_reason)


def _mesh_inputs(items):
    """OBJ paths from a list of files and/or directories."""
    files = []
    for item in items or []:
        p = Path(item)
        files += _frame_files(p, "obj") if p.is_dir() else [p]
    return files


def cmd_remesh(o):
    _require(o, "template", "registered", "out")
    template = load_obj(o["template"])
    registered = load_obj(o["registered"])
    frames = _mesh_inputs(o.get("frames"))
    if not frames:
        frames = [Path(o["registered"])]
    meshes = [load_obj(f) for f in frames]
    bmap = build_barycentric_map(template, registered)
    outs = [apply_barycentric_map(bmap, m) for m in meshes]
    out = Path(o["out"])
    for f, m in zip(frames, outs):
        save_obj(m, out / f.name)
    if o.get("map"):
        bmap.save(o["map"])


def cmd_fit_pca(o):
    _require(o, "meshes", "out")
    files = _mesh_inputs(o.get("meshes"))
    space = fit_pca([load_obj(f) for f in files], o.get("components"))
    space.save(o["out"])


def cmd_encode(o):
    _require(o, "space", "mesh", "out")
    space = ShapeSpace.load(o["space"])
    alpha = encode(space, load_obj(o["mesh"]))
    save_alpha(o["out"], alpha)


def cmd_decode(o):
    _require(o, "space", "alpha", "out")
    space = ShapeSpace.load(o["space"])
    save_obj(decode(space, load_alpha(o["alpha"])), o["out"])


def cmd_skin(o):
    _require(o, "space", "alpha", "skeleton", "poses", "out")
    space = ShapeSpace.load(o["space"])
    alpha = load_alpha(o["alpha"])
    skel = load_skeleton(o["skeleton"])
    poses = load_poses(o["poses"])
    frames = skin_garment(space, alpha, skel, poses.frames, int(o["K"]), int(o["smoothing_iters"]),
                          float(o["smoothing_step"]), float(o["exponent"]))
    for t, m in enumerate(frames):
        save_obj(m, Path(o["out"]) / synth_mod.frame_name(t, "obj"))


def cmd_refine(o):
    _require(o, "proposals", "clouds", "body", "weights", "out")
    proposals = [load_obj(f) for f in _frame_files(o["proposals"], "obj")]
    bodies = [load_obj(f) for f in _frame_files(o["body"], "obj")]
    clouds = [synth_mod.load_cloud(f) for f in _frame_files(o["clouds"], "txt")]
    if not len(proposals) == len(bodies) == len(clouds):
        raise InputError(f"{len(proposals)} proposals, {len(bodies)} bodies, {len(clouds)} clouds")
    weights = NeuralWeights.load(o["weights"])
    radii, samples = tuple(o["radii"]), tuple(o["max_samples"])
    grids = []
    for t, (pts, lab) in enumerate(clouds):
        g = pts[lab == int(o["label"])]
        if len(g) == 0:
            raise InputError(f"cloud frame {t} has no points labelled {o['label']}")
        grids.append(build_feature_grid(g, radii, samples))
    res = iterative_refine(proposals, grids, bodies, weights, int(o["iters"]), radii, samples)
    for t, m in enumerate(res.meshes):
        save_obj(m, Path(o["out"]) / synth_mod.frame_name(t, "obj"))


def cmd_eval(o):
    _require(o, "pred", "gt", "out")
    pred = [load_obj(f) for f in _frame_files(o["pred"], "obj")]
    gt = [load_obj(f) for f in _frame_files(o["gt"], "obj")]
    clouds = None
    if o.get("clouds"):
        clouds = []
        for f in _frame_files(o["clouds"], "txt"):
            pts, lab = synth_mod.load_cloud(f)
            clouds.append(pts[lab == synth_mod.GARMENT])
    cp = load_obj(o["canonical_pred"]) if o.get("canonical_pred") else None
    cg = load_obj(o["canonical_gt"]) if o.get("canonical_gt") else None
    m = evaluate_sequence(pred, gt, float(o["fps"]), cp, cg, clouds)
    dump_json(o["out"], m.to_dict())


def cmd_synth(o):
    _require(o, "out")
    cfg = synth_mod.SynthConfig(
        seed=int(o["seed"]), frames=int(o["frames"]), fps=float(o["fps"]),
        points_per_frame=int(o["points"]), incompleteness=float(o["incompleteness"]),
        label_error=float(o["label_noise"]),
    )
    synth_mod.write_scene(synth_mod.make_scene(cfg), o["out"])


def _pipeline_config(o) -> PipelineConfig:
    d = {k: v for k, v in o.items() if k in PipelineConfig.__dataclass_fields__}
    d["synth"] = dict(d.get("synth", {}))
    d["skinning"] = dict(d.get("skinning", {"K": 64, "smoothing_iters": 10, "smoothing_step": 0.5}))
    if o.get("K") is not None:
        d["skinning"]["K"] = int(o["K"])
    if o.get("label_noise") is not None:
        d["synth"]["label_error"] = float(o["label_noise"])
    if o.get("incompleteness") is not None:
        d["synth"]["incompleteness"] = float(o["incompleteness"])
    return PipelineConfig.from_dict(d)


def cmd_pipeline(o):
    cfg = _pipeline_config(o)
    reports = run_pipeline(cfg)
    if "eval" in reports:
        e = reports["eval"]
        print(json.dumps({k: e[k] for k in ("M1", "M2", "M3", "oneWayCD")}, sort_keys=True))


def cmd_robustness(o):
    cfg = _pipeline_config(o)
    summary = robustness_sweep(cfg, o.get("incompleteness_levels") or (0.0, 0.25, 0.5),
                               o.get("label_error_levels") or (0.0, 0.25, 0.5))
    for r in summary["rows"]:
        print(f"incompleteness={r['incompleteness']:.2f} label_error={r['label_error']:.2f} "
              f"M2={r['M2']:.3f}mm M3={r['M3']:.4f}m/s^2 oneWayCD={r['oneWayCD']:.3f}mm")


def cmd_init_weights(o):
    _require(o, "out")
    rc = {"iterations": int(o["iters"]), "init": "zero" if o["zero"] else "random"}
    w = load_or_init_weights(rc, int(o["levels"]), int(o["seed"]))
    w.save(o["out"])


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garmesh", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file with option values")
        sp.set_defaults(func=func)
        return sp

    s = add("register", cmd_register, "deform a source mesh onto a target")
    s.add_argument("--source")
    s.add_argument("--target")
    s.add_argument("--out")
    s.add_argument("--report", help="write the loss history as JSON")
    s.add_argument("--source-labels", help="JSON {label: [seed ids]} for the source boundaries")
    s.add_argument("--target-labels")
    s.add_argument("--pairs", help="comma separated source:target boundary label pairs")
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--step-size", type=float)
    s.add_argument("--seed", type=int)

    s = add("remesh", cmd_remesh, "rebuild frames on template connectivity")
    s.add_argument("--template")
    s.add_argument("--registered")
    s.add_argument("--frames", nargs="*", help="frame OBJ files or directories (default: the registered mesh)")
    s.add_argument("--map", help="also write the barycentric map as JSON")
    s.add_argument("--out", help="output directory")

    s = add("fit-pca", cmd_fit_pca, "fit a PCA shape space")
    s.add_argument("--meshes", nargs="*", help="OBJ files or directories of same-topology meshes")
    s.add_argument("--components", type=int, help="number of components d")
    s.add_argument("--out")

    s = add("encode", cmd_encode, "project a mesh onto the shape space")
    s.add_argument("--space")
    s.add_argument("--mesh")
    s.add_argument("--out")

    s = add("decode", cmd_decode, "mesh from shape coefficients")
    s.add_argument("--space")
    s.add_argument("--alpha")
    s.add_argument("--out")

    s = add("skin", cmd_skin, "pose the decoded garment with interpolated skinning")
    for a in ("--space", "--alpha", "--skeleton", "--poses", "--out"):
        s.add_argument(a)
    s.add_argument("--K", type=int)
    s.add_argument("--smoothing-iters", type=int)
    s.add_argument("--smoothing-step", type=float)
    s.add_argument("--exponent", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--fps", type=float)

    s = add("refine", cmd_refine, "apply the displacement refinement network")
    for a in ("--proposals", "--clouds", "--body", "--weights", "--out"):
        s.add_argument(a)
    s.add_argument("--iters", type=int)
    s.add_argument("--label", type=int, help="cloud label of garment points")
    s.add_argument("--seed", type=int)

    s = add("eval", cmd_eval, "sequence metrics M1/M2/M3 and one-way Chamfer")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--clouds")
    s.add_argument("--canonical-pred")
    s.add_argument("--canonical-gt")
    s.add_argument("--fps", type=float)
    s.add_argument("--out")

    s = add("synth", cmd_synth, "write a synthetic two-leg scene")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--points", type=int)
    s.add_argument("--incompleteness", type=float)
    s.add_argument("--label-noise", type=float)

    for name, func, help_ in (
        ("pipeline", cmd_pipeline, "run the synthetic end-to-end pipeline"),
        ("robustness", cmd_robustness, "sweep cloud incompleteness and label noise"),
    ):
        s = add(name, func, help_)
        s.add_argument("--workdir")
        s.add_argument("--seed", type=int)
        s.add_argument("--fps", type=float)
        s.add_argument("--K", type=int)
        s.add_argument("--incompleteness", type=float)
        s.add_argument("--label-noise", type=float)
        s.add_argument("--stages", nargs="+")

    s = add("init-weights", cmd_init_weights, "write random or zero-output refinement weights")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--levels", type=int)
    s.add_argument("--zero", action="store_true", default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        opts = resolve(args.command, args)
        args.func(opts)
    except (GarmeshError, ValueError, OSError, FloatingPointError) as exc:
        code = exit_code_for(exc)
        print(f"garmesh {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
