import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import noisy_tube

from garmesh.cli import build_parser, main, resolve
from garmesh.mesh import load_obj, save_obj
from garmesh.primitives import tube_rims
from garmesh.shape_space import save_alpha
from garmesh.skinning import Pose, PoseSequence, save_poses
from garmesh.synth import skirt


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    code = main(["synth", "--out", str(out), "--frames", "4", "--points", "400", "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def space_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("space")
    for i in range(4):
        save_obj(skirt(0.22 + 0.01 * i, 0.3 - 0.04 * i, 0.05, -0.45, 16, 8, wave=0.03 * i), d / "train" / f"g{i}.obj")
    assert main(["fit-pca", "--meshes", str(d / "train"), "--components", "3", "--out", str(d / "space.bin")]) == 0
    save_alpha(d / "alpha.json", [0.02, -0.01, 0.005])
    return d


def listing(path):
    return sorted(p.relative_to(path) for p in path.rglob("*")) if path.exists() else []


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "garmesh", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "register" in r.stdout


def test_synth_writes_scene(scene):
    manifest = json.loads((scene / "scene.json").read_text())
    assert manifest["frames"] == 4 and manifest["pointsPerFrame"] == [400] * 4


def test_eval_pred_equals_gt(scene, tmp_path):
    out = tmp_path / "m.json"
    assert main(["eval", "--pred", str(scene / "gt"), "--gt", str(scene / "gt"), "--out", str(out)]) == 0
    m = json.loads(out.read_text())
    assert m["M2"] == 0.0 and m["M3"] == 0.0


def test_skin_zero_pose_equals_decode(scene, space_files, tmp_path):
    d = space_files
    save_poses(tmp_path / "zero.json", PoseSequence(30.0, (Pose.zero(3), Pose.zero(3))))
    args = ["skin", "--space", str(d / "space.bin"), "--alpha", str(d / "alpha.json"),
            "--skeleton", str(scene / "skeleton.json"), "--poses", str(tmp_path / "zero.json"),
            "--K", "16", "--out", str(tmp_path / "posed")]
    assert main(args) == 0
    assert main(["decode", "--space", str(d / "space.bin"), "--alpha", str(d / "alpha.json"),
                 "--out", str(tmp_path / "canon.obj")]) == 0
    canon = load_obj(tmp_path / "canon.obj")
    for f in sorted((tmp_path / "posed").glob("*.obj")):
        assert np.abs(load_obj(f).vertices - canon.vertices).max() < 1e-12


def test_encode_decode_round_trip(space_files, tmp_path):
    d = space_files
    assert main(["encode", "--space", str(d / "space.bin"), "--mesh", str(d / "train" / "g2.obj"),
                 "--out", str(tmp_path / "a.json")]) == 0
    assert main(["decode", "--space", str(d / "space.bin"), "--alpha", str(tmp_path / "a.json"),
                 "--out", str(tmp_path / "g.obj")]) == 0
    back = load_obj(tmp_path / "g.obj").vertices
    assert np.abs(back - load_obj(d / "train" / "g2.obj").vertices).max() < 1e-9


def test_register_and_remesh(tmp_path):
    src, tgt = noisy_tube(seed=1), noisy_tube(seed=2)
    save_obj(src, tmp_path / "src.obj")
    save_obj(tgt, tmp_path / "tgt.obj")
    (tmp_path / "rims.json").write_text(json.dumps(tube_rims(12, 8)))
    args = ["register", "--source", str(tmp_path / "src.obj"), "--target", str(tmp_path / "tgt.obj"),
            "--out", str(tmp_path / "reg.obj"), "--pairs", "waist:waist,hem:hem",
            "--source-labels", str(tmp_path / "rims.json"), "--target-labels", str(tmp_path / "rims.json"),
            "--max-iterations", "50", "--report", str(tmp_path / "rep.json")]
    assert main(args) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["iterations"] <= 50 and rep["final"]["bcd"] >= 0
    assert main(["remesh", "--template", str(tmp_path / "tgt.obj"), "--registered", str(tmp_path / "reg.obj"),
                 "--map", str(tmp_path / "map.json"), "--out", str(tmp_path / "rm")]) == 0
    out = load_obj(tmp_path / "rm" / "reg.obj")
    assert np.array_equal(out.faces, tgt.faces)


def test_pairs_without_labels_is_bad_input(tmp_path, capsys):
    save_obj(noisy_tube(), tmp_path / "a.obj")
    code = main(["register", "--source", str(tmp_path / "a.obj"), "--target", str(tmp_path / "a.obj"),
                 "--out", str(tmp_path / "r.obj"), "--pairs", "waist:waist"])
    assert code == 2
    assert not (tmp_path / "r.obj").exists()
    assert "labels" in capsys.readouterr().err


def test_missing_input_exit_2_without_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["eval", "--pred", str(tmp_path / "nope"), "--gt", str(tmp_path / "nope"),
                 "--out", str(out / "m.json")]) == 2
    assert main(["synth", "--out", str(out), "--incompleteness", "1.5"]) == 2
    assert main(["decode", "--space", str(tmp_path / "missing.bin"), "--alpha", "x", "--out", str(out / "a.obj")]) == 2
    assert listing(out) == []


def test_malformed_obj_exit_2(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    assert main(["register", "--source", str(tmp_path / "bad.obj"), "--target", str(tmp_path / "bad.obj"),
                 "--out", str(tmp_path / "r.obj")]) == 2


def test_numerical_failure_exit_3_without_outputs(tmp_path):
    src = noisy_tube()
    save_obj(src, tmp_path / "src.obj")
    save_obj(src.with_vertices(src.vertices * 1e200), tmp_path / "huge.obj")
    code = main(["register", "--source", str(tmp_path / "src.obj"), "--target", str(tmp_path / "huge.obj"),
                 "--out", str(tmp_path / "r.obj")])
    assert code == 3
    assert not (tmp_path / "r.obj").exists()


def test_refine_zero_weights_and_overflowing_weights(scene, tmp_path):
    # proposals: ground-truth frames; bodies: the rest body for every frame
    body = load_obj(scene / "body.obj")
    for t in range(4):
        save_obj(body, tmp_path / "bodies" / f"frame_{t:04d}.obj")
    assert main(["init-weights", "--zero", "--iters", "2", "--out", str(tmp_path / "w.bin")]) == 0
    args = ["refine", "--proposals", str(scene / "gt"), "--clouds", str(scene / "clouds"),
            "--body", str(tmp_path / "bodies"), "--weights", str(tmp_path / "w.bin"), "--iters", "2"]
    assert main(args + ["--out", str(tmp_path / "ref")]) == 0
    for f in sorted((scene / "gt").glob("*.obj")):
        assert np.array_equal(load_obj(tmp_path / "ref" / f.name).vertices, load_obj(f).vertices)

    from garmesh.neural import NeuralWeights

    w = NeuralWeights.load(tmp_path / "w.bin")
    bad = NeuralWeights({k: np.full_like(v, 1e200) if ".gcn." in k else v for k, v in w.tensors.items()}, w.plan)
    bad.save(tmp_path / "nan.bin")
    args[args.index(str(tmp_path / "w.bin"))] = str(tmp_path / "nan.bin")
    assert main(args + ["--out", str(tmp_path / "ref_nan")]) == 3
    assert listing(tmp_path / "ref_nan") == []


def test_config_file_then_flags_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"K": 8, "smoothing-iters": 3}))
    parser = build_parser()
    o = resolve("skin", parser.parse_args(["skin", "--config", str(cfg)]))
    assert o["K"] == 8 and o["smoothing_iters"] == 3 and o["smoothing_step"] == 0.5
    o = resolve("skin", parser.parse_args(["skin", "--config", str(cfg), "--K", "4"]))
    assert o["K"] == 4 and o["smoothing_iters"] == 3


def test_bad_config_file_exit_2(tmp_path):
    (tmp_path / "c.json").write_text("[1, 2]")
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "s")]) == 2


def test_unknown_pipeline_stage_exit_2(tmp_path):
    assert main(["pipeline", "--workdir", str(tmp_path / "w"), "--stages", "synth", "bogus"]) == 2
    assert listing(tmp_path / "w") == []
