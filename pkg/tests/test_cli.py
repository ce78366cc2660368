import io
import json

import pytest

from psfcast.cli import main

FAST = ["--steps", "4", "--lr_drop_step", "3", "--refine_steps", "2", "--refine_drop_step", "1",
        "--height", "12", "--width", "16"]


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def test_gradcheck_contract():
    code, out, _ = run("gradcheck", "--seed", 7, "--seeds", 1)
    assert code == 0
    assert "worst relative error" in out
    assert out.count("PASS") >= 10 and "FAIL" not in out


def test_gen_train_forecast_eval(tmp_path):
    scene = tmp_path / "s1.json"
    assert run("gen", "--seed", 1, "--agents", 3, "--height", 12, "--width", 16, "--out", scene)[0] == 0
    code, out, err = run("train", "--scenes", scene, "--out", tmp_path / "run", *FAST)
    assert code == 0, err
    assert (tmp_path / "run" / "checkpoint.txt").exists() and (tmp_path / "run" / "loss_log.csv").exists()
    code, _, err = run("forecast", "--checkpoint", tmp_path / "run" / "checkpoint.txt", "--scene", scene,
                       "--out", tmp_path / "fc")
    assert code == 0, err
    for name in ("panoptic.ppm", "panoptic.json", "selection.pgm", "depth.pgm", "forecasts.csv"):
        assert (tmp_path / "fc" / name).exists()
    code, out, _ = run("eval", "--pred", tmp_path / "fc" / "panoptic.json", "--target", scene)
    assert code == 0 and out.startswith("class,PQ")


def test_eval_identity(tmp_path):
    scene = tmp_path / "s.json"
    run("gen", "--seed", 2, "--out", scene)
    code, out, _ = run("eval", "--pred", scene, "--target", scene, "--out", tmp_path / "r.csv")
    assert code == 0
    for line in out.splitlines()[1:]:
        cells = line.split(",")
        assert cells[1:7] == ["1.000000"] * 6, line
    assert (tmp_path / "r.csv").read_text().replace("\r", "") == out.replace("\r", "")


def test_gen_many_and_reproject(tmp_path):
    code, out, _ = run("gen", "--seed", 4, "--count", 2, "--out", tmp_path / "many")
    assert code == 0 and len(out.split()) == 2
    code, out, _ = run("reproject", "--scene", tmp_path / "many" / "scene_000.json", "--out", tmp_path / "rp")
    assert code == 0 and out.startswith("coverage")
    assert (tmp_path / "rp" / "coverage.pgm").exists()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_agents = 2\nheight = 10\nwidth = 14\n")
    run("gen", "--config", cfg, "--agents", 4, "--out", tmp_path / "s.json")
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["boxes"]["shape"][0] == 4 and d["depth"]["shape"][1:] == [10, 14]


@pytest.mark.parametrize("argv,hint", [
    (["gen", "--sede", "1", "--out", "x.json"], "--seed"),
    (["train", "--scenes", "a", "--out", "b", "--stpes", "3"], "--steps"),
])
def test_unknown_flag_suggests(argv, hint):
    code, _, err = run(*argv)
    assert code == 2 and f"did you mean {hint}?" in err


@pytest.mark.parametrize("argv", [[], ["gen"], ["gen", "--out", "x", "--steps", "many"],
                                  ["gen", "--out", "x", "--iou_sign", "abs"]])
def test_usage_errors(argv):
    assert run(*argv)[0] == 2


def test_domain_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"format\": \"psfcast-scene\", \"version\": \"9.0\"}")
    code, _, err = run("reproject", "--scene", bad, "--out", tmp_path)
    assert code == 1 and "unsupported" in err
    ck = tmp_path / "ck.txt"
    ck.write_text("nonsense\n")
    run("gen", "--out", tmp_path / "s.json")
    code, _, err = run("forecast", "--checkpoint", ck, "--scene", tmp_path / "s.json", "--out", tmp_path / "o")
    assert code == 1 and "not a checkpoint" in err
    assert run("eval", "--pred", tmp_path / "missing.json", "--target", bad)[0] == 1
