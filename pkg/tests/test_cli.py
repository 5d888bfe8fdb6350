import json
import re
import subprocess
import sys

import numpy as np
import pytest

from monoref.cli import EXIT_CODES, main
from monoref.io import MetricReport, encode_container, load_container, load_fixtures, read_ply, fixture_records


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train-toy", "--scenes", "2", "--size", "8x8", "--epochs", "2", "--out", str(out)]) == 0
    return out


def test_exit_codes_are_distinct():
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)
    assert EXIT_CODES["ok"] == 0


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    assert "FAIL" not in out
    assert out.count("PASS") >= 10


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "synth", "--bogus")[0] == EXIT_CODES["usage"]
    assert run(capsys)[0] == EXIT_CODES["usage"]
    assert run(capsys, "synth", "--seed", "-1")[0] == EXIT_CODES["usage"]
    assert run(capsys, "synth", "--size", "4x4")[0] == EXIT_CODES["usage"]
    code, _, err = run(capsys, "refine", "--out", tmp_path)
    assert code == EXIT_CODES["usage"] and "--weights" in err


def test_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "refine", "--weights", tmp_path / "nope.pmz", "--out", tmp_path)
    assert code == EXIT_CODES["missing-file"]
    assert "nope.pmz" in err


def test_malformed_container(capsys, tmp_path):
    bad = tmp_path / "bad.pmz"
    bad.write_bytes(b"XXXXjunk")
    code, _, err = run(capsys, "refine", "--weights", bad, "--out", tmp_path)
    assert code == EXIT_CODES["bad-container"]
    assert "magic" in err
    # a well-formed container without weight records is also rejected
    empty = tmp_path / "empty.pmz"
    empty.write_bytes(encode_container({"x": np.zeros(1)}))
    assert run(capsys, "refine", "--weights", empty, "--out", tmp_path)[0] == EXIT_CODES["bad-container"]


def test_synth_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "synth", "--seed", 9, "--scenes", 2, "--out", tmp_path / d)[0] == 0
    a = (tmp_path / "a" / "fixtures.pmz").read_bytes()
    assert a == (tmp_path / "b" / "fixtures.pmz").read_bytes()
    fx = load_fixtures(tmp_path / "a" / "fixtures.pmz")
    assert [f.seed for f in fx] == [9, 10]


def test_seed_wraps_at_u64(capsys, tmp_path):
    assert run(capsys, "synth", "--seed", 2**64 - 1, "--scenes", 2, "--size", "8x8", "--out", tmp_path)[0] == 0
    assert [f.seed for f in load_fixtures(tmp_path / "fixtures.pmz")] == [2**64 - 1, 0]


def test_align_pure_sim3(capsys):
    code, out, _ = run(capsys, "align", "--pure-sim3", "--scenes", 3)
    assert code == 0
    worst = float(re.search(r"max post-alignment RMS (\S+)", out).group(1))
    assert worst <= 1e-9
    assert out.count("pre-RMS") == 6


def test_align_from_fixture_file(capsys, tmp_path):
    run(capsys, "synth", "--scenes", 1, "--out", tmp_path)
    code, out, _ = run(capsys, "align", "--fixtures", tmp_path / "fixtures.pmz")
    assert code == 0 and "scene 0 view 2" in out


def test_train_outputs(trained):
    curve = json.loads((trained / "loss_curve.json").read_text())["loss"]
    assert len(curve) == 2 and all(np.isfinite(curve))
    lines = (trained / "loss_curve.txt").read_text().splitlines()
    assert [float(ln.split("\t")[1]) for ln in lines] == pytest.approx(curve, rel=1e-8)
    assert "enc.w1" in " ".join(load_container(trained / "weights.pmz"))


def test_refine_writes_maps_and_ply(capsys, trained, tmp_path):
    code, _, _ = run(capsys, "refine", "--weights", trained / "weights.pmz", "--size", "8x8", "--iters", 3,
                     "--out", tmp_path)
    assert code == 0
    rec = load_container(tmp_path / "refined.pmz")
    assert {"scene0000/view0/P0", "scene0000/view0/P3", "scene0000/view1/valid"} <= set(rec)
    valid = rec["scene0000/view0/valid"].astype(bool)
    xyz, _ = read_ply(tmp_path / "scene0000_view0.ply")
    assert len(xyz) == valid.sum()
    np.testing.assert_allclose(xyz, rec["scene0000/view0/P3"][valid], rtol=1e-8, atol=1e-12)


def test_eval_pose_pred_equals_gt(capsys, trained, tmp_path):
    code, _, _ = run(capsys, "eval-pose", "--weights", trained / "weights.pmz", "--scenes", 2, "--size", "8x8",
                     "--out", tmp_path)
    assert code == 0
    for which in ("initial", "refined"):
        report = json.loads((tmp_path / f"pose_{which}.json").read_text())
        assert len(report["scenes"]) == 2 and 0.0 <= report["aggregate"]["mAA30"] <= 1.0
    gt = tmp_path / "poses_gt.pmz"
    code, _, _ = run(capsys, "eval-pose", "--pred", gt, "--gt", gt, "--out", tmp_path / "self")
    assert code == 0
    report = MetricReport.from_json((tmp_path / "self" / "pose.json").read_text())
    assert report.aggregate["mAA30"] == 1.0
    assert report.aggregate["RRA@5"] == 1.0 and report.aggregate["RTA@5"] == 1.0


def test_eval_pose_needs_both_files(capsys, tmp_path):
    code, _, _ = run(capsys, "eval-pose", "--pred", tmp_path / "x.pmz", "--out", tmp_path)
    assert code == EXIT_CODES["usage"]


def test_eval_pcd_deterministic(capsys, trained, tmp_path):
    for d in ("a", "b"):
        args = ["eval-pcd", "--weights", trained / "weights.pmz", "--size", "8x8", "--seed", 4, "--out", tmp_path / d]
        assert run(capsys, *args)[0] == 0
    for which in ("initial", "refined"):
        a = (tmp_path / "a" / f"pcd_{which}.json").read_text()
        assert a == (tmp_path / "b" / f"pcd_{which}.json").read_text()
        assert set(json.loads(a)["aggregate"]) == {"acc_mean", "acc_median", "comp_mean", "comp_median"}


def test_train_deterministic(capsys, trained, tmp_path):
    assert run(capsys, "train-toy", "--scenes", 2, "--size", "8x8", "--epochs", 2, "--out", tmp_path)[0] == 0
    assert (tmp_path / "weights.pmz").read_bytes() == (trained / "weights.pmz").read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "monoref", "selftest"], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
