import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from streamsplat.cli import StreamManifest, InputError, build_parser, csv_text, format_table, main, parse_pose
from streamsplat.formats import read_ogs, read_ppm, read_tum

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert main(["--quiet", "synth", "--out", str(root), "--frames", "3"]) == 0
    return root


def test_synth_layout(ds):
    m = json.loads((ds / "manifest.json").read_text())
    assert len(m["frames"]) == 3 and (ds / "scene.ogs").exists()
    man = StreamManifest.load(ds / "manifest.json")
    assert man.intrinsics.width == 32 and len(man.masks) == 3


def test_render_golden(ds, tmp_path):
    out = tmp_path / "r.ppm"
    assert main(["render", str(ds / "scene.ogs"), "--pose-file", str(ds / "gt_world.tum"), "--frame", "2",
                 "--out", str(out)]) == 0
    assert out.read_bytes() == (DATA / "golden_frame2.ppm").read_bytes()
    assert out.read_bytes() == (ds / "frames" / "0002.ppm").read_bytes()


def test_query_eval_seg_golden(ds, tmp_path):
    for f in (1, 2, 3):
        assert main(["--quiet", "query", str(ds / "scene.ogs"), "--queries", str(ds / "queries.json"),
                     "--pose-file", str(ds / "gt_world.tum"), "--frame", str(f), "--out", str(tmp_path / "q")]) == 0
    assert main(["--quiet", "eval", "seg", "--pred", str(tmp_path / "q"), "--gt", str(ds / "masks"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "seg.csv").read_text() == (DATA / "golden_seg.csv").read_text()
    assert "threshold=0.5" in (tmp_path / "q" / "query.csv").read_text()
    for fig in (tmp_path / "q" / "query.png", tmp_path / "ev" / "seg.png"):
        assert fig.read_bytes()[:4] == b"\x89PNG"


def test_reconstruct_outputs(ds, tmp_path):
    out = tmp_path / "rec"
    assert main(["--quiet", "reconstruct", str(ds / "manifest.json"), "--out", str(out)]) == 0
    for name in ("scene.ogs", "trajectory.tum", "report.csv", "report.txt", "report.png", "trajectory.png"):
        assert (out / name).exists(), name
    assert (out / "report.csv").read_text().startswith("# seed=0 ")
    assert len(read_tum(out / "trajectory.tum")[0]) == 3
    assert len(read_ogs(out / "scene.ogs")) > 0
    assert main(["--quiet", "eval", "pose", "--pred", str(out / "trajectory.tum"), "--gt", str(ds / "gt.tum"),
                 "--out", str(tmp_path / "ev")]) == 0
    head = (tmp_path / "ev" / "pose.csv").read_text().splitlines()[1]
    assert head == "frames,ate,rpe_trans,rpe_rot_deg"
    assert (tmp_path / "ev" / "pose.png").exists()


def test_reconstruct_seed_and_weights(ds, tmp_path):
    assert main(["init-weights", "--out", str(tmp_path / "w.bin"), "--seed", "4"]) == 0
    assert main(["--quiet", "reconstruct", str(ds / "manifest.json"), "--out", str(tmp_path / "a"),
                 "--weights", str(tmp_path / "w.bin")]) == 0
    assert main(["--quiet", "reconstruct", str(ds / "manifest.json"), "--out", str(tmp_path / "b"),
                 "--seed", "4"]) == 0
    assert (tmp_path / "a" / "scene.ogs").read_bytes() == (tmp_path / "b" / "scene.ogs").read_bytes()


def test_eval_nvs_and_convert(ds, tmp_path):
    pred = tmp_path / "p"
    pred.mkdir()
    (pred / "0001.ppm").write_bytes((ds / "frames" / "0001.ppm").read_bytes())
    assert main(["--quiet", "eval", "nvs", "--pred", str(pred), "--gt", str(ds / "frames"),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = (tmp_path / "ev" / "nvs.csv").read_text().splitlines()
    assert rows[1] == "image,psnr,ssim,lpips" and rows[2] == "0001.ppm,99.000000,1.000000,n/a"
    assert (tmp_path / "ev" / "nvs.png").exists()
    assert main(["convert", str(pred / "0001.ppm"), str(tmp_path / "x.png")]) == 0
    assert (tmp_path / "x.png").read_bytes()[:4] == b"\x89PNG"


def test_optimize_command(tmp_path):
    assert main(["--quiet", "optimize", "--out", str(tmp_path), "--size", "16", "--gaussians", "40",
                 "--views", "2", "--steps", "5"]) == 0
    assert (tmp_path / "loss_curve.png").exists() and (tmp_path / "nvs.png").exists()
    lines = (tmp_path / "loss_curve.csv").read_text().splitlines()
    assert lines[0].startswith("# seed=0") and lines[1] == "step,total,pose,render,lang"


@pytest.mark.parametrize("argv", [
    ["render", "missing.ogs", "--out", "x.ppm"],
    ["eval", "pose", "--pred", "nope.tum", "--gt", "nope.tum", "--out", "o"],
    ["reconstruct", "nope.json", "--out", "o"],
])
def test_missing_inputs_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_bad_manifest_and_config(tmp_path, ds, capsys):
    (tmp_path / "m.json").write_text("{ not json")
    assert main(["reconstruct", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")]) == 2
    assert "invalid JSON" in capsys.readouterr().err
    (tmp_path / "c.cfg").write_text("bogus = 1\n")
    assert main(["reconstruct", str(ds / "manifest.json"), "--config", str(tmp_path / "c.cfg"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_mismatched_weights_exit_2(tmp_path, ds):
    (tmp_path / "c.cfg").write_text("K = 8\n")
    assert main(["init-weights", "--out", str(tmp_path / "w.bin"), "--config", str(tmp_path / "c.cfg")]) == 0
    assert main(["--quiet", "reconstruct", str(ds / "manifest.json"), "--out", str(tmp_path / "o"),
                 "--weights", str(tmp_path / "w.bin")]) == 2


def test_zero_query_is_computation_error(ds, tmp_path):
    (tmp_path / "q.json").write_text(json.dumps({"void": [0.0] * 16}))
    assert main(["--quiet", "query", str(ds / "scene.ogs"), "--queries", str(tmp_path / "q.json"),
                 "--out", str(tmp_path / "o")]) == 1


def test_parse_pose():
    p = parse_pose("1 2 3 0 0 0 1")
    assert np.allclose(p.translation, [1, 2, 3]) and np.allclose(p.rotation, np.eye(3))
    with pytest.raises(InputError):
        parse_pose("1 2 3")


def test_tables():
    assert csv_text(["a", "b"], [[1, 0.5]], {"seed": 3}) == "# seed=3\na,b\n1,0.500000\n"
    t = format_table(["a", "bb"], [[1, 2.0]])
    assert t.splitlines()[1].startswith("-")


def test_quiet_after_command(ds, tmp_path):
    args = build_parser().parse_args(["eval", "seg", "--pred", "a", "--gt", "b", "--out", "c", "--quiet"])
    assert args.quiet


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "streamsplat.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "0.1.0"
