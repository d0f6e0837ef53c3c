import numpy as np
import pytest

from streamsplat.core import Intrinsics
from streamsplat.evaluation import TextQuery, miou_macc, segment_query
from streamsplat.plotting import plot_loss_curve, plot_metric_bars, plot_stream_report, plot_trajectories, save_png
from streamsplat.render import rasterize
from streamsplat.synthetic import LABELS, gt_masks, orbit_cameras, random_init, relative_to_first, two_object_scene


def test_two_object_scene():
    s = two_object_scene()
    assert len(s.scene) == 300 and set(s.parts) == set(LABELS)
    e = np.array([s.embeddings[k] for k in LABELS])
    assert np.allclose(e @ e.T, np.eye(2))


def test_orbit_cameras_look_at_origin():
    cams = orbit_cameras(5, arc_deg=40)
    for c in cams:
        d = -c.translation / np.linalg.norm(c.translation)
        assert np.allclose(c.rotation[:, 2], d, atol=1e-12)
    rel = relative_to_first(cams)
    assert np.allclose(rel[0].as_matrix(), np.eye(4))


def test_query_reproduces_masks():
    s = two_object_scene()
    k = Intrinsics.from_fov(48, 48, 50)
    for cam in orbit_cameras(3, arc_deg=40):
        t = rasterize(s.scene, cam, k)
        gt = gt_masks(s, cam, k)
        pred = {lab: segment_query(t.feature, TextQuery(lab, s.embeddings[lab]), 0.5)[0] for lab in LABELS}
        assert miou_macc(pred, gt) == (100.0, 100.0)


def test_random_init_bounds():
    sc = random_init(50, [-1, -1, -1], [1, 1, 1], K=3, seed=2)
    assert len(sc) == 50 and np.abs(sc.mu).max() <= 1 and sc.K == 3


def test_plots_written(tmp_path):
    curve = [{"step": i, "total": 1.0 / (i + 1), "lang": 0.0} for i in range(5)]
    assert plot_loss_curve(curve, tmp_path / "a.png").stat().st_size > 0
    pts = np.random.default_rng(0).normal(size=(6, 3))
    plot_trajectories(pts, pts + 0.1, tmp_path / "b.png")
    rep = [{"frame": i, "primitives": 10 * i, "merges": i, "state_bytes": 1024} for i in range(1, 4)]
    plot_stream_report(rep, tmp_path / "c.png")
    plot_metric_bars(["x", "y"], [1.0, 2.0], tmp_path / "d.png", "psnr")
    save_png(np.zeros((4, 4, 3)), tmp_path / "e.png")
    assert all((tmp_path / f"{c}.png").read_bytes()[:4] == b"\x89PNG" for c in "abcde")


def test_plot_bytes_stable(tmp_path):
    curve = [{"step": i, "total": 1.0 / (i + 1)} for i in range(5)]
    plot_loss_curve(curve, tmp_path / "a.png")
    plot_loss_curve(curve, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
