"""Command-line entry point: ``streamsplat <command> ...``.

Exit codes: 0 success, 1 computation error, 2 input or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import CameraPose, GaussianScene, Intrinsics, InvalidArgumentError
from .evaluation import (DegenerateConfigurationError, TextQuery, Trajectory, align_sim3, ate, miou_macc, psnr,
                         rpe_rot, rpe_trans, segment_query, ssim)
from .formats import (FormatError, read_image, read_ogs, read_pgm, read_ppm, read_tum, write_features,
                      write_ogs, write_pgm, write_ppm, write_tum)
from .render import rasterize

EXIT_OK, EXIT_COMPUTE, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad or missing input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# reports


def format_table(columns: list[str], rows: list[list]) -> str:
    cells = [columns] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    return str(v)


def csv_text(columns: list[str], rows: list[list], header: dict | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_report(out_dir: Path, stem: str, columns, rows, header=None, echo: bool = True,
                 bars: int | None = None) -> None:
    """CSV plus aligned text table; ``bars`` names a column to chart per row as ``<stem>.png``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.csv").write_text(csv_text(columns, rows, header))
    if bars is not None:
        from .plotting import plot_metric_bars
        plot_metric_bars([str(r[0]) for r in rows], [float(r[bars]) for r in rows], out_dir / f"{stem}.png",
                         columns[bars])
    table = format_table(columns, rows)
    (out_dir / f"{stem}.txt").write_text(table)
    if echo:
        sys.stdout.write(table)


# ---------------------------------------------------------------------------
# inputs


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


@dataclass
class StreamManifest:
    frames: list[Path]
    intrinsics: Intrinsics
    gt_trajectory: Path | None = None
    features: list[Path] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    queries: Path | None = None
    masks: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "StreamManifest":
        path = _existing(path, "manifest")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        root = path.parent
        frames = [_existing(root / f, "frame") for f in data.get("frames", [])]
        if not frames:
            raise InputError(f"{path}: manifest lists no frames")
        try:
            intr = Intrinsics(**data["intrinsics"])
        except (KeyError, TypeError, InvalidArgumentError) as exc:
            raise InputError(f"{path}: bad intrinsics: {exc}") from exc
        gt = data.get("gt_trajectory")
        q = data.get("queries")
        return cls(frames, intr,
                   _existing(root / gt, "ground-truth trajectory") if gt else None,
                   [_existing(root / f, "feature map") for f in data.get("features", [])],
                   dict(data.get("config", {})),
                   _existing(root / q, "queries") if q else None,
                   [{k: root / v for k, v in m.items()} for m in data.get("masks", [])])


def parse_pose(text: str) -> CameraPose:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise InputError(f"bad pose {text!r}: {exc}") from exc
    if len(vals) != 7:
        raise InputError("pose needs 7 numbers: tx ty tz qx qy qz qw")
    tx, ty, tz, qx, qy, qz, qw = vals
    q = np.array([qw, qx, qy, qz])
    if np.linalg.norm(q) < 1e-8:
        raise InputError("pose quaternion is zero")
    return CameraPose.from_quat_trans(q, [tx, ty, tz])


def resolve_pose(args) -> CameraPose:
    if args.pose_file:
        idx, poses = read_tum(_existing(args.pose_file, "pose file"))
        if args.frame not in idx:
            raise InputError(f"{args.pose_file}: no pose for frame {args.frame}")
        return poses[idx.index(args.frame)]
    if args.pose:
        return parse_pose(args.pose)
    return CameraPose.identity()


def resolve_intrinsics(args) -> Intrinsics:
    if args.intrinsics:
        try:
            fx, fy, cx, cy, w, h = (float(v) for v in args.intrinsics.replace(",", " ").split())
            return Intrinsics(fx, fy, cx, cy, int(w), int(h))
        except (ValueError, InvalidArgumentError) as exc:
            raise InputError(f"bad intrinsics {args.intrinsics!r}: {exc}") from exc
    return Intrinsics.from_fov(args.size, args.size, args.fov)


def load_queries(path) -> list:
    path = _existing(path, "queries file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected an object mapping label -> embedding")
    return list(data.items())


def _pipeline_config(args, manifest: StreamManifest | None = None):
    from .pipeline import PipelineConfig
    values = {}
    if manifest is not None:
        keep = ("height", "width", "K", "seed", "fov_deg")
        values.update({k: str(v) for k, v in manifest.config.items() if k in keep})
    if args.config:
        from .formats import read_kv
        values.update(read_kv(_existing(args.config, "config file")))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.voxel_size is not None:
        values["voxel_size"] = str(args.voxel_size)
    if args.weights:
        values["weights"] = str(_existing(args.weights, "weights file"))
    try:
        return PipelineConfig.from_mapping(values, source=args.config or "<flags>")
    except InvalidArgumentError as exc:
        raise InputError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_reconstruct(args) -> int:
    from .pipeline import StreamEngine
    from .plotting import plot_stream_report, plot_trajectories
    from .netcore import WeightMismatchError
    manifest = StreamManifest.load(args.manifest)
    cfg = _pipeline_config(args, manifest)
    frames = [read_image(p) for p in manifest.frames]
    try:
        engine = StreamEngine(cfg)
    except WeightMismatchError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for img in frames:
        t0 = time.perf_counter()
        fo = engine.step(img)
        rows.append([fo.index, fo.fusion.incoming, fo.fusion.merges, fo.fusion.absorbed, fo.fusion.count,
                     engine.state.nbytes(), engine.state.token_count, time.perf_counter() - t0])
    write_ogs(out / "scene.ogs", engine.scene)
    idx = list(range(1, len(frames) + 1))
    write_tum(out / "trajectory.tum", idx, engine.trajectory)
    cols = ["frame", "incoming", "merges", "absorbed", "primitives", "state_bytes", "anchor_tokens", "seconds"]
    header = {"seed": cfg.seed, "frames": len(frames), "weights": engine.weights.section_hash("")}
    write_report(out, "report", cols, rows, header, echo=not args.quiet)
    plot_stream_report([dict(zip(cols, r)) for r in rows], out / "report.png")
    gt = None
    if manifest.gt_trajectory is not None:
        gt = np.array([p.translation for p in read_tum(manifest.gt_trajectory)[1]])
    plot_trajectories(np.array([p.translation for p in engine.trajectory]), gt, out / "trajectory.png")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = read_ogs(_existing(args.scene, "scene"))
    target = rasterize(scene, resolve_pose(args), resolve_intrinsics(args))
    write_ppm(args.out, target.color)
    if args.features:
        write_features(args.features, target.feature)
    return EXIT_OK


def cmd_query(args) -> int:
    scene = read_ogs(_existing(args.scene, "scene"))
    queries = load_queries(args.queries)
    target = rasterize(scene, resolve_pose(args), resolve_intrinsics(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    failed = False
    for label, emb in queries:
        try:
            q = TextQuery(label, np.asarray(emb, dtype=np.float64))
            mask, conf = segment_query(target.feature, q, args.threshold)
        except (InvalidArgumentError, ValueError, TypeError) as exc:
            rows.append([label, 0, float("nan"), float("nan"), f"error: {exc}"])
            failed = True
            continue
        write_pgm(out / f"{args.frame:04d}_{label}.pgm", mask)
        rows.append([label, int(mask.sum()), float(conf.mean()), float(conf.max()), "ok"])
    write_report(out, "query", ["label", "pixels", "mean_conf", "max_conf", "status"], rows,
                 {"threshold": args.threshold}, echo=not args.quiet, bars=1)
    return EXIT_COMPUTE if failed and all(r[-1] != "ok" for r in rows) else EXIT_OK


def _pair_files(pred_dir: Path, gt_dir: Path, pattern: str) -> list[tuple[Path, Path]]:
    """Each prediction file paired with the same-named ground-truth file."""
    pred_files = sorted(pred_dir.glob(pattern))
    if not pred_files:
        raise InputError(f"no {pattern} files in {pred_dir}")
    missing = [p.name for p in pred_files if not (gt_dir / p.name).exists()]
    if missing:
        raise InputError(f"no ground truth in {gt_dir} for {missing[:5]}")
    return [(p, gt_dir / p.name) for p in pred_files]


def cmd_eval(args) -> int:
    pred, gt, out = Path(args.pred), Path(args.gt), Path(args.out)
    _existing(pred, "prediction")
    _existing(gt, "ground truth")
    header = {"mode": args.mode}
    if args.mode == "nvs":
        rows = []
        for p, g in _pair_files(pred, gt, "*.ppm"):
            a, b = read_image(p), read_image(g)
            if a.shape != b.shape:
                raise InputError(f"{p}: size {a.shape} differs from {g}")
            rows.append([p.name, psnr(a, b), ssim(a, b), "n/a"])
        rows.append(["mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])), "n/a"])
        write_report(out, "nvs", ["image", "psnr", "ssim", "lpips"], rows, header, echo=not args.quiet, bars=1)
    elif args.mode == "pose":
        ip, pp = read_tum(pred)
        ig, pg = read_tum(gt)
        if ip != ig:
            raise InputError(f"trajectory frame indices differ ({len(ip)} vs {len(ig)} poses)")
        tp, tg = Trajectory(ip, pp), Trajectory(ig, pg)
        rows = [[len(ip), ate(tp, tg), rpe_trans(tp, tg, args.delta), rpe_rot(tp, tg, args.delta)]]
        write_report(out, "pose", ["frames", "ate", "rpe_trans", "rpe_rot_deg"], rows, header, echo=not args.quiet)
        from .plotting import plot_trajectories
        plot_trajectories(align_sim3(tp, tg).positions, tg.positions, out / "pose.png", title="aligned positions")
    else:
        pairs = _pair_files(pred, gt, "*.pgm")
        frames: dict[str, tuple[dict, dict]] = {}
        for p, g in pairs:
            frame, _, label = p.stem.rpartition("_")
            entry = frames.setdefault(frame or p.stem, ({}, {}))
            entry[0][label] = read_pgm(p) > 127
            entry[1][label] = read_pgm(g) > 127
        rows = []
        for name, (pm, gm) in sorted(frames.items()):
            miou, macc = miou_macc(pm, gm)
            rows.append([name, miou, macc])
        rows.append(["mean", float(np.mean([r[1] for r in rows])), float(np.nanmean([r[2] for r in rows]))])
        write_report(out, "seg", ["frame", "miou", "macc"], rows, header, echo=not args.quiet, bars=1)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_dataset
    path = write_dataset(args.out, frames=args.frames, size=args.size, K=args.K,
                         seed=args.seed if args.seed is not None else 0, fov_deg=args.fov)
    print(path)
    return EXIT_OK


def cmd_convert(args) -> int:
    from .plotting import save_png
    src = _existing(args.input, "image")
    img = read_ppm(src).astype(np.float64) / 255.0
    save_png(img, args.output)
    return EXIT_OK


def cmd_optimize(args) -> int:
    """Direct Gaussian optimisation against synthetic views of the two-object scene."""
    from .loss import optimize_scene
    from .plotting import plot_loss_curve
    from .synthetic import orbit_cameras, random_init, render_views, two_object_scene
    seed = args.seed if args.seed is not None else 0
    synth = two_object_scene(seed=seed)
    intr = Intrinsics.from_fov(args.size, args.size, 50.0)
    cams = orbit_cameras(args.views, arc_deg=40.0)
    gt = [t.color for t in render_views(synth.scene, cams, intr)]
    lo, hi = synth.scene.mu.min(0) - 0.05, synth.scene.mu.max(0) + 0.05
    init = random_init(args.gaussians, lo, hi, seed=seed + 1)
    stop = None if args.target_psnr is None else 10.0 ** (-args.target_psnr / 10.0)
    res = optimize_scene(init, cams, gt, intr, steps=args.steps, stop_render=stop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["step", "total", "pose", "render", "lang"]
    rows = [[c[k] for k in cols] for c in res.curve]
    (out / "loss_curve.csv").write_text(csv_text(cols, rows, {"seed": seed, "steps": res.steps}))
    plot_loss_curve(res.curve, out / "loss_curve.png", title="direct optimisation")
    scene = res.scene()
    write_ogs(out / "scene.ogs", scene)
    vals = []
    for i, (cam, g) in enumerate(zip(cams, gt)):
        img = rasterize(scene, cam, intr).color
        write_ppm(out / f"view{i}.ppm", img)
        vals.append([f"view{i}", psnr(img, g), ssim(img, g), "n/a"])
    write_report(out, "nvs", ["image", "psnr", "ssim", "lpips"], vals, {"seed": seed}, echo=not args.quiet, bars=1)
    return EXIT_OK


def cmd_init_weights(args) -> int:
    from .netcore import WeightContainer
    cfg = _pipeline_config(args)
    WeightContainer.initialize(cfg.net(), seed=cfg.seed).save(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _view_args(p):
    p.add_argument("--pose", help="tx ty tz qx qy qz qw (world-from-camera)")
    p.add_argument("--pose-file", help="TUM trajectory to take the pose from")
    p.add_argument("--frame", type=int, default=1, help="frame index within --pose-file")
    p.add_argument("--intrinsics", help="fx fy cx cy width height")
    p.add_argument("--size", type=int, default=32, help="square image size when --intrinsics is absent")
    p.add_argument("--fov", type=float, default=60.0)


def _stream_args(p):
    p.add_argument("--config", help="key = value pipeline configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", help="weight container file")
    p.add_argument("--voxel-size", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamsplat", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--quiet", action="store_true", help="do not echo report tables")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="stream frames into a fused Gaussian scene")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    _stream_args(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render", help="render a scene file to PPM")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="also write the feature planes here")
    _view_args(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("query", help="segment a rendered view with text embeddings")
    p.add_argument("scene")
    p.add_argument("--queries", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _view_args(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="metric tables for nvs, pose or seg outputs")
    p.add_argument("mode", choices=("nvs", "pose", "seg"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=int, default=1, help="RPE frame spacing")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write the synthetic two-object stream")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="PPM to PNG")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("optimize", help="direct optimisation experiment on synthetic views")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gaussians", type=int, default=500)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--target-psnr", type=float, help="stop once the mean-MSE PSNR reaches this (dB)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("init-weights", help="write seeded random weights")
    p.add_argument("--out", required=True)
    _stream_args(p)
    p.set_defaults(func=cmd_init_weights)
    for p in sub.choices.values():
        # accepted after the command too; SUPPRESS keeps the global value otherwise
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    from .netcore import WeightMismatchError
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FormatError, FileNotFoundError, IsADirectoryError, PermissionError,
            WeightMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvalidArgumentError, DegenerateConfigurationError, ValueError, ArithmeticError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
