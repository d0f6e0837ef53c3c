"""Regenerate the golden fixtures in this directory (run from the repo root).

Only needed after an intentional change to rendering or report formats.
"""
from pathlib import Path

from streamsplat.cli import main

HERE = Path(__file__).parent


def regenerate(tmp: Path) -> None:
    main(["--quiet", "synth", "--out", str(tmp / "ds"), "--frames", "3"])
    main(["render", str(tmp / "ds" / "scene.ogs"), "--pose-file", str(tmp / "ds" / "gt_world.tum"),
          "--frame", "2", "--out", str(HERE / "golden_frame2.ppm")])
    for f in (1, 2, 3):
        main(["--quiet", "query", str(tmp / "ds" / "scene.ogs"), "--queries", str(tmp / "ds" / "queries.json"),
              "--pose-file", str(tmp / "ds" / "gt_world.tum"), "--frame", str(f), "--out", str(tmp / "q")])
    main(["--quiet", "eval", "seg", "--pred", str(tmp / "q"), "--gt", str(tmp / "ds" / "masks"),
          "--out", str(tmp / "ev")])
    (HERE / "golden_seg.csv").write_text((tmp / "ev" / "seg.csv").read_text())


if __name__ == "__main__":
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        regenerate(Path(d))
