#!/usr/bin/env python3
"""End-to-end demo on synthetic data, exercising the CLI surface.

Generates a small dataset, trains briefly, runs inference on a held-out
scene's range images, scores the prediction, and renders the color-wheel
visualizations. Everything lands under --out-dir.
"""

import argparse
from pathlib import Path

from lidarflow.cli import main as cli

DESK = ["--rows", "32", "--cols", "64",
        "--image-height", "64", "--image-width", "128"]


def run(argv):
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"command failed ({code}): {' '.join(argv)}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/demo")
    ap.add_argument("--iters", type=int, default=300)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ds = out / "dataset"
    run(["synth", "--out-dir", str(ds), "--n-train", "2", "--n-val", "0",
         "--n-test", "1", "--seed", "100", "--export", *DESK])

    run_dir = out / "train"
    run(["train", str(ds / "manifest.txt"), "--out-dir", str(run_dir),
         "--iters", str(args.iters), "--batch", "2", "--base-channels", "16",
         "--seed", "7", *DESK])

    # Infer on the first TRAINING scene's exported range images (the tiny run
    # cannot generalize; this demo shows the plumbing, not accuracy). Scoring
    # reads the GT + noc/fg masks straight from the exported dataset.
    pred = out / "pred"
    pred.mkdir(exist_ok=True)
    run(["infer", str(run_dir / "checkpoint.lfw"), str(ds / "train_0000_t.lri"),
         str(ds / "train_0000_t1.lri"), "--out-prefix",
         str(pred / "train_0000"), "--base-channels", "16", *DESK])
    run(["eval", str(pred), str(ds), "--out-prefix", str(out / "report")])
    run(["viz", str(pred / "train_0000.flo"),
         "--out", str(out / "pred_viz.ppm")])
    run(["viz", str(ds / "train_0000_gt.png"), "--out", str(out / "gt_viz.ppm")])
    print(f"\nartifacts in {out}/ (report.txt, pred_viz.ppm, gt_viz.ppm)")


if __name__ == "__main__":
    main()
