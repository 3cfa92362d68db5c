"""Command-line surface: project | make-gt | synth | train | infer | eval | viz.

Every run is reproducible offline: numeric settings come from flags or an
optional key=value config file (flags win), seeds are explicit, and training
writes its manifest before any other artifact. Exit codes: 0 success, 2
input/format error, 3 numerical abort.

Set LIDARFLOW_THREADS to cap internal (BLAS) parallelism.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import LidarFlowError, NonFiniteError
from .evaluation import EvalAccumulator, EvalMasks
from .flow_io import (FlowField, flow_to_color, read_flo, read_kitti_png,
                      read_png, write_flo, write_kitti_png, write_png,
                      write_ppm)
from .lidar_ingest import (CameraModel, GridSpec, crop_fov, load_point_cloud,
                           project_flow_to_lidar, project_to_range_image,
                           read_range_image, write_range_image)
from .network import (NetworkConfig, full_forward, init_params,
                      load_checkpoint, save_checkpoint)
from .synthdata import (SceneConfig, generate_sample, make_manifest,
                        read_manifest, write_manifest)
from .training import TrainConfig, train_loop


def _limit_threads() -> None:
    cap = os.environ.get("LIDARFLOW_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(cap))
    except Exception:
        pass  # plain numpy paths are single-threaded anyway


def _version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"lidarflow-{__version__}+{desc.stdout.strip()}"
    except Exception:
        pass
    return f"lidarflow-{__version__}"


# ---------------------------------------------------------------------------
# Flags
# ---------------------------------------------------------------------------

def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rows", type=int, default=64, help="lidar grid rows")
    p.add_argument("--cols", type=int, default=384, help="lidar grid columns")
    p.add_argument("--image-height", type=int, default=256)
    p.add_argument("--image-width", type=int, default=1224)
    p.add_argument("--hfov-deg", type=float, default=45.0,
                   help="horizontal half field of view, degrees")
    p.add_argument("--el-min-deg", type=float, default=-24.8)
    p.add_argument("--el-max-deg", type=float, default=2.0)


def _add_cam_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fx", type=float, default=None)
    p.add_argument("--fy", type=float, default=None)
    p.add_argument("--cx", type=float, default=None)
    p.add_argument("--cy", type=float, default=None)


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-channels", type=int, default=64)


def _spec_from(args) -> GridSpec:
    half = math.radians(args.hfov_deg)
    return GridSpec(rows=args.rows, cols=args.cols,
                    image_h=args.image_height, image_w=args.image_width,
                    az_min=-half, az_max=half,
                    el_min=math.radians(args.el_min_deg),
                    el_max=math.radians(args.el_max_deg))


def _cam_from(args, spec: GridSpec) -> CameraModel:
    cam = CameraModel.aligned_to(spec)
    fx = args.fx if args.fx is not None else cam.fx
    fy = args.fy if args.fy is not None else cam.fy
    cx = args.cx if args.cx is not None else cam.cx
    cy = args.cy if args.cy is not None else cam.cy
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy,
                       rotation=cam.rotation, translation=cam.translation)


def _all_option_types(parser: argparse.ArgumentParser) -> dict:
    types = {a.dest: a.type for a in parser._actions}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                types.update({a.dest: a.type for a in sub._actions})
    return types


def _load_config_defaults(parser: argparse.ArgumentParser, argv: list[str]
                          ) -> list[str]:
    """Apply a key=value config file as parser defaults; flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    path = argv[idx + 1]
    argv = argv[:idx] + argv[idx + 2:]
    types = _all_option_types(parser)
    overrides = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        dest = key.strip().replace("-", "_")
        conv = types.get(dest)
        overrides[dest] = conv(value.strip()) if conv else value.strip()
    # Subparsers parse into a fresh namespace, so defaults must land on them.
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                dests = {a.dest for a in sub._actions}
                sub.set_defaults(**{k: v for k, v in overrides.items()
                                    if k in dests})
    parser.set_defaults(**overrides)
    return argv


def _read_flow_file(path) -> FlowField:
    path = Path(path)
    if path.suffix == ".flo":
        return read_flo(path)
    return read_kitti_png(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_project(args) -> int:
    cloud = load_point_cloud(args.scan)
    spec = _spec_from(args)
    ri = project_to_range_image(crop_fov(cloud, spec), spec)
    write_range_image(args.out, ri)
    print(f"wrote {args.out}: {int(ri.valid.sum())}/{ri.valid.size} cells valid")
    return 0


def cmd_make_gt(args) -> int:
    spec = _spec_from(args)
    cloud = load_point_cloud(args.scan)
    dense = _read_flow_file(args.dense_flow)
    cam = _cam_from(args, spec)
    sparse = project_flow_to_lidar(cloud, dense, cam, spec)
    write_kitti_png(args.out, FlowField(sparse.flow, sparse.valid))
    print(f"wrote {args.out}: {int(sparse.valid.sum())}/{sparse.valid.size} cells valid")
    return 0


def cmd_synth(args) -> int:
    spec = _spec_from(args)
    entries = make_manifest(args.n_train, args.n_val, args.n_test,
                            base_seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.txt", entries)
    scene_kw = dict(n_objects=args.objects,
                    bg_translation_max=args.bg_translation_max)
    (out_dir / "scene.kv").write_text(
        "".join(f"{k}={v}\n" for k, v in scene_kw.items()))
    if args.export:
        for e in entries:
            sample = generate_sample(SceneConfig(spec=spec, seed=e.seed, **scene_kw))
            write_range_image(out_dir / f"{e.sample_id}_t.lri", sample.x_t)
            write_range_image(out_dir / f"{e.sample_id}_t1.lri", sample.x_t1)
            write_kitti_png(out_dir / f"{e.sample_id}_gt.png", sample.gt_dense)
            masks = sample.eval_masks
            write_png(out_dir / f"{e.sample_id}_noc.png",
                      masks.noc.astype(np.uint8) * 255)
            write_png(out_dir / f"{e.sample_id}_fg.png",
                      masks.fg.astype(np.uint8) * 255)
    print(f"wrote {out_dir / 'manifest.txt'} ({len(entries)} samples)")
    return 0


def _scene_kwargs(manifest_path) -> dict:
    kv = Path(manifest_path).parent / "scene.kv"
    out = {}
    if kv.exists():
        for line in kv.read_text().splitlines():
            key, _, value = line.partition("=")
            if key in ("n_objects",):
                out[key] = int(value)
            elif key:
                out[key] = float(value)
    return out


def cmd_train(args) -> int:
    spec = _spec_from(args)
    entries = read_manifest(args.manifest)
    scene_kw = _scene_kwargs(args.manifest)
    net_cfg = NetworkConfig(spec=spec, base_channels=args.base_channels)
    tcfg = TrainConfig(total_iters=args.iters, batch_size=args.batch,
                       lr0=args.lr0, lr_hold=args.lr_hold,
                       lr_half_every=args.lr_half_every,
                       flip_prob=args.flip_prob, seed=args.seed,
                       checkpoint_every=args.checkpoint_every)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": _version_string(),
        "seed": args.seed,
        "command": "train",
        "config": {
            "rows": spec.rows, "cols": spec.cols,
            "image_height": spec.image_h, "image_width": spec.image_w,
            "base_channels": args.base_channels,
            "iters": args.iters, "batch": args.batch, "lr0": args.lr0,
            "lr_hold": args.lr_hold, "lr_half_every": args.lr_half_every,
            "flip_prob": args.flip_prob, "init": args.init,
        },
        "layout": {"trace": "trace.csv", "checkpoint": "checkpoint.lfw"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out_dir / "config.kv").write_text("".join(
        f"{k}={v}\n" for k, v in manifest["config"].items()))

    dtype = np.float64 if args.precision == "f64" else np.float32
    params = init_params(net_cfg, np.random.default_rng(args.seed),
                         dtype=dtype, init=args.init)
    dataset = []
    for e in entries:
        if e.split == "train":
            dataset.append(generate_sample(SceneConfig(spec=spec, seed=e.seed,
                                                       **scene_kw)))
    if args.iters == 0:
        save_checkpoint(out_dir / "checkpoint.lfw", params)
        print(f"wrote {out_dir / 'checkpoint.lfw'} (initialization only)")
        return 0
    rows, _ = train_loop(dataset, tcfg, params, out_dir=out_dir)
    print(f"trained {len(rows)} iterations; final loss {rows[-1].total:.6g}")
    return 0


def cmd_infer(args) -> int:
    spec = _spec_from(args)
    net_cfg = NetworkConfig(spec=spec, base_channels=args.base_channels)
    params, _ = load_checkpoint(args.checkpoint, net_cfg)
    frames = []
    for scan in (args.scan_t, args.scan_t1):
        if Path(scan).suffix == ".lri":
            frames.append(read_range_image(scan))
        else:
            frames.append(project_to_range_image(
                crop_fov(load_point_cloud(scan), spec), spec))
    out = full_forward(params, frames[0], frames[1])
    field = out.final
    write_flo(f"{args.out_prefix}.flo", field)
    write_ppm(f"{args.out_prefix}.ppm", flow_to_color(field))
    print(f"wrote {args.out_prefix}.flo and {args.out_prefix}.ppm")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    acc = EvalAccumulator()
    n = 0
    for pred_path in sorted(pred_dir.glob("*.flo")):
        stem = pred_path.stem
        gt_path = None
        for cand in (gt_dir / f"{stem}_gt.png", gt_dir / f"{stem}_gt.flo",
                     gt_dir / f"{stem}.png", gt_dir / f"{stem}.flo"):
            if cand.exists():
                gt_path = cand
                break
        if gt_path is None:
            continue
        gt = _read_flow_file(gt_path)
        pred = read_flo(pred_path)
        valid = gt.valid_mask()
        noc_path = gt_dir / f"{stem}_noc.png"
        fg_path = gt_dir / f"{stem}_fg.png"
        noc = read_png(noc_path) > 0 if noc_path.exists() else None
        fg = read_png(fg_path) > 0 if fg_path.exists() else None
        acc.add(pred, gt, EvalMasks(valid, noc, fg))
        n += 1
    if n == 0:
        print("no prediction/ground-truth pairs found", file=sys.stderr)
        return 2
    report = acc.report()
    table = report.format_table()
    print(f"{n} frame(s)")
    print(table, end="")
    if args.out_prefix:
        Path(f"{args.out_prefix}.csv").write_text(report.to_csv())
        Path(f"{args.out_prefix}.txt").write_text(table)
    return 0


def cmd_viz(args) -> int:
    field = _read_flow_file(args.flow_file)
    img = flow_to_color(field, max_mag=args.max_mag)
    write_ppm(args.out, img)
    if args.png:
        write_png(Path(args.out).with_suffix(".png"), img)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarflow",
        description="Dense optical flow from sparse lidar scan pairs.")
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="scan file -> LRI1 range image")
    p.add_argument("scan")
    p.add_argument("--out", required=True)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("make-gt", help="scan + dense flow -> sparse lidar flow")
    p.add_argument("scan")
    p.add_argument("dense_flow")
    p.add_argument("--out", required=True)
    _add_spec_flags(p)
    _add_cam_flags(p)
    p.set_defaults(func=cmd_make_gt)

    p = sub.add_parser("synth", help="write a synthetic dataset manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=2)
    p.add_argument("--n-val", type=int, default=1)
    p.add_argument("--n-test", type=int, default=1)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--bg-translation-max", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--export", action="store_true",
                   help="materialize range images, GTs and masks")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize the three blocks on a manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr0", type=float, default=1e-3)
    p.add_argument("--lr-hold", type=int, default=150_000)
    p.add_argument("--lr-half-every", type=int, default=60_000)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=("he", "zero"), default="he")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_spec_flags(p)
    _add_net_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="checkpoint + two scans -> dense flow")
    p.add_argument("checkpoint")
    p.add_argument("scan_t")
    p.add_argument("scan_t1")
    p.add_argument("--out-prefix", required=True)
    _add_spec_flags(p)
    _add_net_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out-prefix", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render a flow file as a color image")
    p.add_argument("flow_file")
    p.add_argument("--out", required=True)
    p.add_argument("--max-mag", type=float, default=None)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _load_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except NonFiniteError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except (LidarFlowError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
