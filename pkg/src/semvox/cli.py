"""Command-line entry point wiring the pipeline end to end.

Subcommands: project, make-occupancy, metrics, boost-merge, patchwise-demo.
Data goes to files or stdout, logs to stderr. Exit codes: 0 success,
1 internal error or training divergence, 2 input error.

A flat key=value config file can preset shared knobs; explicit flags win.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import alignment, autodiff, io, metrics, patchwise, voxel
from .errors import SemvoxError
from .geometry import DEFAULT_MIN_DISPARITY, project_map
from .voxel import DEFAULT_DIMS, DEFAULT_MIN_POINTS, DEFAULT_VOXEL_SIZE

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2


@dataclass
class PipelineConfig:
    intrinsics: Optional[str] = None
    dims: tuple[int, int, int] = DEFAULT_DIMS
    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: Optional[tuple[float, float, float]] = None
    min_disparity: float = DEFAULT_MIN_DISPARITY
    min_points: int = DEFAULT_MIN_POINTS
    train_percentage: float = 0.5
    epochs: int = 200
    learning_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        voxel.GridSpec(self.dims, self.voxel_size, self.origin or (0, 0, 0))
        patchwise.plan_patches(1, self.train_percentage)
        if self.min_points < 0:
            raise ValueError("min_points must be >= 0")
        if self.min_disparity < 0:
            raise ValueError("min_disparity must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def _parse_triple(text: str, cast):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def load_config(path) -> PipelineConfig:
    cfg = PipelineConfig()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SemvoxError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            try:
                if key == "intrinsics":
                    cfg.intrinsics = raw
                elif key == "dims":
                    cfg.dims = _parse_triple(raw, int)
                elif key == "origin":
                    cfg.origin = _parse_triple(raw, float)
                elif key == "voxel_size":
                    cfg.voxel_size = float(raw)
                elif key == "min_disparity":
                    cfg.min_disparity = float(raw)
                elif key == "min_points":
                    cfg.min_points = int(raw)
                elif key == "train_percentage":
                    cfg.train_percentage = float(raw)
                elif key == "epochs":
                    cfg.epochs = int(raw)
                elif key == "learning_rate":
                    cfg.learning_rate = float(raw)
                elif key == "seed":
                    cfg.seed = int(raw)
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise SemvoxError(f"{path}:{lineno}: {exc}") from exc
    cfg.validate()
    return cfg


def _config_for(args) -> PipelineConfig:
    return load_config(args.config) if args.config else PipelineConfig()


def _pick(flag_value, config_value):
    return config_value if flag_value is None else flag_value


def _log(message: str) -> None:
    print(message, file=sys.stderr)


# subcommands

def cmd_project(args) -> int:
    cfg = _config_for(args)
    k = io.read_intrinsics(_pick(args.intrinsics, cfg.intrinsics))
    disparity = io.read_pfm(args.disparity).astype(np.float64) * args.scale
    labels = io.read_pgm(args.labels)
    cloud = project_map(disparity, labels, k,
                        _pick(args.min_disparity, cfg.min_disparity))
    io.write_cloud_ascii(args.out, cloud)
    _log(f"[project] wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def _grid_spec(args, cfg: PipelineConfig) -> voxel.GridSpec:
    dims = _pick(args.dims and _parse_triple(args.dims, int), cfg.dims)
    voxel_size = _pick(args.voxel_size, cfg.voxel_size)
    origin = _pick(args.origin and _parse_triple(args.origin, float), cfg.origin)
    if origin is None:
        origin = voxel.centered_origin(dims, voxel_size)
    return voxel.GridSpec(dims, voxel_size, origin)


def _process_frame(record, k, spec, min_disparity, min_points, out_dir):
    disparity = io.read_pfm(record.disparity_path).astype(np.float64) * record.scale
    labels = io.read_pgm(record.labels_path)
    cloud = project_map(disparity, labels, k, min_disparity)
    grid, dropped = voxel.voxelize(cloud, spec)
    filtered = voxel.voting_filter(grid, min_points)
    semantics = voxel.resolve_semantics(filtered)
    io.write_sog(out_dir / f"{record.frame_id}.sog", filtered, semantics)
    return {
        "frame_id": record.frame_id,
        "points": len(cloud),
        "dropped_points": dropped,
        "occupied_voxels": int(np.count_nonzero(filtered.counts)),
        "labeled_voxels": int(np.count_nonzero(semantics.labels != voxel.FREE)),
    }


def cmd_make_occupancy(args) -> int:
    cfg = _config_for(args)
    records = io.load_manifest(args.manifest)
    k = io.read_intrinsics(_pick(args.intrinsics, cfg.intrinsics))
    spec = _grid_spec(args, cfg)
    min_disparity = _pick(args.min_disparity, cfg.min_disparity)
    min_points = _pick(args.min_points, cfg.min_points)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _log(f"[make-occupancy] min_points={min_points}, voxel_size={spec.voxel_size:g}, "
         f"dims={spec.dims[0]}x{spec.dims[1]}x{spec.dims[2]}")

    def run(record):
        try:
            return _process_frame(record, k, spec, min_disparity, min_points, out_dir)
        except (SemvoxError, OSError) as exc:
            _log(f"[make-occupancy] frame {record.frame_id} failed: {exc}")
            return None

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run, records))
    else:
        rows = [run(r) for r in records]

    done = [r for r in rows if r is not None]
    summary = out_dir / "summary.csv"
    with open(summary, "w") as f:
        f.write("frame_id,points,dropped_points,occupied_voxels,labeled_voxels\n")
        for row in done:
            f.write("{frame_id},{points},{dropped_points},{occupied_voxels},"
                    "{labeled_voxels}\n".format(**row))
    _log(f"[make-occupancy] {len(done)}/{len(records)} frames done, "
         f"summary at {summary}")
    if records and not done:
        return EXIT_INPUT
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = io.read_pfm(args.pred).astype(np.float64)
    gt = io.read_pfm(args.gt).astype(np.float64)
    mask = io.read_pgm(args.mask) != 0 if args.mask else np.ones(gt.shape, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise SemvoxError(
            f"raster shapes disagree: pred {pred.shape}, gt {gt.shape}, "
            f"mask {mask.shape}"
        )
    if args.align:
        depth = metrics.evaluate_depth_aligned(pred, gt, mask)
    else:
        depth = metrics.DepthMetrics(
            rmse=metrics.rmse(pred, gt, mask),
            a1=metrics.threshold_accuracy(pred, gt, mask, 1),
            a2=metrics.threshold_accuracy(pred, gt, mask, 2),
            a3=metrics.threshold_accuracy(pred, gt, mask, 3),
        )
    lines = [f"rmse={depth.rmse!r}", f"a1={depth.a1!r}",
             f"a2={depth.a2!r}", f"a3={depth.a3!r}"]
    seg: Optional[metrics.SegMetrics] = None
    if args.pred_labels and args.gt_labels:
        pl = io.read_pgm(args.pred_labels)
        gl = io.read_pgm(args.gt_labels)
        classes = [int(c) for c in np.union1d(np.unique(pl), np.unique(gl))
                   if c != voxel.FREE]  # 255 = unlabeled, not a class
        seg = metrics.seg_iou(pl, gl, classes)
        for c in sorted(seg.per_class_iou):
            lines.append(f"iou_{c}={seg.per_class_iou[c]!r}")
        lines.append(f"mean_iou={seg.mean_iou!r}")
    print("\n".join(lines))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("rmse,a1,a2,a3,mean_iou\n")
            mean_iou = repr(seg.mean_iou) if seg is not None else ""
            f.write(f"{depth.rmse!r},{depth.a1!r},{depth.a2!r},"
                    f"{depth.a3!r},{mean_iou}\n")
    return EXIT_OK


def cmd_boost_merge(args) -> int:
    from .pseudolabel import ResolutionEstimate, fuse_multi_resolution

    estimates = []
    for path in args.estimates:
        raster = io.read_pfm(path)
        h, w = raster.shape
        estimates.append(ResolutionEstimate(raster, (w, h)))
    w, _, h = args.target_size.partition("x")
    fused = fuse_multi_resolution(estimates, (int(w), int(h)))
    io.write_pfm(args.out, fused)
    _log(f"[boost-merge] fused {len(estimates)} estimates into {args.out}")
    return EXIT_OK


def cmd_patchwise_demo(args) -> int:
    cfg = _config_for(args)
    seed = _pick(args.seed, cfg.seed)
    epochs = _pick(args.epochs, cfg.epochs)
    lr = _pick(args.lr, cfg.learning_rate)
    percentage = _pick(args.percentage, cfg.train_percentage)
    data = autodiff.make_synthetic_data(seed)
    model = autodiff.ToyModel(args.variant, seed=seed)
    if args.variant == "v3":
        autodiff.pretrain_trunk(model, data, args.pretrain_epochs, lr)
    plan = None
    if args.encoder_percentage is not None:
        # interpretation flagged in docs: restrict patches to leading trunk slots
        plan = patchwise.plan_encoder_restricted(model, args.encoder_percentage,
                                                 percentage)
    evaluate = patchwise.make_joint_loss_eval(data)
    if args.plain:
        step = patchwise.make_sgd_train_step(data, lr)
        n = len(model.parameters())
        report = patchwise.PatchTrainReport()
        for epoch in range(epochs):
            before = evaluate(model)
            step(model)
            report.records.append(patchwise.PatchRecord(
                epoch=epoch, patch_index=0, start=0, end=n,
                loss_before=before, loss_after=evaluate(model),
                max_grad_buffers=autodiff.grad_buffer_count(model),
            ))
    else:
        model, report = patchwise.run_patchwise_epochs(
            model, percentage, epochs, data, lr,
            plan=plan, sequential=args.sequential,
        )
    if args.report:
        report.write_csv(args.report)
    final_loss = evaluate(model)
    if not math.isfinite(final_loss):
        _log(f"[patchwise-demo] training diverged: loss {final_loss}")
        return EXIT_INTERNAL
    disp, seg_logits = autodiff.forward(model, data.inputs)
    ss = alignment.fit_scale_shift(disp.data, data.disparity, data.mask)
    rmse_aligned = metrics.rmse(alignment.apply_scale_shift(disp.data, ss),
                                data.disparity, data.mask)
    seg_pred = seg_logits.data > 0.0  # sigmoid(z) > 0.5 iff z > 0
    seg_accuracy = float(np.mean(seg_pred == (data.seg > 0.5)))
    print(f"joint_loss={final_loss!r} rmse_aligned={rmse_aligned!r} "
          f"seg_accuracy={seg_accuracy!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semvox",
        description="Monocular semantic occupancy tooling: projection, "
                    "voxel grids, metrics, multi-resolution fusion and the "
                    "patch-wise training demo.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="project disparity + labels to a point cloud")
    p.add_argument("--intrinsics", help="key=value intrinsics file")
    p.add_argument("--disparity", required=True, help="disparity PFM")
    p.add_argument("--labels", required=True, help="label PGM (255 = unlabeled)")
    p.add_argument("--scale", type=float, default=1.0,
                   help="per-frame disparity scale applied before projection")
    p.add_argument("--min-disparity", type=float, default=None)
    p.add_argument("--out", required=True, help="ASCII cloud output path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("make-occupancy",
                       help="build voted semantic occupancy grids for a manifest")
    p.add_argument("--manifest", required=True,
                   help="CSV: frame_id,disparity,labels[,scale]")
    p.add_argument("--intrinsics")
    p.add_argument("--dims", help="grid voxel counts X,Y,Z")
    p.add_argument("--voxel-size", type=float, default=None, help="meters")
    p.add_argument("--origin", help="minimum grid corner x,y,z (default: centered)")
    p.add_argument("--min-points", type=int, default=None,
                   help="voting filter threshold (voxels below are dropped)")
    p.add_argument("--min-disparity", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel frame workers")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_make_occupancy)

    p = sub.add_parser("metrics", help="depth metrics and optional label IoU")
    p.add_argument("--pred", required=True, help="prediction PFM")
    p.add_argument("--gt", required=True, help="ground-truth PFM")
    p.add_argument("--mask", help="PGM, nonzero = valid (default: all pixels)")
    p.add_argument("--align", action="store_true",
                   help="scale/shift align prediction before scoring")
    p.add_argument("--pred-labels", help="predicted label PGM")
    p.add_argument("--gt-labels", help="ground-truth label PGM")
    p.add_argument("--csv", help="also write a one-row CSV")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("boost-merge",
                       help="fuse multi-resolution disparity estimates")
    p.add_argument("--estimates", nargs="+", required=True, help="PFM paths")
    p.add_argument("--target-size", required=True, help="WxH")
    p.add_argument("--out", required=True, help="fused PFM output")
    p.set_defaults(func=cmd_boost_merge)

    p = sub.add_parser("patchwise-demo",
                       help="run the patch-wise training experiment on the "
                            "shipped synthetic dataset")
    p.add_argument("--percentage", type=float, default=None,
                   help="fraction of parameter slots per patch")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=("v1", "v2", "v3"), default="v2")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--pretrain-epochs", type=int, default=100,
                   help="regression-only trunk pretraining for v3")
    p.add_argument("--encoder-percentage", type=float, default=None,
                   help="restrict patches to the leading fraction of trunk "
                        "slots (interpretation documented in README)")
    p.add_argument("--sequential", action="store_true",
                   help="Gauss-Seidel comparison mode (not the reference "
                        "snapshot semantics)")
    p.add_argument("--plain", action="store_true",
                   help="bypass patch scheduling entirely (baseline)")
    p.add_argument("--report", help="per-patch CSV output path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_patchwise_demo)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SemvoxError, OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - defensive
        _log(f"internal error: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
