"""Command-line entry point: ``niom <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input data and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats
from .corruptions import CorruptionKind, CorruptionSpec, Side, corrupt, corrupt_pair
from .features import FeatureConfig, detect_and_describe
from .geometry import NoModelFound, normalize_points, pose_error, ransac_essential
from .heatmap import aggregate, load_heatmap
from .imageio import load_image, save_image
from .matching import MatchSet
from .weighting import WeightedDescriptorSet, WeightMode, compute_weights


def _feature_args(p: argparse.ArgumentParser) -> None:
    d = FeatureConfig()
    p.add_argument("--max-keypoints", type=int, default=d.max_keypoints)
    p.add_argument("--nms-radius", type=float, default=d.nms_radius)
    p.add_argument("--threshold", type=float, default=d.threshold, help="corner response threshold")
    p.add_argument("--blur-sigma", type=float, default=d.blur_sigma)


def _feature_config(args) -> FeatureConfig:
    return FeatureConfig(args.max_keypoints, args.nms_radius, args.threshold, args.blur_sigma)


def _cmd_detect(args) -> None:
    ds = detect_and_describe(load_image(args.image), _feature_config(args))
    formats.write_niok(args.output, formats.KeypointFile(ds.positions, ds.responses, ds.descriptors))
    print(f"{len(ds)} keypoints -> {args.output}")


def _cmd_corrupt(args) -> None:
    if len(args.inputs) != len(args.output):
        raise ValueError("need one --output per input image")
    spec = CorruptionSpec(CorruptionKind(args.kind), args.severity, args.seed)
    images = [load_image(p) for p in args.inputs]
    if len(images) == 1:
        if args.side != Side.BOTH.value:
            raise ValueError("--side applies to image pairs only")
        outs = [corrupt(images[0], spec)]
    else:
        outs = corrupt_pair(args.pair_id, images[0], images[1], spec, args.side)
    for path, img in zip(args.output, outs):
        save_image(path, img)


def _cmd_weight(args) -> None:
    kf = formats.read_niok(args.keypoints)
    if args.size is not None:
        size = tuple(args.size)
    else:
        if Path(args.heatmaps[0]).read_bytes()[:4] != formats.NIOH_MAGIC:
            raise ValueError("--size is required for PGM heatmaps")
        h, w = formats.read_nioh(args.heatmaps[0]).shape
        size = (w, h)
    heatmap = aggregate([load_heatmap(p, size) for p in args.heatmaps])
    weights = compute_weights(kf.positions, heatmap, args.mode)
    ws = WeightedDescriptorSet.build(kf.positions, kf.descriptors, weights)
    formats.write_niok(args.output, formats.KeypointFile(kf.positions, kf.responses, ws.weighted, ws.weights))


def _load_set(path) -> WeightedDescriptorSet:
    # weighted NIOK files already store the weighted descriptors
    kf = formats.read_niok(path)
    return WeightedDescriptorSet.build(kf.positions, kf.descriptors)


def _cmd_match(args) -> None:
    from .harness.pipeline import RunConfig, match_sets

    config = RunConfig(matcher=args.matcher, ratio=args.ratio, min_similarity=args.min_sim,
                       dustbin_score=args.dustbin, temperature=args.temperature,
                       sinkhorn_iterations=args.iterations, min_confidence=args.min_confidence)
    matches = match_sets(_load_set(args.keypoints_a), _load_set(args.keypoints_b), config)
    matches.to_csv(args.output)
    print(f"{len(matches)} matches -> {args.output}")


def _read_pair(path):
    from .harness.manifest import parse_record

    path = Path(path)
    text = path.read_text().strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise ValueError(f"{path}: expected one JSON pair record") from None
        obj = json.loads(lines[0])
    return parse_record(obj, path.parent, require_pose=True)


def _positions(kp_path, image_path) -> np.ndarray:
    if kp_path is not None:
        return formats.read_niok(kp_path).positions
    return detect_and_describe(load_image(image_path)).positions


def _cmd_evalpose(args) -> None:
    rec = _read_pair(args.pair)
    matches = MatchSet.from_csv(args.matches)
    pos_a = _positions(rec.keypoints_a, rec.image_a)
    pos_b = _positions(rec.keypoints_b, rec.image_b)
    idx = matches.indices
    if idx.size and (idx[:, 0].max() >= len(pos_a) or idx[:, 1].max() >= len(pos_b)):
        raise ValueError("match index outside the keypoint sets")
    focal = 0.5 * (rec.intrinsics_a.mean_focal + rec.intrinsics_b.mean_focal)
    try:
        if len(matches) < 8:
            raise NoModelFound(f"only {len(matches)} matches")
        est = ransac_essential(normalize_points(pos_a[idx[:, 0]], rec.intrinsics_a),
                               normalize_points(pos_b[idx[:, 1]], rec.intrinsics_b),
                               threshold=args.threshold / focal, seed=args.seed)
        err = pose_error(est.pose, rec.gt_pose)
    except NoModelFound as exc:
        print(f"pose estimation failed: {exc}", file=sys.stderr)
        err = pose_error(None, rec.gt_pose)
    print(f"{err:.6f}")


def _cmd_pipeline(args) -> None:
    from .harness.manifest import load_manifest
    from .harness.pipeline import RunConfig, run_pipeline

    corruption = None
    if args.corruption is not None:
        corruption = CorruptionSpec(CorruptionKind(args.corruption), args.severity, args.seed)
    config = RunConfig(weight_mode=args.weight_mode, matcher=args.matcher, corruption=corruption,
                       side=args.side, ratio=args.ratio, min_similarity=args.min_sim,
                       ransac_threshold_px=args.threshold, global_seed=args.seed,
                       max_keypoints=args.max_keypoints)
    pairs = load_manifest(args.manifest, require_pose=True)
    run = run_pipeline(pairs, config, workers=args.workers)
    run.save(args.output)
    a5, a10, a20 = run.auc()
    failed = sum(r.failed for r in run.records)
    print(f"{config.method} {config.condition}: AUC@5/10/20 = "
          f"{100 * a5:.2f} / {100 * a10:.2f} / {100 * a20:.2f}  ({failed} failed of {len(run.records)})")


def _cmd_report(args) -> None:
    from .harness.pipeline import RunReport
    from .harness.report import render_report

    text = render_report([RunReport.load(p) for p in args.reports], args.format, args.output)
    if args.output is None:
        sys.stdout.write(text)


def _cmd_viz(args) -> None:
    from .harness.viz import render_matches

    ka, kb = formats.read_niok(args.keypoints_a), formats.read_niok(args.keypoints_b)
    render_matches(load_image(args.image_a), load_image(args.image_b), ka.positions, kb.positions,
                   MatchSet.from_csv(args.matches), args.output)


def _cmd_synth(args) -> None:
    from .harness.synth import build_benchmark

    path = build_benchmark(args.output, args.pairs, args.seed)
    print(f"{args.pairs} pairs -> {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="niom", description="Heatmap-weighted sparse matching toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in CorruptionKind]
    sides = [s.value for s in Side]
    modes = [m.value for m in WeightMode]

    p = sub.add_parser("detect", help="detect and describe keypoints of an image")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True, help="NIOK output")
    _feature_args(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("corrupt", help="apply a seeded corruption to one image or a pair")
    p.add_argument("inputs", nargs="+", help="one image, or image A and image B")
    p.add_argument("-o", "--output", nargs="+", required=True)
    p.add_argument("--kind", required=True, choices=kinds)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", choices=sides, default=Side.BOTH.value)
    p.add_argument("--pair-id", default="pair", help="pair id used to derive per-image seeds")
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("weight", help="weight NIOK descriptors by heatmaps")
    p.add_argument("keypoints")
    p.add_argument("heatmaps", nargs="+", help="NIOH or PGM heatmaps, combined by maximum")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=modes, default=WeightMode.PAPER.value)
    p.add_argument("--size", type=int, nargs=2, metavar=("WIDTH", "HEIGHT"),
                   help="image size the keypoints refer to (default: heatmap size)")
    p.set_defaults(func=_cmd_weight)

    p = sub.add_parser("match", help="match two NIOK files")
    p.add_argument("keypoints_a")
    p.add_argument("keypoints_b")
    p.add_argument("-o", "--output", required=True, help="CSV of index_a,index_b,confidence")
    p.add_argument("--matcher", choices=["mnn", "sinkhorn"], default="mnn")
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--min-sim", type=float, default=0.3)
    p.add_argument("--dustbin", type=float, default=0.0)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("evalpose", help="estimate the relative pose and print its angular error")
    p.add_argument("--matches", required=True)
    p.add_argument("--pair", required=True, help="JSON pair record with gt_pose")
    p.add_argument("--threshold", type=float, default=2.0, help="RANSAC threshold in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_evalpose)

    p = sub.add_parser("pipeline", help="run a manifest end to end and write a run report")
    p.add_argument("--manifest", required=True)
    p.add_argument("-o", "--output", required=True, help="run report JSON")
    p.add_argument("--weight-mode", choices=modes, default=WeightMode.PAPER.value)
    p.add_argument("--matcher", choices=["mnn", "sinkhorn"], default="mnn")
    p.add_argument("--corruption", choices=kinds)
    p.add_argument("--severity", type=int, default=5)
    p.add_argument("--side", choices=sides, default=Side.BOTH.value)
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--min-sim", type=float, default=0.3)
    p.add_argument("--threshold", type=float, default=2.0, help="RANSAC threshold in pixels")
    p.add_argument("--max-keypoints", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help="worker threads (capped by NIOM_THREADS)")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("report", help="AUC tables from run reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("-o", "--output")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("viz", help="render matches side by side")
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--keypoints-a", required=True)
    p.add_argument("--keypoints-b", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("-o", "--output", required=True, help="PNG output")
    p.set_defaults(func=_cmd_viz)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("output", help="output directory")
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"niom {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
