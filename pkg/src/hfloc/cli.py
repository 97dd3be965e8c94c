"""``hfloc`` command line.

Exit codes: 0 success, 1 domain error (one line on stderr), 2 usage error.
Outputs are written to a temporary file and renamed into place, so a run
that stops early never leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import HflocError, MissingGroundTruth, UnknownImage

THREADS_ENV = "HFLOC_THREADS"


# ---------------------------------------------------------------------------
# argument types


def _ranged(kind, lo=None, hi=None, lo_open=False, hi_open=False):
    def conv(text):
        try:
            v = kind(text)
        except (TypeError, ValueError):
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if kind is float and not np.isfinite(v):
            raise argparse.ArgumentTypeError(f"value must be finite: {text!r}")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise argparse.ArgumentTypeError(f"value must be {'>' if lo_open else '>='} {lo}: {text!r}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise argparse.ArgumentTypeError(f"value must be {'<' if hi_open else '<='} {hi}: {text!r}")
        return v
    conv.__name__ = kind.__name__
    return conv


pos_int = _ranged(int, 1)
nonneg_int = _ranged(int, 0)
pos_float = _ranged(float, 0, lo_open=True)
nonneg_float = _ranged(float, 0)
ratio_float = _ranged(float, 0, 1, lo_open=True)
open_unit = _ranged(float, 0, 1, lo_open=True, hi_open=True)


def _tiers(text):
    from .evalbench import ThresholdTriple
    try:
        return ThresholdTriple.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad tiers {text!r}: {exc}") from None


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser


def _common(p, threads=True, seed=True):
    p.add_argument("--config", metavar="FILE", help="JSON file of flag values; command-line flags win")
    if seed:
        p.add_argument("--seed", type=nonneg_int, default=0, help="random seed (default: %(default)s)")
    if threads:
        p.add_argument("--threads", type=pos_int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV}, else all cores)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="hfloc", description="Hierarchical visual localization toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic scene to feature files", formatter_class=fmt)
    p.add_argument("--spec", metavar="JSON", help="scene parameters (missing keys take defaults)")
    p.add_argument("--out", metavar="DIR", help="output directory (required)")
    p.add_argument("--pixel-noise", type=nonneg_float, default=None, help="override the scene's pixel noise")
    p.add_argument("--outlier-fraction", type=_ranged(float, 0, 1), default=None,
                   help="override the scene's outlier fraction")
    _common(p, threads=False, seed=False)
    p.add_argument("--seed", type=nonneg_int, default=None, help="override the scene's seed")

    p = sub.add_parser("build-map", help="triangulate a sparse map from known poses", formatter_class=fmt)
    p.add_argument("--features", metavar="DIR", help="feature directory (required)")
    p.add_argument("--poses", metavar="FILE", help="database pose list (required)")
    p.add_argument("--cameras", metavar="FILE", help="camera list (required)")
    p.add_argument("--out", metavar="FILE", help="output map file (required)")
    p.add_argument("--images", metavar="FILE", help="database image list (default: every posed image)")
    p.add_argument("--pairs", metavar="FILE", help="image pairs to match, two ids per line")
    p.add_argument("--pair-knn", type=nonneg_int, default=0,
                   help="without --pairs: match each image with its K most similar; 0 matches all pairs")
    p.add_argument("--ratio", type=ratio_float, default=0.9, help="ratio test threshold")
    p.add_argument("--epipolar-px", type=pos_float, default=4.0, help="two-view epipolar distance threshold")
    p.add_argument("--min-angle", type=nonneg_float, default=1.0, help="minimum triangulation angle [deg]")
    p.add_argument("--pca-dim", type=nonneg_int, default=1024,
                   help="global descriptor PCA size, clipped to rank; 0 disables")
    _common(p, seed=False)

    p = sub.add_parser("map-stats", help="print map statistics", formatter_class=fmt)
    p.add_argument("--map", metavar="FILE", help="map file (required)")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    _common(p, threads=False, seed=False)

    p = sub.add_parser("localize", help="localize query images against a map", formatter_class=fmt)
    p.add_argument("--map", metavar="FILE", help="map file (required)")
    p.add_argument("--features", metavar="DIR", help="query feature directory (required)")
    p.add_argument("--cameras", metavar="FILE", help="camera list with query intrinsics (required)")
    p.add_argument("--queries", metavar="FILE", help="query image list (required)")
    p.add_argument("--out", metavar="FILE", help="results, one JSON object per line (required)")
    p.add_argument("--knn", type=pos_int, default=10, help="prior frames retrieved")
    p.add_argument("--ratio", type=ratio_float, default=0.9, help="modified ratio test threshold")
    p.add_argument("--reproj-px", type=pos_float, default=10.0, help="RANSAC reprojection threshold [px]")
    p.add_argument("--min-inliers", type=_ranged(int, 4), default=12, help="inliers for a valid pose")
    p.add_argument("--max-iters", type=pos_int, default=5000, help="RANSAC iteration cap")
    p.add_argument("--confidence", type=open_unit, default=0.999, help="RANSAC stopping confidence")
    p.add_argument("--max-kpts", type=nonneg_int, default=2000, help="query keypoints kept after NMS")
    p.add_argument("--nms-radius", type=nonneg_float, default=4.0, help="NMS radius [px]")
    p.add_argument("--mode", choices=("all-observations", "point-mean"), default="all-observations",
                   help="match against every observation or one mean descriptor per point")
    p.add_argument("--timings-out", metavar="FILE", help="also write the timing table as JSON")
    _common(p)

    p = sub.add_parser("eval-local", help="local feature metrics on image pairs", formatter_class=fmt)
    p.add_argument("--pairs", metavar="JSONL", help="pair ground truth (required)")
    p.add_argument("--features", metavar="DIR", help="feature directory (required)")
    p.add_argument("--mode", choices=("homography", "sfm"), help="ground-truth kind (required)")
    p.add_argument("--out", metavar="FILE", help="JSON report (required)")
    p.add_argument("--max-kpts", type=pos_int, default=None, help="keypoint budget (default: 300 homography, 1000 sfm)")
    p.add_argument("--nms-radius", type=nonneg_float, default=4.0, help="NMS radius [px]")
    p.add_argument("--eps-kp", type=pos_float, default=3.0, help="keypoint correctness threshold [px]")
    p.add_argument("--eps-desc", type=pos_float, default=None, help="match correctness threshold (default: 3 homography, 5 sfm)")
    _common(p)

    p = sub.add_parser("eval-loc", help="localization recall and cumulative error curve", formatter_class=fmt)
    p.add_argument("--results", metavar="JSONL", help="output of localize (required)")
    p.add_argument("--gt", metavar="FILE", help="ground-truth query poses (required)")
    p.add_argument("--tiers", type=_tiers, default="0.25:2,0.5:5,5:10", help="distance[m]:orientation[deg] tiers")
    p.add_argument("--curve-out", metavar="CSV", help="cumulative position-error curve")
    p.add_argument("--max-dist", type=pos_float, default=5.0, help="curve range [m]")
    p.add_argument("--curve-samples", type=_ranged(int, 2), default=101, help="curve sample count")
    p.add_argument("--out", metavar="FILE", help="JSON report")
    _common(p, threads=False, seed=False)

    p = sub.add_parser("distill-check", help="finite-difference check of the distillation loss gradients",
                       formatter_class=fmt)
    p.add_argument("--trials", type=pos_int, default=100, help="random batches")
    p.add_argument("--step", type=pos_float, default=1e-4, help="central difference step")
    p.add_argument("--tol", type=pos_float, default=1e-5, help="largest accepted relative error")
    _common(p, threads=False)
    return parser


REQUIRED = {
    "synth": ("out",),
    "build-map": ("features", "poses", "cameras", "out"),
    "map-stats": ("map",),
    "localize": ("map", "features", "cameras", "queries", "out"),
    "eval-local": ("pairs", "features", "mode", "out"),
    "eval-loc": ("results", "gt"),
    "distill-check": (),
}


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(sub, args, argv_flags):
    """Fill values from ``--config`` for flags absent on the command line."""
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions:
            raise UsageError(f"unknown config key {key!r}")
        action = actions[dest]
        if any(opt in argv_flags for opt in action.option_strings):
            continue
        if isinstance(action, argparse._StoreTrueAction):
            if not isinstance(value, bool):
                raise UsageError(f"config key {key!r} must be true or false")
        elif action.type is not None and value is not None:
            try:
                value = action.type(str(value))
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r} must be one of {sorted(action.choices)}")
        setattr(args, dest, value)


def resolve_threads(value):
    if value is not None:
        return value
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    try:
        if args.config:
            flags = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
            _apply_config(sub, args, flags)
        missing = [d for d in REQUIRED[args.command] if getattr(args, d, None) is None]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        if hasattr(args, "threads"):
            args.threads = resolve_threads(args.threads)
    except UsageError as exc:
        sub.error(str(exc))
    return args


# ---------------------------------------------------------------------------
# output helpers


@contextmanager
def atomic_output(path, mode="w"):
    """Yield a temporary file that replaces ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .synth import SceneSpec, generate_scene, write_scene

    d = {}
    if args.spec:
        d = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        if not isinstance(d, dict):
            raise ValueError("scene spec must be a JSON object")
    for key in ("pixel_noise", "outlier_fraction", "seed"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    spec = SceneSpec.from_dict(d)
    scene = generate_scene(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        write_scene(tmp, scene)
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(tmp.rglob("*")):
            if item.is_file():
                dest = out / item.relative_to(tmp)
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(item, dest)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {len(scene.db_ids)} database and {len(scene.query_ids)} query views to {out}")
    return 0


def _load_features(directory, ids):
    from .fileio import feature_path, read_features

    feats = {}
    for image_id in ids:
        p = feature_path(directory, image_id)
        if not p.exists():
            from .errors import MissingFeatures
            raise MissingFeatures(f"no feature file for {image_id!r} at {p}")
        feats[image_id] = read_features(p)
    return feats


def cmd_build_map(args):
    from .fileio import read_cameras, read_list, read_poses
    from .mapstore import BuildConfig, build_map, encode_map, map_stats
    from .retrieval import exhaustive_pairs, retrieval_pairs

    poses = read_poses(args.poses)
    cameras = read_cameras(args.cameras)
    ids = read_list(args.images) if args.images else list(poses)
    feats = _load_features(args.features, ids)
    if args.pairs:
        pairs = []
        for line in Path(args.pairs).read_text(encoding="utf-8").splitlines():
            tok = line.split()
            if tok and not tok[0].startswith("#"):
                if len(tok) != 2:
                    raise ValueError(f"{args.pairs}: expected two image ids per line: {line!r}")
                pairs.append((tok[0], tok[1]))
    elif args.pair_knn:
        pairs = retrieval_pairs(ids, np.stack([feats[i].global_descriptor for i in ids]), args.pair_knn)
    else:
        pairs = exhaustive_pairs(ids)
    cfg = BuildConfig(ratio=args.ratio, epipolar_px=args.epipolar_px, min_angle_deg=args.min_angle,
                      pca_dim=args.pca_dim or None, threads=args.threads)
    smap = build_map(feats, poses, cameras, pairs, cfg)
    with atomic_output(args.out, "wb") as f:
        f.write(encode_map(smap))
    st = map_stats(smap)
    print(f"{len(ids)} images, {len(pairs)} pairs, {st.num_points} points, "
          f"track length {st.track_length:.2f} -> {args.out}")
    return 0


def _format_stats(st):
    return [f"num_points {st.num_points}",
            f"keypoints_per_image {st.keypoints_per_image:g}",
            f"matched_keypoint_ratio {st.matched_keypoint_ratio:g}",
            f"track_length {st.track_length:g}"]


def cmd_map_stats(args):
    from .mapstore import load_map, map_stats

    st = map_stats(load_map(args.map))
    if args.json:
        print(json.dumps(dict(zip(("num_points", "keypoints_per_image", "matched_keypoint_ratio",
                                   "track_length"), st.as_tuple()))))
    else:
        print("\n".join(_format_stats(st)))
    return 0


def result_record(res):
    p = res.pose
    return {
        "image_id": res.image_id,
        "success": bool(res.success),
        "qw": float(p.qvec[0]), "qx": float(p.qvec[1]), "qy": float(p.qvec[2]), "qz": float(p.qvec[3]),
        "tx": float(p.tvec[0]), "ty": float(p.tvec[1]), "tz": float(p.tvec[2]),
        "num_inliers": int(res.estimate.num_inliers),
        "place_index": int(res.place_index),
        "timings_ms": {k: round(float(v), 6) for k, v in res.timings_ms.items()},
        "total_ms": round(float(res.total_ms), 6),
    }


STAGE_TITLES = {"features": "Features", "global_search": "Global search", "clustering": "Clustering",
                "local_matching": "Local matching", "pnp": "PnP"}


def timing_table(results):
    """Mean milliseconds per stage and total; returns (text, dict)."""
    from .localizer import STAGES

    n = max(len(results), 1)
    means = {s: sum(r.timings_ms[s] for r in results) / n for s in STAGES}
    total = sum(r.total_ms for r in results) / n
    heads = [STAGE_TITLES[s] for s in STAGES] + ["Total"]
    vals = [means[s] for s in STAGES] + [total]
    widths = [max(len(h), 9) for h in heads]
    line1 = " | ".join(h.rjust(w) for h, w in zip(heads, widths))
    line2 = " | ".join(f"{v:.2f}".rjust(w) for v, w in zip(vals, widths))
    text = f"mean timings [ms] over {len(results)} queries\n{line1}\n{line2}"
    return text, {"queries": len(results), "mean_ms": means, "mean_total_ms": total}


def cmd_localize(args):
    from .fileio import feature_path, read_cameras, read_features, read_list
    from .localizer import Localizer, LocalizerConfig, localize_many
    from .mapstore import load_map
    from .pose import RansacConfig

    smap = load_map(args.map)
    cameras = read_cameras(args.cameras)
    queries = read_list(args.queries)
    for q in queries:
        if q not in cameras:
            raise UnknownImage(f"no intrinsics for query {q!r} in {args.cameras}")
        if not feature_path(args.features, q).exists():
            from .errors import MissingFeatures
            raise MissingFeatures(f"no feature file for query {q!r}")
    rcfg = RansacConfig(reproj_px=args.reproj_px, min_inliers=args.min_inliers, max_iters=args.max_iters,
                        confidence=args.confidence, seed=args.seed)
    cfg = LocalizerConfig(k_nn=args.knn, ratio=args.ratio, ransac=rcfg, max_keypoints=args.max_kpts,
                          nms_radius=args.nms_radius, mode=args.mode)
    loc = Localizer(smap, cfg)

    def jobs():
        for q in queries:
            t0 = time.perf_counter()
            fs = read_features(feature_path(args.features, q))
            yield fs, cameras[q], (time.perf_counter() - t0) * 1e3

    results = []
    with atomic_output(args.out) as f:
        for res in localize_many(loc, jobs(), args.threads):
            f.write(json.dumps(result_record(res), sort_keys=True) + "\n")
            results.append(res)
    text, table = timing_table(results)
    ok = sum(r.success for r in results)
    print(f"localized {ok}/{len(results)} queries (matching mode: {args.mode})")
    print(text)
    if args.timings_out:
        with atomic_output(args.timings_out) as f:
            json.dump(table, f, indent=2, sort_keys=True)
    return 0


def read_results(path):
    from .evalbench import QueryOutcome
    from .geometry import Pose

    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            pose = Pose([r["qw"], r["qx"], r["qy"], r["qz"]], [r["tx"], r["ty"], r["tz"]])
            out.append(QueryOutcome(r["image_id"], bool(r["success"]), pose))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad result record ({exc})") from None
    return out


def cmd_eval_loc(args):
    from .evalbench import cumulative_curve, localization_recall, write_curve_csv
    from .fileio import read_poses

    results = read_results(args.results)
    gt = read_poses(args.gt)
    missing = [r.image_id for r in results if r.image_id not in gt]
    if missing:
        raise MissingGroundTruth(f"no ground-truth pose for {missing[0]!r}")
    recalls = localization_recall(results, gt, args.tiers)
    th, frac = cumulative_curve(results, gt, args.max_dist, args.curve_samples)
    tiers = ["%g m, %g deg" % t for t in args.tiers.tiers]
    print(f"{len(results)} queries")
    for t, r in zip(tiers, recalls):
        print(f"recall @ {t}: {r:.1f}%")
    if args.curve_out:
        with atomic_output(args.curve_out) as f:
            write_curve_csv(f, th, frac)
    if args.out:
        from .evalbench import EvalReport
        rep = EvalReport({"recall": dict(zip(tiers, recalls)), "queries": len(results)},
                         {"position_error": {"threshold_m": th.tolist(), "fraction": frac.tolist()}},
                         {"tiers": [list(t) for t in args.tiers.tiers]})
        with atomic_output(args.out) as f:
            f.write(rep.to_json() + "\n")
    return 0


def _pair_gt(rec, mode, base):
    from .evalbench import DepthGT, HomographyGT
    from .fileio import parse_camera, read_depth
    from .geometry import Pose

    if mode == "homography":
        H = np.asarray(rec["H"], dtype=np.float64)
        if H.size != 9:
            raise ValueError("H must hold 9 numbers (row-major)")
        return HomographyGT(H.reshape(3, 3), tuple(rec["size_a"]), tuple(rec["size_b"]))
    pose = np.asarray(rec["pose_ab"], dtype=np.float64)
    if pose.size != 7:
        raise ValueError("pose_ab must hold qw qx qy qz tx ty tz")
    depth_b = read_depth(base / rec["depth_b"]) if rec.get("depth_b") else None
    return DepthGT(read_depth(base / rec["depth_a"]), Pose(pose[:4], pose[4:]),
                   parse_camera(rec["camera_a"].split()), parse_camera(rec["camera_b"].split()), depth_b)


def cmd_eval_local(args):
    from .evalbench import evaluate_pairs
    from .features import nms_topk
    from .fileio import feature_path, read_features

    max_kpts = args.max_kpts or (300 if args.mode == "homography" else 1000)
    eps_desc = args.eps_desc or (3.0 if args.mode == "homography" else 5.0)
    base = Path(args.pairs).parent
    jobs = []
    cache = {}

    def feats(image_id):
        if image_id not in cache:
            fs = read_features(feature_path(args.features, image_id))
            cache[image_id] = fs.subset(nms_topk(fs.keypoints, fs.scores, args.nms_radius, max_kpts))
        return cache[image_id]

    for lineno, line in enumerate(Path(args.pairs).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pid = rec.get("pair_id", f"{rec['a']}/{rec['b']}")
            jobs.append((pid, feats(rec["a"]), feats(rec["b"]), _pair_gt(rec, args.mode, base)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{args.pairs}:{lineno}: bad pair record ({exc})") from None
    report = evaluate_pairs(jobs, args.mode, args.eps_kp, eps_desc, args.seed, args.threads)
    report.metadata["max_keypoints"] = max_kpts
    with atomic_output(args.out) as f:
        f.write(report.to_json() + "\n")
    s = report.tables["summary"]
    for k in ("repeatability", "mle", "matching_score", "mAP", "homography_recall", "pose_recall"):
        if k in s:
            print(f"{k} {s[k]}")
    print(f"pairs {s['pairs']} skipped {s['skipped']}")
    return 0


def cmd_distill_check(args):
    from .distill import gradient_check_suite

    err = gradient_check_suite(args.seed, args.trials, args.step)
    print(f"max relative gradient error over {args.trials} batches: {err:.3e}")
    if err >= args.tol:
        print(f"hfloc: error: gradient check exceeds tolerance {args.tol:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "build-map": cmd_build_map,
    "map-stats": cmd_map_stats,
    "localize": cmd_localize,
    "eval-local": cmd_eval_local,
    "eval-loc": cmd_eval_loc,
    "distill-check": cmd_distill_check,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (HflocError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"hfloc: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
