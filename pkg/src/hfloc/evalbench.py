"""Local-feature metrics (repeatability, localization error, matching
score, mAP, homography and relative-pose recall) and localization recall
at distance/orientation tiers."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import AtInfinity, MissingGroundTruth, NoVisibleKeypoints, TooFewCorrespondences
from .geometry import Camera, Pose, normalize_homography, rotation_angle_deg
from .pose import RansacConfig, pnp_ransac

DEPTH_TOLERANCE = 0.05


# ---------------------------------------------------------------------------
# ground truth


@dataclass
class HomographyGT:
    """Maps pixels of image A to image B.  ``size_*`` are (width, height)."""
    H: np.ndarray
    size_a: tuple
    size_b: tuple

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(self.H)) <= 1e-12:
            raise ValueError("homography is singular")

    def inverse(self):
        return HomographyGT(np.linalg.inv(self.H), self.size_b, self.size_a)

    def warp(self, kps):
        """(projected (N, 2), visible (N,)) for keypoints of A seen in B."""
        kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
        ph = np.column_stack([kps, np.ones(len(kps))]) @ self.H.T
        ok = np.abs(ph[:, 2]) > 1e-12
        z = np.where(ok, ph[:, 2], 1.0)
        proj = ph[:, :2] / z[:, None]
        proj[~ok] = np.nan
        return proj, ok & _inside(proj, self.size_b)

    def warp_inverse(self, kps):
        return self.inverse().warp(kps)


@dataclass
class DepthGT:
    """Depth of image A plus the relative pose A to B (x_b = R x_a + t).

    ``depth_b`` enables the depth-consistency check A to B and makes the
    B to A direction available; without it only A's keypoints are judged.
    """
    depth_a: np.ndarray
    pose_ab: Pose
    camera_a: Camera
    camera_b: Camera
    depth_b: Optional[np.ndarray] = None

    def inverse(self):
        if self.depth_b is None:
            raise ValueError("inverting depth ground truth needs depth_b")
        return DepthGT(self.depth_b, self.pose_ab.inverse(), self.camera_b, self.camera_a, self.depth_a)

    def warp(self, kps):
        kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
        X, valid = lift_depth(self.depth_a, self.camera_a, kps)
        xb = self.pose_ab.transform(X)
        z = xb[:, 2]
        front = valid & (z > 1e-9)
        zs = np.where(front, z, 1.0)
        xn = xb[:, :2] / zs[:, None]
        proj = self.camera_b.distort(xn)
        proj[~front] = np.nan
        vis = front & _inside(proj, (self.camera_b.width, self.camera_b.height))
        if self.depth_b is not None:
            db = depth_lookup(self.depth_b, proj)
            vis &= (db > 0) & (np.abs(z - db) <= DEPTH_TOLERANCE * np.where(db > 0, db, 1.0))
        return proj, vis

    def warp_inverse(self, kps):
        if self.depth_b is None:
            kps = np.asarray(kps).reshape(-1, 2)
            return np.full((len(kps), 2), np.nan), np.zeros(len(kps), dtype=bool)
        return self.inverse().warp(kps)


def _inside(p, size):
    w, h = size
    with np.errstate(invalid="ignore"):
        return np.isfinite(p).all(axis=1) & (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)


def depth_lookup(depth, pixels):
    """Nearest-pixel depth; 0 where outside the map or invalid."""
    depth = np.asarray(depth)
    h, w = depth.shape
    p = np.nan_to_num(np.asarray(pixels, dtype=np.float64), nan=-1.0)
    ix = np.rint(p[:, 0]).astype(np.int64)
    iy = np.rint(p[:, 1]).astype(np.int64)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros(len(p))
    out[ok] = depth[iy[ok], ix[ok]]
    out[~np.isfinite(out)] = 0.0
    return out


def lift_depth(depth, camera: Camera, pixels):
    """Camera-frame 3D points behind ``pixels``; rows with no depth are
    flagged invalid (and zero)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = depth_lookup(depth, pixels)
    valid = d > 0
    xn = camera.undistort(pixels)
    X = np.column_stack([xn * d[:, None], d])
    X[~valid] = 0.0
    return X, valid


# ---------------------------------------------------------------------------
# keypoint and descriptor metrics


def _nearest(proj, kps):
    """Distance and index of the nearest keypoint for each projected point."""
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    dist = np.full(len(proj), np.inf)
    idx = np.full(len(proj), -1, dtype=np.int64)
    ok = np.isfinite(proj).all(axis=1)
    if len(kps) and ok.any():
        d, i = cKDTree(kps).query(proj[ok], k=1)
        dist[ok], idx[ok] = d, i
    return dist, idx


def keypoint_metrics(kps_a, kps_b, gt, eps=3.0):
    """(repeatability, MLE) for one pair; each keypoint is judged on its own,
    so several may share one counterpart."""
    kps_a = np.asarray(kps_a, dtype=np.float64).reshape(-1, 2)
    kps_b = np.asarray(kps_b, dtype=np.float64).reshape(-1, 2)
    proj_a, vis_a = gt.warp(kps_a)
    proj_b, vis_b = gt.warp_inverse(kps_b)
    nv = int(vis_a.sum() + vis_b.sum())
    if nv == 0:
        raise NoVisibleKeypoints("no keypoint reprojects into the other image")
    da, _ = _nearest(proj_a[vis_a], kps_b)
    db, _ = _nearest(proj_b[vis_b], kps_a)
    d = np.concatenate([da, db])
    correct = d <= eps
    rep = correct.sum() / nv
    mle = float(d[correct].mean()) if correct.any() else float("nan")
    return float(rep), mle


def average_precision(distances, correct):
    """All-points interpolated AP of matches ranked by ascending distance."""
    distances = np.asarray(distances, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    npos = int(correct.sum())
    if npos == 0:
        return 0.0
    order = np.argsort(distances, kind="stable")
    tp = np.cumsum(correct[order])
    precision = tp / np.arange(1, len(order) + 1)
    recall = tp / npos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(dr * envelope))


def nn_matches(desc_a, desc_b):
    """Descriptor nearest neighbor in B for every row of A, with L2
    distances; ties go to the smaller index."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None] - 2.0 * a @ b.T
    nn = np.argmin(d2, axis=1)
    return nn, np.sqrt(np.maximum(0.0, d2[np.arange(len(a)), nn]))


def mutual_nn_matches(desc_a, desc_b):
    nn_ab, _ = nn_matches(desc_a, desc_b)
    nn_ba, _ = nn_matches(desc_b, desc_a)
    ia = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(nn_ab)))
    return ia, nn_ab[ia]


def _direction(kps_src, desc_src, kps_dst, desc_dst, proj, vis, eps):
    idx = np.flatnonzero(vis)
    if len(idx) == 0 or len(kps_dst) == 0:
        return 0, 0, np.zeros(0), np.zeros(0, dtype=bool)
    nn, d = nn_matches(desc_src[idx], desc_dst)
    err = np.linalg.norm(np.asarray(kps_dst, dtype=np.float64)[nn] - proj[idx], axis=1)
    ok = err <= eps
    return int(ok.sum()), len(idx), d, ok


def descriptor_metrics(feat_a, feat_b, gt, eps=3.0):
    """(matching score, mAP) averaged over both matching directions.

    ``feat_*`` are anything with ``keypoints`` and ``descriptors``.
    """
    ka = np.asarray(feat_a.keypoints, dtype=np.float64)
    kb = np.asarray(feat_b.keypoints, dtype=np.float64)
    proj_a, vis_a = gt.warp(ka)
    proj_b, vis_b = gt.warp_inverse(kb)
    dirs = []
    if vis_a.any():
        dirs.append(_direction(ka, feat_a.descriptors, kb, feat_b.descriptors, proj_a, vis_a, eps))
    if vis_b.any():
        dirs.append(_direction(kb, feat_b.descriptors, ka, feat_a.descriptors, proj_b, vis_b, eps))
    if not dirs:
        raise NoVisibleKeypoints("no keypoint reprojects into the other image")
    ms = np.mean([c / n for c, n, _, _ in dirs])
    ap = np.mean([average_precision(d, ok) for _, _, d, ok in dirs])
    return float(ms), float(ap)


# ---------------------------------------------------------------------------
# homography estimation


def _similarity_normalizer(p):
    c = p.mean(axis=0)
    s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _dlt_rows(a, b):
    """DLT design matrices for batches of correspondences: (..., 2n, 9)."""
    x, y = a[..., 0], a[..., 1]
    u, v = b[..., 0], b[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def homography_dlt(pts_a, pts_b):
    """Normalized DLT from >= 4 correspondences (least squares if more)."""
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    Ta, Tb = _similarity_normalizer(pts_a), _similarity_normalizer(pts_b)
    na = pts_a @ Ta[:2, :2].T + Ta[:2, 2]
    nb = pts_b @ Tb[:2, :2].T + Tb[:2, 2]
    h = np.linalg.svd(_dlt_rows(na, nb))[2][-1].reshape(3, 3)
    return normalize_homography(np.linalg.inv(Tb) @ h @ Ta)


def _transfer_errors(Hs, a, b):
    """Forward transfer error of every hypothesis, (B, N); inf at infinity."""
    ah = np.column_stack([a, np.ones(len(a))])
    ph = np.einsum("bij,nj->bni", Hs, ah)
    z = ph[..., 2]
    ok = np.abs(z) > 1e-12
    zs = np.where(ok, z, 1.0)
    err = np.hypot(ph[..., 0] / zs - b[:, 0], ph[..., 1] / zs - b[:, 1])
    return np.where(ok, err, np.inf)


def ransac_homography(pts_a, pts_b, thresh=3.0, seed=0, max_iters=2000, confidence=0.999, batch=256):
    """Returns (H, inlier mask) or (None, empty mask) with fewer than 4
    matches.  Hypotheses are solved in batches with one stacked SVD."""
    a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = len(a)
    if n < 4:
        return None, np.zeros(n, dtype=bool)
    rng = np.random.default_rng(seed)
    Ta, Tb = _similarity_normalizer(a), _similarity_normalizer(b)
    na = a @ Ta[:2, :2].T + Ta[:2, 2]
    nb = b @ Tb[:2, :2].T + Tb[:2, 2]
    Tb_inv = np.linalg.inv(Tb)
    best_count, best_mean, best_inl = -1, np.inf, None
    needed, done = max_iters, 0
    while done < min(needed, max_iters):
        m = min(batch, max_iters - done)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :4]
        h = np.linalg.svd(_dlt_rows(na[idx], nb[idx]))[2][:, -1].reshape(m, 3, 3)
        Hs = Tb_inv @ h @ Ta
        err = _transfer_errors(Hs, a, b)
        inl = err <= thresh
        counts = inl.sum(axis=1)
        means = np.where(counts > 0, np.where(inl, err, 0).sum(axis=1) / np.maximum(counts, 1), np.inf)
        for k in range(m):
            if counts[k] > best_count or (counts[k] == best_count and means[k] < best_mean):
                best_count, best_mean, best_inl = int(counts[k]), means[k], inl[k]
        done += m
        w = best_count / n
        if w >= 1.0:
            break
        if w > 0:
            needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w ** 4)))
    if best_count < 4:
        return None, np.zeros(n, dtype=bool)
    H = homography_dlt(a[best_inl], b[best_inl])
    inl = _transfer_errors(H[None], a, b)[0] <= thresh
    if inl.sum() < best_count:
        inl = best_inl
    return H, inl


def corner_error(H_est, H_gt, size):
    """Mean distance between the image corners mapped by both homographies."""
    w, h = size
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    err = _transfer_errors(np.asarray(H_est)[None], corners, _warp_all(H_gt, corners))[0]
    return float(err.mean())


def _warp_all(H, p):
    ph = np.column_stack([p, np.ones(len(p))]) @ np.asarray(H).T
    if np.any(np.abs(ph[:, 2]) <= 1e-12):
        raise AtInfinity("corner maps to infinity")
    return ph[:, :2] / ph[:, 2:]


def homography_recall(matches, gts, sizes, thresh=3.0, inlier_px=3.0, seed=0, max_iters=2000):
    """Fraction of pairs whose estimated homography moves the corners of
    image A by less than ``thresh`` px on average.

    ``matches[i]`` is (pts_a, pts_b); pairs with < 4 matches count wrong.
    """
    correct = []
    for i, ((pa, pb), H_gt, size) in enumerate(zip(matches, gts, sizes)):
        H, _ = ransac_homography(pa, pb, inlier_px, np.random.SeedSequence([seed, i]), max_iters)
        ok = False
        if H is not None:
            try:
                ok = corner_error(H, H_gt, size) < thresh
            except AtInfinity:
                ok = False
        correct.append(ok)
    return float(np.mean(correct)) if correct else 0.0, correct


# ---------------------------------------------------------------------------
# relative pose


@dataclass
class RelPoseProblem:
    pixels_b: np.ndarray  # (N, 2)
    points_a: np.ndarray  # (N, 3) in A's camera frame
    camera_b: Camera
    gt: Pose  # A to B


def pose_errors(est: Pose, gt: Pose):
    """(camera-center distance, rotation angle in degrees)."""
    return float(np.linalg.norm(est.center - gt.center)), rotation_angle_deg(est.qvec, gt.qvec)


def relpose_recall(problems, dist_m=3.0, orient_deg=1.0, cfg: RansacConfig = None, seed=0):
    cfg = cfg or RansacConfig()
    correct = []
    for i, pb in enumerate(problems):
        rc = RansacConfig(cfg.reproj_px, cfg.min_inliers, cfg.max_iters, cfg.confidence,
                          int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), cfg.refine_iters)
        try:
            est = pnp_ransac(pb.camera_b, pb.pixels_b, pb.points_a, rc)
        except TooFewCorrespondences:
            correct.append(False)
            continue
        if not est.success:
            correct.append(False)
            continue
        dt, dr = pose_errors(est.pose, pb.gt)
        correct.append(dt < dist_m and dr < orient_deg)
    return float(np.mean(correct)) if correct else 0.0, correct


# ---------------------------------------------------------------------------
# localization recall


@dataclass(frozen=True)
class ThresholdTriple:
    tiers: tuple = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))

    def __post_init__(self):
        tiers = tuple((float(d), float(o)) for d, o in self.tiers)
        if len(tiers) != 3:
            raise ValueError("need exactly three (distance, orientation) tiers")
        for (d0, o0), (d1, o1) in zip(tiers, tiers[1:]):
            if not (d1 > d0 and o1 > o0):
                raise ValueError("tiers must increase strictly in distance and orientation")
        object.__setattr__(self, "tiers", tiers)

    @classmethod
    def parse(cls, text):
        """``"0.25:2,0.5:5,5:10"``"""
        tiers = []
        for part in text.split(","):
            d, o = part.split(":")
            tiers.append((float(d), float(o)))
        return cls(tuple(tiers))


@dataclass
class QueryOutcome:
    image_id: str
    success: bool
    pose: Pose


def localization_errors(results, gt_poses):
    """Per-result (position, orientation) errors, inf for failures."""
    dist = np.full(len(results), np.inf)
    ori = np.full(len(results), np.inf)
    for i, r in enumerate(results):
        if r.image_id not in gt_poses:
            raise MissingGroundTruth(f"no ground-truth pose for {r.image_id}")
        if r.success:
            dist[i], ori[i] = pose_errors(r.pose, gt_poses[r.image_id])
    return dist, ori


def localization_recall(results, gt_poses, thresholds: ThresholdTriple = ThresholdTriple()):
    """Percentage of queries within each (distance, orientation) tier."""
    dist, ori = localization_errors(results, gt_poses)
    if len(results) == 0:
        return [0.0, 0.0, 0.0]
    return [100.0 * float(np.mean((dist <= d) & (ori <= o))) for d, o in thresholds.tiers]


def cumulative_curve(results, gt_poses, max_distance=5.0, num=101, thresholds=None):
    """(thresholds, fraction of queries with position error <= threshold)."""
    dist, _ = localization_errors(results, gt_poses)
    if thresholds is None:
        thresholds = np.linspace(0.0, max_distance, num)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(dist) == 0:
        return thresholds, np.zeros(len(thresholds))
    s = np.sort(dist)
    return thresholds, np.searchsorted(s, thresholds, side="right") / len(s)


def write_curve_csv(f, thresholds, fractions):
    """Write ``threshold_m,fraction`` rows to an open text file."""
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["threshold_m", "fraction"])
    for t, v in zip(thresholds, fractions):
        w.writerow([repr(float(t)), repr(float(v))])


# ---------------------------------------------------------------------------
# pair-level evaluation and reports


@dataclass
class EvalReport:
    tables: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"tables": self.tables, "curves": self.curves, "metadata": self.metadata},
                          indent=2, sort_keys=True)


@dataclass
class PairResult:
    pair_id: str
    repeatability: float = float("nan")
    mle: float = float("nan")
    matching_score: float = float("nan")
    mAP: float = float("nan")
    pose_correct: bool = False
    skipped: bool = False


def evaluate_pair(pair_id, feat_a, feat_b, gt, mode, eps_kp, eps_desc, seed=0, pose_cfg=None):
    """All local metrics for one pair.  Pose uses mutual nearest neighbors."""
    out = PairResult(pair_id)
    try:
        out.repeatability, out.mle = keypoint_metrics(feat_a.keypoints, feat_b.keypoints, gt, eps_kp)
        out.matching_score, out.mAP = descriptor_metrics(feat_a, feat_b, gt, eps_desc)
    except NoVisibleKeypoints:
        out.skipped = True
    ia, ib = mutual_nn_matches(feat_a.descriptors, feat_b.descriptors)
    pa = np.asarray(feat_a.keypoints)[ia]
    pb = np.asarray(feat_b.keypoints)[ib]
    if mode == "homography":
        H, _ = ransac_homography(pa, pb, 3.0, seed)
        if H is not None:
            try:
                out.pose_correct = corner_error(H, gt.H, gt.size_a) < 3.0
            except AtInfinity:
                pass
    else:
        X, valid = lift_depth(gt.depth_a, gt.camera_a, pa)
        prob = RelPoseProblem(pb[valid], X[valid], gt.camera_b, gt.pose_ab)
        _, ok = relpose_recall([prob], cfg=pose_cfg, seed=seed)
        out.pose_correct = ok[0]
    return out


def evaluate_pairs(jobs, mode, eps_kp, eps_desc, seed=0, threads=1, pose_cfg=None):
    """``jobs`` are (pair_id, feat_a, feat_b, gt); reduction follows input
    order regardless of ``threads``."""
    def run(args):
        i, (pid, fa, fb, gt) = args
        pair_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        return evaluate_pair(pid, fa, fb, gt, mode, eps_kp, eps_desc, pair_seed, pose_cfg)

    jobs = list(enumerate(jobs))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    return summarize_pairs(results, mode, eps_kp, eps_desc)


def summarize_pairs(results, mode, eps_kp, eps_desc):
    used = [r for r in results if not r.skipped]

    def mean(key):
        v = np.array([getattr(r, key) for r in used], dtype=np.float64)
        v = v[np.isfinite(v)]
        return float(v.mean()) if len(v) else None

    pose_key = "homography_recall" if mode == "homography" else "pose_recall"
    table = {
        "repeatability": mean("repeatability"),
        "mle": mean("mle"),
        "matching_score": mean("matching_score"),
        "mAP": mean("mAP"),
        pose_key: float(np.mean([r.pose_correct for r in results])) if results else None,
        "pairs": len(results),
        "skipped": len(results) - len(used),
    }
    per_pair = [{"pair_id": r.pair_id, "repeatability": _num(r.repeatability), "mle": _num(r.mle),
                 "matching_score": _num(r.matching_score), "mAP": _num(r.mAP),
                 "pose_correct": bool(r.pose_correct), "skipped": r.skipped} for r in results]
    meta = {"mode": mode, "eps_keypoint": eps_kp, "eps_descriptor": eps_desc,
            "repeatability_counting": "many-to-one", "ap": "all-points interpolated"}
    return EvalReport({"summary": table, "pairs": per_pair}, {}, meta)


def _num(x):
    return None if x is None or not np.isfinite(x) else float(x)
