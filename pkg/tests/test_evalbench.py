import io
from types import SimpleNamespace

import numpy as np
import pytest

from hfloc.errors import MissingGroundTruth, NoVisibleKeypoints
from hfloc.evalbench import (DepthGT, HomographyGT, QueryOutcome, RelPoseProblem, ThresholdTriple,
                             average_precision, corner_error, cumulative_curve, descriptor_metrics,
                             evaluate_pairs, homography_dlt, homography_recall, keypoint_metrics,
                             localization_recall, mutual_nn_matches, ransac_homography, relpose_recall,
                             write_curve_csv)
from hfloc.geometry import Camera, Pose, axis_angle_to_matrix, project_points

from conftest import random_pose

SIZE = (640, 480)
IDENT = HomographyGT(np.eye(3), SIZE, SIZE)


def feats(kps, desc):
    return SimpleNamespace(keypoints=np.asarray(kps, dtype=np.float64), descriptors=np.asarray(desc, dtype=np.float64))


def grid(step=20):
    xs, ys = np.meshgrid(np.arange(10, 630, step), np.arange(10, 470, step))
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)


def random_h(rng, jitter=30.0):
    src = np.array([[0, 0], [639, 0], [0, 479], [639, 479]], dtype=np.float64)
    return homography_dlt(src, src + rng.uniform(-jitter, jitter, size=(4, 2)))


def apply_h(H, p):
    ph = np.column_stack([p, np.ones(len(p))]) @ H.T
    return ph[:, :2] / ph[:, 2:]


# -- repeatability / MLE -----------------------------------------------------


def test_identical_sets():
    k = grid()
    assert keypoint_metrics(k, k, IDENT, 3.0) == (1.0, 0.0)


def test_offset_sparse_grid():
    k = grid(40)
    rep, mle = keypoint_metrics(k, k + [5.0, 0.0], IDENT, 3.0)
    assert rep == 0.0 and np.isnan(mle)


def rep_oracle(ka, kb, H, eps):
    hits, dists, nv = 0, [], 0
    for src, dst, M in ((ka, kb, H), (kb, ka, np.linalg.inv(H))):
        for p in src:
            q = apply_h(M, p[None])[0]
            if not (0 <= q[0] < SIZE[0] and 0 <= q[1] < SIZE[1]):
                continue
            nv += 1
            d = min(np.hypot(*(q - r)) for r in dst)
            if d <= eps:
                hits += 1
                dists.append(d)
    return hits / nv, np.mean(dists)


def test_repeatability_oracle(rng):
    for _ in range(5):
        H = random_h(rng)
        ka = rng.uniform([0, 0], SIZE, size=(60, 2))
        kb = apply_h(H, ka) + rng.normal(scale=2.0, size=(60, 2))
        kb = np.vstack([kb, rng.uniform([0, 0], SIZE, size=(20, 2))])
        rep, mle = keypoint_metrics(ka, kb, HomographyGT(H, SIZE, SIZE), 3.0)
        r0, m0 = rep_oracle(ka, kb, H, 3.0)
        assert abs(rep - r0) < 1e-12 and abs(mle - m0) < 1e-9


def test_swap_symmetry(rng):
    H = random_h(rng)
    ka = rng.uniform([0, 0], SIZE, size=(80, 2))
    kb = apply_h(H, ka[:50]) + rng.normal(size=(50, 2))
    gt = HomographyGT(H, SIZE, SIZE)
    a = keypoint_metrics(ka, kb, gt)
    b = keypoint_metrics(kb, ka, gt.inverse())
    assert np.allclose(a, b)


def test_no_visible():
    far = HomographyGT(np.array([[1, 0, 5000], [0, 1, 0], [0, 0, 1.0]]), SIZE, SIZE)
    with pytest.raises(NoVisibleKeypoints):
        keypoint_metrics(grid(), grid(), far)


# -- matching score / mAP ----------------------------------------------------


def test_one_hot_descriptors():
    k = grid(60)
    d = np.eye(len(k))
    assert descriptor_metrics(feats(k, d), feats(k, d), IDENT) == (1.0, 1.0)


def test_random_descriptors_far_keypoints(rng):
    k = grid(60)
    d = rng.normal(size=(len(k), 32))
    perm = np.roll(np.arange(len(k)), 1)  # every NN lands on another grid cell
    ms, _ = descriptor_metrics(feats(k, d), feats(k, d[perm]), IDENT)
    assert ms == 0.0


def ap_oracle(dist, correct):
    """Precision at every cut of the ranking, with the envelope taken by brute force."""
    order = np.argsort(dist, kind="stable")
    c = np.asarray(correct)[order]
    npos = c.sum()
    P = [c[:i + 1].sum() / (i + 1) for i in range(len(c))]
    R = [c[:i + 1].sum() / npos for i in range(len(c))]
    ap, prev = 0.0, 0.0
    for i in range(len(c)):
        if R[i] > prev:
            ap += (R[i] - prev) * max(P[j] for j in range(len(c)) if R[j] >= R[i])
            prev = R[i]
    return ap


def test_ap_oracle(rng):
    for _ in range(20):
        d = rng.random(300)
        c = rng.random(300) < 1 - d  # correct matches tend to be close
        assert abs(average_precision(d, c) - ap_oracle(d, c)) < 1e-12


def test_ap_edges():
    assert average_precision([0.1, 0.2], [False, False]) == 0.0
    assert average_precision([0.1, 0.2, 0.3], [True, True, False]) == 1.0
    assert abs(average_precision([0.1, 0.2], [False, True]) - 0.5) < 1e-12


def test_mutual_nn():
    a = np.eye(3)
    b = np.array([[1, 0, 0], [0.9, 0.1, 0], [0, 0, 1.0]])
    ia, ib = mutual_nn_matches(a, b)
    assert ia.tolist() == [0, 2] and ib.tolist() == [0, 2]


# -- homography --------------------------------------------------------------


def hom_problems(rng, n_pairs, n=200, inlier_frac=1.0, noise=0.0):
    matches, gts = [], []
    for _ in range(n_pairs):
        H = random_h(rng)
        pa = rng.uniform([0, 0], SIZE, size=(n, 2))
        pb = apply_h(H, pa) + rng.normal(scale=noise, size=(n, 2)) if noise else apply_h(H, pa)
        n_out = int(round((1 - inlier_frac) * n))
        pb[:n_out] = rng.uniform([0, 0], SIZE, size=(n_out, 2))
        matches.append((pa, pb))
        gts.append(H)
    return matches, gts


def test_dlt_exact(rng):
    H = random_h(rng)
    pa = rng.uniform([0, 0], SIZE, size=(10, 2))
    assert np.allclose(homography_dlt(pa, apply_h(H, pa)), H / H[2, 2], atol=1e-8)
    assert corner_error(H, H, SIZE) < 1e-9


def test_homography_recall_exact(rng):
    m, g = hom_problems(rng, 20)
    assert homography_recall(m, g, [SIZE] * 20)[0] == 1.0


def test_homography_recall_random(rng):
    m, g = hom_problems(rng, 20, inlier_frac=0.0)
    assert homography_recall(m, g, [SIZE] * 20, max_iters=500)[0] <= 0.05


def test_homography_recall_outliers(rng):
    m, g = hom_problems(rng, 40, inlier_frac=0.6, noise=0.5)
    assert homography_recall(m, g, [SIZE] * 40)[0] >= 0.95


def test_ransac_few_points():
    H, inl = ransac_homography(np.zeros((3, 2)), np.zeros((3, 2)))
    assert H is None and inl.shape == (3,)


# -- relative pose -----------------------------------------------------------


CAM = Camera(640, 480, 500.0, 500.0, 320.0, 240.0)


def pose_problem(rng, n=150, outlier_frac=0.0, noise=0.0):
    rel = Pose.from_matrix(axis_angle_to_matrix(rng.normal(scale=0.1, size=3)), rng.normal(scale=0.5, size=3))
    # points in A's frame that land in B
    Xb = np.column_stack([rng.uniform(-4, 4, (n, 2)), rng.uniform(4, 12, n)])
    R, t = rel.R, rel.tvec
    Xa = (Xb - t) @ R
    uv, _ = project_points(rel, CAM, Xa)
    uv = uv + rng.normal(scale=noise, size=uv.shape) if noise else uv
    n_out = int(round(outlier_frac * n))
    uv[:n_out] = rng.uniform([0, 0], [640, 480], size=(n_out, 2))
    return RelPoseProblem(uv, Xa, CAM, rel)


def test_relpose_noiseless(rng):
    probs = [pose_problem(rng) for _ in range(10)]
    assert relpose_recall(probs)[0] == 1.0


def test_relpose_outliers(rng):
    probs = [pose_problem(rng, outlier_frac=0.5, noise=1.0) for _ in range(20)]
    assert relpose_recall(probs)[0] >= 0.9


def test_relpose_all_outliers(rng):
    probs = [pose_problem(rng, outlier_frac=1.0) for _ in range(20)]
    assert relpose_recall(probs)[0] <= 0.05


# -- depth ground truth ------------------------------------------------------


def test_depth_identity_and_shift():
    depth = np.full((480, 640), 10.0)
    k = grid(50)
    gt = DepthGT(depth, Pose.identity(), CAM, CAM, depth)
    proj, vis = gt.warp(np.rint(k))
    assert vis.all() and np.allclose(proj, np.rint(k))
    shifted = DepthGT(depth, Pose(np.array([1.0, 0, 0, 0]), np.array([0.2, 0, 0])), CAM, CAM, depth)
    proj, _ = shifted.warp(np.rint(k))
    assert np.allclose(proj[:, 0] - np.rint(k)[:, 0], 500 * 0.2 / 10)
    assert np.allclose(keypoint_metrics(k, k, gt), (1.0, 0.0), atol=1e-9)


def test_depth_consistency_rejects_occlusion():
    depth = np.full((480, 640), 10.0)
    other = np.full((480, 640), 5.0)  # B sees something nearer
    gt = DepthGT(depth, Pose.identity(), CAM, CAM, other)
    _, vis = gt.warp(grid(50))
    assert not vis.any()


def test_depth_missing_b():
    depth = np.full((480, 640), 10.0)
    gt = DepthGT(depth, Pose.identity(), CAM, CAM)
    _, vis = gt.warp_inverse(grid(50))
    assert not vis.any()
    assert np.allclose(keypoint_metrics(grid(50), grid(50), gt), (1.0, 0.0), atol=1e-9)


def test_depth_holes():
    depth = np.zeros((480, 640))
    gt = DepthGT(depth, Pose.identity(), CAM, CAM)
    with pytest.raises(NoVisibleKeypoints):
        keypoint_metrics(grid(50), grid(50), gt)


# -- localization recall -----------------------------------------------------


def offset_pose(gt: Pose, dist, deg):
    dR = axis_angle_to_matrix(np.radians(deg) * np.array([0, 0, 1.0]))
    R = dR @ gt.R
    c = gt.center + np.array([dist, 0, 0])
    return Pose.from_matrix(R, -R @ c)


def hand_fixture(rng):
    gts = {f"q{i}": random_pose(rng) for i in range(4)}
    errs = [(0.1, 1.0), (0.4, 4.0), (3.0, 8.0), None]
    res = []
    for (k, g), e in zip(gts.items(), errs):
        res.append(QueryOutcome(k, e is not None, offset_pose(g, *e) if e else Pose.identity()))
    return res, gts


def test_recall_hand_fixture(rng):
    res, gts = hand_fixture(rng)
    assert np.allclose(localization_recall(res, gts), [25, 50, 75])


def test_custom_thresholds(rng):
    res, gts = hand_fixture(rng)
    th = ThresholdTriple.parse("1:5,2:6,4:9")
    assert np.allclose(localization_recall(res, gts, th), [50, 50, 75])
    with pytest.raises(ValueError):
        ThresholdTriple.parse("1:5,0.5:6,4:9")


def test_curve(rng):
    gts = {f"q{i}": random_pose(rng) for i in range(3)}
    res = [QueryOutcome(k, True, offset_pose(g, d, 0)) for (k, g), d in zip(gts.items(), [1.0, 2.0, 3.0])]
    th, frac = cumulative_curve(res, gts, thresholds=[2.5])
    assert abs(frac[0] - 2 / 3) < 1e-12
    fail = [QueryOutcome(r.image_id, False, r.pose) for r in res]
    assert np.all(cumulative_curve(fail, gts)[1] == 0)
    th, frac = cumulative_curve(res, gts)
    assert len(th) == 101 and np.all(np.diff(frac) >= 0)
    buf = io.StringIO()
    write_curve_csv(buf, th, frac)
    assert buf.getvalue().splitlines()[0] == "threshold_m,fraction"


def test_recall_matches_curve(rng):
    res, gts = hand_fixture(rng)
    th = ThresholdTriple(((0.5, 180.0), (1.0, 181.0), (4.0, 182.0)))
    rec = localization_recall(res, gts, th)
    _, frac = cumulative_curve(res, gts, thresholds=[0.5, 1.0, 4.0])
    assert np.allclose(rec, 100 * frac)


def test_missing_gt(rng):
    res, gts = hand_fixture(rng)
    del gts["q0"]
    with pytest.raises(MissingGroundTruth):
        localization_recall(res, gts)


def test_evaluate_pairs_threads(rng):
    jobs = []
    for i in range(6):
        H = random_h(rng)
        ka = rng.uniform([0, 0], SIZE, size=(100, 2))
        d = rng.normal(size=(100, 16))
        jobs.append((f"p{i}", feats(ka, d), feats(apply_h(H, ka), d), HomographyGT(H, SIZE, SIZE)))
    one = evaluate_pairs(jobs, "homography", 3.0, 3.0, seed=1, threads=1)
    four = evaluate_pairs(jobs, "homography", 3.0, 3.0, seed=1, threads=4)
    assert one.to_json() == four.to_json()
    s = one.tables["summary"]
    assert s["repeatability"] == 1.0 and s["matching_score"] == 1.0 and s["homography_recall"] == 1.0
