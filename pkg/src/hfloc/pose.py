"""Absolute pose from 2D-3D correspondences: P3P inside RANSAC, then
Gauss-Newton refinement on the inlier set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateConfiguration, TooFewCorrespondences
from .geometry import Camera, Pose, axis_angle_to_matrix, matrix_to_quat, quat_to_matrix


@dataclass(frozen=True)
class RansacConfig:
    reproj_px: float = 10.0
    min_inliers: int = 12
    max_iters: int = 5000
    confidence: float = 0.999
    seed: int = 0
    refine_iters: int = 10

    def __post_init__(self):
        if not self.reproj_px > 0:
            raise ValueError("reprojection threshold must be > 0")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray
    num_inliers: int
    mean_residual: float
    success: bool
    iterations: int = 0

    def same_as(self, other: "PoseEstimate") -> bool:
        """Bitwise equality of every field."""
        return (self.pose == other.pose and np.array_equal(self.inliers, other.inliers)
                and self.num_inliers == other.num_inliers and self.success == other.success
                and self.iterations == other.iterations
                and np.float64(self.mean_residual).tobytes() == np.float64(other.mean_residual).tobytes())


def _bearings(camera: Camera, pixels):
    xn = camera.undistort(pixels)
    b = np.column_stack([xn, np.ones(len(xn))])
    return b / np.linalg.norm(b, axis=1, keepdims=True), xn


def p3p_minimal(camera: Camera, pixels, points):
    """All poses consistent with three 2D-3D correspondences."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(3, 2)
    points = np.asarray(points, dtype=np.float64).reshape(3, 3)
    area = 0.5 * np.linalg.norm(np.cross(points[1] - points[0], points[2] - points[0]))
    if area <= 1e-9:
        raise DegenerateConfiguration("3D points are collinear")
    for i in range(3):
        for j in range(i + 1, 3):
            if np.allclose(pixels[i], pixels[j]):
                raise DegenerateConfiguration("pixels coincide")
    f, _ = _bearings(camera, pixels)
    Rs, ts, n = _kernels.p3p_solve(np.ascontiguousarray(points), np.ascontiguousarray(f))
    return [Pose.from_matrix(Rs[i], ts[i]) for i in range(n)]


def reprojection_errors(R, t, camera: Camera, xn_ideal_px, points):
    """Pinhole reprojection error against undistorted pixel observations;
    infinite for points behind the camera."""
    xc = points @ R.T + t
    z = xc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = camera.fx * xc[:, 0] / zs + camera.cx
    v = camera.fy * xc[:, 1] / zs + camera.cy
    err = np.hypot(u - xn_ideal_px[:, 0], v - xn_ideal_px[:, 1])
    return np.where(front, err, np.inf)


def draw_samples(rng, n, count):
    """``count`` triples of distinct indices in ``[0, n)``."""
    i0 = rng.integers(0, n, count)
    i1 = rng.integers(0, n - 1, count)
    i2 = rng.integers(0, n - 2, count)
    i1 = i1 + (i1 >= i0)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)
    return np.ascontiguousarray(np.column_stack([i0, i1, i2]), dtype=np.int64)


def refine_pose(R, t, camera: Camera, obs, points, iterations=10):
    """Gauss-Newton on pixel reprojection error; steps that do not lower
    the cost are rejected and end the loop.  Returns (R, t, iterations used)."""
    fx, fy = camera.fx, camera.fy

    def residual(R, t):
        xc = points @ R.T + t
        r = np.empty(2 * len(points))
        r[0::2] = fx * xc[:, 0] / xc[:, 2] + camera.cx - obs[:, 0]
        r[1::2] = fy * xc[:, 1] / xc[:, 2] + camera.cy - obs[:, 1]
        return r, xc

    r, xc = residual(R, t)
    cost = r @ r
    used = 0
    for _ in range(iterations):
        used += 1
        if np.any(xc[:, 2] <= 1e-9):
            break
        x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
        du = np.zeros((len(points), 3))
        dv = np.zeros((len(points), 3))
        du[:, 0] = fx / z
        du[:, 2] = -fx * x / z ** 2
        dv[:, 1] = fy / z
        dv[:, 2] = -fy * y / z ** 2
        # d xc / d omega = -[R X]_x
        rx = xc - t
        skew_cols = np.zeros((len(points), 3, 3))
        skew_cols[:, 0, 1], skew_cols[:, 0, 2] = rx[:, 2], -rx[:, 1]
        skew_cols[:, 1, 0], skew_cols[:, 1, 2] = -rx[:, 2], rx[:, 0]
        skew_cols[:, 2, 0], skew_cols[:, 2, 1] = rx[:, 1], -rx[:, 0]
        J = np.empty((2 * len(points), 6))
        J[0::2, :3] = np.einsum("ni,nij->nj", du, skew_cols)
        J[1::2, :3] = np.einsum("ni,nij->nj", dv, skew_cols)
        J[0::2, 3:] = du
        J[1::2, 3:] = dv
        try:
            delta = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        R_new = axis_angle_to_matrix(delta[:3]) @ R
        R_new = quat_to_matrix(matrix_to_quat(R_new))
        t_new = t + delta[3:]
        r_new, xc_new = residual(R_new, t_new)
        cost_new = r_new @ r_new
        if not cost_new < cost:
            break
        R, t, r, xc, cost = R_new, t_new, r_new, xc_new, cost_new
        if np.linalg.norm(delta) < 1e-15:
            break
    return R, t, used


def pnp_ransac(camera: Camera, pixels, points, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < 4 or len(pixels) != n:
        raise TooFewCorrespondences(f"need at least 4 correspondences, got {n}")
    bearings, xn = _bearings(camera, pixels)
    obs = np.ascontiguousarray(np.column_stack([camera.fx * xn[:, 0] + camera.cx, camera.fy * xn[:, 1] + camera.cy]))
    rng = np.random.default_rng(cfg.seed)
    samples = draw_samples(rng, n, cfg.max_iters)
    R, t, count, _, iters = _kernels.ransac_p3p(
        np.ascontiguousarray(bearings), points, obs, camera.fx, camera.fy, camera.cx, camera.cy,
        float(cfg.reproj_px), samples, float(cfg.confidence))
    if count == 0:
        return PoseEstimate(Pose(), np.zeros(0, dtype=np.int64), 0, float("inf"), False, int(iters))

    err = reprojection_errors(R, t, camera, obs, points)
    inl = err <= cfg.reproj_px
    # refine on the inliers; when the set grows, spend the rest of the
    # budget on the larger set so the fit is not biased to the P3P inliers
    budget = cfg.refine_iters
    while budget > 0 and inl.sum() >= 3:
        R2, t2, used = refine_pose(R, t, camera, obs[inl], points[inl], budget)
        budget -= used
        err2 = reprojection_errors(R2, t2, camera, obs, points)
        inl2 = err2 <= cfg.reproj_px
        if inl2.sum() < inl.sum():
            break
        grew = not np.array_equal(inl2, inl)
        R, t, err, inl = R2, t2, err2, inl2
        if not grew:
            break
    idx = np.flatnonzero(inl)
    k = len(idx)
    mean = float(err[idx].mean()) if k else float("inf")
    return PoseEstimate(Pose.from_matrix(R, t), idx, k, mean, k >= cfg.min_inliers, int(iters))
