"""Rigid transforms, pinhole cameras, triangulation and homographies.

Poses follow the COLMAP convention: they map world points into the camera
frame, ``x_cam = R @ x_world + t``, with the rotation stored as a unit
quaternion in (w, x, y, z) order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AtInfinity, BehindCamera, DegenerateBaseline, RayDivergence

MIN_DEPTH = 1e-9


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(diag))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def axis_angle_to_matrix(rvec):
    rvec = np.asarray(rvec, dtype=np.float64)
    theta = np.linalg.norm(rvec)
    if theta < 1e-12:
        K = skew(rvec)
        return np.eye(3) + K + 0.5 * K @ K
    k = rvec / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    qvec: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    tvec: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.qvec, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be finite and non-zero")
        t = np.asarray(self.tvec, dtype=np.float64).reshape(3)
        # leave unit quaternions untouched so that re-reading a pose is bit-exact
        if abs(n - 1.0) > 4 * np.finfo(np.float64).eps:
            q = q / n
        object.__setattr__(self, "qvec", q.copy())
        object.__setattr__(self, "tvec", t.copy())

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def R(self):
        return quat_to_matrix(self.qvec)

    @property
    def center(self):
        return -self.R.T @ self.tvec

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.qvec, other.qvec)
        t = self.R @ other.tvec + self.tvec
        return Pose(q, t)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.qvec)
        return Pose(qi, -quat_to_matrix(qi) @ self.tvec)

    def transform(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.tvec

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.qvec, other.qvec) and np.array_equal(self.tvec, other.tvec)

    def __hash__(self):
        return hash((self.qvec.tobytes(), self.tvec.tobytes()))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with an optional single radial distortion term."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def distort(self, xn):
        """Normalized image coordinates -> pixels."""
        xn = np.asarray(xn, dtype=np.float64)
        if self.k1:
            r2 = np.sum(xn * xn, axis=-1, keepdims=True)
            xn = xn * (1.0 + self.k1 * r2)
        return np.stack([self.fx * xn[..., 0] + self.cx, self.fy * xn[..., 1] + self.cy], axis=-1)

    def undistort(self, px, iterations=20):
        """Pixels -> undistorted normalized coordinates."""
        px = np.asarray(px, dtype=np.float64)
        xd = np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1)
        if not self.k1:
            return xd
        xn = xd.copy()
        for _ in range(iterations):
            r2 = np.sum(xn * xn, axis=-1, keepdims=True)
            xn = xd / (1.0 + self.k1 * r2)
        return xn

    def ideal_pixels(self, px):
        """Pixels with the radial term removed (pure pinhole geometry)."""
        xn = self.undistort(px)
        return np.stack([self.fx * xn[..., 0] + self.cx, self.fy * xn[..., 1] + self.cy], axis=-1)

    def in_image(self, px):
        px = np.asarray(px)
        return (px[..., 0] >= 0) & (px[..., 0] < self.width) & (px[..., 1] >= 0) & (px[..., 1] < self.height)

    def to_line(self, image_id):
        parts = [image_id, "PINHOLE", str(self.width), str(self.height)]
        parts += [repr(float(v)) for v in (self.fx, self.fy, self.cx, self.cy)]
        if self.k1:
            parts.append(repr(float(self.k1)))
        return " ".join(parts)


def project(pose: Pose, camera: Camera, point):
    """Project one world point; raises BehindCamera for z <= 1e-9."""
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    xc = pose.R @ point + pose.tvec
    if xc[2] <= MIN_DEPTH:
        raise BehindCamera(f"depth {xc[2]:.3g} <= {MIN_DEPTH}")
    return camera.distort(xc[:2] / xc[2])


def project_points(pose: Pose, camera: Camera, points):
    """Vectorized projection. Returns (pixels, in_front mask); pixels of
    points behind the camera are NaN."""
    xc = pose.transform(points)
    front = xc[:, 2] > MIN_DEPTH
    uv = np.full((len(xc), 2), np.nan)
    if front.any():
        uv[front] = camera.distort(xc[front, :2] / xc[front, 2:3])
    return uv, front


def triangulate_dlt(poses, normalized):
    """Linear triangulation from V >= 2 views.

    poses: sequence of Pose; normalized: (V, 2) undistorted normalized
    coordinates. Minimizes the algebraic error of the stacked DLT system.
    """
    rows = []
    for pose, x in zip(poses, normalized):
        P = np.hstack([pose.R, pose.tvec[:, None]])
        rows.append(x[0] * P[2] - P[0])
        rows.append(x[1] * P[2] - P[1])
    A = np.asarray(rows)
    # row scaling improves conditioning without changing the solution
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-15:
        raise AtInfinity("triangulated point at infinity")
    return X[:3] / X[3]


def ray_angle_deg(center_a, center_b, point):
    ra = point - center_a
    rb = point - center_b
    c = ra @ rb / (np.linalg.norm(ra) * np.linalg.norm(rb))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def triangulate_two_view(pose_a, pose_b, camera_a, camera_b, px_a, px_b, min_angle_deg=1.0):
    """Triangulate one point seen in two calibrated views.

    Returns the world point and the reprojection residual (pixels) in
    each view.
    """
    ca, cb = pose_a.center, pose_b.center
    if np.linalg.norm(ca - cb) <= 1e-6:
        raise DegenerateBaseline("camera centers coincide")
    xa = camera_a.undistort(np.asarray(px_a, dtype=np.float64))
    xb = camera_b.undistort(np.asarray(px_b, dtype=np.float64))
    X = triangulate_dlt([pose_a, pose_b], np.stack([xa, xb]))
    angle = ray_angle_deg(ca, cb, X)
    if angle < min_angle_deg:
        raise RayDivergence(f"triangulation angle {angle:.3f} deg < {min_angle_deg}")
    res = np.array([
        np.linalg.norm(project(pose_a, camera_a, X) - px_a),
        np.linalg.norm(project(pose_b, camera_b, X) - px_b),
    ])
    return X, res


def rotation_angle_deg(q_a, q_b):
    """Angle of ``r_a · r_b⁻¹`` in degrees, in [0, 180]."""
    q_err = quat_multiply(np.asarray(q_a, dtype=np.float64), quat_conjugate(np.asarray(q_b, dtype=np.float64)))
    q_err /= np.linalg.norm(q_err)
    s = min(1.0, float(np.linalg.norm(q_err[1:])))
    return float(np.degrees(2.0 * np.arcsin(s)))


def normalize_homography(H):
    H = np.asarray(H, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(H)) <= 1e-12:
        raise ValueError("homography is singular")
    if H[2, 2] != 0:
        H = H / H[2, 2]
    return H


def apply_homography(H, p):
    H = np.asarray(H, dtype=np.float64)
    v = H @ np.array([p[0], p[1], 1.0])
    if abs(v[2]) <= 1e-12:
        raise AtInfinity("point maps to infinity")
    return v[:2] / v[2]


def warp_points(H, pts):
    """Vectorized apply_homography; rows mapping to infinity become NaN."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    v = np.hstack([pts, np.ones((len(pts), 1))]) @ np.asarray(H, dtype=np.float64).T
    out = np.full((len(pts), 2), np.nan)
    ok = np.abs(v[:, 2]) > 1e-12
    out[ok] = v[ok, :2] / v[ok, 2:3]
    return out
