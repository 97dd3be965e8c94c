"""Synthetic scenes with known geometry, used as ground truth for tests
and the ``hfloc synth`` command."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import NoVisiblePoints
from .features import LocalFeatureSet
from .geometry import Camera, Pose, project_points


@dataclass
class SceneSpec:
    num_points: int = 2000
    extent: float = 10.0
    num_db: int = 20
    num_queries: int = 10
    width: int = 640
    height: int = 480
    focal: float = 500.0
    ring_radius: float = 25.0
    jitter_pos: float = 0.5
    jitter_deg: float = 2.0
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    descriptor_noise: float = 0.1
    desc_dim: int = 128
    global_dim: int = 256
    global_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.outlier_fraction <= 1:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        if self.pixel_noise < 0 or self.descriptor_noise < 0 or self.global_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.num_points < 1 or self.desc_dim < 1 or self.global_dim < 1:
            raise ValueError("sizes must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**d)

    def camera(self):
        return Camera(self.width, self.height, self.focal, self.focal, self.width / 2.0, self.height / 2.0)


@dataclass
class Scene:
    spec: SceneSpec
    points: np.ndarray  # (P, 3)
    point_desc: np.ndarray  # (P, D) unit rows
    point_codes: np.ndarray  # (P, G) used to pool global descriptors
    db_poses: list
    query_poses: list
    camera: Camera

    @property
    def db_ids(self):
        return [f"db_{i:04d}" for i in range(len(self.db_poses))]

    @property
    def query_ids(self):
        return [f"q_{i:04d}" for i in range(len(self.query_poses))]


def look_at(center, target, up=(0.0, 0.0, 1.0), roll_deg=0.0):
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    if roll_deg:
        a = np.radians(roll_deg)
        Rz = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])
        R = Rz @ R
    return Pose.from_matrix(R, -R @ center)


def _ring_pose(rng, spec, angle):
    c = np.array([spec.ring_radius * np.cos(angle), spec.ring_radius * np.sin(angle), 0.0])
    c += rng.normal(scale=spec.jitter_pos, size=3)
    aim = rng.normal(scale=np.tan(np.radians(spec.jitter_deg)) * spec.ring_radius, size=3)
    return look_at(c, aim, roll_deg=rng.normal(scale=spec.jitter_deg))


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2.0
    pts = rng.uniform(-half, half, size=(spec.num_points, 3))
    desc = rng.normal(size=(spec.num_points, spec.desc_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    codes = rng.normal(size=(spec.num_points, spec.global_dim))
    db = [_ring_pose(rng, spec, 2 * np.pi * i / spec.num_db) for i in range(spec.num_db)]
    qs = [_ring_pose(rng, spec, 2 * np.pi * (j + 0.25) / max(spec.num_queries, 1)) for j in range(spec.num_queries)]
    return Scene(spec, pts, desc, codes, db, qs, spec.camera())


def view_seed(spec: SceneSpec, kind, i):
    return np.random.SeedSequence([spec.seed, kind, i])


def render_view(scene: Scene, pose: Pose, camera: Camera = None, spec: SceneSpec = None, seed=None,
                image_id="view"):
    """Features of ``scene`` seen from ``pose``.

    Returns (LocalFeatureSet, gt) where ``gt[k]`` is the scene point index
    behind keypoint ``k`` or -1 for outliers.
    """
    spec = spec or scene.spec
    camera = camera or scene.camera
    rng = np.random.default_rng(seed)
    uv, front = project_points(pose, camera, scene.points)
    if spec.pixel_noise > 0:
        uv = uv + rng.normal(scale=spec.pixel_noise, size=uv.shape)
    vis = np.flatnonzero(front & camera.in_image(np.nan_to_num(uv, nan=-1.0)))
    if len(vis) == 0:
        raise NoVisiblePoints("no scene point projects into the image")
    n = len(vis)
    kp = uv[vis]
    d = spec.desc_dim
    desc = scene.point_desc[vis] + spec.descriptor_noise * rng.normal(size=(n, d)) / np.sqrt(d)
    gt = vis.astype(np.int64)
    n_out = int(round(spec.outlier_fraction * n))
    if n_out:
        out = rng.choice(n, size=n_out, replace=False)
        kp[out] = rng.uniform([0, 0], [camera.width, camera.height], size=(n_out, 2))
        kp[out] = np.minimum(kp[out], np.array([camera.width, camera.height]) - 1e-6)
        desc[out] = rng.normal(size=(n_out, d))
        gt[out] = -1
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    scores = rng.uniform(0.5, 1.0, size=n)

    # near points dominate the pooled code, so nearby views look alike
    z = pose.transform(scene.points[vis])[:, 2]
    w = np.exp(-(z - z.min()) / (spec.extent / 4.0))
    g = w @ scene.point_codes[vis]
    g /= np.linalg.norm(g)
    if spec.global_noise > 0:
        g = g + spec.global_noise * rng.normal(size=g.shape) / np.sqrt(len(g))
        g /= np.linalg.norm(g)

    perm = rng.permutation(n)
    fs = LocalFeatureSet(image_id, kp[perm], scores[perm], desc[perm], g)
    return fs, gt[perm]


def render_all(scene: Scene):
    """Render every database and query view with per-view seeds."""
    db = {}
    for i, (name, pose) in enumerate(zip(scene.db_ids, scene.db_poses)):
        db[name] = render_view(scene, pose, seed=view_seed(scene.spec, 1, i), image_id=name)
    qs = {}
    for j, (name, pose) in enumerate(zip(scene.query_ids, scene.query_poses)):
        qs[name] = render_view(scene, pose, seed=view_seed(scene.spec, 2, j), image_id=name)
    return db, qs


def write_scene(out_dir, scene: Scene):
    """Write feature files, camera and pose lists and ground truth."""
    from .fileio import feature_path, write_cameras, write_features, write_poses

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    db, qs = render_all(scene)
    observations = {}
    for views in (db, qs):
        for name, (fs, gt) in views.items():
            write_features(feature_path(out / "features", name), fs)
            observations[name] = gt.tolist()
    cams = {name: scene.camera for name in list(db) + list(qs)}
    write_cameras(out / "cameras.txt", cams)
    write_poses(out / "db_poses.txt", dict(zip(scene.db_ids, scene.db_poses)))
    write_poses(out / "query_poses.txt", dict(zip(scene.query_ids, scene.query_poses)))
    (out / "db.txt").write_text("".join(f"{k}\n" for k in db), encoding="utf-8")
    (out / "queries.txt").write_text("".join(f"{k}\n" for k in qs), encoding="utf-8")
    gt = {"spec": asdict(scene.spec), "points": scene.points.tolist(), "observations": observations}
    (out / "observations.json").write_text(json.dumps(gt), encoding="utf-8")
    return out
