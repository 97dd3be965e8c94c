import numpy as np
import pytest

from hfloc.geometry import Camera, Pose, axis_angle_to_matrix
from hfloc.mapstore import build_map
from hfloc.retrieval import exhaustive_pairs
from hfloc.synth import SceneSpec, generate_scene, render_all


def random_pose(rng, center_scale=2.0):
    R = axis_angle_to_matrix(rng.normal(size=3))
    return Pose.from_matrix(R, rng.normal(scale=center_scale, size=3))


def built_scene(**kw):
    spec = SceneSpec(**kw)
    scene = generate_scene(spec)
    db, qs = render_all(scene)
    feats = {k: fs for k, (fs, _) in db.items()}
    poses = dict(zip(scene.db_ids, scene.db_poses))
    cams = {k: scene.camera for k in feats}
    smap = build_map(feats, poses, cams, exhaustive_pairs(list(feats)), pca_dim=1024)
    return scene, db, qs, smap


@pytest.fixture(scope="session")
def small_scene():
    """A quick 8-view scene with 400 points and its map."""
    return built_scene(num_points=400, num_db=8, num_queries=4, seed=3)


@pytest.fixture(scope="session")
def default_scene():
    return built_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cam():
    return Camera(640, 480, 500.0, 500.0, 320.0, 240.0)
