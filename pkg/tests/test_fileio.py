import numpy as np
import pytest

from hfloc.errors import CorruptFile, VersionMismatch
from hfloc.features import DenseDescriptorMap, LocalFeatureSet
from hfloc.fileio import (decode_features, encode_features, read_cameras, read_depth, read_list, read_poses,
                          write_cameras, write_depth, write_poses)
from hfloc.geometry import Camera, Pose


def test_features_roundtrip(rng):
    fs = LocalFeatureSet("img 1", rng.uniform(0, 100, (7, 2)), rng.uniform(size=7),
                         rng.normal(size=(7, 4)), rng.normal(size=3),
                         DenseDescriptorMap(rng.normal(size=(2, 3, 4)), 8))
    out = decode_features(encode_features(fs))
    assert out.image_id == "img 1"
    assert np.array_equal(out.keypoints, fs.keypoints.astype(np.float32))
    assert np.array_equal(out.descriptors, fs.descriptors.astype(np.float32))
    assert np.array_equal(out.dense.grid, fs.dense.grid.astype(np.float32)) and out.dense.stride == 8


def test_features_errors(rng):
    buf = encode_features(LocalFeatureSet("x", np.zeros((1, 2)), [1.0], np.ones((1, 2)), [1.0]))
    with pytest.raises(CorruptFile):
        decode_features(b"NOPE" + buf[4:])
    with pytest.raises(VersionMismatch):
        decode_features(buf[:4] + b"\x07\x00\x00\x00" + buf[8:])
    with pytest.raises(CorruptFile):
        decode_features(buf[:-6])


def test_text_lists(tmp_path):
    poses = {"a": Pose([0.5, 0.5, 0.5, 0.5], [1, 2, 3]), "b": Pose()}
    write_poses(tmp_path / "p.txt", poses)
    back = read_poses(tmp_path / "p.txt")
    assert back["a"] == poses["a"] and back["b"] == poses["b"]
    cams = {"a": Camera(640, 480, 500, 501, 320, 240), "b": Camera(10, 10, 5, 5, 4, 4, -0.1)}
    write_cameras(tmp_path / "c.txt", cams)
    assert read_cameras(tmp_path / "c.txt") == cams
    (tmp_path / "l.txt").write_text("# header\nq1\n\nq2\n")
    assert read_list(tmp_path / "l.txt") == ["q1", "q2"]
    (tmp_path / "bad.txt").write_text("a 1 0 0\n")
    with pytest.raises(ValueError):
        read_poses(tmp_path / "bad.txt")


def test_depth_roundtrip(tmp_path, rng):
    d = rng.uniform(0, 10, (4, 6)).astype(np.float32)
    d[0, 0] = 0
    write_depth(tmp_path / "d.hfnd", d)
    assert np.array_equal(read_depth(tmp_path / "d.hfnd"), d.astype(np.float64))
