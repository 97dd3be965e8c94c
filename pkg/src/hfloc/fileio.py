"""Readers and writers for feature files, depth maps, pose and camera lists.

All binary formats are little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, VersionMismatch
from .features import DenseDescriptorMap, LocalFeatureSet
from .geometry import Camera, Pose

FEATURE_MAGIC = b"HFNF"
FEATURE_VERSION = 1
DEPTH_MAGIC = b"HFND"


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptFile(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    @property
    def remaining(self):
        return len(self.buf) - self.pos


def encode_features(fs: LocalFeatureSet) -> bytes:
    name = fs.image_id.encode("utf-8")
    n = len(fs)
    d = fs.descriptors.shape[1] if fs.descriptors.ndim == 2 else 0
    parts = [FEATURE_MAGIC, struct.pack("<I", FEATURE_VERSION), struct.pack("<I", len(name)), name,
             struct.pack("<I", n)]
    kp = np.column_stack([fs.keypoints, fs.scores]).astype("<f4")
    parts.append(kp.tobytes())
    parts.append(struct.pack("<I", d))
    parts.append(np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes())
    g = np.asarray(fs.global_descriptor, dtype="<f4")
    parts.append(struct.pack("<I", len(g)))
    parts.append(g.tobytes())
    if fs.dense is None:
        parts.append(struct.pack("<B", 0))
    else:
        hc, wc, dd = fs.dense.grid.shape
        if dd != d:
            raise ValueError("dense map depth must equal descriptor dimension")
        parts.append(struct.pack("<BIII", 1, fs.dense.stride, hc, wc))
        parts.append(np.ascontiguousarray(fs.dense.grid, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes, what="feature file") -> LocalFeatureSet:
    r = _Reader(buf, what)
    if r.take(4) != FEATURE_MAGIC:
        raise CorruptFile(f"{what}: bad magic")
    version = r.u32()
    if version != FEATURE_VERSION:
        raise VersionMismatch(f"{what}: version {version}, expected {FEATURE_VERSION}")
    image_id = r.take(r.u32()).decode("utf-8")
    n = r.u32()
    kp = r.f32(3 * n).reshape(n, 3)
    d = r.u32()
    desc = r.f32(n * d).reshape(n, d)
    g = r.f32(r.u32())
    dense = None
    if r.remaining:
        flag = struct.unpack("<B", r.take(1))[0]
        if flag:
            s, hc, wc = r.u32(), r.u32(), r.u32()
            dense = DenseDescriptorMap(r.f32(hc * wc * d).reshape(hc, wc, d), s)
    if r.remaining:
        raise CorruptFile(f"{what}: {r.remaining} trailing bytes")
    return LocalFeatureSet(image_id, kp[:, :2].astype(np.float64), kp[:, 2].astype(np.float64), desc, g, dense)


def write_features(path, fs: LocalFeatureSet):
    Path(path).write_bytes(encode_features(fs))


def read_features(path) -> LocalFeatureSet:
    return decode_features(Path(path).read_bytes(), what=str(path))


def feature_path(directory, image_id):
    return Path(directory) / f"{image_id}.hfnf"


def write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<II", w, h) + depth.tobytes())


def read_depth(path):
    buf = Path(path).read_bytes()
    r = _Reader(buf, str(path))
    if r.take(4) != DEPTH_MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    w, h = r.u32(), r.u32()
    depth = r.f32(w * h).reshape(h, w)
    if r.remaining:
        raise CorruptFile(f"{path}: trailing bytes")
    return depth.astype(np.float64)


def _content_lines(path):
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield lineno, line.split()


def read_poses(path):
    """``image_id qw qx qy qz tx ty tz`` per line (world-to-camera)."""
    poses = {}
    for lineno, tok in _content_lines(path):
        if len(tok) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(tok)}")
        vals = [float(v) for v in tok[1:]]
        poses[tok[0]] = Pose(vals[:4], vals[4:])
    return poses


def format_pose(image_id, pose: Pose):
    return " ".join([image_id] + [repr(float(v)) for v in (*pose.qvec, *pose.tvec)])


def write_poses(path, poses):
    Path(path).write_text("".join(format_pose(k, p) + "\n" for k, p in poses.items()), encoding="utf-8")


def parse_camera(tokens):
    """Parse ``PINHOLE w h fx fy cx cy [k1]`` (without the image id)."""
    if tokens[0] != "PINHOLE" or len(tokens) not in (7, 8):
        raise ValueError(f"unsupported camera spec: {' '.join(tokens)}")
    w, h = int(tokens[1]), int(tokens[2])
    vals = [float(v) for v in tokens[3:]]
    return Camera(w, h, *vals)


def read_cameras(path):
    cams = {}
    for lineno, tok in _content_lines(path):
        try:
            cams[tok[0]] = parse_camera(tok[1:])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return cams


def write_cameras(path, cameras):
    Path(path).write_text("".join(c.to_line(k) + "\n" for k, c in cameras.items()), encoding="utf-8")


def read_list(path):
    return [tok[0] for _, tok in _content_lines(path)]
