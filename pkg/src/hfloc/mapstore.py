"""Sparse 3D map: data model, construction from known poses, covisibility
places, statistics and the binary map file."""
from __future__ import annotations

import io
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .errors import (CorruptFile, EmptyMap, MissingFeatures, MissingPose, UnknownImage,
                     VersionMismatch, ZeroVector)
from .features import LocalFeatureSet
from .geometry import Camera, Pose, skew
from .retrieval import PcaModel, fit_pca

MAP_MAGIC = b"HFNM"
MAP_VERSION = 1


@dataclass
class DbImage:
    image_id: str
    camera: Camera
    pose: Pose
    features: LocalFeatureSet
    # point id observed by each keypoint, -1 when unmatched
    point_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.features)
        if self.point_ids is None:
            self.point_ids = np.full(n, -1, dtype=np.int64)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        if self.point_ids.shape != (n,):
            raise ValueError("point_ids must have one entry per keypoint")


@dataclass
class Point3D:
    point_id: int
    xyz: np.ndarray
    track: list
    descriptor: np.ndarray


@dataclass
class Place:
    image_ids: tuple
    point_ids: np.ndarray
    score: float = 0.0


@dataclass
class MapStats:
    num_points: int
    keypoints_per_image: float
    matched_keypoint_ratio: float
    track_length: float

    def as_tuple(self):
        return (self.num_points, self.keypoints_per_image, self.matched_keypoint_ratio, self.track_length)


class SparseMap:
    """Database images plus 3D points stored column-wise.

    Point ids are the row indices ``0..P-1``. Tracks are kept in CSR form:
    the observations of point ``p`` are
    ``track_image[track_ptr[p]:track_ptr[p+1]]`` (image indices) and the
    matching ``track_kp`` (keypoint indices).
    """

    def __init__(self, images, xyz, descriptors, track_ptr, track_image, track_kp,
                 pca: Optional[PcaModel] = None, metadata=None):
        self.images = list(images)
        self.xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        self.descriptors = np.asarray(descriptors, dtype=np.float32)
        self.track_ptr = np.asarray(track_ptr, dtype=np.int64)
        self.track_image = np.asarray(track_image, dtype=np.int32)
        self.track_kp = np.asarray(track_kp, dtype=np.int32)
        self.pca = pca
        self.metadata = dict(metadata or {})
        self._index = {im.image_id: i for i, im in enumerate(self.images)}
        if len(self._index) != len(self.images):
            raise ValueError("duplicate image ids")
        self._obs_cache = {}
        self._points_cache = {}

    @property
    def num_points(self):
        return len(self.xyz)

    def image_index(self, image_id):
        try:
            return self._index[image_id]
        except KeyError:
            raise UnknownImage(f"image {image_id!r} not in map") from None

    def image(self, image_id) -> DbImage:
        return self.images[self.image_index(image_id)]

    def track(self, pid):
        a, b = self.track_ptr[pid], self.track_ptr[pid + 1]
        return self.track_image[a:b], self.track_kp[a:b]

    def point(self, pid) -> Point3D:
        imgs, kps = self.track(pid)
        track = [(self.images[i].image_id, int(k)) for i, k in zip(imgs, kps)]
        return Point3D(int(pid), self.xyz[pid].copy(), track, self.descriptors[pid].copy())

    def observed_points(self, image_id):
        """Sorted unique point ids observed by an image."""
        i = self.image_index(image_id)
        if i not in self._points_cache:
            pids = self.images[i].point_ids
            self._points_cache[i] = np.unique(pids[pids >= 0])
        return self._points_cache[i]

    def observations(self, image_id):
        """(keypoint indices, point ids, descriptors) of matched keypoints."""
        i = self.image_index(image_id)
        if i not in self._obs_cache:
            im = self.images[i]
            kp = np.flatnonzero(im.point_ids >= 0)
            self._obs_cache[i] = (kp, im.point_ids[kp],
                                  np.ascontiguousarray(im.features.descriptors[kp], dtype=np.float32))
        return self._obs_cache[i]

    def validate(self):
        """Check referential integrity between images and tracks."""
        p, n_img = self.num_points, len(self.images)
        ptr = self.track_ptr
        if ptr.shape != (p + 1,) or ptr[0] != 0 or np.any(np.diff(ptr) < 2):
            raise ValueError("malformed track table")
        if ptr[-1] != len(self.track_image) or len(self.track_image) != len(self.track_kp):
            raise ValueError("track table length mismatch")
        if self.descriptors.shape[0] != p or self.xyz.shape[0] != p:
            raise ValueError("one position and descriptor per point required")
        pid = np.repeat(np.arange(p), np.diff(ptr))
        img = self.track_image.astype(np.int64)
        if np.any((img < 0) | (img >= n_img)):
            raise ValueError("track references a missing image")
        if len(np.unique(pid * max(n_img, 1) + img)) != len(pid):
            raise ValueError("a point is observed twice in one image")
        for i, im in enumerate(self.images):
            sel = img == i
            kp = self.track_kp[sel]
            expected = np.full(len(im.features), -1, dtype=np.int64)
            if np.any((kp < 0) | (kp >= len(expected))) or len(np.unique(kp)) != len(kp):
                raise ValueError(f"invalid observations in {im.image_id}")
            expected[kp] = pid[sel]
            if not np.array_equal(im.point_ids, expected):
                raise ValueError(f"covisibility of {im.image_id} does not match tracks")


def _mean_descriptor(descs):
    m = np.mean(np.asarray(descs, dtype=np.float64), axis=0)
    n = np.linalg.norm(m)
    if n < 1e-12:
        raise ZeroVector("observations have a zero mean descriptor")
    return m / n


def _canonical(f: LocalFeatureSet):
    return LocalFeatureSet(f.image_id, f.keypoints, f.scores, np.asarray(f.descriptors, dtype=np.float32),
                           np.asarray(f.global_descriptor, dtype=np.float64))


def assemble_map(images, points, pca=None, metadata=None) -> SparseMap:
    """Create a map from images and ``points = [(xyz, [(image_id, kp), ...]), ...]``.

    Point ids follow list order; per-image observations and mean point
    descriptors are derived from the tracks.
    """
    images = [DbImage(im.image_id, im.camera, im.pose, _canonical(im.features)) for im in images]
    index = {im.image_id: i for i, im in enumerate(images)}
    xyz, descs, ptr, t_img, t_kp = [], [], [0], [], []
    for pid, (pos, track) in enumerate(points):
        if len(track) < 2:
            raise ValueError(f"point {pid} has a track shorter than 2")
        obs_desc = []
        for image_id, k in track:
            if image_id not in index:
                raise UnknownImage(f"track references unknown image {image_id!r}")
            i = index[image_id]
            im = images[i]
            if im.point_ids[k] != -1:
                raise ValueError(f"keypoint {k} of {image_id} observes two points")
            im.point_ids[k] = pid
            t_img.append(i)
            t_kp.append(k)
            obs_desc.append(im.features.descriptors[k])
        ptr.append(len(t_img))
        xyz.append(pos)
        descs.append(_mean_descriptor(obs_desc))
    dim = images[0].features.descriptors.shape[1] if images else 0
    descs = np.reshape(descs, (-1, dim)) if descs else np.zeros((0, dim))
    return SparseMap(images, np.reshape(xyz, (-1, 3)), descs.astype(np.float32),
                     ptr, t_img, t_kp, pca=pca, metadata=metadata)


# ---------------------------------------------------------------------------
# construction from ground-truth poses

def mutual_ratio_matches(desc_a, desc_b, ratio=0.9):
    """Mutual nearest neighbors passing the plain ratio test (a -> b)."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    sim = np.asarray(desc_a, dtype=np.float32) @ np.asarray(desc_b, dtype=np.float32).T
    best_sim = np.full((len(desc_a), 2), -np.inf, dtype=sim.dtype)
    best_idx = np.full((len(desc_a), 2), -1, dtype=np.int64)
    _kernels.top2_update(sim, 0, best_sim, best_idx)
    nn_ab = best_idx[:, 0]
    nn_ba = _kernels.col_argmax(sim)
    keep = nn_ba[nn_ab] == np.arange(len(desc_a))
    if len(desc_b) > 1:
        d = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * best_sim.astype(np.float64)))
        keep &= d[:, 0] < ratio * d[:, 1]
    ia = np.flatnonzero(keep)
    return np.column_stack([ia, nn_ab[ia]])


def fundamental_from_poses(pose_a, pose_b, cam_a, cam_b):
    R = pose_b.R @ pose_a.R.T
    t = pose_b.tvec - R @ pose_a.tvec
    E = skew(t) @ R
    return np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)


def epipolar_distances(F, xa, xb):
    """Point-to-epipolar-line distances in both images (ideal pixels)."""
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    lb = ha @ F.T
    la = hb @ F
    alg = np.abs(np.sum(hb * lb, axis=1))
    db = alg / np.maximum(np.hypot(lb[:, 0], lb[:, 1]), 1e-300)
    da = alg / np.maximum(np.hypot(la[:, 0], la[:, 1]), 1e-300)
    return da, db


@dataclass
class BuildConfig:
    ratio: float = 0.9
    epipolar_px: float = 4.0
    min_angle_deg: float = 1.0
    pca_dim: Optional[int] = None
    threads: int = 1


def _match_pair(args):
    fa, fb, pa, pb, ca, cb, cfg = args
    m = mutual_ratio_matches(fa.descriptors, fb.descriptors, cfg.ratio)
    if len(m) == 0:
        return m
    F = fundamental_from_poses(pa, pb, ca, cb)
    da, db = epipolar_distances(F, ca.ideal_pixels(fa.keypoints[m[:, 0]]), cb.ideal_pixels(fb.keypoints[m[:, 1]]))
    return m[np.maximum(da, db) <= cfg.epipolar_px]


class _Triangulator:
    def __init__(self, images):
        self.P = np.stack([np.hstack([im.pose.R, im.pose.tvec[:, None]]) for im in images])
        self.centers = np.stack([im.pose.center for im in images])
        self.intr = np.array([[im.camera.fx, im.camera.fy, im.camera.cx, im.camera.cy, im.camera.k1]
                              for im in images])
        self.images = images

    def solve(self, img, xn):
        P = self.P[img]
        A = np.concatenate([xn[:, :1] * P[:, 2] - P[:, 0], xn[:, 1:2] * P[:, 2] - P[:, 1]])
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        _, _, vt = np.linalg.svd(A)
        X = vt[-1]
        if abs(X[3]) < 1e-15:
            return None
        return X[:3] / X[3]

    def residuals(self, X, img, px):
        P = self.P[img]
        xc = P[:, :, :3] @ X + P[:, :, 3]
        z = xc[:, 2]
        front = z > 1e-9
        xn = xc[:, :2] / np.where(front, z, 1.0)[:, None]
        k = self.intr[img]
        r2 = np.sum(xn * xn, axis=1)
        xd = xn * (1.0 + k[:, 4] * r2)[:, None]
        uv = xd * k[:, :2] + k[:, 2:4]
        return np.where(front, np.linalg.norm(uv - px, axis=1), np.inf)

    def max_angle_deg(self, X, img):
        rays = X - self.centers[img]
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        c = np.clip(rays @ rays.T, -1.0, 1.0)
        return float(np.degrees(np.arccos(c.min())))


def build_map(features, poses, cameras, pairs, cfg: Optional[BuildConfig] = None, **kwargs) -> SparseMap:
    """Triangulate a sparse map from matched features and known poses.

    ``features`` maps image ids to LocalFeatureSet (its order defines the
    image order of the map); ``poses`` and ``cameras`` map ids to
    ground-truth Pose and Camera.
    """
    cfg = cfg or BuildConfig(**kwargs)
    ids = list(features)
    for image_id in ids:
        if image_id not in poses:
            raise MissingPose(f"no pose for {image_id!r}")
        if image_id not in cameras:
            raise MissingPose(f"no camera for {image_id!r}")
    index = {k: i for i, k in enumerate(ids)}
    for a, b in pairs:
        for x in (a, b):
            if x not in index:
                if x in poses:
                    raise MissingFeatures(f"no features for {x!r}")
                raise MissingPose(f"no pose for {x!r}")
    images = [DbImage(k, cameras[k], poses[k], features[k]) for k in ids]
    offsets = np.concatenate([[0], np.cumsum([len(features[k]) for k in ids])])

    jobs = [(features[a], features[b], poses[a], poses[b], cameras[a], cameras[b], cfg)
            for a, b in pairs if a != b]
    valid_pairs = [(a, b) for a, b in pairs if a != b]
    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            pair_matches = list(ex.map(_match_pair, jobs))
    else:
        pair_matches = [_match_pair(j) for j in jobs]

    n_nodes = int(offsets[-1])
    edges = [np.column_stack([offsets[index[a]] + m[:, 0], offsets[index[b]] + m[:, 1]])
             for (a, b), m in zip(valid_pairs, pair_matches)]
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n_nodes, n_nodes))
    _, labels = connected_components(graph, directed=False)
    # relabel components by their smallest node for a schedule-free order
    first = np.full(labels.max() + 1 if n_nodes else 0, n_nodes, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n_nodes))
    rank = np.empty_like(first)
    rank[np.argsort(first)] = np.arange(len(first))
    roots = rank[labels]
    order = np.argsort(roots, kind="stable")
    splits = np.flatnonzero(np.diff(roots[order])) + 1
    node_img = np.repeat(np.arange(len(ids)), np.diff(offsets))
    node_kp = np.arange(int(offsets[-1])) - offsets[node_img]

    tri = _Triangulator(images)
    normalized = [im.camera.undistort(im.features.keypoints) for im in images]
    points = []
    for comp in np.split(order, splits):
        if len(comp) < 2:
            continue
        res = _make_point(tri, images, normalized, node_img[comp], node_kp[comp], cfg)
        if res is not None:
            points.append(res)
    # components were visited in order of their smallest node
    pca = None
    if cfg.pca_dim:
        G = np.stack([features[k].global_descriptor for k in ids]).astype(np.float64)
        k = min(cfg.pca_dim, len(ids) - 1, G.shape[1])
        if k >= 1:
            pca = fit_pca(G, k)
    meta = {"frame": "ground-truth reference frame", "scale": "same as input poses",
            "ratio": cfg.ratio, "epipolar_px": cfg.epipolar_px, "min_angle_deg": cfg.min_angle_deg}
    return assemble_map(images, [(xyz, [(ids[i], int(k)) for i, k in zip(img, kp)]) for xyz, img, kp in points],
                        pca=pca, metadata=meta)


def _make_point(tri, images, normalized, img, kp, cfg):
    xn = np.stack([normalized[i][k] for i, k in zip(img, kp)])
    px = np.stack([images[i].features.keypoints[k] for i, k in zip(img, kp)])
    uniq, counts = np.unique(img, return_counts=True)
    if len(uniq) < 2:
        return None
    if np.any(counts > 1):
        # one keypoint per image: keep the lowest-residual candidate
        single = np.isin(img, uniq[counts == 1])
        seed = single if np.sum(single) >= 2 else np.ones(len(img), dtype=bool)
        X = tri.solve(img[seed], xn[seed])
        if X is None:
            return None
        res = tri.residuals(X, img, px)
        keep = np.zeros(len(img), dtype=bool)
        for i in uniq:
            cand = np.flatnonzero(img == i)
            keep[cand[np.argmin(res[cand])]] = True
        img, kp, xn, px = img[keep], kp[keep], xn[keep], px[keep]
    while True:
        X = tri.solve(img, xn)
        if X is None:
            return None
        res = tri.residuals(X, img, px)
        worst = int(np.argmax(res))
        if res[worst] <= cfg.epipolar_px:
            break
        if len(img) <= 2:
            return None
        keep = np.arange(len(img)) != worst
        img, kp, xn, px = img[keep], kp[keep], xn[keep], px[keep]
    if tri.max_angle_deg(X, img) < cfg.min_angle_deg:
        return None
    return X, img, kp


# ---------------------------------------------------------------------------
# places and statistics

def covisibility_places(smap: SparseMap, prior_frames, scores=None, min_shared=1):
    """Cluster prior frames into connected components of the covisibility
    graph restricted to those frames."""
    frames = list(dict.fromkeys(prior_frames))
    if scores is None:
        scores = [0.0] * len(prior_frames)
    score_of = {}
    for f, s in zip(prior_frames, scores):
        score_of.setdefault(f, float(s))
    pts = [smap.observed_points(f) for f in frames]
    n = len(frames)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if find(i) == find(j):
                continue
            if len(np.intersect1d(pts[i], pts[j], assume_unique=True)) >= min_shared:
                parent[max(find(i), find(j))] = min(find(i), find(j))
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    places = []
    for members in groups.values():
        names = tuple(frames[i] for i in members)
        pids = np.unique(np.concatenate([pts[i] for i in members])) if members else np.zeros(0, np.int64)
        places.append(Place(names, pids.astype(np.int64), sum(score_of[f] for f in names)))
    places.sort(key=lambda p: (-p.score, min(p.image_ids)))
    return places


def map_stats(smap: SparseMap) -> MapStats:
    if not smap.images or smap.num_points == 0:
        raise EmptyMap("map has no images or no points")
    n_kp = np.array([len(im.features) for im in smap.images])
    matched = sum(int(np.sum(im.point_ids >= 0)) for im in smap.images)
    total = int(n_kp.sum())
    return MapStats(
        num_points=smap.num_points,
        keypoints_per_image=float(n_kp.mean()),
        matched_keypoint_ratio=matched / total if total else 0.0,
        track_length=float(np.mean(np.diff(smap.track_ptr))),
    )


# ---------------------------------------------------------------------------
# binary map file

def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _encode_images(smap):
    out = io.BytesIO()
    out.write(struct.pack("<I", len(smap.images)))
    for im in smap.images:
        c, f = im.camera, im.features
        out.write(_pack_str(im.image_id))
        out.write(struct.pack("<II5d", c.width, c.height, c.fx, c.fy, c.cx, c.cy, c.k1))
        out.write(np.asarray(im.pose.qvec, "<f8").tobytes() + np.asarray(im.pose.tvec, "<f8").tobytes())
        n, d = f.descriptors.shape
        g = np.asarray(f.global_descriptor, dtype="<f8")
        out.write(struct.pack("<III", n, d, len(g)))
        out.write(np.asarray(f.keypoints, "<f8").tobytes())
        out.write(np.asarray(f.scores, "<f8").tobytes())
        out.write(np.ascontiguousarray(f.descriptors, "<f4").tobytes())
        out.write(g.tobytes())
    return out.getvalue()


def _encode_points(smap):
    p = smap.num_points
    d = smap.descriptors.shape[1] if smap.descriptors.ndim == 2 else 0
    return b"".join([
        struct.pack("<QIQ", p, d, len(smap.track_image)),
        np.asarray(smap.xyz, "<f8").tobytes(),
        np.ascontiguousarray(smap.descriptors, "<f4").tobytes(),
        np.asarray(smap.track_ptr, "<i8").tobytes(),
        np.asarray(smap.track_image, "<i4").tobytes(),
        np.asarray(smap.track_kp, "<i4").tobytes(),
    ])


def _encode_covis(smap):
    return b"".join(struct.pack("<Q", len(im.point_ids)) + np.asarray(im.point_ids, "<i8").tobytes()
                    for im in smap.images)


def _encode_pca(pca: PcaModel):
    k, g = pca.basis.shape
    return b"".join([struct.pack("<IIB", k, g, int(pca.rank_deficient)),
                     np.asarray(pca.mean, "<f8").tobytes(), np.asarray(pca.basis, "<f8").tobytes(),
                     np.asarray(pca.explained_variance, "<f8").tobytes()])


def encode_map(smap: SparseMap) -> bytes:
    sections = [(b"meta", json.dumps(smap.metadata, sort_keys=True).encode("utf-8")),
                (b"images", _encode_images(smap)),
                (b"points", _encode_points(smap)),
                (b"covis", _encode_covis(smap))]
    if smap.pca is not None:
        sections.append((b"pca", _encode_pca(smap.pca)))
    header_len = 12 + 24 * len(sections)
    table, offset = [], header_len
    for name, payload in sections:
        table.append(struct.pack("<8sQQ", name, offset, len(payload)))
        offset += len(payload)
    body = b"".join([MAP_MAGIC, struct.pack("<II", MAP_VERSION, len(sections))] + table
                    + [p for _, p in sections])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Cursor:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptFile("map section truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def decode_map(buf: bytes) -> SparseMap:
    if len(buf) < 16 or buf[:4] != MAP_MAGIC:
        raise CorruptFile("not a map file")
    version, nsec = struct.unpack("<II", buf[4:12])
    if version != MAP_VERSION:
        raise VersionMismatch(f"map version {version}, expected {MAP_VERSION}")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFile("checksum mismatch")
    try:
        return _decode_sections(body, nsec)
    except (struct.error, ValueError, UnicodeDecodeError, KeyError) as exc:
        raise CorruptFile(f"malformed map: {exc}") from None


def _decode_sections(body, nsec):
    sections = {}
    for i in range(nsec):
        name, off, length = struct.unpack("<8sQQ", body[12 + 24 * i:36 + 24 * i])
        if off + length > len(body):
            raise CorruptFile("section out of range")
        sections[name.rstrip(b"\0").decode("ascii")] = body[off:off + length]
    meta = json.loads(sections["meta"].decode("utf-8"))

    c = _Cursor(sections["images"])
    (n_img,) = c.unpack("<I")
    images = []
    for _ in range(n_img):
        (ln,) = c.unpack("<I")
        image_id = c.take(ln).decode("utf-8")
        w, h, fx, fy, cx, cy, k1 = c.unpack("<II5d")
        pose = Pose(c.array("<f8", 4), c.array("<f8", 3))
        n, d, g = c.unpack("<III")
        kp = c.array("<f8", 2 * n).reshape(n, 2)
        sc = c.array("<f8", n)
        desc = c.array("<f4", n * d).reshape(n, d)
        gd = c.array("<f8", g)
        images.append([image_id, Camera(w, h, fx, fy, cx, cy, k1), pose, LocalFeatureSet(image_id, kp, sc, desc, gd)])

    c = _Cursor(sections["points"])
    p, d, t = c.unpack("<QIQ")
    xyz = c.array("<f8", 3 * p).reshape(p, 3)
    desc = c.array("<f4", p * d).reshape(p, d)
    ptr = c.array("<i8", p + 1)
    t_img = c.array("<i4", t)
    t_kp = c.array("<i4", t)

    c = _Cursor(sections["covis"])
    db_images = []
    for image_id, cam, pose, feats in images:
        (n,) = c.unpack("<Q")
        db_images.append(DbImage(image_id, cam, pose, feats, c.array("<i8", n)))

    pca = None
    if "pca" in sections:
        c = _Cursor(sections["pca"])
        k, g, deficient = c.unpack("<IIB")
        pca = PcaModel(c.array("<f8", g), c.array("<f8", k * g).reshape(k, g), c.array("<f8", k), bool(deficient))
    smap = SparseMap(db_images, xyz, desc, ptr, t_img, t_kp, pca=pca, metadata=meta)
    smap.validate()
    return smap


def save_map(path, smap: SparseMap):
    Path(path).write_bytes(encode_map(smap))


def load_map(path) -> SparseMap:
    return decode_map(Path(path).read_bytes())
