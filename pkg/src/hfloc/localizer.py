"""Coarse-to-fine localization: retrieval, covisibility clustering,
2D-3D matching per place, PnP with first-success exit."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyIndex, EmptyMap, EmptyPlace, TooFewCorrespondences
from .features import LocalFeatureSet, nms_topk
from .geometry import Camera, Pose
from .mapstore import SparseMap, covisibility_places
from .matching import assemble_2d3d
from .pose import PoseEstimate, RansacConfig, pnp_ransac
from .retrieval import GlobalIndex, knn_retrieve, reduce

STAGES = ("features", "global_search", "clustering", "local_matching", "pnp")


@dataclass(frozen=True)
class LocalizerConfig:
    k_nn: int = 10
    ratio: float = 0.9
    ransac: RansacConfig = field(default_factory=RansacConfig)
    max_keypoints: int = 2000
    nms_radius: float = 4.0
    mode: str = "all-observations"
    min_shared: int = 1


@dataclass
class LocalizationResult:
    image_id: str
    estimate: PoseEstimate
    place_index: int
    prior_frames: list
    timings_ms: dict
    total_ms: float
    places_matched: int = 0
    num_places: int = 0

    @property
    def success(self):
        return self.estimate.success

    @property
    def pose(self):
        return self.estimate.pose


def _failed_estimate():
    return PoseEstimate(Pose(), np.zeros(0, dtype=np.int64), 0, float("inf"), False, 0)


def place_seed(seed, place_index):
    return int(np.random.SeedSequence([seed, place_index]).generate_state(1)[0])


class Localizer:
    """Holds a map and its global index; ``localize`` is thread-safe."""

    def __init__(self, smap: SparseMap, cfg: LocalizerConfig = LocalizerConfig()):
        if not smap.images:
            raise EmptyMap("map has no images")
        self.map = smap
        self.cfg = cfg
        ids = [im.image_id for im in smap.images]
        G = np.stack([im.features.global_descriptor for im in smap.images]).astype(np.float64)
        if smap.pca is not None:
            self.index = GlobalIndex.build(smap.pca, ids, G)
        else:
            self.index = GlobalIndex(G / np.linalg.norm(G, axis=1, keepdims=True), ids)
        for im in smap.images:
            smap.observations(im.image_id)
            smap.observed_points(im.image_id)

    def reduce_query(self, g):
        if self.map.pca is not None:
            return reduce(self.map.pca, g)
        g = np.asarray(g, dtype=np.float64)
        return g / np.linalg.norm(g)

    def localize(self, query: LocalFeatureSet, camera: Camera, feature_load_ms=0.0) -> LocalizationResult:
        cfg = self.cfg
        timings = dict.fromkeys(STAGES, 0.0)
        timings["features"] = float(feature_load_ms)
        start = time.perf_counter()

        t0 = time.perf_counter()
        keep = nms_topk(query.keypoints, query.scores, cfg.nms_radius, cfg.max_keypoints)
        t1 = time.perf_counter()
        timings["features"] += (t1 - t0) * 1e3

        if len(self.index) == 0:
            raise EmptyIndex("global index is empty")
        priors = knn_retrieve(self.index, self.reduce_query(query.global_descriptor), cfg.k_nn)
        t2 = time.perf_counter()
        timings["global_search"] = (t2 - t1) * 1e3

        places = covisibility_places(self.map, [p for p, _ in priors], [s for _, s in priors], cfg.min_shared)
        t3 = time.perf_counter()
        timings["clustering"] = (t3 - t2) * 1e3

        best, best_place, matched = None, -1, 0
        for i, place in enumerate(places):
            ta = time.perf_counter()
            try:
                corr = assemble_2d3d(query, place, self.map, cfg.ratio, cfg.mode, keep)
            except EmptyPlace:
                corr = None
            tb = time.perf_counter()
            timings["local_matching"] += (tb - ta) * 1e3
            matched += 1
            if corr is None or len(corr) < 4:
                continue
            rcfg = replace(cfg.ransac, seed=place_seed(cfg.ransac.seed, i))
            try:
                est = pnp_ransac(camera, corr.pixels, corr.xyz, rcfg)
            except TooFewCorrespondences:
                est = None
            tc = time.perf_counter()
            timings["pnp"] += (tc - tb) * 1e3
            if est is None:
                continue
            if best is None or est.num_inliers > best.num_inliers:
                best, best_place = est, i
            if est.success:
                best, best_place = est, i
                break
        total = (time.perf_counter() - start) * 1e3 + float(feature_load_ms)
        if best is None:
            best = _failed_estimate()
        return LocalizationResult(query.image_id, best, best_place if best.success else -1, priors, timings,
                                  total, matched, len(places))


def localize_query(smap: SparseMap, query: LocalFeatureSet, camera: Camera,
                   cfg: LocalizerConfig = LocalizerConfig()) -> LocalizationResult:
    return Localizer(smap, cfg).localize(query, camera)


def localize_many(localizer: Localizer, jobs, threads=1):
    """Localize ``(query, camera[, load_ms])`` jobs; results keep input order."""
    def run(job):
        return localizer.localize(*job)

    if threads <= 1:
        for job in jobs:
            yield run(job)
        return
    with ThreadPoolExecutor(threads) as ex:
        yield from ex.map(run, jobs)
