"""Descriptor matching with the same-point-aware ratio test and 2D-3D
correspondence assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, EmptyPlace
from .mapstore import Place, SparseMap

BLOCK = 16384


@dataclass
class MatchSet:
    query: np.ndarray  # query row index
    target: np.ndarray  # target row index
    target_id: np.ndarray  # point id when given, else target row index
    distance: np.ndarray

    def __len__(self):
        return len(self.query)


def nearest_two(query_desc, target_desc, block=BLOCK):
    """Two largest similarities per query row; ties go to the smaller index.

    Targets are processed in column blocks so memory stays bounded.
    Returns (sims (N, 2), idx (N, 2)); missing second neighbors have
    index -1 and similarity -inf.
    """
    dt = np.result_type(query_desc.dtype, target_desc.dtype, np.float32)
    q = np.ascontiguousarray(query_desc, dtype=dt)
    t = np.asarray(target_desc, dtype=dt)
    n = len(q)
    best_sim = np.full((n, 2), -np.inf, dtype=dt)
    best_idx = np.full((n, 2), -1, dtype=np.int64)
    for start in range(0, len(t), block):
        sim = q @ t[start:start + block].T
        _kernels.top2_update(sim, start, best_sim, best_idx)
    return best_sim, best_idx


def match_ratio(query_desc, target_desc, target_point_ids=None, ratio=0.9, block=BLOCK) -> MatchSet:
    """Nearest-neighbor matching with a ratio test on L2 distances.

    With ``target_point_ids`` the ratio test is skipped whenever the two
    nearest targets observe the same point.
    """
    query_desc = np.asarray(query_desc)
    target_desc = np.asarray(target_desc)
    if query_desc.ndim != 2 or target_desc.ndim != 2 or query_desc.shape[1] != target_desc.shape[1]:
        raise DimensionMismatch(f"descriptor shapes {query_desc.shape} and {target_desc.shape} differ")
    m = len(target_desc)
    if target_point_ids is not None:
        target_point_ids = np.asarray(target_point_ids, dtype=np.int64)
        if target_point_ids.shape != (m,):
            raise DimensionMismatch("need one point id per target row")
    if len(query_desc) == 0 or m == 0:
        empty = np.zeros(0, dtype=np.int64)
        return MatchSet(empty, empty, empty, np.zeros(0))
    sims, idx = nearest_two(query_desc, target_desc, block)
    d = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * sims.astype(np.float64)))
    if m == 1:
        accept = np.ones(len(d), dtype=bool)
    else:
        accept = d[:, 0] < ratio * d[:, 1]
        if target_point_ids is not None:
            accept |= target_point_ids[idx[:, 0]] == target_point_ids[idx[:, 1]]
    q = np.flatnonzero(accept)
    tgt = idx[q, 0]
    tid = target_point_ids[tgt] if target_point_ids is not None else tgt
    return MatchSet(q, tgt, tid, d[q, 0])


@dataclass
class Correspondences:
    query_idx: np.ndarray
    point_ids: np.ndarray
    pixels: np.ndarray  # (K, 2)
    xyz: np.ndarray  # (K, 3)
    num_targets: int = 0

    def __len__(self):
        return len(self.query_idx)


def place_targets(smap: SparseMap, place: Place, mode="all-observations"):
    """Descriptors and point ids to match against for one place."""
    if mode == "point-mean":
        pids = np.asarray(place.point_ids, dtype=np.int64)
        return smap.descriptors[pids], pids
    if mode != "all-observations":
        raise ValueError(f"unknown matching mode {mode!r}")
    descs, pids = [], []
    for image_id in place.image_ids:
        _, p, d = smap.observations(image_id)
        descs.append(d)
        pids.append(p)
    if not descs:
        return np.zeros((0, smap.descriptors.shape[1]), np.float32), np.zeros(0, np.int64)
    return np.concatenate(descs), np.concatenate(pids)


def assemble_2d3d(query, place: Place, smap: SparseMap, ratio=0.9, mode="all-observations",
                  keypoint_subset: Optional[np.ndarray] = None) -> Correspondences:
    """Match query keypoints to the points of a place."""
    target_desc, target_pids = place_targets(smap, place, mode)
    if len(target_pids) == 0:
        raise EmptyPlace(f"place {place.image_ids} has no 3D points")
    kp_idx = np.arange(len(query)) if keypoint_subset is None else np.asarray(keypoint_subset, dtype=np.int64)
    qdesc = query.descriptors[kp_idx]
    ms = match_ratio(qdesc, target_desc, target_pids if mode == "all-observations" else None, ratio)
    pids = target_pids[ms.target]
    qi = kp_idx[ms.query]
    return Correspondences(qi, pids, query.keypoints[qi], smap.xyz[pids], len(target_pids))
