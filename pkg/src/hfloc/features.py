"""Post-processing of precomputed local features."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ZeroVector


@dataclass
class DenseDescriptorMap:
    grid: np.ndarray  # (Hc, Wc, D)
    stride: int = 8

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.grid.ndim != 3:
            raise ValueError("dense map must be (Hc, Wc, D)")


@dataclass
class LocalFeatureSet:
    """Keypoints (N, 2) as x, y pixels, scores (N,), descriptors (N, D)
    and one global descriptor (G,)."""

    image_id: str
    keypoints: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    global_descriptor: np.ndarray
    dense: Optional[DenseDescriptorMap] = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        n = len(self.keypoints)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(n)
        d = np.asarray(self.descriptors)
        if n == 0 and d.size == 0:
            d = d.reshape(0, d.shape[-1] if d.ndim == 2 else 0)
        if d.ndim != 2 or len(d) != n:
            raise ValueError("need one descriptor row per keypoint")
        self.descriptors = d
        self.global_descriptor = np.asarray(self.global_descriptor).reshape(-1)

    def __len__(self):
        return len(self.keypoints)

    def subset(self, idx):
        return LocalFeatureSet(self.image_id, self.keypoints[idx], self.scores[idx],
                               self.descriptors[idx], self.global_descriptor, self.dense)


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= 1e-12:
        raise ZeroVector("cannot normalize a zero vector")
    return v / n


def normalize_rows(m):
    m = np.asarray(m)
    n = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ZeroVector("descriptor row with zero norm")
    return m / n


def nms_topk(keypoints, scores, radius=4.0, k=2000):
    """Greedy radius NMS, highest score first; returns kept indices.

    Ties in score are broken by (y, x). A keypoint is suppressed when it
    lies within Euclidean distance <= radius of an already kept one.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    if len(keypoints) == 0 or k <= 0:
        return np.zeros(0, dtype=np.int64)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    order = np.lexsort((keypoints[:, 0], keypoints[:, 1], -scores))
    xy = np.ascontiguousarray(keypoints[order])
    kept = _kernels.nms_sorted(xy, float(radius), int(k))
    return order[kept]


def sample_descriptors_bilinear(dense: DenseDescriptorMap, keypoints):
    """Bilinearly sample a dense descriptor map at pixel keypoints.

    Cell (i, j) is centered at pixel (j*s + (s-1)/2, i*s + (s-1)/2);
    coordinates outside the outermost centers are clamped.
    """
    grid = dense.grid
    s = dense.stride
    hc, wc, _ = grid.shape
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    gx = np.clip((kp[:, 0] - (s - 1) / 2.0) / s, 0, wc - 1)
    gy = np.clip((kp[:, 1] - (s - 1) / 2.0) / s, 0, hc - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, wc - 1)
    y1 = np.minimum(y0 + 1, hc - 1)
    ax = (gx - x0)[:, None]
    ay = (gy - y0)[:, None]
    g = grid.astype(np.float64, copy=False)
    desc = ((1 - ay) * ((1 - ax) * g[y0, x0] + ax * g[y0, x1])
            + ay * ((1 - ax) * g[y1, x0] + ax * g[y1, x1]))
    return normalize_rows(desc)
