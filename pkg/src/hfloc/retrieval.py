"""PCA reduction of global descriptors and exact nearest-neighbor retrieval."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, RankDeficientWarning, ZeroVector


@dataclass
class PcaModel:
    mean: np.ndarray  # (G,)
    basis: np.ndarray  # (k, G), orthonormal rows, descending variance
    explained_variance: np.ndarray  # (k,)
    rank_deficient: bool = False

    @property
    def input_dim(self):
        return self.basis.shape[1]

    @property
    def output_dim(self):
        return self.basis.shape[0]


def fit_pca(descriptors, k):
    """Fit a PCA projection to reference descriptors (M, G)."""
    X = np.asarray(descriptors, dtype=np.float64)
    m, g = X.shape
    if m < 2:
        raise ValueError("need at least two descriptors")
    if not 1 <= k <= min(m - 1, g):
        raise ValueError(f"k={k} outside [1, min(M-1, G)={min(m - 1, g)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s ** 2 / (m - 1)
    tol = s[0] * max(m, g) * np.finfo(np.float64).eps if len(s) else 0.0
    rank = int(np.sum(s > tol))
    deficient = rank < k
    if deficient:
        warnings.warn(f"only {rank} positive eigenvalues, reducing k from {k}", RankDeficientWarning)
        k = rank
    basis = vt[:k].copy()
    # sign convention: largest-magnitude entry of each row is positive
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(k), pivots])
    basis *= signs[:, None]
    return PcaModel(mean, basis, var[:k].copy(), deficient)


def reduce(model: PcaModel, d):
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"descriptor has {d.shape[-1]} dims, PCA expects {model.input_dim}")
    y = model.basis @ (d - model.mean)
    n = np.linalg.norm(y)
    if n < 1e-12:
        raise ZeroVector("projected descriptor is zero")
    return y / n


def reduce_rows(model: PcaModel, D):
    D = np.asarray(D, dtype=np.float64)
    if D.shape[1] != model.input_dim:
        raise DimensionMismatch(f"descriptors have {D.shape[1]} dims, PCA expects {model.input_dim}")
    Y = (D - model.mean) @ model.basis.T
    n = np.linalg.norm(Y, axis=1, keepdims=True)
    if np.any(n < 1e-12):
        raise ZeroVector("projected descriptor is zero")
    return Y / n


@dataclass
class GlobalIndex:
    matrix: np.ndarray  # (M, k) unit rows
    image_ids: list

    def __len__(self):
        return len(self.image_ids)

    @classmethod
    def build(cls, model: PcaModel, image_ids, global_descriptors):
        if len(image_ids) == 0:
            return cls(np.zeros((0, model.output_dim)), [])
        return cls(reduce_rows(model, np.asarray(global_descriptors)), list(image_ids))


def knn_retrieve(index: GlobalIndex, query, k_nn=10):
    """Top-k by dot product; returns [(image_id, similarity), ...]."""
    if len(index) == 0:
        raise EmptyIndex("global index is empty")
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.matrix.shape[1],):
        raise DimensionMismatch("query dimension does not match index")
    sims = index.matrix @ query
    ids = np.asarray(index.image_ids)
    order = np.lexsort((ids, -sims))[:k_nn]
    return [(index.image_ids[i], float(sims[i])) for i in order]


def retrieval_pairs(image_ids, global_descriptors, k):
    """Unordered image pairs linking each image to its ``k`` most similar
    others by raw global descriptor; sorted, no duplicates."""
    G = np.asarray(global_descriptors, dtype=np.float64)
    G = G / np.linalg.norm(G, axis=1, keepdims=True)
    n = len(image_ids)
    sims = G @ G.T
    ids = np.asarray(image_ids)
    pairs = set()
    for i in range(n):
        s = sims[i].copy()
        s[i] = -np.inf
        order = np.lexsort((ids, -s))[:min(k, n - 1)]
        for j in order:
            pairs.add((min(i, j), max(i, j)))
    return [(image_ids[i], image_ids[j]) for i, j in sorted(pairs)]


def exhaustive_pairs(image_ids):
    return [(a, b) for i, a in enumerate(image_ids) for b in image_ids[i + 1:]]
