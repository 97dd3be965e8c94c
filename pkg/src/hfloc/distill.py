"""Multi-task distillation loss with learned log-variance task weights.

    L = e^-w1 r_g + e^-w2 r_l + 2 e^-w3 c + w1 + w2 + w3

r_g is the squared global-descriptor residual, r_l the squared local
descriptor residual (summed over channels, averaged over locations) and c
the soft-label cross-entropy of the keypoint scores averaged over
locations, with the teacher probabilities as target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import NonSimplexTarget, ShapeMismatch

SIMPLEX_TOL = 1e-6


@dataclass
class DistillBatch:
    dg_s: np.ndarray  # (G,)
    dg_t: np.ndarray  # (G,)
    dl_s: np.ndarray  # (H, W, D)
    dl_t: np.ndarray  # (H, W, D)
    z_s: np.ndarray  # (H, W, C) student logits
    p_t: np.ndarray  # (H, W, C) teacher probabilities

    def __post_init__(self):
        for name in ("dg_s", "dg_t", "dl_s", "dl_t", "z_s", "p_t"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.dg_s.ndim != 1 or self.dg_s.shape != self.dg_t.shape:
            raise ShapeMismatch(f"global descriptors {self.dg_s.shape} vs {self.dg_t.shape}")
        if self.dl_s.ndim != 3 or self.dl_s.shape != self.dl_t.shape:
            raise ShapeMismatch(f"local maps {self.dl_s.shape} vs {self.dl_t.shape}")
        if self.z_s.ndim != 3 or self.z_s.shape != self.p_t.shape:
            raise ShapeMismatch(f"score maps {self.z_s.shape} vs {self.p_t.shape}")
        if self.z_s.shape[:2] != self.dl_s.shape[:2]:
            raise ShapeMismatch("local and score maps cover different locations")
        if np.any(self.p_t < 0) or np.any(np.abs(self.p_t.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
            raise NonSimplexTarget("teacher probabilities must be nonnegative and sum to 1 per location")

    @property
    def num_locations(self):
        return self.z_s.shape[0] * self.z_s.shape[1]


@dataclass(frozen=True)
class TaskWeights:
    w1: float = 0.0
    w2: float = 0.0
    w3: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.w1, self.w2, self.w3])):
            raise ValueError("task weights must be finite")


@dataclass
class LossGrad:
    dg_s: np.ndarray
    dl_s: np.ndarray
    z_s: np.ndarray
    w: np.ndarray  # (3,)


def residuals(batch: DistillBatch):
    """(r_g, r_l, c)"""
    n = batch.num_locations
    r_g = float(np.sum((batch.dg_s - batch.dg_t) ** 2))
    r_l = float(np.sum((batch.dl_s - batch.dl_t) ** 2) / n)
    logp = log_softmax(batch.z_s, axis=-1)
    # 0 * log(0) terms vanish; guard against -inf logits
    c = float(-np.sum(np.where(batch.p_t > 0, batch.p_t * logp, 0.0)) / n)
    return r_g, r_l, c


def multitask_loss(batch: DistillBatch, w: TaskWeights = TaskWeights()):
    r_g, r_l, c = residuals(batch)
    L = np.exp(-w.w1) * r_g + np.exp(-w.w2) * r_l + 2.0 * np.exp(-w.w3) * c + w.w1 + w.w2 + w.w3
    return float(L), (r_g, r_l, c)


def multitask_loss_grad(batch: DistillBatch, w: TaskWeights = TaskWeights()) -> LossGrad:
    r_g, r_l, c = residuals(batch)
    n = batch.num_locations
    e1, e2, e3 = np.exp(-w.w1), np.exp(-w.w2), np.exp(-w.w3)
    p_s = softmax(batch.z_s, axis=-1)
    return LossGrad(
        dg_s=2.0 * e1 * (batch.dg_s - batch.dg_t),
        dl_s=2.0 * e2 * (batch.dl_s - batch.dl_t) / n,
        z_s=2.0 * e3 * (p_s - batch.p_t) / n,
        w=np.array([1.0 - e1 * r_g, 1.0 - e2 * r_l, 1.0 - 2.0 * e3 * c]),
    )


def random_batch(rng, G=16, H=3, W=4, D=8, C=5, scale=1.0):
    """Random batch with unit descriptors and softmax teacher targets."""
    def unit(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    return DistillBatch(
        unit(rng.normal(size=G)), unit(rng.normal(size=G)),
        unit(rng.normal(size=(H, W, D))), unit(rng.normal(size=(H, W, D))),
        scale * rng.normal(size=(H, W, C)), softmax(rng.normal(size=(H, W, C)), axis=-1),
    )


def _rel_err(a, b):
    """Norm-wise relative error of one gradient block."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def gradient_check(batch: DistillBatch, w: TaskWeights, h=1e-4):
    """Largest relative error between analytic gradients and central
    differences, measured per gradient block (each descriptor, the logits,
    each weight)."""
    g = multitask_loss_grad(batch, w)
    worst = 0.0
    for name in ("dg_s", "dl_s", "z_s"):
        x = getattr(batch, name)
        analytic = getattr(g, name)
        num = np.empty_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = multitask_loss(batch, w)
            flat[i] = old - h
            lm, _ = multitask_loss(batch, w)
            flat[i] = old
            num.reshape(-1)[i] = (lp - lm) / (2 * h)
        worst = max(worst, _rel_err(analytic, num))
    wv = np.array([w.w1, w.w2, w.w3])
    for i in range(3):
        wp, wm = wv.copy(), wv.copy()
        wp[i] += h
        wm[i] -= h
        lp, _ = multitask_loss(batch, TaskWeights(*wp))
        lm, _ = multitask_loss(batch, TaskWeights(*wm))
        worst = max(worst, _rel_err(g.w[i], (lp - lm) / (2 * h)))
    return worst


def gradient_check_suite(seed=0, trials=100, h=1e-4):
    """Max relative gradient error over ``trials`` seeded random batches."""
    worst = 0.0
    for i in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        batch = random_batch(rng)
        w = TaskWeights(*rng.normal(scale=0.5, size=3))
        worst = max(worst, gradient_check(batch, w, h))
    return worst
