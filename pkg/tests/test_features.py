import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfloc.errors import ZeroVector
from hfloc.features import (DenseDescriptorMap, LocalFeatureSet, l2_normalize, nms_topk,
                            sample_descriptors_bilinear)


def nms_oracle(kps, scores, radius, k):
    order = sorted(range(len(kps)), key=lambda i: (-scores[i], kps[i][1], kps[i][0]))
    kept = []
    for i in order:
        if len(kept) >= k:
            break
        if all((kps[i][0] - kps[j][0]) ** 2 + (kps[i][1] - kps[j][1]) ** 2 > radius ** 2 for j in kept):
            kept.append(i)
    return kept


def bilinear_oracle(grid, s, x, y):
    hc, wc, d = grid.shape
    gx = min(max((x - (s - 1) / 2) / s, 0), wc - 1)
    gy = min(max((y - (s - 1) / 2) / s, 0), hc - 1)
    x0, y0 = int(np.floor(gx)), int(np.floor(gy))
    x1, y1 = min(x0 + 1, wc - 1), min(y0 + 1, hc - 1)
    ax, ay = gx - x0, gy - y0
    out = []
    for c in range(d):
        v = ((1 - ay) * ((1 - ax) * grid[y0, x0, c] + ax * grid[y0, x1, c])
             + ay * ((1 - ax) * grid[y1, x0, c] + ax * grid[y1, x1, c]))
        out.append(v)
    out = np.array(out)
    return out / np.linalg.norm(out)


def test_nms_close_pair():
    kept = nms_topk([[10, 10], [13, 10]], [0.9, 0.8], radius=4, k=10)
    assert kept.tolist() == [0]


def test_nms_far_pair():
    kept = nms_topk([[10, 10], [15, 10]], [0.9, 0.8], radius=4, k=2)
    assert sorted(kept.tolist()) == [0, 1]


def test_nms_boundary_is_suppressed():
    # exactly at the radius counts as "within"
    assert nms_topk([[0, 0], [4, 0]], [0.9, 0.8], radius=4, k=5).tolist() == [0]


def test_nms_empty():
    assert len(nms_topk(np.zeros((0, 2)), np.zeros(0), 4, 10)) == 0


def test_nms_tie_break_by_y_then_x():
    kps = [[5, 1], [1, 1], [0, 9]]
    kept = nms_topk(kps, [0.5, 0.5, 0.5], radius=0, k=3)
    assert kept.tolist() == [1, 0, 2]


def test_nms_matches_bruteforce(rng):
    kps = rng.uniform(0, 200, (1000, 2))
    scores = rng.uniform(size=1000)
    scores[::7] = scores[0]  # some ties
    for k in (1000, 150):
        ours = nms_topk(kps, scores, 4, k)
        assert ours.tolist() == nms_oracle(kps.tolist(), scores.tolist(), 4, k)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 60), st.floats(0, 10), st.integers(0, 80), st.integers(0, 2**31 - 1))
def test_nms_properties(n, radius, k, seed):
    r = np.random.default_rng(seed)
    kps = np.round(r.uniform(0, 40, (n, 2)), 1)
    scores = np.round(r.uniform(size=n), 2)
    kept = nms_topk(kps, scores, radius, k)
    assert len(kept) <= k and len(set(kept.tolist())) == len(kept)
    if len(kept) > 1:
        d = np.linalg.norm(kps[kept][:, None] - kps[kept][None], axis=-1)
        assert np.all(d[np.triu_indices(len(kept), 1)] > radius)
    assert kept.tolist() == nms_oracle(kps.tolist(), scores.tolist(), radius, k)


def test_bilinear_constant_map():
    v = np.array([1.0, 2.0, 2.0])
    grid = np.broadcast_to(v, (6, 8, 3)).copy()
    out = sample_descriptors_bilinear(DenseDescriptorMap(grid, 8), [[3, 4], [60, 40], [0, 0]])
    assert np.allclose(out, v / 3.0)


def test_bilinear_ramp_midpoint():
    grid = np.zeros((1, 4, 2))
    grid[0, :, 0] = np.arange(4)
    grid[0, :, 1] = 1.0
    s = 8
    # centers of cells 1 and 2 sit at x = 11.5 and 19.5
    out = sample_descriptors_bilinear(DenseDescriptorMap(grid, s), [[15.5, 3.5]])
    expect = (grid[0, 1] + grid[0, 2]) / 2
    assert np.allclose(out[0], expect / np.linalg.norm(expect))


def test_bilinear_matches_per_channel_oracle(rng):
    grid = rng.normal(size=(7, 9, 5))
    s = 8
    kps = np.column_stack([rng.uniform(0, 72, 50), rng.uniform(0, 56, 50)])
    out = sample_descriptors_bilinear(DenseDescriptorMap(grid, s), kps)
    for i, (x, y) in enumerate(kps):
        assert np.allclose(out[i], bilinear_oracle(grid, s, x, y), atol=1e-6)


def test_l2_normalize():
    assert np.allclose(l2_normalize([3, 4]), [0.6, 0.8])
    assert abs(np.linalg.norm(l2_normalize(np.arange(1, 9.0))) - 1) < 1e-9
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0])


def test_feature_set_subset():
    fs = LocalFeatureSet("a", [[0, 0], [1, 1], [2, 2]], [0.1, 0.2, 0.3], np.eye(3), [1.0, 0.0])
    sub = fs.subset(np.array([2, 0]))
    assert len(sub) == 2 and sub.keypoints[0].tolist() == [2, 2]
    with pytest.raises(ValueError):
        LocalFeatureSet("b", [[0, 0]], [0.1], np.eye(2), [1.0])
