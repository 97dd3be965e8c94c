import numpy as np
import pytest

from hfloc.errors import DimensionMismatch, EmptyPlace
from hfloc.matching import assemble_2d3d, match_ratio, nearest_two, place_targets
from hfloc.mapstore import Place


def ratio_oracle(q, t, pids, ratio):
    """Double loop over targets; ties to the smaller index."""
    out = []
    for i in range(len(q)):
        best = [(-np.inf, -1), (-np.inf, -1)]
        for j in range(len(t)):
            s = float(np.dot(q[i], t[j]))
            if s > best[0][0]:
                best = [(s, j), best[0]]
            elif s > best[1][0]:
                best[1] = (s, j)
        d1 = np.sqrt(max(0.0, 2 - 2 * best[0][0]))
        if len(t) == 1:
            out.append((i, best[0][1]))
            continue
        d2 = np.sqrt(max(0.0, 2 - 2 * best[1][0]))
        same = pids is not None and pids[best[0][1]] == pids[best[1][1]]
        if d1 < ratio * d2 or same:
            out.append((i, best[0][1]))
    return out


def unit(x):
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def test_nearest_two_blocks_equal_single(rng):
    q, t = unit(rng.normal(size=(50, 8))), unit(rng.normal(size=(300, 8)))
    a = nearest_two(q, t, block=64)
    b = nearest_two(q, t, block=10**6)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0], b[0])


def test_ratio_matches_oracle(rng):
    for trial in range(20):
        q = unit(rng.normal(size=(30, 6)))
        t = unit(rng.normal(size=(40, 6)))
        pids = rng.integers(0, 15, 40)
        for ids in (None, pids):
            ms = match_ratio(q, t, ids, 0.9)
            assert list(zip(ms.query.tolist(), ms.target.tolist())) == ratio_oracle(q, t, ids, 0.9)


def test_modified_is_superset(rng):
    q = unit(rng.normal(size=(100, 8)))
    t = unit(np.repeat(rng.normal(size=(30, 8)), 3, axis=0) + 0.05 * rng.normal(size=(90, 8)))
    pids = np.repeat(np.arange(30), 3)
    plain = set(match_ratio(q, t, None, 0.8).query.tolist())
    mod = set(match_ratio(q, t, pids, 0.8).query.tolist())
    assert plain <= mod and len(mod) > len(plain)


def test_same_point_neighbors_accepted():
    t = unit(np.array([[1.0, 0.0], [0.999, 0.02], [0, 1.0]]))
    q = unit(np.array([[1.0, 0.01]]))
    assert len(match_ratio(q, t, None, 0.9)) == 0
    ms = match_ratio(q, t, np.array([5, 5, 7]), 0.9)
    assert ms.target_id.tolist() == [5]


def test_single_target_accepts():
    ms = match_ratio(unit(np.array([[1.0, 0]])), unit(np.array([[0.0, 1]])))
    assert len(ms) == 1


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        match_ratio(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(DimensionMismatch):
        match_ratio(np.ones((2, 3)), np.ones((2, 3)), np.array([1]))


def test_assemble_against_scene(small_scene):
    scene, db, qs, smap = small_scene
    fs, gt = qs["q_0000"]
    place = Place(tuple(im.image_id for im in smap.images), np.arange(smap.num_points))
    corr = assemble_2d3d(fs, place, smap)
    assert len(corr) > 50
    # noiseless scene: every correspondence lands on its true point
    assert np.allclose(corr.xyz, scene.points[gt[corr.query_idx]], atol=1e-6)
    targets, pids = place_targets(smap, place, "point-mean")
    assert len(targets) == smap.num_points


def test_empty_place(small_scene):
    _, _, qs, smap = small_scene
    with pytest.raises(EmptyPlace):
        assemble_2d3d(qs["q_0000"][0], Place((), np.zeros(0, np.int64)), smap)
