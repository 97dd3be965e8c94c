"""The numba and numpy flavors of every kernel agree."""
import numpy as np
import pytest

from hfloc import _kernels as K
from hfloc.pose import draw_samples

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


@needs_numba
def test_nms_flavors_agree(rng):
    xy = np.ascontiguousarray(rng.uniform(0, 100, (800, 2)))
    for r, k in [(0.0, 800), (4.0, 800), (4.0, 50), (10.0, 3)]:
        assert np.array_equal(K.nms_sorted_nb(xy, r, k), K.nms_sorted_np(xy, r, k))


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_top2_flavors_agree(rng, dtype):
    q = rng.normal(size=(300, 16)).astype(dtype)
    t = rng.normal(size=(500, 16)).astype(dtype)
    t[250] = t[10]  # exact tie
    out = []
    for fn in (K.top2_update_nb, K.top2_update_np):
        bs = np.full((300, 2), -np.inf, dtype=dtype)
        bi = np.full((300, 2), -1, dtype=np.int64)
        for start in range(0, 500, 128):
            fn(q @ t[start:start + 128].T, start, bs, bi)
        out.append((bs, bi))
    assert np.array_equal(out[0][0], out[1][0]) and np.array_equal(out[0][1], out[1][1])
    # brute-force oracle on indices, ties to the smaller index
    sim = q @ t.T
    order = np.lexsort((np.broadcast_to(np.arange(500), sim.shape), -sim), axis=1)
    assert np.array_equal(out[0][1], order[:, :2])


@needs_numba
def test_col_argmax_flavors_agree(rng):
    sim = rng.normal(size=(200, 300)).astype(np.float32)
    sim[50] = sim[7]  # ties go to the smaller row
    assert np.array_equal(K.col_argmax_nb(sim), K.col_argmax_np(sim))


@needs_numba
def test_p3p_flavors_agree(rng):
    for _ in range(50):
        X = rng.normal(size=(3, 3)) + [0, 0, 6]
        f = X / np.linalg.norm(X, axis=1, keepdims=True)
        Ra, ta, na = K.p3p_solve_nb(X, f)
        Rb, tb, nb = K.p3p_solve_np(X, f)
        assert na == nb
        assert np.allclose(Ra[:na], Rb[:nb], atol=1e-9) and np.allclose(ta[:na], tb[:nb], atol=1e-9)


@needs_numba
def test_ransac_flavors_agree(rng):
    from hfloc.geometry import axis_angle_to_matrix
    R = axis_angle_to_matrix([0.1, -0.2, 0.05])
    t = np.array([0.2, -0.1, 0.5])
    X = rng.uniform(-2, 2, (80, 3)) + [0, 0, 8]
    xc = X @ R.T + t
    obs = 500 * xc[:, :2] / xc[:, 2:] + [320, 240]
    obs[:30] = rng.uniform(0, 640, (30, 2))
    xn = (obs - [320, 240]) / 500
    b = np.column_stack([xn, np.ones(80)])
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    samples = draw_samples(np.random.default_rng(3), 80, 500)
    args = (b, np.ascontiguousarray(X), np.ascontiguousarray(obs), 500.0, 500.0, 320.0, 240.0, 5.0, samples, 0.999)
    ra = K.ransac_p3p_nb(*args)
    rb = K.ransac_p3p_np(*args)
    assert ra[2] == rb[2] and ra[4] == rb[4]
    assert np.allclose(ra[0], rb[0], atol=1e-9) and np.allclose(ra[1], rb[1], atol=1e-9)
    assert np.allclose(ra[0], R, atol=1e-6)


def test_env_flag_selects_numpy(monkeypatch):
    import importlib
    monkeypatch.setenv("HFLOC_DISABLE_NUMBA", "1")
    mod = importlib.reload(K)
    try:
        assert not mod.USE_NUMBA
        assert mod.nms_sorted is mod.nms_sorted_np
    finally:
        monkeypatch.delenv("HFLOC_DISABLE_NUMBA")
        importlib.reload(K)
