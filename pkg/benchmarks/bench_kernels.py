"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--seed 0]

Both paths are imported side by side, so HFLOC_DISABLE_NUMBA does not
matter here.  Outputs are compared before timing.
"""
import argparse
import time

import numpy as np

from hfloc import _kernels as K
from hfloc.geometry import Camera
from hfloc.pose import _bearings, draw_samples


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def case_nms(rng):
    xy = rng.uniform([0, 0], [640, 480], size=(8000, 2))
    args = (xy, 4.0, 2000)
    return "nms 8000 pts r=4", lambda: K.nms_sorted_nb(*args), lambda: K.nms_sorted_np(*args), np.array_equal


def case_top2(rng):
    sim = rng.normal(size=(2000, 16384)).astype(np.float32)

    def run(fn):
        def go():
            bs = np.full((2000, 2), -np.inf, dtype=np.float32)
            bi = np.full((2000, 2), -1, dtype=np.int64)
            fn(sim, 0, bs, bi)
            return bs, bi
        return go

    def same(a, b):
        return np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    return "top2 2000x16384 f32", run(K.top2_update_nb), run(K.top2_update_np), same


def case_colmax(rng):
    sim = rng.normal(size=(3000, 3000)).astype(np.float32)
    return "col argmax 3000x3000", lambda: K.col_argmax_nb(sim), lambda: K.col_argmax_np(sim), np.array_equal


def case_ransac(rng):
    cam = Camera(640, 480, 500.0, 500.0, 320.0, 240.0)
    n = 1000
    xc = np.column_stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.45, 0.45, n), rng.uniform(4, 12, n)])
    xc[:, :2] *= xc[:, 2:]
    uv = xc[:, :2] / xc[:, 2:] * 500.0 + [320.0, 240.0] + rng.normal(size=(n, 2))
    uv[:600] = rng.uniform([0, 0], [640, 480], size=(600, 2))
    b, xn = _bearings(cam, uv)
    obs = np.ascontiguousarray(xn * 500.0 + [320.0, 240.0])
    samples = draw_samples(rng, n, 2000)
    args = (np.ascontiguousarray(b), np.ascontiguousarray(xc), obs, 500.0, 500.0, 320.0, 240.0, 10.0, samples, 0.999)

    def same(a, b):
        return a[2] == b[2] and a[4] == b[4] and np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])
    return "P3P RANSAC 1000 pts 60% out", lambda: K.ransac_p3p_nb(*args), lambda: K.ransac_p3p_np(*args), same


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  same")
    for make in (case_nms, case_top2, case_colmax, case_ransac):
        name, nb, npy, same = make(rng)
        ok = same(nb(), npy())
        t_nb = best_of(nb, args.repeat)
        t_np = best_of(npy, args.repeat)
        print(f"{name:32s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.1f}x  {ok}")


if __name__ == "__main__":
    main()
