#!/usr/bin/env python3
"""Numba kernels vs their pure-numpy twins.

Both variants are called directly, so ATDN_DISABLE_NUMBA does not matter here.
Outputs are compared before timing.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from atdn import kernels
from atdn.geometry import Pose, Trajectory, axis_angle_to_matrix, compose


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_case():
    x = np.random.default_rng(0).normal(size=(32, 8, 32, 32)).astype(np.float32)
    args = (3, 3, 2, 1)
    cols = kernels.im2col_np(x, *args)
    ok = np.array_equal(cols, kernels.im2col_nb(x, *args))
    back = (kernels.col2im_np(cols, x.shape, *args), kernels.col2im_nb(cols, x.shape, *args))
    ok = ok and np.allclose(*back, rtol=1e-6, atol=1e-6)
    return ("im2col 32x8x32x32", lambda: kernels.im2col_np(x, *args), lambda: kernels.im2col_nb(x, *args), ok), \
           ("col2im 32x8x32x32", lambda: kernels.col2im_np(cols, x.shape, *args),
            lambda: kernels.col2im_nb(cols, x.shape, *args), ok)


def segment_case(n=2000):
    rng = np.random.default_rng(1)
    poses, p = [], Pose.identity()
    for _ in range(n):
        poses.append(p)
        p = compose(p, Pose(axis_angle_to_matrix(rng.normal(scale=0.02, size=3)), [1.0, 0.0, 0.0]))
    gt = Trajectory.from_poses(poses)
    est = gt.left_multiplied(Pose.identity())
    lengths = np.arange(100.0, 801.0, 100.0)
    args = (gt.rotations, gt.translations, est.rotations, est.translations, gt.path_lengths(), lengths)
    a, b = kernels.segment_errors_np(*args), kernels.segment_errors_nb(*args)
    ok = all(np.allclose(x, y, rtol=0, atol=1e-12) for x, y in zip(a, b))
    return (f"segment errors {n} frames", lambda: kernels.segment_errors_np(*args),
            lambda: kernels.segment_errors_nb(*args), ok)


def noise_case():
    ys, xs = np.mgrid[0:256, 0:256] * 0.05
    ok = np.array_equal(kernels.value_noise_np(xs, ys, 3, 3), kernels.value_noise_nb(xs, ys, 3, 3))
    return ("value noise 256x256", lambda: kernels.value_noise_np(xs, ys, 3, 3),
            lambda: kernels.value_noise_nb(xs, ys, 3, 3), ok)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = [*conv_case(), segment_case(), noise_case()]
    print(f"{'kernel':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}  match")
    for name, f_np, f_nb, ok in cases:
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:<28}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
