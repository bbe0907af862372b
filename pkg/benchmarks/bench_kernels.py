#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against the pure-Python/numpy path.

The two hot kernels on the real-time path are the IIR filter recursion
(applied forward-backward per channel on every epoch) and the Gaussian
KDE sum (evaluated per stimulus on every sequence). Both exist as plain
Python functions that numba compiles when available; this script times
both paths on realistic shapes and checks they agree.

Run: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from rsvpbci import _accel
from rsvpbci.dsp import butter_bandpass

if not _accel.USING_NUMBA:
    print("numba path inactive (RSVPBCI_DISABLE_NUMBA set or numba missing);"
          " nothing to compare")
    raise SystemExit(0)


def time_call(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_iir():
    b, a = butter_bandpass(2, 50, 300, order=2)
    rng = np.random.default_rng(0)
    print(f"{'IIR filter':>14}  {'rows x n':>12}  {'numpy (ms)':>11}  "
          f"{'numba (ms)':>11}  {'speedup':>8}  {'max|diff|':>10}")
    for rows, n in [(32, 150), (256, 150), (25, 18000)]:
        x = rng.normal(size=(rows, n))
        zi = np.zeros(len(b) - 1)
        out_py = np.empty_like(x)
        out_jit = np.empty_like(x)

        def run(impl, out):
            for r in range(rows):
                impl(b, a, x[r], zi.copy(), out[r])

        run(_accel._iir_filter_jit, out_jit)  # warm the JIT cache
        t_py = time_call(run, _accel._iir_filter_py, out_py)
        t_jit = time_call(run, _accel._iir_filter_jit, out_jit)
        diff = np.abs(out_py - out_jit).max()
        print(f"{'':>14}  {f'{rows}x{n}':>12}  {t_py * 1e3:>11.2f}  "
              f"{t_jit * 1e3:>11.2f}  {t_py / t_jit:>7.1f}x  {diff:>10.2e}")
        assert diff == 0.0


def bench_kde():
    rng = np.random.default_rng(1)
    print(f"\n{'KDE sum':>14}  {'train x eval':>12}  {'numpy (ms)':>11}  "
          f"{'numba (ms)':>11}  {'speedup':>8}  {'max|diff|':>10}")
    for n_train, n_eval in [(550, 28), (550, 1000), (5000, 1000)]:
        train = np.sort(rng.normal(size=n_train))
        points = rng.normal(size=n_eval)
        out_py = np.empty(n_eval)
        out_jit = np.empty(n_eval)
        _accel._kde_sum_jit(train, 2.0, points, out_jit)  # warm
        t_py = time_call(_accel._kde_sum_py, train, 2.0, points, out_py)
        t_jit = time_call(_accel._kde_sum_jit, train, 2.0, points, out_jit)
        diff = np.abs(out_py - out_jit).max()
        rel = diff / np.abs(out_py).max()
        print(f"{'':>14}  {f'{n_train}x{n_eval}':>12}  {t_py * 1e3:>11.2f}  "
              f"{t_jit * 1e3:>11.2f}  {t_py / t_jit:>7.1f}x  {rel:>10.2e}")
        assert rel < 1e-12


if __name__ == "__main__":
    print("warming numba JIT (first call compiles)...")
    t0 = time.time()
    _accel.kde_density(np.zeros(4), 1.0, np.zeros(2))
    _accel.iir_filter([1.0, 0.0], [1.0, 0.0], np.zeros((1, 8)))
    print(f"warmup {time.time() - t0:.1f}s\n")
    bench_iir()
    bench_kde()
