"""Hot numeric kernels with optional numba JIT.

The IIR filter recursion and the Gaussian-kernel density sum are the two
sequential inner loops on the real-time path. Both are written once as
plain Python/numpy loops; when numba is importable (and not disabled via
the RSVPBCI_DISABLE_NUMBA environment variable) the same functions are
compiled with @njit. The filter kernel is bit-identical across paths; the
KDE kernel agrees to within math-library rounding (about one ulp).
benchmarks/bench_kernels.py checks agreement while timing both.

Set RSVPBCI_DISABLE_NUMBA=1 to force the pure-numpy path.
"""

import os

import numpy as np

DISABLE_FLAG = "RSVPBCI_DISABLE_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(DISABLE_FLAG, "").strip() not in ("", "0")


def _iir_filter_py(b, a, x, zi, out):
    """Direct-form II transposed IIR filter, one channel.

    b, a: coefficient arrays of equal length (a[0] == 1).
    zi: initial delay-line state, length len(b) - 1; mutated in place.
    out: preallocated output array, same length as x.
    """
    n_state = zi.shape[0]
    for i in range(x.shape[0]):
        xn = x[i]
        yn = b[0] * xn + zi[0]
        for j in range(n_state - 1):
            zi[j] = b[j + 1] * xn + zi[j + 1] - a[j + 1] * yn
        zi[n_state - 1] = b[n_state] * xn - a[n_state] * yn
        out[i] = yn


def _kde_sum_py(train, inv_h, points, out):
    """Mean Gaussian kernel density of `points` under samples `train`.

    inv_h is 1/bandwidth. out[i] = (1/(n*h)) * sum_j phi((p_i - t_j)/h).
    """
    norm = inv_h / np.sqrt(2.0 * np.pi) / train.shape[0]
    for i in range(points.shape[0]):
        acc = 0.0
        for j in range(train.shape[0]):
            u = (points[i] - train[j]) * inv_h
            acc += np.exp(-0.5 * u * u)
        out[i] = acc * norm


USING_NUMBA = False
if not _numba_disabled():
    try:
        from numba import njit

        _iir_filter_jit = njit(cache=True)(_iir_filter_py)
        _kde_sum_jit = njit(cache=True)(_kde_sum_py)
        USING_NUMBA = True
    except ImportError:
        pass

if USING_NUMBA:
    _iir_filter_impl = _iir_filter_jit
    _kde_sum_impl = _kde_sum_jit
else:
    _iir_filter_impl = _iir_filter_py
    _kde_sum_impl = _kde_sum_py


def iir_filter(b, a, x, zi=None):
    """Apply an IIR filter along the last axis of x with optional initial
    state. Returns a new float64 array of the same shape."""
    b = np.ascontiguousarray(b, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    out = np.empty_like(flat)
    for row in range(flat.shape[0]):
        state = np.zeros(len(b) - 1) if zi is None else zi[row].copy()
        _iir_filter_impl(b, a, flat[row], state, out[row])
    return out.reshape(x.shape)


def kde_density(train, bandwidth, points):
    """Gaussian KDE density values at `points` given training samples."""
    train = np.ascontiguousarray(train, dtype=np.float64)
    points = np.ascontiguousarray(np.atleast_1d(points), dtype=np.float64)
    out = np.empty(points.shape[0])
    _kde_sum_impl(train, 1.0 / float(bandwidth), points, out)
    return out
