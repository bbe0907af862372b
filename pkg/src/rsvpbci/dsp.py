"""Filtering and spectral decomposition.

Filters are designed from the analog Butterworth prototype via the
bilinear transform with frequency pre-warping and applied forward-backward
(zero phase), so an order-2 design attenuates like an order-4 magnitude
response. Edge transients are reduced by odd-reflection padding of
3 * order samples plus steady-state initial conditions.

Data layout is channels x samples everywhere; all operations preserve it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from rsvpbci._accel import iir_filter


class InvalidCutoffs(ValueError):
    pass


class InvalidFrequency(ValueError):
    pass


class InvalidFactor(ValueError):
    pass


class TooShort(ValueError):
    pass


class BandOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    """Filtering configuration shared by training and inference."""

    low_cutoff: float = 2.0
    high_cutoff: float = 50.0
    order: int = 2
    notch_freq: float = 60.0
    notch_quality: float = 30.0
    downsample_factor: int = 2

    def validate(self, sample_rate: float):
        if not 0 < self.low_cutoff < self.high_cutoff < sample_rate / 2:
            raise InvalidCutoffs(
                f"need 0 < {self.low_cutoff} < {self.high_cutoff} < {sample_rate / 2}")
        if self.order < 1:
            raise InvalidCutoffs("order must be >= 1")
        if self.downsample_factor < 1:
            raise InvalidFactor("downsample_factor must be >= 1")


# --------------------------------------------------------------------------
# Design
# --------------------------------------------------------------------------

def _butter_prototype(order: int) -> np.ndarray:
    """Poles of the analog Butterworth lowpass prototype (cutoff 1 rad/s)."""
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _bilinear_zpk(zeros, poles, gain, fs):
    """Map analog zeros/poles/gain to the z-plane, s -> 2fs (z-1)/(z+1)."""
    fs2 = 2.0 * fs
    degree = len(poles) - len(zeros)
    z_d = (fs2 + zeros) / (fs2 - zeros)
    p_d = (fs2 + poles) / (fs2 - poles)
    z_d = np.append(z_d, -np.ones(degree))
    k_d = gain * np.real(np.prod(fs2 - zeros) / np.prod(fs2 - poles))
    return z_d, p_d, k_d


def _zpk_to_ba(zeros, poles, gain):
    b = np.atleast_1d(gain * np.poly(zeros))
    a = np.atleast_1d(np.poly(poles))
    if np.max(np.abs(b.imag)) > 1e-8 or np.max(np.abs(a.imag)) > 1e-8:
        raise ValueError("coefficients came out complex; conjugate pairing broke")
    return b.real, a.real


def butter_bandpass(low: float, high: float, fs: float, order: int = 2):
    """Digital Butterworth bandpass coefficients (b, a).

    Analog prototype poles are frequency pre-warped, run through the
    lowpass-to-bandpass transform, then the bilinear transform.
    """
    if not 0 < low < high < fs / 2:
        raise InvalidCutoffs(f"need 0 < {low} < {high} < {fs / 2}")
    warped_lo = 2 * fs * math.tan(math.pi * low / fs)
    warped_hi = 2 * fs * math.tan(math.pi * high / fs)
    bw = warped_hi - warped_lo
    w0_sq = warped_lo * warped_hi

    proto = _butter_prototype(order)
    scaled = proto * bw
    disc = np.sqrt(scaled**2 - 4 * w0_sq + 0j)
    poles = np.concatenate(((scaled + disc) / 2, (scaled - disc) / 2))
    zeros = np.zeros(order, dtype=complex)
    gain = bw**order

    return _zpk_to_ba(*_bilinear_zpk(zeros, poles, gain, fs))


def notch_coefficients(notch_freq: float, fs: float, quality: float = 30.0):
    """Second-order IIR notch (unity gain at DC and Nyquist)."""
    if not 0 < notch_freq < fs / 2:
        raise InvalidFrequency(f"need 0 < {notch_freq} < {fs / 2}")
    w0 = 2 * math.pi * notch_freq / fs
    alpha = math.sin(w0) / (2 * quality)
    b = np.array([1.0, -2 * math.cos(w0), 1.0])
    a = np.array([1 + alpha, -2 * math.cos(w0), 1 - alpha])
    return b / a[0], a / a[0]


# --------------------------------------------------------------------------
# Application
# --------------------------------------------------------------------------

def _lfilter_zi(b, a):
    """Steady-state delay-line state for a unit step (scaled by x[0] at use)."""
    n = len(a)
    companion_t = np.zeros((n - 1, n - 1))
    companion_t[:, 0] = -a[1:]
    companion_t[:-1, 1:] = np.eye(n - 2)
    rhs = b[1:] - a[1:] * b[0]
    return np.linalg.solve(np.eye(n - 1) - companion_t, rhs)


def _filtfilt(b, a, data: np.ndarray, pad: int) -> np.ndarray:
    """Zero-phase forward-backward filtering along the last axis."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n = data.shape[-1]
    if n <= pad:
        raise TooShort(f"need more than {pad} samples, got {n}")

    left = 2 * data[:, :1] - data[:, pad:0:-1]
    right = 2 * data[:, -1:] - data[:, -2:-pad - 2:-1]
    ext = np.concatenate([left, data, right], axis=-1)

    zi = _lfilter_zi(b, a)
    fwd = iir_filter(b, a, ext, zi=zi[None, :] * ext[:, :1])
    rev = fwd[:, ::-1]
    back = iir_filter(b, a, rev, zi=zi[None, :] * rev[:, :1])
    return back[:, ::-1][:, pad:pad + n]


def butter_bandpass_filter(data, low: float, high: float, fs: float,
                           order: int = 2) -> np.ndarray:
    """Zero-phase Butterworth bandpass, per channel.

    data: channels x samples (a 1-D array is treated as one channel).
    Output has the same shape and length as the input.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.shape[-1] <= 3 * order:
        raise TooShort(f"need more than {3 * order} samples, got {arr.shape[-1]}")
    b, a = butter_bandpass(low, high, fs, order)
    out = _filtfilt(b, a, arr, pad=3 * order)
    return out.reshape(arr.shape)


def notch_filter(data, fs: float, notch_freq: float = 60.0,
                 quality: float = 30.0) -> np.ndarray:
    """Zero-phase second-order notch, per channel."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.shape[-1] <= 6:
        raise TooShort(f"need more than 6 samples, got {arr.shape[-1]}")
    b, a = notch_coefficients(notch_freq, fs, quality)
    out = _filtfilt(b, a, arr, pad=6)
    return out.reshape(arr.shape)


def downsample(data, factor: int = 2) -> np.ndarray:
    """Keep every factor-th sample (pure decimation; anti-aliasing is the
    caller's preceding bandpass)."""
    if factor < 1 or int(factor) != factor:
        raise InvalidFactor(f"factor must be a positive integer, got {factor}")
    arr = np.asarray(data)
    return arr[..., ::int(factor)]


def apply_filter_chain(data, spec: FilterSpec, fs: float) -> np.ndarray:
    """Notch, then bandpass, then decimation, matching the standard chain."""
    spec.validate(fs)
    out = notch_filter(data, fs, spec.notch_freq, spec.notch_quality)
    out = butter_bandpass_filter(out, spec.low_cutoff, spec.high_cutoff, fs,
                                 spec.order)
    return downsample(out, spec.downsample_factor)


# --------------------------------------------------------------------------
# Spectral decomposition
# --------------------------------------------------------------------------

def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _segment_starts(n: int, seg: int) -> np.ndarray:
    hop = seg // 2  # 50% overlap
    return np.arange(0, n - seg + 1, hop)


def welch_spectrum(data, fs: float, window_length: float):
    """One-sided Welch PSD: mean of Hann-windowed periodograms with 50%
    overlap. Returns (frequencies, power density in units^2/Hz)."""
    x = np.asarray(data, dtype=np.float64).ravel()
    seg = int(round(window_length * fs))
    if seg < 2 or len(x) < seg:
        raise TooShort(f"need at least {seg} samples, got {len(x)}")
    win = _hann(seg)
    scale = 1.0 / (fs * np.sum(win**2))
    acc = np.zeros(seg // 2 + 1)
    starts = _segment_starts(len(x), seg)
    for s in starts:
        spec = np.fft.rfft(x[s:s + seg] * win)
        acc += (spec.real**2 + spec.imag**2) * scale
    psd = _one_sided(acc / len(starts), seg)
    freqs = np.fft.rfftfreq(seg, 1.0 / fs)
    return freqs, psd


def _one_sided(psd: np.ndarray, seg: int) -> np.ndarray:
    # double everything but DC, and but Nyquist when seg is even
    if seg % 2 == 0:
        psd[1:-1] *= 2.0
    else:
        psd[1:] *= 2.0
    return psd


def dpss_tapers(n: int, half_bandwidth: float = 4.0, count: int = 7):
    """Discrete prolate spheroidal sequences from the symmetric tridiagonal
    formulation; rows are unit-energy tapers ordered by concentration."""
    if count > n:
        raise TooShort(f"cannot build {count} tapers from {n} samples")
    w = half_bandwidth / n
    idx = np.arange(n)
    diag = ((n - 1 - 2 * idx) / 2.0) ** 2 * np.cos(2 * np.pi * w)
    off = (idx[1:] * (n - idx[1:])) / 2.0
    vals, vecs = eigh_tridiagonal(diag, off, select="i",
                                  select_range=(n - count, n - 1))
    tapers = vecs[:, ::-1].T  # largest eigenvalue first
    # polarity convention: symmetric tapers positive mean, antisymmetric
    # tapers positive initial slope
    for k, taper in enumerate(tapers):
        if k % 2 == 0:
            if taper.sum() < 0:
                tapers[k] = -taper
        elif taper[: n // 2].sum() < 0:
            tapers[k] = -taper
    return tapers


def multitaper_spectrum(data, fs: float, window_length: float,
                        half_bandwidth: float = 4.0, taper_count: int = 7):
    """One-sided multitaper PSD: DPSS-tapered eigenspectra averaged
    unweighted within each 50%-overlapping segment, then across segments."""
    x = np.asarray(data, dtype=np.float64).ravel()
    seg = int(round(window_length * fs))
    if seg < taper_count or len(x) < seg:
        raise TooShort(f"need at least {seg} samples, got {len(x)}")
    tapers = dpss_tapers(seg, half_bandwidth, taper_count)
    acc = np.zeros(seg // 2 + 1)
    starts = _segment_starts(len(x), seg)
    for s in starts:
        chunk = x[s:s + seg]
        spec = np.fft.rfft(tapers * chunk[None, :], axis=-1)
        acc += (spec.real**2 + spec.imag**2).mean(axis=0) / fs
    psd = _one_sided(acc / len(starts), seg)
    freqs = np.fft.rfftfreq(seg, 1.0 / fs)
    return freqs, psd


def band_power(freqs: np.ndarray, psd: np.ndarray, band) -> float:
    """Trapezoid-integrated power over bins with lo < f <= hi."""
    lo, hi = band
    mask = (freqs > lo) & (freqs <= hi)
    if mask.sum() < 2:
        return 0.0
    return float(np.trapezoid(psd[mask], freqs[mask]))


def power_spectral_density(data, band, fs: float, window_length: float,
                           method: str = "welch", relative: bool = False,
                           plot: bool = False, plot_path=None) -> float:
    """Band power (units^2/Hz integrated over the band) of one channel.

    band: (lo, hi) in Hz with 0 <= lo < hi <= fs/2. relative=True divides
    by total power over (0, fs/2]. plot=True writes the full spectrum to a
    CSV sidecar at plot_path instead of rendering anything.
    """
    lo, hi = band
    if not (0 <= lo < hi <= fs / 2):
        raise BandOutOfRange(f"need 0 <= {lo} < {hi} <= {fs / 2}")
    method_l = str(method).lower()
    if method_l == "welch":
        freqs, psd = welch_spectrum(data, fs, window_length)
    elif method_l == "multitaper":
        freqs, psd = multitaper_spectrum(data, fs, window_length)
    else:
        raise ValueError(f"unknown method {method!r}")

    power = band_power(freqs, psd, (lo, hi))
    if relative:
        total = band_power(freqs, psd, (0.0, fs / 2))
        power = power / total if total > 0 else 0.0

    if plot:
        if plot_path is None:
            raise ValueError("plot=True needs plot_path")
        with open(plot_path, "w", encoding="utf-8") as f:
            f.write("frequency_hz,power\n")
            for fq, p in zip(freqs, psd):
                f.write(f"{fq:.6f},{p:.12g}\n")
    return power
