"""Preprocessing of raw inertial windows.

A raw window is a ``[T, C, A]`` array (time, sensor channel, sensor axis)
sampled at 50 Hz. Each channel/axis series is smoothed with a 3-point moving
average, high-passed with a 4th-order Butterworth filter at 2 Hz, then the
window is flattened to ``[T, C*A]`` (channel-major, axis-minor) and every
feature column is z-scored over time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import sosfilt

from .errors import InvalidParameterError, ShapeError

SAMPLE_RATE_HZ = 50.0
HIGHPASS_CUTOFF_HZ = 2.0
HIGHPASS_ORDER = 4
SMOOTHING_WINDOW = 3
ZSCORE_EPS = 1e-8
MIN_WINDOW_LEN = 8


@dataclass
class RawWindow:
    values: np.ndarray  # [T, C, A]
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ShapeError(f"raw window must be [T, C, A], got shape {v.shape}")
        if v.shape[0] < MIN_WINDOW_LEN or v.shape[1] < 1 or v.shape[2] < 1:
            raise ShapeError(f"raw window too small: {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("raw window contains non-finite values")
        self.values = v


@dataclass
class FeatureSequence:
    values: np.ndarray  # [T, D]
    source: str = ""

    @property
    def shape(self):
        return self.values.shape


def moving_average(x, k=SMOOTHING_WINDOW):
    """Centered moving average with a clipped window at both edges.

    Works along axis 0, so a ``[T, ...]`` array smooths every series at once.
    """
    if int(k) != k or k < 1 or k % 2 == 0:
        raise InvalidParameterError(f"moving average window must be odd and >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise InvalidParameterError("moving average needs at least one sample")
    n = x.shape[0]
    # accumulate deviations from the centre sample so constant input stays exact
    dev = np.zeros_like(x)
    counts = np.ones(n)
    for d in range(1, min(k // 2, n - 1) + 1):
        dev[:-d] += x[d:] - x[:-d]
        dev[d:] += x[:-d] - x[d:]
        counts[:-d] += 1
        counts[d:] += 1
    return x + dev / counts.reshape((n,) + (1,) * (x.ndim - 1))


def butterworth_highpass_sos(cutoff_hz, fs_hz, order=HIGHPASS_ORDER):
    """Design a digital Butterworth high-pass as second-order sections.

    Analog prototype poles are mapped through the bilinear transform with
    the cutoff prewarped, so the -3 dB point lands exactly on ``cutoff_hz``.
    Returns an ``[n_sections, 6]`` array in ``(b0, b1, b2, a0, a1, a2)`` layout
    with ``a0 == 1``.
    """
    if not 0 < cutoff_hz < fs_hz / 2:
        raise InvalidParameterError(
            f"cutoff must lie in (0, Nyquist={fs_hz / 2}), got {cutoff_hz}")
    if int(order) != order or order < 1:
        raise InvalidParameterError(f"filter order must be a positive integer, got {order}")
    order = int(order)
    k = np.tan(np.pi * cutoff_hz / fs_hz)
    sections = []
    for i in range(order // 2):
        # conjugate pole pair of the normalized prototype: s^2 + s/q + 1
        inv_q = 2.0 * np.sin((2 * i + 1) * np.pi / (2 * order))
        a0 = 1.0 + k * inv_q + k * k
        sections.append([1.0 / a0, -2.0 / a0, 1.0 / a0,
                         1.0, (2.0 * k * k - 2.0) / a0, (1.0 - k * inv_q + k * k) / a0])
    if order % 2:
        a0 = 1.0 + k
        sections.append([1.0 / a0, -1.0 / a0, 0.0, 1.0, (k - 1.0) / a0, 0.0])
    return np.array(sections, dtype=np.float64)


def butterworth_highpass(x, cutoff_hz=HIGHPASS_CUTOFF_HZ, fs_hz=SAMPLE_RATE_HZ,
                         order=HIGHPASS_ORDER):
    """Causal single-pass high-pass filtering along axis 0, zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < MIN_WINDOW_LEN:
        raise InvalidParameterError(f"need at least {MIN_WINDOW_LEN} samples, got {x.shape[0]}")
    sos = butterworth_highpass_sos(cutoff_hz, fs_hz, order)
    return sosfilt(sos, x, axis=0)


def zscore(x, eps=ZSCORE_EPS):
    """Population z-score along axis 0; constant series map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return (x - mu) / np.maximum(sd, eps)


def flatten_channels(values):
    """``[T, C, A]`` -> ``[T, C*A]``, channel-major, axis-minor."""
    t = values.shape[0]
    return np.ascontiguousarray(values).reshape(t, -1)


def preprocess(w, source=""):
    """Smooth, high-pass, flatten and z-score one raw window.

    Accepts a RawWindow or a bare ``[T, C, A]`` array.
    """
    if not isinstance(w, RawWindow):
        w = RawWindow(np.asarray(w))
    x = moving_average(w.values.astype(np.float64), SMOOTHING_WINDOW)
    # referencing to the first sample == starting the filter at rest on x[0];
    # sensor offsets (gravity) then produce no step transient
    x = butterworth_highpass(x - x[:1], HIGHPASS_CUTOFF_HZ, w.sample_rate_hz, HIGHPASS_ORDER)
    x = flatten_channels(x)
    return FeatureSequence(zscore(x), source)
