"""Ensemble statistics of detected excitation positions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks


@dataclass
class ShotStatistics:
    n_shots: int
    bin_width: float
    hist_1d: np.ndarray
    hist_2d: np.ndarray
    x_edges: np.ndarray
    y_edges: np.ndarray
    n_target: int = 5

    @property
    def x_centers(self) -> np.ndarray:
        return 0.5 * (self.x_edges[1:] + self.x_edges[:-1])


@dataclass
class CorrelationResult:
    delta_x: np.ndarray
    g2: np.ndarray  # NaN where the denominator vanishes
    counts: np.ndarray  # summed coincidences per lag
    n_factor: float


@dataclass
class FftSpectrum:
    spatial_frequency: np.ndarray
    magnitude: np.ndarray
    peak_frequency: float


def _as_x(shot) -> np.ndarray:
    a = np.asarray(shot, dtype=float)
    if a.size == 0:
        return np.zeros(0)
    return a[:, 0] if a.ndim == 2 else a.ravel()


def occupancy(shots: Sequence, edges: np.ndarray) -> np.ndarray:
    """Binarized (n_shots, n_bins) occupation n_ryd(x_i) per shot."""
    occ = np.zeros((len(shots), len(edges) - 1), dtype=np.int8)
    for s, shot in enumerate(shots):
        x = _as_x(shot)
        k = np.searchsorted(edges, x, side="right") - 1
        k = k[(k >= 0) & (k < occ.shape[1]) & (x <= edges[-1])]
        occ[s, k] = 1
    return occ


def pair_correlation(shots: Sequence, bins, n_target: int) -> CorrelationResult:
    """g2 at positive lags from binarized per-shot occupations.

    g2(k) = N/(N-1) * sum_i <n_i n_{i+k}> / sum_i <n_i><n_{i+k}>, with <.> the
    shot average and k a lag in bins.
    """
    if n_target < 2:
        raise ValueError("n_target must be >= 2 for the N/(N-1) prefactor")
    if len(shots) < 2:
        raise ValueError("at least two shots are required")
    edges = np.asarray(bins, dtype=float)
    widths = np.diff(edges)
    occ = occupancy(shots, edges).astype(float)
    mean = occ.mean(axis=0)
    nb = occ.shape[1]
    lags = np.arange(1, nb)
    num = np.empty(lags.size)
    den = np.empty(lags.size)
    counts = np.empty(lags.size)
    for j, k in enumerate(lags):
        prod = occ[:, :-k] * occ[:, k:]
        counts[j] = prod.sum()
        num[j] = prod.mean(axis=0).sum()
        den[j] = (mean[:-k] * mean[k:]).sum()
    factor = n_target / (n_target - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        g2 = np.where(den > 0, factor * num / np.where(den > 0, den, 1.0), np.nan)
    return CorrelationResult(lags * widths.mean(), g2, counts, factor)


def pixel_edges(x0: float, pitch: float, lo: float, hi: float) -> np.ndarray:
    """Bin edges on pixel boundaries (pixel centres at x0 + k*pitch) covering [lo, hi]."""
    first = np.floor((lo - x0 + pitch / 2) / pitch + 1e-9)
    last = np.ceil((hi - x0 + pitch / 2) / pitch - 1e-9)
    return x0 - pitch / 2 + pitch * np.arange(first, last + 1)


def position_histograms(shots: Sequence, bin_width: float, x_range: tuple[float, float],
                        y_range: tuple[float, float] | None = None, n_target: int = 5) -> ShotStatistics:
    """2D (x, y) histogram and its y-integrated 1D projection.

    The x bins exactly tile x_range, so the actual width is the nearest
    value to bin_width that divides it; an explicit edge array is also accepted.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if np.ndim(x_range) == 1 and len(x_range) > 2:
        x_edges = np.asarray(x_range, dtype=float)
    else:
        nx = max(int(round((x_range[1] - x_range[0]) / bin_width)), 1)
        x_edges = np.linspace(x_range[0], x_range[1], nx + 1)
    pts = [np.atleast_2d(np.asarray(s, dtype=float)) for s in shots if np.size(s)]
    xy = np.vstack(pts) if pts else np.zeros((0, 2))
    if xy.shape[1] == 1:
        xy = np.column_stack([xy[:, 0], np.zeros(len(xy))])
    if y_range is None:
        y_range = (float(xy[:, 1].min()) - bin_width, float(xy[:, 1].max()) + bin_width) if len(xy) else (-1.0, 1.0)
    ny = max(int(round((y_range[1] - y_range[0]) / bin_width)), 1)
    y_edges = np.linspace(y_range[0], y_range[1], ny + 1)
    h2, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], bins=[x_edges, y_edges])
    h2 = h2.astype(np.int64)
    return ShotStatistics(len(shots), float(np.diff(x_edges).mean()), h2.sum(axis=1), h2,
                          x_edges, y_edges, n_target)


def fft_spectrum(hist_1d, bin_width: float, window: str | None = None) -> FftSpectrum:
    """One-sided amplitude spectrum of the mean-subtracted histogram.

    Magnitudes are scaled so that sum(magnitude**2) equals the sum of squared
    (windowed) input values.
    """
    h = np.asarray(hist_1d, dtype=float)
    n = h.size
    if n < 8:
        raise ValueError("need at least 8 bins")
    x = h - h.mean()
    if window == "hann":
        x = x * np.hanning(n)
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    coef = np.fft.rfft(x)
    weight = np.full(coef.size, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    mag = np.abs(coef) * np.sqrt(weight / n)
    freq = np.fft.rfftfreq(n, d=bin_width)
    # harmonics of an ideal comb tie exactly; report the lowest (fundamental)
    k = 1 + int(np.argmax(mag[1:] >= mag[1:].max() * (1 - 1e-9)))
    return FftSpectrum(freq, mag, float(freq[k]))


def amplitude_histograms(in_region: Sequence[float], off_region: Sequence[float], bins):
    """Binned A_peak distributions of excitation-region and control-region detections."""
    if len(in_region) == 0 or len(off_region) == 0:
        raise ValueError("both detection regions must be non-empty")
    h_in, edges = np.histogram(np.asarray(in_region, float), bins=bins)
    h_off, _ = np.histogram(np.asarray(off_region, float), bins=edges)
    return h_in, h_off, edges


def count_peaks(hist_1d, prominence_frac: float = 0.1, smooth_bins: int = 3) -> int:
    """Number of separated maxima in a 1D histogram after a short moving average."""
    h = np.asarray(hist_1d, dtype=float)
    if smooth_bins > 1:
        h = np.convolve(h, np.ones(smooth_bins) / smooth_bins, mode="same")
    if h.max() <= 0:
        return 0
    # pad so that maxima in the first/last bin still count
    padded = np.concatenate([[0.0], h, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence_frac * h.max())
    return int(len(peaks))
