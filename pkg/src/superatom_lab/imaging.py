"""Synthetic absorption frames and the spot detection pipeline.

Frames hold the probe transmission on a pixel grid; pixel (row j, col i)
is centred at (x0 + i*pitch, y0 + j*pitch) in micrometres.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize

from .chainmc import ChainSample
from .eitmodel import CloudGeometry, EitParams, transmission_profile

PIXEL_PITCH_UM = 2.48
SAF_MAGIC = b"SAF1"
_HEADER = struct.Struct("<4sIIf")


@dataclass
class ImageFrame:
    width: int
    height: int
    pixel_pitch: float
    values: np.ndarray  # shape (height, width)
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")
        if self.values.size != self.width * self.height:
            raise ValueError("width*height does not match the number of values")
        self.values = self.values.reshape(self.height, self.width)

    @property
    def xs(self) -> np.ndarray:
        return self.x0 + self.pixel_pitch * np.arange(self.width)

    @property
    def ys(self) -> np.ndarray:
        return self.y0 + self.pixel_pitch * np.arange(self.height)

    def to_pixel(self, x, y):
        return (np.asarray(x) - self.x0) / self.pixel_pitch, (np.asarray(y) - self.y0) / self.pixel_pitch

    def to_um(self, col, row):
        return self.x0 + col * self.pixel_pitch, self.y0 + row * self.pixel_pitch

    def with_values(self, values: np.ndarray) -> "ImageFrame":
        return ImageFrame(self.width, self.height, self.pixel_pitch, values, self.x0, self.y0)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(SAF_MAGIC, self.width, self.height, self.pixel_pitch)
        return head + self.values.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes, x0: float = 0.0, y0: float = 0.0) -> "ImageFrame":
        if len(blob) < _HEADER.size:
            raise ValueError("truncated frame header")
        magic, w, h, pitch = _HEADER.unpack_from(blob)
        if magic != SAF_MAGIC:
            raise ValueError(f"bad frame magic {magic!r}")
        data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
        if data.size != w * h:
            raise ValueError("frame payload size does not match header")
        return cls(w, h, pitch, data.astype(float), x0, y0)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, x0: float = 0.0, y0: float = 0.0) -> "ImageFrame":
        return cls.from_bytes(Path(path).read_bytes(), x0, y0)

    def save_csv(self, path) -> None:
        np.savetxt(path, self.values.astype(np.float32), delimiter=",", fmt="%.9g")


@dataclass(frozen=True)
class SpotModel:
    amplitude_mean: float = 0.08
    amplitude_std: float = 0.02
    sigma_x: float = 6.2
    sigma_y: float = 5.2
    placement_jitter: float = 0.0

    def __post_init__(self):
        if not 0 < self.amplitude_mean < 1:
            raise ValueError("amplitude_mean must lie in (0, 1)")
        if self.amplitude_std < 0 or self.placement_jitter < 0:
            raise ValueError("amplitude_std and placement_jitter must be >= 0")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("spot sigmas must be positive")


@dataclass(frozen=True)
class NoiseModel:
    white_std: float = 0.0
    fringe_amplitude: float = 0.0
    fringe_period: float = 40.0
    snr_scale: float = 1.0
    # Gaussian correlation length of the pixel noise; 0 gives white noise
    correlation_px: float = 0.0

    def __post_init__(self):
        if self.white_std < 0 or self.fringe_amplitude < 0 or self.correlation_px < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.snr_scale <= 0 or self.fringe_period <= 0:
            raise ValueError("snr_scale and fringe_period must be positive")

    @property
    def effective_std(self) -> float:
        return self.white_std / self.snr_scale


@dataclass
class SpotDetection:
    x: float
    y: float
    a_peak: float
    sigma_x: float = float("nan")
    sigma_y: float = float("nan")
    above_threshold: bool = False
    col: int = 0
    row: int = 0
    fit_ok: bool = False
    fit_amplitude: float = float("nan")
    fit_message: str = ""


# --------------------------------------------------------------- rendering


def frame_geometry(cloud: CloudGeometry, pitch: float = PIXEL_PITCH_UM,
                   y_half: float | None = None) -> tuple[int, int, float, float]:
    """(width, height, x0, y0) of a frame covering x_extent around the excitation region."""
    if y_half is None:
        y_half = 5 * cloud.sigma_r
    width = int(math.ceil(cloud.x_extent / pitch))
    height = 2 * int(math.ceil(y_half / pitch)) + 1
    # a pixel boundary sits at x = 0, the start of the excitation region
    n_left = int(math.ceil((width * pitch - cloud.a_x) / 2 / pitch))
    x0 = -n_left * pitch + pitch / 2
    y0 = -pitch * (height - 1) / 2
    return width, height, x0, y0


def background(cloud: CloudGeometry, eit: EitParams | None, ys: np.ndarray,
               normalized: bool = True) -> np.ndarray:
    """Bare-EIT background row profile T_bg(y).

    With normalized=True the profile is divided by itself, i.e. frames are
    referenced to the no-excitation EIT image and the background is 1.
    """
    if eit is None or normalized:
        return np.ones_like(ys, dtype=float)
    return transmission_profile(cloud, eit, ys)


def _noise_field(noise: NoiseModel, shape, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(shape)
    std = noise.effective_std
    if std > 0:
        w = rng.standard_normal(shape)
        if noise.correlation_px > 0:
            w = ndimage.gaussian_filter(w, noise.correlation_px, mode="wrap")
            w /= math.sqrt(kernel_sum_of_squares(noise.correlation_px))
        out += std * w
    if noise.fringe_amplitude > 0:
        phase = rng.uniform(0, 2 * math.pi)
        out += noise.fringe_amplitude * np.sin(2 * math.pi * xs / noise.fringe_period + phase)[None, :]
    return out


def render_frame(sample: ChainSample | None, cloud: CloudGeometry, spot: SpotModel,
                 noise: NoiseModel, rng: np.random.Generator, *, eit: EitParams | None = None,
                 pitch: float = PIXEL_PITCH_UM, normalized: bool = True,
                 y_half: float | None = None) -> ImageFrame:
    width, height, x0, y0 = frame_geometry(cloud, pitch, y_half)
    frame = ImageFrame(width, height, pitch, np.zeros((height, width)), x0, y0)
    xs, ys = frame.xs, frame.ys
    t = np.repeat(background(cloud, eit, ys, normalized)[:, None], width, axis=1)
    positions = np.zeros((0, 2)) if sample is None else np.asarray(sample.positions, float)
    if len(positions):
        lo_x, hi_x = xs[0] - pitch / 2, xs[-1] + pitch / 2
        lo_y, hi_y = ys[0] - pitch / 2, ys[-1] + pitch / 2
        if (positions[:, 0].min() < lo_x or positions[:, 0].max() > hi_x
                or positions[:, 1].min() < lo_y or positions[:, 1].max() > hi_y):
            raise ValueError("sample positions fall outside the frame")
    for px, py in positions:
        amp = spot.amplitude_mean + spot.amplitude_std * rng.standard_normal()
        amp = float(np.clip(amp, 0.0, 1.0))
        if spot.placement_jitter > 0:
            px += spot.placement_jitter * rng.standard_normal()
            py += spot.placement_jitter * rng.standard_normal()
        gx = np.exp(-(xs - px) ** 2 / (2 * spot.sigma_x ** 2))
        gy = np.exp(-(ys - py) ** 2 / (2 * spot.sigma_y ** 2))
        t -= amp * np.outer(gy, gx)
    t += _noise_field(noise, t.shape, xs, rng)
    return frame.with_values(t)


# ------------------------------------------------------------- smoothing


def gaussian_kernel1d(sigma_px: float, truncate: float = 4.0) -> np.ndarray:
    if sigma_px <= 0:
        return np.ones(1)
    r = int(truncate * sigma_px + 0.5)
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma_px) ** 2)
    return k / k.sum()


def kernel_sum_of_squares(sigma_px: float) -> float:
    """Variance reduction factor of the 2D separable kernel on white noise."""
    return float(np.sum(gaussian_kernel1d(sigma_px) ** 2) ** 2)


def smooth(frame: ImageFrame, filter_sigma_px: float) -> ImageFrame:
    if filter_sigma_px < 0:
        raise ValueError("filter_sigma_px must be >= 0")
    if filter_sigma_px == 0:
        return frame.with_values(frame.values.copy())
    v = ndimage.gaussian_filter(frame.values, filter_sigma_px, mode="reflect", truncate=4.0)
    return frame.with_values(v)


# ------------------------------------------------------------- detection


def local_minima(values: np.ndarray) -> np.ndarray:
    """(row, col) of strict 8-neighbourhood minima.

    Pixels are ordered by (value, col, row); a pixel is a minimum if it
    precedes every neighbour, so plateaus resolve to their lowest index.
    A pixel must also lie strictly below at least one in-frame neighbour,
    which keeps perfectly flat regions from producing minima.
    """
    h, w = values.shape
    pad = np.pad(values, 1, constant_values=np.inf)
    is_min = np.ones_like(values, dtype=bool)
    has_lower = np.zeros_like(values, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            # neighbour position order: compare col first, then row
            nb_first = (dc < 0) or (dc == 0 and dr < 0)
            is_min &= (values < nb) | ((values == nb) & (not nb_first))
            has_lower |= (values < nb) & np.isfinite(nb)
    return np.argwhere(is_min & has_lower)


def detect_peaks(frame_smoothed: ImageFrame, a_thld: float = 0.045, min_separation_px: float = 5.0,
                 region: tuple[float, float, float, float] | None = None) -> list[SpotDetection]:
    """Local transmission minima with A_peak = 1 - T_min, deepest first after suppression.

    region = (x_lo, x_hi, y_lo, y_hi) in um keeps only minima inside it.
    """
    if a_thld < 0 or min_separation_px < 0:
        raise ValueError("thresholds must be >= 0")
    v = frame_smoothed.values
    idx = local_minima(v)
    if len(idx) == 0:
        return []
    vals = v[idx[:, 0], idx[:, 1]]
    order = np.lexsort((idx[:, 0], idx[:, 1], vals))
    kept: list[tuple[int, int]] = []
    for k in order:
        r, c = idx[k]
        if all((r - r2) ** 2 + (c - c2) ** 2 >= min_separation_px ** 2 for r2, c2 in kept):
            kept.append((int(r), int(c)))
    out = []
    for r, c in kept:
        x, y = frame_smoothed.to_um(c, r)
        if region is not None and not (region[0] <= x < region[1] and region[2] <= y <= region[3]):
            continue
        a = 1.0 - float(v[r, c])
        out.append(SpotDetection(float(x), float(y), a, above_threshold=a > a_thld, col=c, row=r))
    return out


def _gauss2d(p, xx, yy):
    off, amp, xc, yc, sx, sy = p
    return off - amp * np.exp(-(xx - xc) ** 2 / (2 * sx ** 2) - (yy - yc) ** 2 / (2 * sy ** 2))


def fit_spot_2d(frame_raw: ImageFrame, seed: SpotDetection, sigma_seed_px: float = 2.0,
                window_sigmas: float = 7.0) -> SpotDetection:
    """Least-squares fit of offset - A*Gaussian around a seed; failures are flagged."""
    r0, c0 = seed.row, seed.col
    if not (0 <= r0 < frame_raw.height and 0 <= c0 < frame_raw.width):
        raise ValueError("seed lies outside the frame")
    half = max(int(math.ceil(window_sigmas * sigma_seed_px / 2)), 2)
    rs = slice(max(r0 - half, 0), min(r0 + half + 1, frame_raw.height))
    cs = slice(max(c0 - half, 0), min(c0 + half + 1, frame_raw.width))
    data = frame_raw.values[rs, cs]
    yy, xx = np.mgrid[rs, cs].astype(float)
    res = SpotDetection(seed.x, seed.y, seed.a_peak, above_threshold=seed.above_threshold,
                        col=c0, row=r0)
    if data.size < 7 or np.ptp(data) == 0:
        res.fit_message = "flat fit window"
        return res
    off0 = float(np.median(data))
    amp0 = max(off0 - float(frame_raw.values[r0, c0]), 1e-6)
    p0 = [off0, amp0, float(c0), float(r0), sigma_seed_px, sigma_seed_px]
    lo = [-np.inf, 0.0, c0 - half, r0 - half, 0.3, 0.3]
    hi = [np.inf, np.inf, c0 + half, r0 + half, 2.0 * half, 2.0 * half]
    try:
        sol = optimize.least_squares(lambda p: (_gauss2d(p, xx, yy) - data).ravel(), p0,
                                     bounds=(lo, hi), x_scale="jac", max_nfev=400)
    except (ValueError, np.linalg.LinAlgError) as exc:
        res.fit_message = f"fit error: {exc}"
        return res
    off, amp, xc, yc, sx, sy = sol.x
    at_bound = np.isclose(sol.x[4:], lo[4:], rtol=1e-6).any() or np.isclose(sol.x[4:], hi[4:], rtol=1e-6).any()
    ok = bool(sol.success and amp > 0 and not at_bound)
    res.x, res.y = (float(v) for v in frame_raw.to_um(xc, yc))
    res.sigma_x = float(sx * frame_raw.pixel_pitch)
    res.sigma_y = float(sy * frame_raw.pixel_pitch)
    res.fit_amplitude = float(amp)
    res.fit_ok = ok
    res.fit_message = "" if ok else (sol.message if not sol.success else "fit at parameter bound")
    return res


def process_frame(frame: ImageFrame, filter_px: float = 2.0, a_thld: float = 0.045,
                  min_separation_px: float = 5.0, region=None, fit: bool = True) -> list[SpotDetection]:
    """Smooth, detect and (optionally) fit every detection of one raw frame."""
    dets = detect_peaks(smooth(frame, filter_px), a_thld, min_separation_px, region)
    if fit:
        dets = [attach_fit(d, fit_spot_2d(frame, d)) for d in dets]
    return dets


def attach_fit(det: SpotDetection, fitted: SpotDetection) -> SpotDetection:
    # keep the smoothed-frame position and amplitude, add the fitted widths
    det.sigma_x, det.sigma_y = fitted.sigma_x, fitted.sigma_y
    det.fit_ok, det.fit_amplitude, det.fit_message = fitted.fit_ok, fitted.fit_amplitude, fitted.fit_message
    return det


# ------------------------------------------------------------- thresholding


def equal_error_threshold(signal_amps, noise_amps) -> tuple[float, float]:
    """Threshold where P(noise <= A) equals P(signal >= A); returns (A, fidelity)."""
    s = np.sort(np.asarray(signal_amps, dtype=float))
    n = np.sort(np.asarray(noise_amps, dtype=float))
    if s.size == 0 or n.size == 0:
        raise ValueError("signal and noise amplitude lists must be non-empty")
    cand = np.unique(np.concatenate([s, n]))

    def gap(k):
        return _gap_at(cand[k], s, n)

    if cand.size == 1:
        warnings.warn("signal and noise amplitude distributions overlap completely", RuntimeWarning)
        return float(cand[0]), 0.5

    def first(pred):
        # gap() is non-decreasing in k, so pred(gap(k)) is monotone too
        lo, hi = 0, cand.size
        while lo < hi:
            mid = (lo + hi) // 2
            if pred(gap(mid)):
                hi = mid
            else:
                lo = mid + 1
        return lo

    k = first(lambda g: g >= 0)
    if k < cand.size and gap(k) == 0:
        # exact balance holds on [cand[k], cand[k2 - 1]]; take its midpoint
        k2 = first(lambda g: g > 0)
        a = 0.5 * (cand[k] + cand[k2 - 1])
    elif k == 0:
        a = cand[0]
    elif k == cand.size:
        a = cand[-1]
    else:
        a = 0.5 * (cand[k - 1] + cand[k])
        # with tied values the midpoint can miss the balance; fall back to
        # whichever end of the crossing interval is closer to it
        if abs(_gap_at(a, s, n)) > 1.0 / min(s.size, n.size) + 1e-12:
            a = min((cand[k - 1], cand[k]), key=lambda v: abs(_gap_at(v, s, n)))
    return float(a), float(np.mean(s >= a))


def _gap_at(a: float, s: np.ndarray, n: np.ndarray) -> float:
    """P(noise <= a) - P(signal >= a) for sorted samples."""
    return np.searchsorted(n, a, side="right") / n.size - (1.0 - np.searchsorted(s, a, side="left") / s.size)
