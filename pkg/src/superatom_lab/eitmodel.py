"""Ladder-EIT transmission of an elongated Gaussian cloud, with Rydberg
impurities switching EIT off inside their interstate blockade spheres.

Frequencies are given as f = omega / 2pi in MHz. Lengths in micrometres,
densities in um^-3, C6 in h*GHz*um^6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import erf

PROBE_WAVELENGTH_UM = 0.780241
# resonant cross-section of the sigma+ cycling transition, 3 lambda^2 / 2 pi
SIGMA0_UM2 = 3 * PROBE_WAVELENGTH_UM ** 2 / (2 * math.pi)


@dataclass(frozen=True)
class CloudGeometry:
    sigma_r: float = 6.0
    n0: float = 0.39  # 3.9e11 cm^-3
    a_x: float = 126.0
    x_extent: float = 1000.0

    def __post_init__(self):
        if min(self.sigma_r, self.n0, self.a_x, self.x_extent) <= 0:
            raise ValueError("cloud parameters must be positive")
        if self.a_x > self.x_extent:
            raise ValueError("excitation length a_x exceeds the imaged extent")

    def column_density(self, y: float | np.ndarray = 0.0) -> float | np.ndarray:
        """Atoms per um^2 along z through transverse offset y."""
        return self.n0 * np.exp(-np.square(y) / (2 * self.sigma_r ** 2)) \
            * math.sqrt(2 * math.pi) * self.sigma_r


@dataclass(frozen=True)
class EitParams:
    omega_p: float = 0.9
    omega_c_eff: float = 5.9
    gamma_e: float = 6.07
    gamma_gr: float = 2.5
    delta_p: float = 0.0
    delta_c: float = -3.65

    def __post_init__(self):
        if self.gamma_e <= 0:
            raise ValueError("gamma_e must be positive")
        if self.omega_c_eff < 0:
            raise ValueError("omega_c_eff must be >= 0")


@dataclass(frozen=True)
class ImpurityConfig:
    positions: tuple = ()
    r_blockade: float = 8.7

    def __post_init__(self):
        if self.r_blockade <= 0:
            raise ValueError("r_blockade must be positive")
        pts = []
        for p in self.positions:
            p = tuple(float(v) for v in np.atleast_1d(p))
            pts.append(p + (0.0,) * (3 - len(p)))
        object.__setattr__(self, "positions", tuple(pts))


def eit_susceptibility(p: EitParams, delta_p: float | np.ndarray | None = None):
    """Normalized ladder-EIT susceptibility; Im chi = 1 on the bare two-level resonance."""
    dp = p.delta_p if delta_p is None else np.asarray(delta_p, dtype=float)
    half = p.gamma_e / 2
    two_photon = p.gamma_gr - 1j * (dp + p.delta_c)
    with np.errstate(divide="ignore", invalid="ignore"):
        dressing = np.where(np.abs(two_photon) == 0,
                            np.inf if p.omega_c_eff > 0 else 0.0,
                            (p.omega_c_eff ** 2 / 4) / np.where(two_photon == 0, 1, two_photon))
        chi = 1j * half / ((half - 1j * dp) + dressing)
    chi = np.where(np.isinf(dressing), 0.0 + 0.0j, chi)
    return chi if np.ndim(chi) else complex(chi)


def two_level_susceptibility(p: EitParams, delta_p=None):
    return eit_susceptibility(replace(p, omega_c_eff=0.0), delta_p)


def eit_linewidth(omega_c: float, gamma_e: float) -> float:
    """Power-broadened EIT width Omega_c^2 / Gamma (same frequency units)."""
    if gamma_e <= 0:
        raise ValueError("gamma_e must be positive")
    return omega_c ** 2 / gamma_e


def blockade_radius(c6: float, gamma_eit: float) -> float:
    """[2 |C6| / (hbar gamma_EIT)]^(1/6) in um for C6/h in GHz*um^6, gamma/2pi in MHz."""
    if gamma_eit <= 0:
        raise ValueError("gamma_eit must be positive")
    return (2 * abs(c6) * 1e3 / gamma_eit) ** (1 / 6)


def excitation_blockade_radius(c6_self: float, omega_c_ex: float, gamma_e: float) -> float:
    return blockade_radius(c6_self, eit_linewidth(omega_c_ex, gamma_e))


def c6_from_blockade_radius(radius: float, gamma_eit: float) -> float:
    """Inverse of blockade_radius: |C6|/h in GHz*um^6."""
    return radius ** 6 * gamma_eit / 2 * 1e-3


def atoms_in_sphere(cloud: CloudGeometry, center: Sequence[float], radius: float,
                    rel_tol: float = 1e-3) -> float:
    """Expected number of atoms inside a sphere (cloud uniform along x)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    _, yc, zc = (tuple(center) + (0.0, 0.0, 0.0))[:3]
    s2 = 2 * cloud.sigma_r ** 2
    d = math.hypot(yc, zc)
    if d == 0.0:
        # closed-form disc integral, quadrature only along x
        def slab(x):
            return math.pi * s2 * (1 - math.exp(-(radius ** 2 - x * x) / s2))

        val, _ = integrate.quad(slab, -radius, radius, epsrel=rel_tol * 1e-2)
        return cloud.n0 * val

    def disc(x):
        rho = math.sqrt(max(radius ** 2 - x * x, 0.0))

        def ring(r):
            # angular integral of exp(-|c + r e|^2 / s2) = 2 pi I0-like term
            return r * math.exp(-(r * r + d * d) / s2) * 2 * math.pi \
                * float(np.i0(2 * r * d / s2))

        v, _ = integrate.quad(ring, 0.0, rho, epsrel=rel_tol * 1e-2)
        return v

    val, _ = integrate.quad(disc, -radius, radius, epsrel=rel_tol * 1e-2)
    return cloud.n0 * val


# ------------------------------------------------------------- spectra


def _gauss_cdf_span(lo: np.ndarray, hi: np.ndarray, sigma: float) -> np.ndarray:
    """int_lo^hi exp(-z^2 / 2 sigma^2) dz."""
    s = math.sqrt(2) * sigma
    return math.sqrt(math.pi / 2) * sigma * (erf(hi / s) - erf(lo / s))


def _blocked_fraction(cloud: CloudGeometry, imp: ImpurityConfig, x: float, y: float) -> float:
    """Share of the column (x, y) density lying inside any blockade sphere."""
    spans = []
    r2 = imp.r_blockade ** 2
    for (xi, yi, zi) in imp.positions:
        h2 = r2 - (x - xi) ** 2 - (y - yi) ** 2
        if h2 > 0:
            h = math.sqrt(h2)
            spans.append((zi - h, zi + h))
    if not spans:
        return 0.0
    spans.sort()
    merged = [list(spans[0])]
    for lo, hi in spans[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    m = np.array(merged)
    inside = _gauss_cdf_span(m[:, 0], m[:, 1], cloud.sigma_r).sum()
    return float(inside / (math.sqrt(2 * math.pi) * cloud.sigma_r))


def column_grid(cloud: CloudGeometry, dx: float = 0.5, y_band: float = 0.0,
                dy: float = 1.0) -> np.ndarray:
    """(x, y) columns covering the excitation region [0, a_x] and |y| <= y_band."""
    nx = max(int(round(cloud.a_x / dx)), 1)
    xs = (np.arange(nx) + 0.5) * cloud.a_x / nx
    ys = np.arange(-y_band, y_band + dy / 2, dy) if y_band > 0 else np.array([0.0])
    return np.array([(x, y) for x in xs for y in ys])


def impurity_spectrum(cloud: CloudGeometry, params: EitParams, imp: ImpurityConfig | None,
                      delta_grid: Sequence[float], *, dx: float = 0.5,
                      y_band: float = 0.0, sigma0: float = SIGMA0_UM2) -> np.ndarray:
    """Column-averaged probe transmission T(delta_p) over the excitation region.

    Atoms inside a blockade sphere respond as two-level absorbers, all others
    with the EIT susceptibility; each column follows Beer-Lambert along z.
    """
    delta_grid = np.asarray(delta_grid, dtype=float)
    cols = column_grid(cloud, dx, y_band)
    chi_eit = np.imag(eit_susceptibility(params, delta_grid))
    chi_two = np.imag(two_level_susceptibility(params, delta_grid))
    if imp is None or not imp.positions:
        blocked = np.zeros(len(cols))
    else:
        blocked = np.array([_blocked_fraction(cloud, imp, x, y) for x, y in cols])
    col_n = cloud.column_density(cols[:, 1])
    od = sigma0 * col_n[:, None] * (blocked[:, None] * chi_two[None, :]
                                    + (1 - blocked[:, None]) * chi_eit[None, :])
    return np.clip(np.exp(-od), 0.0, 1.0).mean(axis=0)


def transmission_profile(cloud: CloudGeometry, params: EitParams, y: np.ndarray,
                         sigma0: float = SIGMA0_UM2) -> np.ndarray:
    """Bare-EIT transmission versus transverse offset y at params.delta_p."""
    chi = np.imag(eit_susceptibility(params))
    return np.exp(-sigma0 * cloud.column_density(y) * chi)


def chain_impurities(a_x: float, spacing: float, r_blockade: float,
                     offset: float | None = None) -> ImpurityConfig:
    """Regular on-axis chain of impurities filling [0, a_x]."""
    start = spacing / 2 if offset is None else offset
    xs = np.arange(start, a_x, spacing)
    return ImpurityConfig(tuple((float(x), 0.0, 0.0) for x in xs), r_blockade)


def find_eit_peak(cloud: CloudGeometry, params: EitParams, near: float = 3.65,
                  half_width: float = 2.5) -> tuple[float, float] | None:
    """(delta_p, T) of the bare-EIT local transmission maximum near *near*."""
    grid = np.linspace(near - half_width, near + half_width, 1001)
    t = impurity_spectrum(cloud, params, None, grid)
    inner = np.nonzero((t[1:-1] > t[:-2]) & (t[1:-1] >= t[2:]))[0] + 1
    if inner.size == 0:
        return None
    k = inner[np.argmin(np.abs(grid[inner] - near))]
    res = optimize.minimize_scalar(
        lambda d: -impurity_spectrum(cloud, params, None, [d])[0],
        bounds=(grid[max(k - 2, 0)], grid[min(k + 2, len(grid) - 1)]), method="bounded",
        options={"xatol": 1e-6})
    return float(res.x), float(-res.fun)


def calibrate_eit(cloud: CloudGeometry, params: EitParams, peak_at: float = 3.65,
                  target_transmission: float = 0.5,
                  gamma_grid: Sequence[float] | None = None) -> EitParams:
    """Pick gamma_gr (peak height) and delta_c (peak position) calibration knobs.

    gamma_gr is scanned for the bare peak transmission closest to the target
    among values where a local EIT maximum still exists; delta_c is then
    solved so that maximum sits at *peak_at*.
    """
    if gamma_grid is None:
        gamma_grid = np.round(np.arange(0.1, 4.01, 0.1), 3)

    def place(p: EitParams) -> EitParams | None:
        def miss(dc):
            pk = find_eit_peak(cloud, replace(p, delta_c=dc), peak_at)
            return (pk[0] - peak_at) if pk else np.nan

        lo, hi = -peak_at - 2.0, -peak_at + 2.0
        flo, fhi = miss(lo), miss(hi)
        if not (np.isfinite(flo) and np.isfinite(fhi)) or flo * fhi > 0:
            return None
        dc = optimize.brentq(miss, lo, hi, xtol=1e-6)
        return replace(p, delta_c=float(dc))

    best = None
    for g in gamma_grid:
        p = place(replace(params, gamma_gr=float(g)))
        if p is None:
            continue
        pk = find_eit_peak(cloud, p, peak_at)
        score = abs(pk[1] - target_transmission)
        if best is None or score < best[0]:
            best = (score, p)
    if best is None:
        raise ValueError("no gamma_gr produces an EIT peak near the requested detuning")
    return best[1]
