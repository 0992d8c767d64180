"""Two-atom Rydberg interactions: pair basis, dipole-dipole Hamiltonian,
potential curves, adiabatic tracking and van der Waals C6 fits.

Energies in h*MHz relative to the unperturbed center pair, distances in
micrometres, C6 in h*GHz*um^6 with the convention V(R) = -C6 / R^6
(negative C6 means a repulsive curve).
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.constants import physical_constants

from .atomphys import (FieldEnvironment, PairState, QuantumDefectTable, RydbergState,
                       angular_factor, default_table, energy_level, pair_energy_mhz,
                       radial_matrix_element, zeeman_shift)
from .errors import NumericalError

log = logging.getLogger(__name__)

_A0_UM = physical_constants["Bohr radius"][0] * 1e6
# (e a0)^2 / (4 pi eps0) expressed in h*MHz*um^3
DIPOLE_DIPOLE_MHZ_UM3 = (physical_constants["hartree-hertz relationship"][0]
                         * 1e-6 * _A0_UM ** 3)

R_FLOOR_UM = 1.0
FIT_FLOOR_UM = 3.0
DEFAULT_WINDOWS = (2, 2, 2, 2)
DEFAULT_PRUNE_MHZ = 30e3
DENSE_LIMIT = 1200
TIE_TOLERANCE = 1e-3

__all__ = [
    "PairState", "PairBasis", "PotentialCurve", "PotentialCurves", "C6Fit",
    "build_pair_basis", "prune_basis", "dipole_dipole_element", "potential_curves",
    "track_adiabatic_curve", "r_vdw", "fit_c6", "c6_for_pair", "scan_c6_vs_nprime",
    "scan_c6_vs_theta", "default_r_grid", "DIPOLE_DIPOLE_MHZ_UM3", "two_level_curve",
    "two_level_c6", "assemble_hamiltonian", "strongest_channel", "angular_coefficients",
]


def _states_in_window(c: RydbergState, dn: int, dl: int) -> list[RydbergState]:
    out = []
    for n in range(max(1, c.n - dn), c.n + dn + 1):
        for l in range(max(0, c.l - dl), min(c.l + dl, n - 1) + 1):
            for j in ((0.5,) if l == 0 else (l - 0.5, l + 0.5)):
                for k in range(int(round(2 * j)) + 1):
                    out.append(RydbergState(n, l, j, -j + k))
    return out


@dataclass(frozen=True)
class PairBasis:
    center: PairState
    states: tuple[PairState, ...]
    dn1: int = 0
    dl1: int = 0
    dn2: int = 0
    dl2: int = 0

    def __len__(self):
        return len(self.states)

    @property
    def center_index(self) -> int:
        return self.states.index(self.center)


def build_pair_basis(center: PairState, windows: Sequence[int] = DEFAULT_WINDOWS) -> PairBasis:
    """All product states within the (dn1, dl1, dn2, dl2) selection windows.

    Ordering is lexicographic on (n1, l1, j1, mJ1, n2, l2, j2, mJ2).
    """
    dn1, dl1, dn2, dl2 = (int(w) for w in windows)
    if min(dn1, dl1, dn2, dl2) < 0:
        raise ValueError("selection windows must be >= 0")
    s1 = _states_in_window(center.a, dn1, dl1)
    s2 = _states_in_window(center.b, dn2, dl2)
    states = tuple(sorted(PairState(a, b) for a, b in itertools.product(s1, s2)))
    return PairBasis(center, states, dn1, dl1, dn2, dl2)


def prune_basis(basis: PairBasis, threshold_mhz: float = DEFAULT_PRUNE_MHZ,
                env: FieldEnvironment | None = None,
                table: QuantumDefectTable | None = None) -> PairBasis:
    """Drop pairs detuned by more than *threshold_mhz* from the center pair."""
    table = table or default_table()
    B = env.B if env else 0.0
    e = _relative_pair_energies(basis.states, basis.center, B, table)
    keep = tuple(s for s, de in zip(basis.states, e) if abs(de) <= threshold_mhz)
    return PairBasis(basis.center, keep, basis.dn1, basis.dl1, basis.dn2, basis.dl2)


def _relative_pair_energies(states, center: PairState, B: float, table) -> np.ndarray:
    # per-atom differences first so the ~1e9 MHz binding energies cancel early
    cache: dict = {}

    def e(s):
        key = (s.n, s.l, s.j)
        if key not in cache:
            cache[key] = energy_level(s, table) * 1e3
        return cache[key]

    ea, eb = e(center.a), e(center.b)
    za, zb = zeeman_shift(center.a, B), zeeman_shift(center.b, B)
    return np.array([(e(p.a) - ea) + (e(p.b) - eb)
                     + (zeeman_shift(p.a, B) - za) + (zeeman_shift(p.b, B) - zb)
                     for p in states])


# --------------------------------------------------------- dipole-dipole


def angular_coefficients(theta_deg: float) -> dict[tuple[int, int], float]:
    """A[q1, q2] with V = sum A d1_q1 d2_q2 / R^3 for internuclear axis at theta.

    The axis lies in the x-z plane; all coefficients are real.
    """
    t = math.radians(theta_deg)
    s, c = math.sin(t), math.cos(t)
    if abs(c) < 1e-15:
        c = 0.0
    if abs(s) < 1e-15:
        s = 0.0
    n_sph = {1: -s / math.sqrt(2), 0: c, -1: s / math.sqrt(2)}
    out = {}
    for q1, q2 in itertools.product((-1, 0, 1), repeat=2):
        a = ((-1) ** q1 if q1 == -q2 else 0.0) - 3 * (-1) ** (q1 + q2) * n_sph[-q1] * n_sph[-q2]
        out[(q1, q2)] = a
    return out


def _single_dipole(s_from: RydbergState, s_to: RydbergState, table) -> tuple[int, float]:
    """(q, <s_to|d_q|s_from>) for the unique q allowed by mJ, or (q, 0)."""
    q = s_to.mj - s_from.mj
    if abs(s_to.l - s_from.l) != 1 or abs(q) > 1:
        return 0, 0.0
    q = int(round(q))
    ang = angular_factor(s_from.l, s_from.j, s_from.mj, s_to.l, s_to.j, s_to.mj, q)
    if ang == 0.0:
        return q, 0.0
    return q, radial_matrix_element(s_from, s_to, table) * ang


def dipole_dipole_element(p1: PairState, p2: PairState, R: float, theta: float,
                          table: QuantumDefectTable | None = None) -> float:
    """<p2 | V_dd(R, theta) | p1> in h*MHz."""
    if R <= 0:
        raise ValueError("R must be positive")
    table = table or default_table()
    q1, d1 = _single_dipole(p1.a, p2.a, table)
    q2, d2 = _single_dipole(p1.b, p2.b, table)
    if d1 == 0.0 or d2 == 0.0:
        return 0.0
    return angular_coefficients(theta)[(q1, q2)] * d1 * d2 * DIPOLE_DIPOLE_MHZ_UM3 / R ** 3


def _atom_dipole_matrices(states: list[RydbergState], table) -> dict[int, sp.csr_matrix]:
    """D[q][i', i] = <s_i'|d_q|s_i>, with D[-q] = (-1)^q D[q]^T exactly."""
    idx = {s: i for i, s in enumerate(states)}
    n = len(states)
    rows = {1: [], 0: []}
    cols = {1: [], 0: []}
    vals = {1: [], 0: []}
    for s_from in states:
        for s_to in states:
            dm = s_to.mj - s_from.mj
            if dm not in (0.0, 1.0) or abs(s_to.l - s_from.l) != 1:
                continue
            q, d = _single_dipole(s_from, s_to, table)
            if d != 0.0:
                rows[q].append(idx[s_to])
                cols[q].append(idx[s_from])
                vals[q].append(d)
    d0 = sp.csr_matrix((vals[0], (rows[0], cols[0])), shape=(n, n))
    d1 = sp.csr_matrix((vals[1], (rows[1], cols[1])), shape=(n, n))
    # the q=0 block is built from both orderings; enforce exact symmetry
    d0 = sp.triu(d0, format="csr") + sp.triu(d0, k=1, format="csr").T
    return {1: d1, 0: d0.tocsr(), -1: (-d1.T).tocsr()}


@dataclass
class _Hamiltonian:
    energies: np.ndarray  # unperturbed, relative to the center pair
    coupling: sp.csr_matrix  # V_dd * R^3 (h*MHz*um^3)
    m_total: np.ndarray

    def at(self, R: float) -> sp.csr_matrix:
        return (sp.diags(self.energies) + self.coupling / R ** 3).tocsr()


def assemble_hamiltonian(basis: PairBasis, env: FieldEnvironment,
                         table: QuantumDefectTable | None = None,
                         interaction: bool = True) -> _Hamiltonian:
    """Unperturbed pair energies plus the R^-3-scaled dipole-dipole coupling."""
    table = table or default_table()
    states = basis.states
    energies = _relative_pair_energies(states, basis.center, env.B, table)
    m_total = np.array([p.total_m for p in states])
    n = len(states)
    if not interaction:
        return _Hamiltonian(energies, sp.csr_matrix((n, n)), m_total)
    u1 = sorted({p.a for p in states})
    u2 = sorted({p.b for p in states})
    i1 = {s: i for i, s in enumerate(u1)}
    i2 = {s: i for i, s in enumerate(u2)}
    dm1 = _atom_dipole_matrices(u1, table)
    dm2 = _atom_dipole_matrices(u2, table)
    coeff = angular_coefficients(env.theta)
    full = None
    for (q1, q2), a in coeff.items():
        if a == 0.0:
            continue
        term = a * sp.kron(dm1[q1], dm2[q2], format="csr")
        full = term if full is None else full + term
    sel = np.array([i1[p.a] * len(u2) + i2[p.b] for p in states])
    coupling = (full[sel][:, sel] * DIPOLE_DIPOLE_MHZ_UM3).tocsr()
    coupling.eliminate_zeros()
    asym = coupling - coupling.T
    if asym.nnz and np.max(np.abs(asym.data)) > 0.0:
        raise NumericalError("assembled dipole-dipole operator is not Hermitian")
    return _Hamiltonian(energies, coupling, m_total)


# --------------------------------------------------------- potential curves


@dataclass
class PotentialCurve:
    R_grid: np.ndarray
    energies: np.ndarray
    overlaps: np.ndarray
    flags: list = field(default_factory=list)


@dataclass
class PotentialCurves:
    """Eigen-decomposition of H(R) on a grid.

    ``energies[k]`` and ``vectors[k]`` hold the eigenpairs kept at R_grid[k]
    (sorted by energy); ``overlaps[k]`` is the squared projection of each
    eigenvector onto the center pair.
    """

    R_grid: np.ndarray
    energies: list
    vectors: list
    overlaps: list
    basis_size: int
    center_index: int

    def __len__(self):
        return min(len(e) for e in self.energies)

    def __getitem__(self, i) -> PotentialCurve:
        return PotentialCurve(self.R_grid,
                              np.array([e[i] for e in self.energies]),
                              np.array([o[i] for o in self.overlaps]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def default_r_grid(r_min: float = 3.0, r_max: float = 40.0, n: int = 60) -> np.ndarray:
    return np.geomspace(r_min, r_max, n)


def _eig_dense(h: np.ndarray):
    w, v = np.linalg.eigh(h)
    return w, v


def _eig_nearest(h: sp.csr_matrix, k: int, sigma: float):
    k = min(k, h.shape[0] - 2)
    try:
        w, v = spla.eigsh(h, k=k, sigma=sigma, which="LM", tol=1e-12)
    except spla.ArpackNoConvergence as exc:
        raise NumericalError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(w)
    return w[order], v[:, order]


def _solve(h: sp.csr_matrix, m_total: np.ndarray, theta: float, n_keep: int | None,
           sigma: float):
    n = h.shape[0]
    if abs(math.sin(math.radians(theta))) < 1e-12:
        # axial case: block-diagonal in total M
        blocks = [np.nonzero(m_total == m)[0] for m in np.unique(m_total)]
    else:
        blocks = [np.arange(n)]
    ws, vs = [], []
    for idx in blocks:
        sub = h[idx][:, idx]
        if len(idx) <= DENSE_LIMIT or n_keep is None:
            w, v = _eig_dense(sub.toarray())
        else:
            w, v = _eig_nearest(sub, n_keep, sigma)
        full = np.zeros((n, len(w)))
        full[idx] = v
        ws.append(w)
        vs.append(full)
    w = np.concatenate(ws)
    v = np.concatenate(vs, axis=1)
    if n_keep is not None and len(w) > n_keep:
        keep = np.sort(np.argsort(np.abs(w - sigma), kind="stable")[:n_keep])
        w, v = w[keep], v[:, keep]
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def potential_curves(basis: PairBasis, R_grid: Sequence[float],
                     env: FieldEnvironment | None = None,
                     table: QuantumDefectTable | None = None, *,
                     n_curves: int | None = 24, interaction: bool = True,
                     r_floor: float = R_FLOOR_UM) -> PotentialCurves:
    """Diagonalize H(R) = diag(E_pair + Zeeman) + V_dd(R, theta) over R_grid.

    ``n_curves`` keeps that many eigenpairs closest in energy to the center
    pair (None keeps the full spectrum and forces the dense solver).
    """
    env = env or FieldEnvironment()
    table = table or default_table()
    R_grid = np.asarray(R_grid, dtype=float)
    if R_grid.ndim != 1 or len(R_grid) < 1 or np.any(np.diff(R_grid) <= 0):
        raise ValueError("R_grid must be strictly increasing")
    if R_grid[0] <= r_floor:
        raise ValueError(f"R grid must stay above the validity floor {r_floor} um")
    ham = assemble_hamiltonian(basis, env, table, interaction)
    ci = basis.center_index
    energies, vectors, overlaps = [], [], []
    sigma = 0.0
    # walk inwards so each shift-invert target follows the spectrum near the center pair
    for R in R_grid[::-1]:
        w, v = _solve(ham.at(R), ham.m_total, env.theta, n_curves, sigma)
        energies.append(w)
        vectors.append(v)
        overlaps.append(v[ci] ** 2)
        sigma = float(w[np.argmax(v[ci] ** 2)]) if n_curves is not None else 0.0
    energies.reverse()
    vectors.reverse()
    overlaps.reverse()
    return PotentialCurves(R_grid, energies, vectors, overlaps, len(basis), ci)


def track_adiabatic_curve(curves: PotentialCurves, center: PairState | None = None,
                          tie_tolerance: float = TIE_TOLERANCE) -> PotentialCurve:
    """Follow the eigenstate connected to the center pair from R_max inwards.

    Seeded by maximum center-pair overlap at the largest R; each further step
    picks the eigenvector with the largest overlap with the previous pick.
    Near-ties (overlaps within *tie_tolerance*) are resolved by the smallest
    energy jump and recorded in ``flags``.
    """
    n = len(curves.R_grid)
    e_out = np.empty(n)
    o_out = np.empty(n)
    flags = []
    k = n - 1
    pick = int(np.argmax(curves.overlaps[k]))
    prev_vec = curves.vectors[k][:, pick]
    e_out[k] = curves.energies[k][pick]
    o_out[k] = curves.overlaps[k][pick]
    for k in range(n - 2, -1, -1):
        ov = np.abs(curves.vectors[k].T @ prev_vec) ** 2
        order = np.argsort(ov)[::-1]
        pick = int(order[0])
        if len(order) > 1 and ov[order[0]] - ov[order[1]] < tie_tolerance:
            cands = [i for i in order if ov[order[0]] - ov[i] < tie_tolerance]
            pick = int(min(cands, key=lambda i: abs(curves.energies[k][i] - e_out[k + 1])))
            flags.append(("tie", float(curves.R_grid[k])))
        prev_vec = curves.vectors[k][:, pick]
        e_out[k] = curves.energies[k][pick]
        o_out[k] = curves.overlaps[k][pick]
    return PotentialCurve(curves.R_grid.copy(), e_out, o_out, flags)


# ------------------------------------------------------------- C6 fitting


@dataclass(frozen=True)
class C6Fit:
    c6: float  # h*GHz*um^6
    r_min_fit: float
    rms_residual: float  # h*MHz
    r_vdw: float
    n_points: int = 0
    warning: str | None = None


def r_vdw(mu_product: float, delta_e: float) -> float:
    """R where |mu mu'| / R^3 = |dE| / 2.

    mu_product in h*GHz*um^3, delta_e in h*MHz; returns um.
    """
    if delta_e == 0:
        raise ValueError("exact Forster resonance: no van der Waals regime")
    return (2 * abs(mu_product) * 1e3 / abs(delta_e)) ** (1 / 3)


def fit_c6(curve: PotentialCurve, r_min: float, r_vdw_value: float | None = None,
           residual_threshold_mhz: float = 0.05) -> C6Fit:
    """Least-squares E(R) = -C6 / R^6 over R > r_min (C6 returned in h*GHz*um^6)."""
    R = np.asarray(curve.R_grid)
    E = np.asarray(curve.energies)
    mask = R > r_min
    if mask.sum() < 5:
        raise ValueError(f"need >= 5 grid points beyond r_min = {r_min} um, got {mask.sum()}")
    x = -1.0 / R[mask] ** 6
    y = E[mask]
    c6_mhz = float(x @ y / (x @ x))
    resid = y - c6_mhz * x
    rms = float(np.sqrt(np.mean(resid ** 2)))
    warning = None
    if rms > residual_threshold_mhz:
        warning = f"rms residual {rms:.3g} MHz exceeds {residual_threshold_mhz} MHz"
    return C6Fit(c6_mhz * 1e-3, float(r_min), rms,
                 float(r_vdw_value) if r_vdw_value else float(r_min / 1.3), int(mask.sum()),
                 warning)


def two_level_curve(mu_product: float, delta_e: float, R_grid: Sequence[float]) -> PotentialCurve:
    """Exact branch of a 2x2 pair problem connected to the upper-left state.

    The partner pair sits at -delta_e (h*MHz) and couples via
    mu_product / R^3 (h*GHz*um^3); its perturbative limit is
    C6 = -(mu mu')^2 / delta_e.
    """
    R = np.asarray(R_grid, dtype=float)
    v = mu_product * 1e3 / R ** 3
    e = -delta_e / 2 + np.sign(delta_e) * np.sqrt(delta_e ** 2 / 4 + v ** 2)
    return PotentialCurve(R, e, np.ones_like(R))


def two_level_c6(mu_product: float, delta_e: float) -> float:
    """Closed-form second-order C6 in h*GHz*um^6."""
    return -1e3 * mu_product ** 2 / delta_e


def strongest_channel(center: PairState, basis: PairBasis, env: FieldEnvironment,
                      table: QuantumDefectTable | None = None) -> tuple[PairState, float, float]:
    """Pair most strongly coupled to *center* relative to its detuning.

    Returns (pair, coupling in h*GHz*um^3, defect in h*MHz).
    """
    table = table or default_table()
    energies = _relative_pair_energies(basis.states, center, env.B, table)
    best = None
    for p, de in zip(basis.states, energies):
        if p == center or de == 0:
            continue
        v = dipole_dipole_element(center, p, 1.0, env.theta, table) * 1e-3
        if v == 0.0:
            continue
        score = v * v / abs(de)
        if best is None or score > best[0]:
            best = (score, p, v, -de)
    if best is None:
        raise ValueError("center pair has no dipole-coupled partner in the basis")
    return best[1], best[2], best[3]


@dataclass
class C6Result:
    c6: float
    fit: C6Fit
    curve: PotentialCurve
    basis_size: int
    channel: PairState
    coupling: float
    defect: float
    seconds: float


def c6_for_pair(center: PairState, env: FieldEnvironment | None = None,
                table: QuantumDefectTable | None = None, *,
                windows: Sequence[int] = DEFAULT_WINDOWS,
                prune_mhz: float | None = DEFAULT_PRUNE_MHZ,
                R_grid: Sequence[float] | None = None,
                r_max: float = 40.0, n_fit_points: int = 16,
                n_curves: int = 16) -> C6Result:
    """Full pipeline: basis, pruning, curves, tracking, vdW fit over R > max(1.3 R_vdW, 3 um)."""
    t0 = time.perf_counter()
    env = env or FieldEnvironment()
    table = table or default_table()
    basis = build_pair_basis(center, windows)
    if prune_mhz is not None:
        basis = prune_basis(basis, prune_mhz, env, table)
    partner, coupling, defect = strongest_channel(center, basis, env, table)
    rv = r_vdw(coupling, defect)
    # weakly coupled pairs have a tiny R_vdW; keep the fit clear of the
    # short-range region where the truncated basis is no longer reliable
    r_min = max(1.3 * rv, FIT_FLOOR_UM)
    if R_grid is None:
        # a few points inside r_min help the tracker through the crossing region
        R_grid = np.geomspace(max(r_min / 1.2, R_FLOOR_UM * 1.01), r_max, n_fit_points + 2)
    curves = potential_curves(basis, R_grid, env, table, n_curves=n_curves)
    curve = track_adiabatic_curve(curves, center)
    fit = fit_c6(curve, r_min * (1 - 1e-9), rv)
    return C6Result(fit.c6, fit, curve, len(basis), partner, coupling, defect,
                    time.perf_counter() - t0)


def _detection_pair(n_fixed: RydbergState, nprime: int) -> PairState:
    return PairState(n_fixed, RydbergState(nprime, 0, 0.5, 0.5))


def _scan_worker(args):
    center, env, table, kwargs = args
    return c6_for_pair(center, env, table, **kwargs)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def scan_c6_vs_nprime(n_fixed: RydbergState, nprime_range: Sequence[int],
                      env: FieldEnvironment | None = None,
                      table: QuantumDefectTable | None = None, *,
                      workers: int = 1, **kwargs) -> list[tuple[int, float]]:
    """C6 of |n_fixed, n'S1/2 mJ=1/2> for each n' (signed, h*GHz*um^6)."""
    nprime_range = list(nprime_range)
    if not nprime_range:
        raise ValueError("n' range must be non-empty")
    env = env or FieldEnvironment(B=13.3, theta=90.0)
    table = table or default_table()
    jobs = [(_detection_pair(n_fixed, npr), env, table, kwargs) for npr in nprime_range]
    results = _map(_scan_worker, jobs, workers)
    return [(npr, r.c6) for npr, r in zip(nprime_range, results)]


def scan_c6_vs_theta(center: PairState, theta_grid: Sequence[float],
                     env: FieldEnvironment | None = None,
                     table: QuantumDefectTable | None = None, *,
                     workers: int = 1, **kwargs) -> list[tuple[float, float]]:
    theta_grid = [float(t) for t in theta_grid]
    if any(t < 0 or t > 180 for t in theta_grid):
        raise ValueError("theta grid must lie in [0, 180]")
    env = env or FieldEnvironment(B=13.3)
    table = table or default_table()
    jobs = [(center, FieldEnvironment(env.B, t), table, kwargs) for t in theta_grid]
    results = _map(_scan_worker, jobs, workers)
    return [(t, r.c6) for t, r in zip(theta_grid, results)]
