"""Single-atom Rydberg structure for alkali atoms.

Energies come from quantum defects, Zeeman shifts from the Lande g-factor
in the fine-structure basis, and radial matrix elements from Numerov
integration of a parametric model core potential (with a quasi-classical
closed form kept as an independent cross-check).

Units: energy_level returns h*GHz, every other energy is h*MHz; radial
integrals are in Bohr radii and dipole elements in e*a0.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from scipy.constants import physical_constants
from scipy.integrate import trapezoid
from sympy.physics.wigner import clebsch_gordan, wigner_3j, wigner_6j

from .errors import ConfigurationError

MU_B_MHZ_PER_G = physical_constants["Bohr magneton in Hz/T"][0] * 1e-4 * 1e-6
HARTREE_GHZ = physical_constants["hartree-hertz relationship"][0] * 1e-9
FINE_STRUCTURE = physical_constants["fine-structure constant"][0]
ELECTRON_MASS_AMU = physical_constants["electron mass in u"][0]

L_LABELS = "SPDFGHIKLMNOQRTUV"


def _is_half_integer(x: float) -> bool:
    return abs(2 * x - round(2 * x)) < 1e-12 and round(2 * x) % 2 == 1


@dataclass(frozen=True, order=True)
class RydbergState:
    """|n l j mJ> of a single alkali atom (s = 1/2)."""

    n: int
    l: int
    j: float
    mj: float

    def __post_init__(self):
        if self.n < 1 or self.l < 0 or self.l >= self.n:
            raise ValueError(f"invalid (n, l) = ({self.n}, {self.l})")
        if not _is_half_integer(self.j) or abs(self.j - self.l) != 0.5:
            raise ValueError(f"j = {self.j} not allowed for l = {self.l}")
        if not _is_half_integer(self.mj) or abs(self.mj) > self.j:
            raise ValueError(f"mJ = {self.mj} not allowed for j = {self.j}")

    @property
    def label(self) -> str:
        j = Fraction(self.j).limit_denominator(2)
        mj = Fraction(self.mj).limit_denominator(2)
        return f"{self.n}{L_LABELS[self.l]}{j.numerator}/{j.denominator},mJ={mj}"

    def __str__(self):
        return self.label


@dataclass(frozen=True, order=True)
class PairState:
    """Two-atom product state |a> (x) |b>."""

    a: RydbergState
    b: RydbergState

    @property
    def total_m(self) -> float:
        return self.a.mj + self.b.mj

    def swapped(self) -> "PairState":
        return PairState(self.b, self.a)

    def __str__(self):
        return f"|{self.a.label}; {self.b.label}>"


@dataclass(frozen=True)
class SeriesDefect:
    l: int
    j: float
    delta0: float
    delta2: float = 0.0


@dataclass(frozen=True)
class CoreParams:
    l: int
    a1: float
    a2: float
    a3: float
    a4: float
    rc: float


@dataclass(frozen=True)
class QuantumDefectTable:
    species: str
    rydberg_constant_ghz: float
    series: tuple[SeriesDefect, ...]
    mass_amu: float = 86.909180520
    nuclear_charge: int = 37
    core_polarizability: float = 9.0760
    core: tuple[CoreParams, ...] = ()

    def lookup(self, l: int, j: float) -> SeriesDefect:
        for s in self.series:
            if s.l == l and s.j == j:
                return s
        raise ConfigurationError(
            f"{self.species}: no quantum-defect series for l={l}, j={j}")

    def defect(self, n: int, l: int, j: float) -> float:
        s = self.lookup(l, j)
        return s.delta0 + s.delta2 / (n - s.delta0) ** 2

    def core_params(self, l: int) -> CoreParams | None:
        for c in self.core:
            if c.l == l:
                return c
        return None

    @property
    def reduced_mass(self) -> float:
        return (self.mass_amu - ELECTRON_MASS_AMU) / self.mass_amu

    def without_defects(self) -> "QuantumDefectTable":
        """Same table with every defect zeroed (hydrogenic limit)."""
        zeroed = tuple(SeriesDefect(s.l, s.j, 0.0, 0.0) for s in self.series)
        return QuantumDefectTable(self.species, self.rydberg_constant_ghz, zeroed,
                                  self.mass_amu, self.nuclear_charge,
                                  self.core_polarizability, self.core)


def load_quantum_defects(path: str | Path | None = None) -> QuantumDefectTable:
    """Read a quantum-defect table; the shipped Rb87 file when *path* is None."""
    if path is None:
        text = resources.files("superatom_lab.data").joinpath("rb87.yaml").read_text()
        source = "rb87.yaml"
    else:
        text = Path(path).read_text()
        source = str(path)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    try:
        series = tuple(SeriesDefect(int(r["l"]), float(r["j"]), float(r["delta0"]),
                                    float(r.get("delta2", 0.0)))
                       for r in raw["series"])
        core = tuple(CoreParams(int(r["l"]), *(float(r[k]) for k in
                                                ("a1", "a2", "a3", "a4", "rc")))
                     for r in raw.get("core_potential", []))
        return QuantumDefectTable(
            species=str(raw["species"]),
            rydberg_constant_ghz=float(raw["rydberg_constant_ghz"]),
            series=series,
            mass_amu=float(raw.get("mass_amu", 86.909180520)),
            nuclear_charge=int(raw.get("nuclear_charge", 37)),
            core_polarizability=float(raw.get("core_polarizability", 0.0)),
            core=core,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{source}: malformed quantum-defect table ({exc})") from exc


@functools.lru_cache(maxsize=1)
def default_table() -> QuantumDefectTable:
    return load_quantum_defects()


@dataclass(frozen=True)
class FieldEnvironment:
    B: float = 0.0  # gauss
    theta: float = 90.0  # degrees between quantization and internuclear axes

    def __post_init__(self):
        if self.B < 0:
            raise ValueError("magnetic field must be >= 0")
        if not 0.0 <= self.theta <= 180.0:
            raise ValueError("theta must lie in [0, 180] degrees")


# ---------------------------------------------------------------- energies


def effective_n(s: RydbergState | tuple, table: QuantumDefectTable) -> float:
    n, l, j = (s.n, s.l, s.j) if isinstance(s, RydbergState) else s
    return n - table.defect(n, l, j)


def energy_level(s: RydbergState, table: QuantumDefectTable | None = None) -> float:
    """Binding energy -Ry/(n - delta)^2 in h*GHz (negative)."""
    table = table or default_table()
    return -table.rydberg_constant_ghz / effective_n(s, table) ** 2


def lande_g(l: int, j: float, g_s: float = 2.0) -> float:
    s = 0.5
    jj, ll, ss = j * (j + 1), l * (l + 1), s * (s + 1)
    return (jj + ll - ss) / (2 * jj) + g_s * (jj - ll + ss) / (2 * jj)


def zeeman_shift(s: RydbergState, B: float) -> float:
    """Linear Zeeman shift g_J mu_B mJ B in h*MHz."""
    if B < 0:
        raise ValueError("magnetic field must be >= 0")
    return lande_g(s.l, s.j) * MU_B_MHZ_PER_G * s.mj * B


def state_energy_mhz(s: RydbergState, B: float, table: QuantumDefectTable) -> float:
    return energy_level(s, table) * 1e3 + zeeman_shift(s, B)


def pair_energy_mhz(p: PairState, B: float, table: QuantumDefectTable) -> float:
    return state_energy_mhz(p.a, B, table) + state_energy_mhz(p.b, B, table)


def forster_defect(left: PairState, right: PairState,
                   env: FieldEnvironment | None = None,
                   table: QuantumDefectTable | None = None) -> float:
    """(E_left - E_right) in h*MHz including Zeeman shifts at env.B."""
    table = table or default_table()
    B = env.B if env is not None else 0.0
    # pairwise differences first keeps ~1e-6 MHz precision on 1e9 MHz energies
    da = (energy_level(left.a, table) - energy_level(right.a, table)) * 1e3
    db = (energy_level(left.b, table) - energy_level(right.b, table)) * 1e3
    dz = (zeeman_shift(left.a, B) + zeeman_shift(left.b, B)
          - zeeman_shift(right.a, B) - zeeman_shift(right.b, B))
    return da + db + dz


def _mj_values(j: float) -> list[float]:
    return [-j + k for k in range(int(round(2 * j)) + 1)]


def forster_channels(n: int, nprime: int, B: float = 0.0
                     ) -> Iterable[tuple[PairState, PairState]]:
    """Dipole-allowed channels nF + n'S -> nG + (n'-1)P.

    At B = 0 one representative per fine-structure combination is returned
    (mJ is irrelevant); at B > 0 every Zeeman sublevel combination with
    |dmJ| <= 1 on each atom is enumerated.
    """
    for jf, jg, jp in itertools.product((2.5, 3.5), (3.5, 4.5), (0.5, 1.5)):
        if abs(jf - jg) > 1:
            continue
        if B == 0.0:
            yield (PairState(RydbergState(n, 3, jf, 0.5), RydbergState(nprime, 0, 0.5, 0.5)),
                   PairState(RydbergState(n, 4, jg, 0.5), RydbergState(nprime - 1, 1, jp, 0.5)))
            continue
        for mf, ms, mg, mp in itertools.product(_mj_values(jf), (-0.5, 0.5),
                                                _mj_values(jg), _mj_values(jp)):
            if abs(mg - mf) > 1 or abs(mp - ms) > 1:
                continue
            yield (PairState(RydbergState(n, 3, jf, mf), RydbergState(nprime, 0, 0.5, ms)),
                   PairState(RydbergState(n, 4, jg, mg), RydbergState(nprime - 1, 1, jp, mp)))


def min_forster_defect(n: int, nprime: int, env: FieldEnvironment | None = None,
                       table: QuantumDefectTable | None = None
                       ) -> tuple[float, tuple[PairState, PairState]]:
    table = table or default_table()
    B = env.B if env is not None else 0.0
    best = None
    for left, right in forster_channels(n, nprime, B):
        d = forster_defect(left, right, env, table)
        if best is None or abs(d) < abs(best[0]):
            best = (d, (left, right))
    return best


def forster_defect_map(n_range: Sequence[int], nprime_range: Sequence[int],
                       env: FieldEnvironment | None = None,
                       table: QuantumDefectTable | None = None) -> np.ndarray:
    """Grid of min |dE| (h*MHz), rows indexed by n and columns by n'."""
    n_range, nprime_range = list(n_range), list(nprime_range)
    if not n_range or not nprime_range:
        raise ValueError("ranges must be non-empty")
    out = np.empty((len(n_range), len(nprime_range)))
    for i, n in enumerate(n_range):
        for k, npr in enumerate(nprime_range):
            out[i, k] = abs(min_forster_defect(n, npr, env, table)[0])
    return out


# ------------------------------------------------------ radial wavefunctions

NUMEROV_STEP = 0.01  # step in sqrt(r / a0)


def _model_potential(r: np.ndarray, l: int, j: float, table: QuantumDefectTable) -> np.ndarray:
    """Core potential plus spin-orbit term, atomic units."""
    alpha_c = table.core_polarizability
    p = table.core_params(l)
    if p is None:
        z_eff = 1.0
        pol = alpha_c / (2 * r ** 4) * (1 - np.exp(-(r / 1.0) ** 6)) if alpha_c else 0.0
    else:
        z = table.nuclear_charge
        z_eff = 1 + (z - 1) * np.exp(-p.a1 * r) - r * (p.a3 + p.a4 * r) * np.exp(-p.a2 * r)
        pol = alpha_c / (2 * r ** 4) * (1 - np.exp(-(r / p.rc) ** 6))
    so = FINE_STRUCTURE ** 2 / (4 * r ** 3) * (j * (j + 1) - l * (l + 1) - 0.75)
    return -z_eff / r - pol + so


@functools.lru_cache(maxsize=2048)
def radial_wavefunction(n: int, l: int, j: float, table: QuantumDefectTable,
                        step: float = NUMEROV_STEP) -> tuple[int, np.ndarray]:
    """Inward Numerov solution on the grid x_k = k*step, x = sqrt(r).

    Returns (k0, y) with y[i] sampling y(x_{k0+i}) where the radial function
    is P(r) = r R(r) = sqrt(x) y(x), normalized to 2 * int x^2 y^2 dx = 1.
    Grids of different states share sample points, so overlap integrals are
    plain sums over the common index range.
    """
    mu = table.reduced_mass
    energy = energy_level(RydbergState(n, l, j, j), table) / HARTREE_GHZ  # hartree
    r_out = 2 * n * (n + 15)
    r_in = max(table.core_polarizability ** (1 / 3), 4 * step ** 2)
    k_out = int(math.ceil(math.sqrt(r_out) / step))
    k_in = max(int(math.floor(math.sqrt(r_in) / step)), 4)
    x = np.arange(k_in, k_out + 1) * step
    r = x * x
    kfun = 4 * r * (2 * mu * (energy - _model_potential(r, l, j, table)) - l * (l + 1) / r ** 2) \
        - 0.75 / r
    h2 = step * step / 12.0
    f = 1 + h2 * kfun
    g = 2 * (1 - 5 * h2 * kfun)
    y = np.zeros_like(x)
    y[-1], y[-2] = 1e-10, 2e-10
    # the recurrence is sequential; plain floats keep it fast
    fl, gl, yl = f.tolist(), g.tolist(), y.tolist()
    for i in range(len(x) - 2, 0, -1):
        yl[i - 1] = (gl[i] * yl[i] - fl[i + 1] * yl[i + 1]) / fl[i - 1]
    y = np.asarray(yl)
    # Cut the divergent tail inside the inner turning point: the quantum-defect
    # energy is not an exact eigenvalue of the model potential.
    forbidden = kfun < 0
    allowed_idx = np.nonzero(~forbidden)[0]
    if allowed_idx.size:
        first_allowed = allowed_idx[0]
        if first_allowed > 0:
            cut = int(np.argmin(np.abs(y[:first_allowed + 1])))
            y[:cut] = 0.0
    norm = 2 * trapezoid(x ** 2 * y ** 2, x)
    y /= math.sqrt(norm)
    # sign convention: positive outermost lobe
    outer = y[np.nonzero(np.abs(y) > 1e-3 * np.abs(y).max())[0][-1]]
    if outer < 0:
        y = -y
    return k_in, y


def _numerov_radial(n1, l1, j1, n2, l2, j2, table, step=NUMEROV_STEP) -> float:
    k1, y1 = radial_wavefunction(n1, l1, j1, table, step)
    k2, y2 = radial_wavefunction(n2, l2, j2, table, step)
    lo, hi = max(k1, k2), min(k1 + len(y1), k2 + len(y2))
    if hi <= lo:
        return 0.0
    a = y1[lo - k1:hi - k1]
    b = y2[lo - k2:hi - k2]
    x = np.arange(lo, hi) * step
    return float(2 * trapezoid(x ** 4 * a * b, x))


def _quasiclassical_radial(n1, l1, j1, n2, l2, j2, table) -> float:
    """Kaulakys quasi-classical dipole radial integral (Bohr radii)."""
    import mpmath

    nu1 = effective_n((n1, l1, j1), table)
    nu2 = effective_n((n2, l2, j2), table)
    if nu1 > nu2:  # formula is written from the lower state
        nu1, nu2, l1, l2 = nu2, nu1, l2, l1
    l_c = (l1 + l2 + 1) / 2
    nu_c = math.sqrt(nu1 * nu2)
    dnu = nu2 - nu1
    dl = l2 - l1
    gamma = dl * l_c / nu_c
    if abs(dnu) < 1e-12:
        g0, g1, g2, g3 = 1.0, 0.0, 0.0, 0.0
    else:
        jm = float(mpmath.angerj(dnu - 1, -dnu))
        jp = float(mpmath.angerj(dnu + 1, -dnu))
        g0 = (jm - jp) / (3 * dnu)
        g1 = -(jm + jp) / (3 * dnu)
        g2 = g0 - math.sin(math.pi * dnu) / (math.pi * dnu)
        g3 = dnu / 2 * g0 + g1
    return 1.5 * nu_c ** 2 * math.sqrt(1 - (l_c / nu_c) ** 2) * (
        g0 + gamma * g1 + gamma ** 2 * g2 + gamma ** 3 * g3)


def radial_matrix_element(s1: RydbergState, s2: RydbergState,
                          table: QuantumDefectTable | None = None,
                          method: str = "numerov") -> float:
    """<n1 l1 j1 | r | n2 l2 j2> in Bohr radii; requires |l1 - l2| = 1.

    The Numerov result carries the sign of the wavefunction convention
    (positive outermost lobe); the quasi-classical result is a magnitude.
    """
    table = table or default_table()
    if abs(s1.l - s2.l) != 1:
        raise ValueError(f"dipole-forbidden radial element {s1.label} -> {s2.label}")
    key1, key2 = (s1.n, s1.l, s1.j), (s2.n, s2.l, s2.j)
    if key2 < key1:  # canonical order makes the value symmetric by construction
        key1, key2 = key2, key1
    if method == "numerov":
        return _numerov_radial(*key1, *key2, table)
    if method == "quasiclassical":
        return _quasiclassical_radial(*key1, *key2, table)
    raise ValueError(f"unknown radial method {method!r}")


# ------------------------------------------------------ angular algebra


@functools.lru_cache(maxsize=None)
def wigner3j(j1, j2, j3, m1, m2, m3) -> float:
    args = [Fraction(v).limit_denominator(2) for v in (j1, j2, j3, m1, m2, m3)]
    return float(wigner_3j(*(_sym(a) for a in args)))


@functools.lru_cache(maxsize=None)
def wigner6j(j1, j2, j3, j4, j5, j6) -> float:
    args = [Fraction(v).limit_denominator(2) for v in (j1, j2, j3, j4, j5, j6)]
    return float(wigner_6j(*(_sym(a) for a in args)))


@functools.lru_cache(maxsize=None)
def clebsch(j1, m1, j2, m2, j, m) -> float:
    args = [Fraction(v).limit_denominator(2) for v in (j1, j2, j, m1, m2, m)]
    return float(clebsch_gordan(*(_sym(a) for a in args)))


def _sym(f: Fraction):
    from sympy import Rational

    return Rational(f.numerator, f.denominator)


@functools.lru_cache(maxsize=None)
def angular_factor(l1: int, j1: float, m1: float, l2: int, j2: float, m2: float, q: int) -> float:
    """<l2 j2 m2 | C^1_q | l1 j1 m1> for s = 1/2 via Wigner-Eckart."""
    if m2 != m1 + q:
        return 0.0
    s = 0.5
    red_l = (-1) ** l2 * math.sqrt((2 * l1 + 1) * (2 * l2 + 1)) * wigner3j(l2, 1, l1, 0, 0, 0)
    red_j = ((-1) ** int(round(l2 + s + j1 + 1)) * math.sqrt((2 * j1 + 1) * (2 * j2 + 1))
             * wigner6j(l2, j2, s, j1, l1, 1) * red_l)
    return (-1) ** int(round(j2 - m2)) * wigner3j(j2, 1, j1, -m2, q, m1) * red_j


def dipole_matrix_element(s1: RydbergState, s2: RydbergState, q: int,
                          table: QuantumDefectTable | None = None,
                          method: str = "numerov") -> float:
    """<s2 | d_q | s1> in e*a0 (spherical component q of the dipole operator)."""
    if q not in (-1, 0, 1):
        raise ValueError(f"spherical component must be -1, 0 or +1, got {q}")
    ang = angular_factor(s1.l, s1.j, s1.mj, s2.l, s2.j, s2.mj, q)
    if ang == 0.0:
        return 0.0
    return radial_matrix_element(s1, s2, table, method) * ang
