"""Monte Carlo sampling of blockaded 1D superatom chains.

The excitation region [0, a_x) is split into N equal segments with one
excitation drawn uniformly in each; the whole set is redrawn until every
pair is at least r_block apart.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from .errors import InfeasibleModelError

ACCEPTANCE_FLOOR = 1e-6
_PILOT_DRAWS = 200_000
_BATCH = 256


@dataclass(frozen=True)
class ChainModel:
    a_x: float = 126.0
    n_atoms: int = 5
    r_block: float = 14.7
    sigma_r: float = 6.0
    seed: int = 0
    # "radius" keeps pairs >= r_block apart, "diameter" requires 2 r_block
    blockade_rule: str = "radius"
    transverse_jitter: bool = True
    y_cutoff_sigmas: float = 2.0

    def __post_init__(self):
        if self.a_x <= 0:
            raise ValueError("a_x must be positive")
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ValueError("n_atoms must be an integer >= 1")
        if self.r_block < 0 or self.sigma_r < 0:
            raise ValueError("r_block and sigma_r must be >= 0")
        if self.blockade_rule not in ("radius", "diameter"):
            raise ValueError(f"unknown blockade_rule {self.blockade_rule!r}")

    @property
    def segment(self) -> float:
        return self.a_x / self.n_atoms

    @property
    def min_gap(self) -> float:
        return self.r_block * (2.0 if self.blockade_rule == "diameter" else 1.0)

    @property
    def feasible(self) -> bool:
        """Whether a positive acceptance probability is possible at all."""
        return self.n_atoms == 1 or self.segment > self.min_gap or self.min_gap == 0


@dataclass(frozen=True)
class ChainSample:
    positions: np.ndarray  # (n_atoms, 2) array of (x, y) in um
    shot_id: int
    attempts: int = 1

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.positions[:, 1]


def _accepted(x: np.ndarray, gap: float) -> np.ndarray:
    # x sorted per row since segment i precedes segment i+1
    if x.shape[-1] < 2 or gap == 0:
        return np.ones(x.shape[:-1], dtype=bool)
    return np.all(np.diff(x, axis=-1) >= gap, axis=-1)


def _draw_x(m: ChainModel, rng: np.random.Generator, size: int) -> np.ndarray:
    edges = np.arange(m.n_atoms) * m.segment
    return edges + rng.uniform(0.0, m.segment, size=(size, m.n_atoms))


def acceptance_rate(m: ChainModel, n_draws: int = 1_000_000, seed: int = 12345) -> tuple[float, float]:
    """Brute-force estimate of the acceptance probability and its binomial std."""
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_draws:
        k = min(100_000, n_draws - done)
        hits += int(_accepted(_draw_x(m, rng, k), m.min_gap).sum())
        done += k
    p = hits / n_draws
    return p, math.sqrt(max(p * (1 - p), 1.0 / n_draws) / n_draws)


def estimated_acceptance(m: ChainModel) -> float:
    if not m.feasible:
        return 0.0
    if m.min_gap == 0 or m.n_atoms == 1:
        return 1.0
    return acceptance_rate(m, _PILOT_DRAWS, seed=0)[0]


def _check_feasible(m: ChainModel) -> None:
    if not m.feasible:
        raise InfeasibleModelError(
            f"chain model infeasible: a_x/N = {m.segment:.3g} um <= blockade gap {m.min_gap:.3g} um")
    p = estimated_acceptance(m)
    if p < ACCEPTANCE_FLOOR:
        raise InfeasibleModelError(
            f"chain acceptance probability {p:.2e} below floor {ACCEPTANCE_FLOOR:g}")


def _sample_y(m: ChainModel, rng: np.random.Generator) -> np.ndarray:
    if not m.transverse_jitter or m.sigma_r == 0:
        return np.zeros(m.n_atoms)
    c = m.y_cutoff_sigmas
    return truncnorm.rvs(-c, c, loc=0.0, scale=m.sigma_r, size=m.n_atoms, random_state=rng)


def _sample_one(m: ChainModel, rng: np.random.Generator, shot_id: int) -> ChainSample:
    attempts = 0
    while True:
        # whole-sample rejection, drawn in batches; the first accepted row wins
        xs = _draw_x(m, rng, _BATCH)
        ok = np.nonzero(_accepted(xs, m.min_gap))[0]
        if ok.size:
            attempts += int(ok[0]) + 1
            x = xs[ok[0]]
            break
        attempts += _BATCH
    return ChainSample(np.column_stack([x, _sample_y(m, rng)]), shot_id, attempts)


def shot_rng(seed: int, shot_id: int, stream: int | None = None) -> np.random.Generator:
    """Independent generator for one shot, fixed by (seed, shot_id[, stream]) alone.

    Later pipeline stages pass their own stream number so their draws never
    reuse the chain sampler's substream.
    """
    key = [int(seed), int(shot_id)] + ([] if stream is None else [int(stream)])
    return np.random.default_rng(np.random.SeedSequence(key))


def sample_chain(m: ChainModel, rng: np.random.Generator | None = None, shot_id: int = 0) -> ChainSample:
    _check_feasible(m)
    if rng is None:
        rng = shot_rng(m.seed, shot_id)
    return _sample_one(m, rng, shot_id)


def _shot_block(args):
    m, ids = args
    return [_sample_one(m, shot_rng(m.seed, i), i) for i in ids]


def sample_shots(m: ChainModel, n_shots: int, workers: int = 1) -> list[ChainSample]:
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    _check_feasible(m)
    ids = list(range(n_shots))
    if workers <= 1 or n_shots < 64:
        return _shot_block((m, ids))
    chunks = [(m, ids[i::workers]) for i in range(workers)]
    out: list[ChainSample] = []
    with ProcessPoolExecutor(max_workers=workers) as ex:
        for block in ex.map(_shot_block, chunks):
            out.extend(block)
    out.sort(key=lambda s: s.shot_id)
    return out


def shots_to_array(shots: list[ChainSample]) -> np.ndarray:
    """Stack shots into (n_shots, n_atoms, 2)."""
    return np.stack([s.positions for s in shots])
