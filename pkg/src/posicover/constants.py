"""Interval half-width multipliers: naive, Scheffe and the PoSI family.

The PoSI constants are empirical quantiles of the maximal absolute
t-statistic over a family of coefficients. Each coefficient beta_hat_{j.M}
is a linear functional of y; its t-statistic is the inner product of a
standard Gaussian vector in the column space of X with a unit direction,
divided by sigma_hat / sigma in the unknown-variance case.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import stats

from .design import Design, ModelId, check_dof, coefficient_rows, protected_universe
from .errors import BudgetError, DesignError

DEFAULT_DRAWS = 200_000
DEFAULT_BUDGET = 2**20
CHUNK = 8192
DIRECTION_BLOCK = 1024


class KKind(str, Enum):
    NAIVE = "naive"
    SCHEFFE = "scheffe"
    POSI = "posi"
    POSI1 = "posi1"
    POSI_ALL = "posi-all-subsets"
    OPTIMAL = "optimal-nested"


@dataclass(frozen=True)
class KConstant:
    kind: KKind
    value: float
    alpha: float
    r: float
    mc_se: float = 0.0

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"K must be positive, got {self.value}")

    def __float__(self):
        return self.value

    @property
    def known_variance(self) -> bool:
        return self.r == math.inf


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise DesignError(f"alpha must lie in (0, 1), got {alpha}")


def k_naive(alpha: float, r=math.inf) -> KConstant:
    """(1 - alpha/2)-quantile of N(0,1) (r = inf) or of Student t with r dof."""
    _check_alpha(alpha)
    r = check_dof(r)
    if r == math.inf:
        value = stats.norm.ppf(1 - alpha / 2)
    else:
        value = stats.t.ppf(1 - alpha / 2, r)
    return KConstant(KKind.NAIVE, float(value), alpha, r)


def k_scheffe(alpha: float, s: int, r=math.inf) -> KConstant:
    """sqrt of the chi2_s (1-alpha)-quantile, or sqrt(s F_{s,r}) for finite r."""
    _check_alpha(alpha)
    r = check_dof(r)
    if int(s) != s or s < 1:
        raise DesignError(f"rank s must be a positive integer, got {s}")
    if r == math.inf:
        value = math.sqrt(stats.chi2.ppf(1 - alpha, s))
    else:
        value = math.sqrt(s * stats.f.ppf(1 - alpha, s, r))
    return KConstant(KKind.SCHEFFE, value, alpha, r)


# ---------------------------------------------------------------------------
# direction families


def family_size(universe: Sequence[ModelId], protected_only: bool = False) -> int:
    return len(universe) if protected_only else sum(len(m) for m in universe)


def directions(design: Design, universe: Sequence[ModelId], protected_only: bool = False) -> np.ndarray:
    """Unit directions (k x s) of the t-statistics in column-space coordinates."""
    rows, _ = coefficient_rows(design, universe, protected_only=protected_only)
    rows = rows / np.linalg.norm(rows, axis=1)[:, None]
    return rows @ design.basis


def dedup_directions(d: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Drop directions equal (up to sign, within ``tol``) to an earlier one.

    Duplicates that straddle a rounding boundary survive; that only costs time.
    """
    d = np.asarray(d, dtype=np.float64)
    lead = np.argmax(np.abs(d) > tol, axis=1)
    d = d * np.where(d[np.arange(len(d)), lead] < 0, -1.0, 1.0)[:, None]
    keys = np.round(d, 9)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    keep = []
    for g in range(len(first)):
        members = np.flatnonzero(inverse.ravel() == g) if len(first) < len(d) else [first[g]]
        kept = []
        for i in members:
            if not any(np.max(np.abs(d[i] - d[j])) <= tol for j in kept):
                kept.append(i)
        keep.extend(kept)
    return d[np.sort(keep)]


def _chunk_generator(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def _max_abs_chunk(d: np.ndarray, r, size: int, seed: int, chunk: int) -> np.ndarray:
    rng = _chunk_generator(seed, chunk)
    z = rng.standard_normal((size, d.shape[1]))
    out = np.zeros(size)
    for start in range(0, d.shape[0], DIRECTION_BLOCK):
        np.maximum(out, np.abs(z @ d[start : start + DIRECTION_BLOCK].T).max(axis=1), out=out)
    if r != math.inf:
        out /= np.sqrt(rng.chisquare(r, size) / r)
    return out


def max_abs_sample(d: np.ndarray, r, draws: int, seed: int, threads: int | None = 1) -> np.ndarray:
    """Draws of max_k |<d_k, Z>| / sqrt(chi2_r / r) with Z ~ N(0, I_s).

    Draws are generated in fixed-size chunks, chunk ``i`` from its own
    counter-based stream keyed by ``(seed, i)``, and concatenated in chunk
    order; the result does not depend on ``threads``.
    """
    r = check_dof(r)
    if draws < 1:
        raise DesignError("draws must be positive")
    if d.ndim != 2 or d.shape[0] == 0:
        raise DesignError("need at least one direction")
    sizes = [min(CHUNK, draws - start) for start in range(0, draws, CHUNK)]
    jobs = [(size, i) for i, size in enumerate(sizes)]
    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda job: _max_abs_chunk(d, r, job[0], seed, job[1]), jobs))
    else:
        parts = [_max_abs_chunk(d, r, size, seed, i) for size, i in jobs]
    return np.concatenate(parts)


def max_t_sample(
    design: Design,
    universe: Sequence[ModelId],
    r=math.inf,
    draws: int = DEFAULT_DRAWS,
    seed: int = 0,
    protected_only: bool = False,
    threads: int | None = 1,
    budget: int = DEFAULT_BUDGET,
) -> np.ndarray:
    """Sample of the maximal |t|-statistic over the (j, M) family of ``universe``."""
    if not universe:
        raise DesignError("universe is empty")
    k = family_size(universe, protected_only)
    if k > budget:
        raise BudgetError(f"family has {k} directions, budget is {budget}")
    d = dedup_directions(directions(design, universe, protected_only))
    return max_abs_sample(d, r, draws, seed, threads)


def empirical_quantile(sample: np.ndarray, level: float) -> tuple[float, float]:
    """Inverse-ECDF quantile and a one-sigma binomial order-statistic error."""
    x = np.sort(sample)
    n = x.size
    i = min(n - 1, max(0, math.ceil(level * n) - 1))
    half = math.sqrt(n * level * (1 - level))
    lo = min(n - 1, max(0, math.floor(level * n - half) - 1))
    hi = min(n - 1, max(0, math.ceil(level * n + half) - 1))
    return float(x[i]), float(x[hi] - x[lo]) / 2


def _k_from_sample(kind, sample, alpha, r) -> KConstant:
    value, se = empirical_quantile(sample, 1 - alpha)
    return KConstant(kind, value, alpha, r, se)


def k_posi(design, universe=None, alpha=0.05, r=math.inf, draws=DEFAULT_DRAWS, seed=0, threads=1, budget=DEFAULT_BUDGET):
    """PoSI constant: simultaneous over every coefficient of every model in ``universe``.

    ``universe`` defaults to all models containing the protected column.
    """
    _check_alpha(alpha)
    r = check_dof(r)
    universe = protected_universe(design) if universe is None else list(universe)
    sample = max_t_sample(design, universe, r, draws, seed, False, threads, budget)
    return _k_from_sample(KKind.POSI, sample, alpha, r)


def k_posi1(design, universe=None, alpha=0.05, r=math.inf, draws=DEFAULT_DRAWS, seed=0, threads=1, budget=DEFAULT_BUDGET):
    """PoSI1 constant: simultaneous over the protected coefficient across models."""
    _check_alpha(alpha)
    r = check_dof(r)
    universe = protected_universe(design) if universe is None else list(universe)
    sample = max_t_sample(design, universe, r, draws, seed, True, threads, budget)
    return _k_from_sample(KKind.POSI1, sample, alpha, r)


def k_posi_all_subsets(design, alpha=0.05, r=math.inf, draws=DEFAULT_DRAWS, seed=0, threads=1, budget=DEFAULT_BUDGET):
    """PoSI constant over every nonempty full-rank submodel of the design."""
    from .design import all_subsets_universe

    _check_alpha(alpha)
    r = check_dof(r)
    p = min(design.p, 62)
    k = sum(math.comb(p, m) * m for m in range(1, min(design.p, design.n) + 1))
    if k > budget:
        raise BudgetError(f"all-subsets family has {k} directions, budget is {budget}")
    sample = max_t_sample(design, all_subsets_universe(design), r, draws, seed, False, threads, budget)
    return _k_from_sample(KKind.POSI_ALL, sample, alpha, r)


def constants_table(design, universe=None, alpha=0.05, r=math.inf, draws=DEFAULT_DRAWS, seed=0, threads=1, budget=DEFAULT_BUDGET):
    """Naive, PoSI1, PoSI, all-subsets PoSI and Scheffe constants, in that order.

    The three simulated constants share the same Gaussian draws.
    """
    universe = protected_universe(design) if universe is None else list(universe)
    return [
        k_naive(alpha, r),
        k_posi1(design, universe, alpha, r, draws, seed, threads, budget),
        k_posi(design, universe, alpha, r, draws, seed, threads, budget),
        k_posi_all_subsets(design, alpha, r, draws, seed, threads, budget),
        k_scheffe(alpha, design.rank, r),
    ]


# ---------------------------------------------------------------------------
# exact constants for two-dimensional column spaces


def _planar_breakpoints(angles: np.ndarray) -> np.ndarray:
    pts = [angles, angles + np.pi / 2]
    i, j = np.triu_indices(len(angles), 1)
    mid = (angles[i] + angles[j]) / 2
    pts += [mid, mid + np.pi / 2]
    b = np.mod(np.concatenate(pts), np.pi)
    return np.unique(np.concatenate([[0.0, np.pi], b]))


def planar_max_cdf(d: np.ndarray, k: float, r=math.inf, nodes: int = 64) -> float:
    """P(max_i |<d_i, Z>| / sqrt(chi2_r/r) <= k) for unit directions in R^2.

    Writes Z in polar form; given the angle, the event is a bound on the
    radius, so the probability is a one-dimensional integral over the angle.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 2:
        raise DesignError("planar formula needs directions in R^2")
    angles = np.arctan2(d[:, 1], d[:, 0])
    b = _planar_breakpoints(angles)
    x, w = np.polynomial.legendre.leggauss(nodes)
    lo, hi = b[:-1, None], b[1:, None]
    theta = (lo + hi) / 2 + (hi - lo) / 2 * x
    weight = (hi - lo) / 2 * w
    m = np.abs(np.cos(theta[..., None] - angles)).max(axis=-1)
    bound = k * k / np.maximum(m, 1e-300) ** 2
    if r == math.inf:
        g = -np.expm1(-bound / 2)
    else:
        g = stats.f.cdf(bound / 2, 2, r)
    return float(np.sum(weight * g) / np.pi)


def k_planar(design: Design, universe, alpha=0.05, r=math.inf, protected_only=False, kind=None) -> KConstant:
    """PoSI or PoSI1 constant by quadrature, for designs of rank 2."""
    from scipy.optimize import brentq

    _check_alpha(alpha)
    r = check_dof(r)
    if design.rank != 2:
        raise DesignError(f"planar constant needs a rank-2 design, got rank {design.rank}")
    d = dedup_directions(directions(design, list(universe), protected_only))
    lo = k_naive(alpha, r).value * (1 - 1e-9)
    hi = k_scheffe(alpha, 2, r).value * (1 + 1e-9)
    target = 1 - alpha
    value = brentq(lambda k: planar_max_cdf(d, k, r) - target, lo, hi, xtol=1e-12, rtol=1e-14)
    if kind is None:
        kind = KKind.POSI1 if protected_only else KKind.POSI
    return KConstant(KKind(kind), value, alpha, r)
