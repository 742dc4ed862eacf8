"""Monte Carlo coverage estimation and the staged minimal-coverage search.

A replication draws u ~ N(0, sigma^2 I_n), sets y = X beta + u, estimates
sigma from the full-model residuals (or uses the true sigma in the
known-variance mode), runs the selector and records two statistics of the
selected model M:

    e_sel  = |beta_hat_{1.M} - beta_{1.M}| / sigma_hat_{1.M}
    e_full = |beta_hat_{1.M} - beta_1|     / sigma_hat_{1.M}

The interval with multiplier K covers the corresponding target iff e <= K,
so one simulation serves every (K, target) pair at once.

Random numbers come from counter-based streams keyed by (seed, stage,
candidate, block) with a fixed block size, so estimates do not depend on the
number of worker threads or on the order in which blocks are evaluated.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constants import KConstant
from .design import Design, ProtectedTable
from .errors import ConfigError, DesignError, PosiError
from .nested import Target
from .selectors import SelectorSpec, check_protected, make_engine
from .util import atomic_write_text

BLOCK = 1024
CANDIDATE_STREAM = 0


@dataclass(frozen=True)
class CoverageEstimate:
    rate: float
    replications: int
    beta: tuple
    target: Target
    covered: int = 0

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ValueError(f"rate {self.rate} outside [0, 1]")
        if self.replications < 1:
            raise ValueError("replications must be positive")

    @property
    def se(self) -> float:
        return math.sqrt(self.rate * (1 - self.rate) / self.replications)

    @classmethod
    def from_count(cls, covered: int, replications: int, beta, target) -> "CoverageEstimate":
        return cls(covered / replications, replications, tuple(float(b) for b in beta), Target(target), int(covered))


@dataclass(frozen=True)
class SearchPlan:
    """Stages of (candidate_count, replications), run in order.

    Stage one evaluates ``candidate_count`` random parameters; each later
    stage keeps that many of the lowest-rate survivors of the previous one.
    """

    stage_sizes: tuple = ((10_000, 100), (1_000, 1_000), (1, 500_000))
    seed: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        stages = tuple((int(c), int(r)) for c, r in self.stage_sizes)
        object.__setattr__(self, "stage_sizes", stages)
        if not stages:
            raise ConfigError("search plan has no stages")
        if any(c < 1 or r < 1 for c, r in stages):
            raise ConfigError("stage sizes must be positive")
        counts = [c for c, _ in stages]
        reps = [r for _, r in stages]
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"candidate counts must strictly decrease: {counts}")
        if any(a >= b for a, b in zip(reps, reps[1:])):
            raise ConfigError(f"replications must strictly increase: {reps}")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @classmethod
    def reduced(cls, seed=0):
        return cls(((1_000, 100), (100, 1_000), (1, 100_000)), seed)

    @classmethod
    def geometric(cls, first_count, first_reps, final_reps, stages=3, seed=0):
        """Counts shrink geometrically from ``first_count`` to 1, replications grow to ``final_reps``."""
        if stages < 1:
            raise ConfigError("need at least one stage")
        if stages == 1:
            return cls(((first_count, final_reps),), seed)
        frac = np.linspace(0, 1, stages)
        counts = np.round(first_count ** (1 - frac)).astype(int)
        reps = np.round(first_reps * (final_reps / first_reps) ** frac).astype(int)
        return cls(tuple(zip(counts.tolist(), reps.tolist())), seed)

    @property
    def total_replications(self) -> int:
        return sum(c * r for c, r in self.stage_sizes)


def _generator(seed, *key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def draw_beta_candidates(design: Design, count: int, seed: int) -> np.ndarray:
    """``count`` parameters with X beta standard Gaussian in the column space of X."""
    f = design.factor(design.full_model)
    if count < 1:
        raise ConfigError("count must be positive")
    z = _generator(seed, CANDIDATE_STREAM).standard_normal((count, design.rank))
    return (design.basis @ z.T).T @ f.pinv.T


class Simulator:
    """Draws replications for one (design, selector) pair.

    Parameters
    ----------
    design : Design
    selector : SelectorSpec
    r : float
        Degrees of freedom of sigma_hat; ``inf`` uses the true sigma,
        otherwise it must equal n - p (full-model residual variance).
    universe : optional list of models for selectors that take one.
    """

    def __init__(self, design: Design, selector: SelectorSpec, r=math.inf, universe=None):
        self.design = design
        self.selector = selector
        self.engine = make_engine(design, selector, universe)
        self.table = ProtectedTable.build(design, self.engine.universe)
        if r != math.inf:
            if r != design.n - design.p:
                raise DesignError(f"r={r} does not match the full-model residual dof n-p={design.n - design.p}")
            self.q_full = design.factor(design.full_model).q
        self.r = r
        self.j = design.protected - 1

    def statistics(self, beta, sigma, reps, seed, key):
        """(e_sel, e_full) arrays for ``reps`` replications at ``beta``."""
        beta = np.asarray(beta, dtype=np.float64)
        mu = self.design.x @ beta
        out_sel = np.empty(reps)
        out_full = np.empty(reps)
        for b, start in enumerate(range(0, reps, BLOCK)):
            size = min(BLOCK, reps - start)
            rng = _generator(seed, *key, b)
            u = sigma * rng.standard_normal((size, self.design.n))
            y = mu + u
            if self.r == math.inf:
                sigma_hat = np.full(size, float(sigma))
            else:
                resid = y - (y @ self.q_full) @ self.q_full.T
                sigma_hat = np.sqrt(np.einsum("ij,ij->i", resid, resid) / self.r)
            try:
                masks = self.engine.select(y, sigma_hat, rng)
                check_protected(self.design, masks)
                idx = self.table.rows_for(masks)
            except PosiError as exc:
                raise type(exc)(f"{exc} (block starting at replication {start})") from exc
            a = self.table.coef[idx]
            denom = sigma_hat * self.table.scale[idx]
            est = np.einsum("ij,ij->i", a, y)
            out_sel[start : start + size] = np.abs(np.einsum("ij,ij->i", a, u)) / denom
            out_full[start : start + size] = np.abs(est - beta[self.j]) / denom
        return out_sel, out_full

    def counts(self, beta, sigma, reps, seed, key, ks):
        """Cover counts, shape (len(ks), 2): columns are (selected, full) targets."""
        e_sel, e_full = self.statistics(beta, sigma, reps, seed, key)
        ks = np.asarray(ks, dtype=np.float64)[:, None]
        return np.stack([(e_sel <= ks).sum(axis=1), (e_full <= ks).sum(axis=1)], axis=1)


def _k_values(ks) -> list[float]:
    return [float(k) for k in ks]


def _check_r(ks, r):
    rs = {k.r for k in ks if isinstance(k, KConstant)}
    if len(rs) > 1:
        raise ConfigError(f"constants mix variance modes: r in {sorted(rs)}")
    if rs and r is None:
        return rs.pop()
    if rs and r != next(iter(rs)):
        raise ConfigError("r of the constant does not match the requested variance mode")
    return math.inf if r is None else r


def estimate_coverage(design, selector, k, beta, sigma=1.0, target=Target.SELECTED, replications=10_000, seed=0, r=None, universe=None):
    """Monte Carlo coverage rate of beta_hat_{1.M_hat} +- K sigma_hat_{1.M_hat}.

    ``r`` defaults to the constant's ``r`` when ``k`` is a KConstant.
    """
    r = _check_r([k], r)
    sim = Simulator(design, selector, r, universe)
    counts = sim.counts(beta, sigma, int(replications), seed, (1, 0), [float(k)])
    col = 0 if Target(target) == Target.SELECTED else 1
    return CoverageEstimate.from_count(int(counts[0, col]), int(replications), beta, target)


# ---------------------------------------------------------------------------
# staged search


@dataclass
class SearchResult:
    """Outcome of one (constant, target) combination of a staged search."""

    k_label: str
    k_value: float
    target: Target
    candidate: int
    estimate: CoverageEstimate
    stage_rates: list = field(default_factory=list)


def _config_key(design, selector, ks, plan, r):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(design.x).tobytes())
    h.update(repr((selector.to_string() if selector.kind != "custom" else selector.label, ks, plan, r)).encode())
    return h.hexdigest()


def _load_checkpoint(path, key):
    if path is None or not os.path.exists(path):
        return None
    with open(path) as fh:
        data = json.load(fh)
    if data.get("key") != key:
        raise ConfigError(f"checkpoint {path} belongs to a different run")
    return data


def staged_search(design, selector, ks, plan: SearchPlan, targets=(Target.SELECTED, Target.FULL), labels=None,
                  r=None, threads=1, checkpoint=None, universe=None, progress=None) -> list[SearchResult]:
    """Three-stage (or n-stage) search for the parameter with the lowest coverage.

    Every stage simulates each live candidate once and scores it for every
    (K, target) combination. Each combination keeps its own survivors, ranked
    by (rate, candidate index); the union of survivors is simulated in the
    next stage. The final stage's estimate for each combination's best
    candidate is an approximate upper bound on the minimal coverage.
    """
    r = _check_r(ks, r)
    kv = _k_values(ks)
    if labels is None:
        labels = [k.kind.value if isinstance(k, KConstant) else f"k{i}" for i, k in enumerate(ks)]
    targets = [Target(t) for t in targets]
    combos = [(i, t) for i in range(len(kv)) for t in targets]
    sim = Simulator(design, selector, r, universe)
    betas = draw_beta_candidates(design, plan.stage_sizes[0][0], plan.seed)
    key = _config_key(design, selector, kv, plan, r)

    state = _load_checkpoint(checkpoint, key)
    if state is None:
        state = {"key": key, "done": 0, "survivors": [list(range(len(betas)))] * len(combos), "history": []}
    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None
    try:
        for stage in range(state["done"], len(plan.stage_sizes)):
            reps = plan.stage_sizes[stage][1]
            live = sorted(set().union(*map(set, state["survivors"])))

            def run(c, stage=stage, reps=reps):
                return sim.counts(betas[c], plan.sigma, reps, plan.seed, (stage + 1, c), kv)

            results = list(pool.map(run, live)) if pool else [run(c) for c in live]
            counts = dict(zip(live, results))
            keep_next = plan.stage_sizes[stage + 1][0] if stage + 1 < len(plan.stage_sizes) else 1
            new_surv, stage_best = [], []
            for ci, (i, t) in enumerate(combos):
                col = 0 if t == Target.SELECTED else 1
                mine = state["survivors"][ci]
                ranked = sorted(mine, key=lambda c: (int(counts[c][i, col]), c))
                new_surv.append(ranked[:keep_next])
                best = ranked[0]
                stage_best.append([best, int(counts[best][i, col]), reps])
            state["survivors"] = new_surv
            state["history"].append(stage_best)
            state["done"] = stage + 1
            if checkpoint is not None:
                atomic_write_text(checkpoint, json.dumps(state))
            if progress is not None:
                progress(stage, len(live), reps)
    finally:
        if pool:
            pool.shutdown()

    out = []
    for ci, (i, t) in enumerate(combos):
        best, covered, reps = state["history"][-1][ci]
        est = CoverageEstimate.from_count(covered, reps, betas[best], t)
        rates = [h[ci][1] / h[ci][2] for h in state["history"]]
        out.append(SearchResult(labels[i], kv[i], t, best, est, rates))
    return out


def staged_min_search(design, selector, k, target, plan: SearchPlan, r=None, threads=1, checkpoint=None, universe=None):
    """Lowest coverage found for a single (K, target) pair.

    Returns
    -------
    (beta_min, CoverageEstimate)
    """
    res = staged_search(design, selector, [k], plan, [target], r=r, threads=threads, checkpoint=checkpoint, universe=universe)[0]
    return np.array(res.estimate.beta), res.estimate

