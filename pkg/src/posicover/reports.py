"""Turn a RunConfig into CSV text: one function per command.

Every CSV starts with '#' comment lines holding the full configuration
(minus thread count and output path, which do not change results), so the
header alone is enough to re-run the job.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import constants as kc
from .config import RunConfig
from .design import (
    ModelId,
    build_design_from_gram,
    equicorrelated_design,
    exchangeable_design,
    load_design_csv,
    nested_design,
    one_vs_rest_design,
)
from .errors import ConfigError
from .montecarlo import SearchPlan, _generator, staged_search
from .nested import Target, coverage_curve, k_star_nested, min_coverage, nested_constants
from .selectors import SelectorSpec
from .util import fmt, parse_number
from .zero_restriction import random_threshold_rules, t_statistic_rule, validate_zero_restriction


def csv_text(cfg: RunConfig, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# posicover {cfg.command}\n")
    for line in cfg.to_ini(runtime=False).splitlines():
        buf.write(f"# {line}\n" if line else "#\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# designs


def default_c(p: int) -> float:
    return math.sqrt(0.8 / (p - 1))


def _parse_gram(text):
    try:
        rows = [[parse_number(v) for v in row.split(",")] for row in text.split(";") if row.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad gram literal: {exc}") from None
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ConfigError("gram literal must be square, rows separated by ';'")
    return np.array(rows)


def build_design(cfg: RunConfig, name: str | None = None):
    name = name or cfg.design
    # 'none' pads the p x p factor with zero rows; a seed draws a dense orthonormal embedding
    emb = None if cfg.embedding_seed.strip().lower() in ("", "none") else int(cfg.embedding_seed)
    c = parse_number(cfg.c) if cfg.c else (default_c(cfg.p) if cfg.p > 1 else 0.0)
    if name == "orthogonal":
        return equicorrelated_design(cfg.p, 0.0, cfg.n, emb)
    if name == "exchangeable":
        return exchangeable_design(cfg.p, cfg.a, cfg.n, emb)
    if name == "equicorrelated":
        return equicorrelated_design(cfg.p, c, cfg.n, emb)
    if name == "one-vs-rest":
        return one_vs_rest_design(cfg.p, c, cfg.n, emb)
    if name == "nested":
        return nested_design(cfg.rho, max(cfg.n, 2))
    if name == "csv":
        if not cfg.design_csv:
            raise ConfigError("design 'csv' needs a design_csv path")
        return load_design_csv(cfg.design_csv, cfg.protected)
    if name == "gram":
        return build_design_from_gram(_parse_gram(cfg.gram), cfg.n, cfg.protected, emb)
    raise ConfigError(f"unknown design {name!r}")


def residual_dof(cfg: RunConfig, design):
    """r from the config, else n - p when positive, else known variance."""
    default = design.n - design.p if design.n > design.p else math.inf
    return cfg.dof(default)


# ---------------------------------------------------------------------------
# constants


def constants_report(cfg: RunConfig) -> str:
    design = build_design(cfg)
    r = residual_dof(cfg, design)
    ks = kc.constants_table(design, None, cfg.alpha, r, cfg.draws, cfg.seed, cfg.threads)
    rows = [(k.kind.value, k.value, k.mc_se, k.alpha, k.r) for k in ks]
    return csv_text(cfg, ["kind", "value", "mc_se", "alpha", "r"], rows)


# ---------------------------------------------------------------------------
# exact nested-model curves

EXACT_COLUMNS = ["figure", "target", "rho", "zeta", "c_threshold", "k_kind", "k_value", "coverage"]
FIGURE_KINDS = (kc.KKind.SCHEFFE, kc.KKind.POSI, kc.KKind.POSI1, kc.KKind.NAIVE)


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def rho_grid(cfg: RunConfig) -> np.ndarray:
    return np.linspace(0.0, cfg.rho_max, cfg.rho_points)


def figure1_rows(cfg: RunConfig):
    """Coverage against zeta for K_S, K_P, K_P1, K_N, both targets."""
    r = cfg.dof(math.inf)
    c = cfg.numbers("c_threshold")[0]
    zeta = np.linspace(-cfg.zeta_max, cfg.zeta_max, cfg.zeta_points)
    rows = []
    for rho in cfg.numbers("rhos"):
        ks = nested_constants(rho, cfg.alpha, r)
        for target in Target:
            for kind in FIGURE_KINDS:
                cov = coverage_curve(rho, zeta, c, ks[kind].value, r, target)
                rows.extend((1, target.value, rho, z, c, kind.value, ks[kind].value, v) for z, v in zip(zeta, cov))
    return rows


def figure2_rows(cfg: RunConfig):
    """Minimal coverage of beta_{1.M_hat} against rho, per C and constant."""
    r = cfg.dof(math.inf)
    cs = cfg.numbers("c_threshold")

    def one(rho):
        ks = nested_constants(rho, cfg.alpha, r)
        out = []
        for c in cs:
            kstar = k_star_nested(rho, c, cfg.alpha, r)
            for kind, k in [(kc.KKind.SCHEFFE, ks[kc.KKind.SCHEFFE]), (kc.KKind.POSI, ks[kc.KKind.POSI]),
                            (kc.KKind.POSI1, ks[kc.KKind.POSI1]), (kc.KKind.OPTIMAL, kstar),
                            (kc.KKind.NAIVE, ks[kc.KKind.NAIVE])]:
                _, m = min_coverage(rho, c, k.value, r, Target.SELECTED)
                out.append((2, Target.SELECTED.value, rho, "", c, kind.value, k.value, m))
        return out

    return [row for part in _map(one, rho_grid(cfg), cfg.threads) for row in part]


def figure3_rows(cfg: RunConfig):
    """The constants themselves against rho; K_* once per C."""
    r = cfg.dof(math.inf)
    cs = cfg.numbers("c_threshold")

    def one(rho):
        ks = nested_constants(rho, cfg.alpha, r)
        out = [(3, Target.SELECTED.value, rho, "", "", kind.value, ks[kind].value, "") for kind in FIGURE_KINDS]
        for c in cs:
            out.append((3, Target.SELECTED.value, rho, "", c, kc.KKind.OPTIMAL.value, k_star_nested(rho, c, cfg.alpha, r).value, ""))
        return out

    return [row for part in _map(one, rho_grid(cfg), cfg.threads) for row in part]


def exact_report(cfg: RunConfig) -> str:
    rows = {1: figure1_rows, 2: figure2_rows, 3: figure3_rows}[cfg.figure](cfg)
    return csv_text(cfg, EXACT_COLUMNS, rows)


# ---------------------------------------------------------------------------
# staged search

SELECTOR_ALIASES = {"lasso": "lasso-cv:10:100"}


def make_constant(kind: str, design, cfg: RunConfig, r):
    if kind == "naive":
        return kc.k_naive(cfg.alpha, r)
    if kind == "scheffe":
        return kc.k_scheffe(cfg.alpha, design.rank, r)
    if kind == "posi":
        return kc.k_posi(design, None, cfg.alpha, r, cfg.draws, cfg.seed, cfg.threads)
    if kind == "posi1":
        return kc.k_posi1(design, None, cfg.alpha, r, cfg.draws, cfg.seed, cfg.threads)
    if kind in ("posi-all-subsets", "posi-prime"):
        return kc.k_posi_all_subsets(design, cfg.alpha, r, cfg.draws, cfg.seed, cfg.threads)
    raise ConfigError(f"unknown constant {kind!r}")


def search_report(cfg: RunConfig, progress=None) -> str:
    plan = SearchPlan(cfg.stage_sizes(), cfg.seed)
    targets = [Target(t) for t in cfg.words("targets")]
    columns = ["design", "selector", "k_kind", "k_value", "target", "rate", "se", "replications", "beta_min"]
    if cfg.timing:
        columns.append("wall_time")
    rows = []
    for dname in cfg.words("design"):
        design = build_design(cfg, dname)
        r = residual_dof(cfg, design)
        ks = [make_constant(k, design, cfg, r) for k in cfg.words("ks")]
        for sname in cfg.words("selectors"):
            spec = SelectorSpec.parse(SELECTOR_ALIASES.get(sname, sname), design.n)
            checkpoint = f"{cfg.checkpoint}.{dname}.{sname}.json" if cfg.checkpoint else None
            start = time.perf_counter()
            results = staged_search(design, spec, ks, plan, targets, cfg.words("ks"), r, cfg.threads, checkpoint)
            wall = time.perf_counter() - start
            for res in results:
                beta = "[" + " ".join(fmt(b) for b in res.estimate.beta) + "]"
                row = [dname, sname, res.k_label, res.k_value, res.target.value, res.estimate.rate,
                       res.estimate.se, res.estimate.replications, beta]
                if cfg.timing:
                    row.append(wall)
                rows.append(row)
            if progress:
                progress(dname, sname, wall)
    return csv_text(cfg, columns, rows)


# ---------------------------------------------------------------------------
# zero-restriction validity


def _models(text, what):
    try:
        return ModelId(tuple(sorted(int(v) for v in text.split(","))))
    except ValueError as exc:
        raise ConfigError(f"bad {what} {text!r}: {exc}") from None


def parameter_points(design, count, seed):
    """Random (beta, sigma) pairs for the validity sweep."""
    rng = _generator(seed, 0xB7)
    betas = rng.normal(0.0, 2.0, size=(count, design.p))
    sigmas = rng.uniform(0.5, 2.0, size=count)
    return betas, sigmas


def appendix_report(cfg: RunConfig) -> str:
    design = build_design(cfg)
    r = residual_dof(cfg, design)
    m0, m1 = _models(cfg.m0, "m0"), _models(cfg.m1, "m1")
    rules = [t_statistic_rule(design, m1, 3.0, design.protected)]
    rules += random_threshold_rules(design.n, cfg.n_selectors, cfg.seed)
    betas, sigmas = parameter_points(design, cfg.n_points, cfg.seed)
    k_n = kc.k_naive(cfg.alpha, r)
    jobs = [(i, j) for i in range(len(rules)) for j in range(cfg.n_points)]

    def one(job):
        i, j = job
        return validate_zero_restriction(design, m0, m1, rules[i], betas[j], sigmas[j], cfg.alpha, k_n, r,
                                         cfg.replications, cfg.seed, key=(i, j))

    ests = _map(one, jobs, cfg.threads)
    rows = []
    for (i, j), est in zip(jobs, ests):
        ok = est.rate >= 1 - cfg.alpha - 3 * est.se
        rows.append((rules[i].name, j, est.rate, est.se, est.replications, "pass" if ok else "fail"))
    return csv_text(cfg, ["selector_id", "point", "rate", "se", "replications", "result"], rows)


REPORTS = {
    "constants": constants_report,
    "exact": exact_report,
    "search": search_report,
    "validate-appendix": appendix_report,
}
