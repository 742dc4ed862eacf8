import math

import numpy as np
import pytest

from posicover.constants import k_naive
from posicover.design import ModelId, equicorrelated_design, fit_submodel, target_coefficients
from posicover.errors import DesignError, SelectorError
from posicover.zero_restriction import (
    ConstantRule,
    ZeroRestrictedInterval,
    random_threshold_rules,
    t_statistic_rule,
    validate_zero_restriction,
    zero_restriction_events,
    zero_restriction_interval,
)

M0, M1 = ModelId.of(2, 3), ModelId.of(1, 2)


@pytest.fixture(scope="module")
def design():
    return equicorrelated_design(3, 0.4, 12, embedding_seed=5)


def test_interval_kinds(design):
    y = np.random.default_rng(0).standard_normal(12)
    fit = fit_submodel(design, y, M1, 1.3)
    zero = zero_restriction_interval(fit, M0, 1.96, M0)
    assert zero.point_zero and zero.contains(0.0) and not zero.contains(1e-300)
    std = zero_restriction_interval(fit, M1, 1.96, M0)
    assert std.center == pytest.approx(fit.coefficient(1))
    assert std.halfwidth == pytest.approx(1.96 * fit.std_error(1))
    assert std.contains(std.center) and std.lower < std.upper
    with pytest.raises(SelectorError):
        zero_restriction_interval(fit, ModelId.of(1, 3), 1.96, M0)


def test_standard_needs_positive_halfwidth():
    with pytest.raises(ValueError):
        ZeroRestrictedInterval.standard(0.0, 0.0)


def test_constant_rules(design):
    beta = [1.0, 0.5, -0.3]
    kn = k_naive(0.05, 9)
    est0 = validate_zero_restriction(design, M0, M1, ConstantRule(False), beta, 1.0, k_n=kn, r=9, replications=20_000)
    assert est0.rate == 1.0
    est1 = validate_zero_restriction(design, M0, M1, ConstantRule(True), beta, 1.0, k_n=kn, r=9,
                                     replications=200_000, seed=1)
    assert abs(est1.rate - 0.95) < 3 * est1.se


def test_decomposition_identity(design):
    rule = random_threshold_rules(12, 3, seed=2)[1]
    cover, in_i1, pick = zero_restriction_events(design, M0, M1, rule, [0.4, 1.0, 0.0], 1.5, 2.0, 9, 5000, seed=3)
    np.testing.assert_array_equal(cover, in_i1 | ~pick)


def test_events_match_direct_evaluation(design):
    # replay the block-0 stream and evaluate each replication by hand
    from posicover.montecarlo import _generator

    rule = t_statistic_rule(design, M1, 1.0)
    beta, sigma, k = np.array([0.2, 1.0, -0.5]), 0.8, 2.0
    cover, _, pick = zero_restriction_events(design, M0, M1, rule, beta, sigma, k, math.inf, 200, seed=4, key=(7,))
    y = design.x @ beta + sigma * _generator(4, 7, 0).standard_normal((200, 12))
    b1 = target_coefficients(design, design.x @ beta, M1)[0]
    for i in range(200):
        fit = fit_submodel(design, y[i], M1, sigma)
        chosen = M1 if abs(fit.coefficient(1)) / fit.std_error(1) > 1.0 else M0
        assert (chosen == M1) == pick[i]
        target = b1 if chosen == M1 else 0.0
        assert zero_restriction_interval(fit, chosen, k, M0).contains(target) == cover[i]


def test_t_rule_validity(design):
    rng = np.random.default_rng(5)
    rule = t_statistic_rule(design, M1, 3.0)
    for j in range(10):
        beta, sigma = rng.normal(0, 2, 3), rng.uniform(0.5, 2)
        est = validate_zero_restriction(design, M0, M1, rule, beta, sigma, r=9, replications=20_000, seed=6, key=(j,))
        assert est.rate >= 0.95 - 3 * est.se


def test_bad_models(design):
    with pytest.raises(DesignError):
        zero_restriction_events(design, M1, M0, ConstantRule(True), [0, 0, 0])
    with pytest.raises(DesignError):
        zero_restriction_events(design, M0, M1, ConstantRule(True), [0, 0, 0], r=5)


def test_rule_shape_checked(design):
    with pytest.raises(SelectorError):
        zero_restriction_events(design, M0, M1, lambda y, s: np.ones(3, dtype=bool), [0, 0, 0], replications=10)


def test_random_rules_seeded():
    a = random_threshold_rules(10, 5, seed=1)
    assert a == random_threshold_rules(10, 5, seed=1)
    assert a != random_threshold_rules(10, 5, seed=2)
    assert all(0 <= r.threshold <= 3 for r in a)
