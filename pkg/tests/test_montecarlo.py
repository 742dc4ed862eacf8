import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posicover.constants import k_naive, k_planar, k_posi1, k_scheffe
from posicover.design import Design, ModelId, equicorrelated_design, nested_design, nested_universe, one_vs_rest_design
from posicover.errors import ConfigError, DesignError
from posicover.montecarlo import (
    CoverageEstimate,
    SearchPlan,
    Simulator,
    draw_beta_candidates,
    estimate_coverage,
    staged_min_search,
    staged_search,
)
from posicover.nested import NestedScenario, Target, coverage_selected, coverage_full, min_coverage
from posicover.selectors import SelectorSpec

SQ2 = math.sqrt(2)


def zeta_of(design, beta):
    return beta[1] / math.sqrt(design.factor(design.full_model).inv_diag[1])


class TestCandidates:
    def test_covariance_is_projection(self):
        d = equicorrelated_design(4, 0.5, 7, embedding_seed=3)
        mu = draw_beta_candidates(d, 100_000, seed=1) @ d.x.T
        ev = np.sort(np.linalg.eigvalsh(np.cov(mu.T)))[::-1]
        np.testing.assert_allclose(ev[:4], 1, atol=0.05)
        np.testing.assert_allclose(ev[4:], 0, atol=0.05)

    def test_orthonormal_design(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 3)))
        b = draw_beta_candidates(Design(q), 50_000, seed=2)
        np.testing.assert_allclose(np.cov(b.T), np.eye(3), atol=0.03)

    def test_deterministic(self):
        d = equicorrelated_design(3, 0.2, 5)
        np.testing.assert_array_equal(draw_beta_candidates(d, 10, 4), draw_beta_candidates(d, 10, 4))


class TestEstimate:
    def test_fixed_model_naive(self):
        d = equicorrelated_design(5, 0.4, 12, embedding_seed=1)
        for r in (math.inf, 7):
            est = estimate_coverage(d, SelectorSpec.fixed(ModelId.of(1, 3)), k_naive(0.05, r), [1, -2, 0.5, 3, 0],
                                    replications=200_000, seed=3)
            assert abs(est.rate - 0.95) < 3 * est.se

    def test_nested_zeta_zero_matches_exact(self):
        d = nested_design(0.9)
        kn = k_naive(0.05)
        beta = [0.3, 0.0]
        est = estimate_coverage(d, SelectorSpec.nested(SQ2), kn, beta, replications=300_000, seed=4)
        exact = coverage_selected(NestedScenario(0.9, 0.0, SQ2), kn.value).value
        assert abs(est.rate - exact) < 3 * est.se

    def test_nested_full_target_matches_exact(self):
        d = nested_design(0.7)
        beta = [1.0, 1.3 * math.sqrt(d.factor(d.full_model).inv_diag[1])]
        est = estimate_coverage(d, SelectorSpec.nested(SQ2), 1.96, beta, target=Target.FULL, replications=300_000, seed=5)
        exact = coverage_full(NestedScenario(0.7, 1.3, SQ2), 1.96).value
        assert abs(est.rate - exact) < 3 * est.se

    def test_spar_witness(self):
        d = nested_design(0.9)
        k1 = k_planar(d, nested_universe(), protected_only=True)
        est = estimate_coverage(d, SelectorSpec.spar_variant(), k1, [0.0, 0.0], replications=1_000_000, seed=6,
                                universe=nested_universe())
        assert abs(est.rate - 0.95) < 3 * est.se

    def test_r_must_match(self):
        d = equicorrelated_design(3, 0.2, 8)
        with pytest.raises(DesignError):
            estimate_coverage(d, SelectorSpec.aic(), 2.0, [0, 0, 0], r=4)
        with pytest.raises(ConfigError):
            estimate_coverage(d, SelectorSpec.aic(), k_naive(0.05, 5), [0, 0, 0], r=math.inf)

    def test_thread_and_call_determinism(self):
        d = equicorrelated_design(4, 0.3, 12, embedding_seed=2)
        a = estimate_coverage(d, SelectorSpec.bic(12), k_naive(0.05, 8), [1, 1, 0, 0], replications=5000, seed=8)
        b = estimate_coverage(d, SelectorSpec.bic(12), k_naive(0.05, 8), [1, 1, 0, 0], replications=5000, seed=8)
        assert a == b

    def test_estimate_invariants(self):
        e = CoverageEstimate.from_count(90, 100, [0.0], Target.FULL)
        assert e.se == pytest.approx(math.sqrt(0.9 * 0.1 / 100))
        with pytest.raises(ValueError):
            CoverageEstimate(1.5, 10, (), Target.FULL)


@pytest.mark.parametrize("spec", [SelectorSpec.aic(), SelectorSpec.lasso_cv(5, 30), SelectorSpec.spar_variant()])
def test_scale_equivariance(spec):
    d = equicorrelated_design(4, 0.3, 10, embedding_seed=4)
    sim = Simulator(d, spec, r=6)
    beta = np.array([0.5, -1.0, 0.2, 0.0])
    a = sim.statistics(beta, 1.0, 3000, 9, (1, 0))
    b = sim.statistics(2.0 * beta, 2.0, 3000, 9, (1, 0))
    np.testing.assert_allclose(a[0], b[0], rtol=1e-9)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-9)
    ks = [1.5, 2.0, 2.5]
    np.testing.assert_array_equal(sim.counts(beta, 1.0, 3000, 9, (1, 0), ks), sim.counts(2 * beta, 2.0, 3000, 9, (1, 0), ks))


class TestPlan:
    def test_defaults(self):
        assert SearchPlan().stage_sizes == ((10_000, 100), (1_000, 1_000), (1, 500_000))
        assert SearchPlan.reduced().total_replications == 100_000 + 100_000 + 100_000

    @pytest.mark.parametrize("stages", [(), ((10, 100), (10, 1000)), ((10, 100), (5, 100)), ((0, 10),)])
    def test_invalid(self, stages):
        with pytest.raises(ConfigError):
            SearchPlan(stages)

    def test_geometric(self):
        p = SearchPlan.geometric(10_000, 100, 500_000, 3)
        assert p.stage_sizes == ((10_000, 100), (100, 7071), (1, 500_000))


class TestSearch:
    plan = SearchPlan(((100, 100), (10, 1000), (1, 100_000)), seed=11)

    def test_brackets_exact_minimum(self):
        d = nested_design(0.9)
        kn = k_naive(0.05)
        beta, est = staged_min_search(d, SelectorSpec.nested(SQ2), kn, Target.SELECTED, self.plan)
        exact_min = min_coverage(0.9, SQ2, kn.value)[1]
        probed = [coverage_selected(NestedScenario(0.9, zeta_of(d, b), SQ2), kn.value).value
                  for b in draw_beta_candidates(d, 100, 11)]
        assert est.rate >= exact_min - 3 * est.se
        assert est.rate <= min(probed) + 3 * est.se or est.rate <= coverage_selected(
            NestedScenario(0.9, zeta_of(d, beta), SQ2), kn.value).value + 3 * est.se

    def test_same_seed_same_result(self):
        d = nested_design(0.9)
        a = staged_min_search(d, SelectorSpec.nested(SQ2), 1.96, Target.FULL, self.plan)
        b = staged_min_search(d, SelectorSpec.nested(SQ2), 1.96, Target.FULL, self.plan)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_thread_invariance(self):
        d = one_vs_rest_design(5, math.sqrt(0.8 / 4), 10, embedding_seed=0)
        plan = SearchPlan(((40, 50), (4, 400), (1, 2000)), seed=3)
        ks = [k_naive(0.05, 5), k_scheffe(0.05, 5, 5)]
        a = staged_search(d, SelectorSpec.bic(10), ks, plan, threads=1)
        b = staged_search(d, SelectorSpec.bic(10), ks, plan, threads=3)
        assert [(x.candidate, x.estimate) for x in a] == [(x.candidate, x.estimate) for x in b]

    @pytest.mark.parametrize("spec", [SelectorSpec.aic(), SelectorSpec.bic(10), SelectorSpec.lasso_cv(5, 30),
                                      SelectorSpec.spar_variant()])
    def test_scheffe_validity(self, spec):
        d = equicorrelated_design(4, 0.5, 10, embedding_seed=1)
        ks = k_scheffe(0.05, 4, 6)
        plan = SearchPlan(((60, 100), (6, 1000), (1, 20_000)), seed=4)
        (res,) = staged_search(d, spec, [ks], plan, [Target.SELECTED])
        assert res.estimate.rate >= 0.95 - 3 * res.estimate.se

    def test_posi1_validity_bic(self):
        d = equicorrelated_design(4, 0.5, 10, embedding_seed=1)
        k1 = k_posi1(d, alpha=0.05, r=6, draws=100_000, seed=2)
        plan = SearchPlan(((60, 100), (6, 1000), (1, 20_000)), seed=5)
        (res,) = staged_search(d, SelectorSpec.bic(10), [k1], plan, [Target.SELECTED])
        assert res.estimate.rate >= 0.95 - 3 * res.estimate.se - 3 * k1.mc_se

    def test_full_target_under_coverage_witness(self):
        d = nested_design(0.9, 30)
        plan = SearchPlan(((200, 100), (20, 1000), (1, 20_000)), seed=6)
        (res,) = staged_search(d, SelectorSpec.bic(30), [k_naive(0.05, 28)], plan, [Target.FULL])
        assert res.estimate.rate < 0.95 - 10 * res.estimate.se

    def test_checkpoint_resume_after_interrupt(self, tmp_path):
        d = nested_design(0.9)
        spec = SelectorSpec.nested(SQ2)
        ck = str(tmp_path / "ck.json")
        ref = staged_search(d, spec, [k_naive(0.05)], self.plan)

        class Stop(Exception):
            pass

        def stop_after_first(stage, *_):
            if stage == 0:
                raise Stop

        with pytest.raises(Stop):
            staged_search(d, spec, [k_naive(0.05)], self.plan, checkpoint=ck, progress=stop_after_first)
        assert json.loads(open(ck).read())["done"] == 1
        resumed = staged_search(d, spec, [k_naive(0.05)], self.plan, checkpoint=ck)
        assert [r.estimate for r in resumed] == [r.estimate for r in ref]

    def test_checkpoint_mismatch(self, tmp_path):
        d = nested_design(0.9)
        ck = str(tmp_path / "ck.json")
        staged_search(d, SelectorSpec.nested(SQ2), [1.96], self.plan, checkpoint=ck)
        with pytest.raises(ConfigError):
            staged_search(d, SelectorSpec.nested(1.0), [1.96], self.plan, checkpoint=ck)
