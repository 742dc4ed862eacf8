"""Confidence intervals after model selection in Gaussian linear regression."""

from .constants import KConstant, KKind, k_naive, k_posi, k_posi1, k_posi_all_subsets, k_scheffe, max_t_sample
from .design import Design, ModelId, NestedScenario, build_design_from_gram, fit_submodel, target_coefficients
from .errors import PosiError
from .montecarlo import CoverageEstimate, SearchPlan, estimate_coverage, staged_min_search, staged_search
from .nested import CoverageValue, Target, coverage_full, coverage_selected, k_star_nested, min_coverage
from .selectors import SelectorSpec

__version__ = "0.1.0"
