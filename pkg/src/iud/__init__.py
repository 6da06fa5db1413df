"""Interacting urns design: response-adaptive randomization with borrowing across strata."""

from iud.allocation import (
    AllocationKind,
    AllocationRule,
    allocation_probs,
    draw_assignment,
    draw_covariate,
    draw_outcome,
    f_eval,
)
from iud.betabinom import (
    AggregatedSample,
    MleOptions,
    MleResult,
    MleStatus,
    betabin_log_pmf,
    boundary_supremum,
    cluster_strata,
    fit_mle,
    fit_mle_clustered,
    profile_log_likelihood,
    variance_condition,
)
from iud.config import TrialConfig, default_checkpoints
from iud.inference import (
    SequentialPath,
    canonical_covariance,
    confidence_interval,
    drift,
    homogeneity_chi2,
    limit_proportions,
    normal_quantile,
    sequential_path,
    wald_from_rates,
    wald_statistic,
)
from iud.mechanisms import (
    BorrowTerms,
    Mechanism,
    MechanismParams,
    PsiKind,
    borrow_model_based,
    borrow_similarity,
    borrow_vanishing,
    default_c_rule,
    psi_eval,
    similarity_effective_n,
    similarity_set,
    urn_proportion,
    urn_proportions_all,
)
from iud.simulate import (
    MetricRow,
    MetricsSummary,
    Scenario,
    TrialTrace,
    builtin_scenarios,
    collect_traces,
    inf_metric,
    inf_metric_by_stratum,
    lookup_scenario,
    pw_metric,
    replicate_rng,
    run_monte_carlo,
    run_trial,
    summarize_traces,
)
from iud.trial import (
    CountsTensor,
    TrialState,
    record_outcome,
    theta_hat,
    theta_hat_matrix,
    theta_hat_outside,
)

__version__ = "0.1.0"
