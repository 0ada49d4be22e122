"""Tabular laboratory for group-fair preference learning."""

__version__ = "0.1.0"

from .tabular_world import (
    FeatureMap, GroundTruth, PromptDistribution, World, WorldConfig,
    build_world, reward_gap_xi, reward_of, reward_table,
    world_from_json, world_to_json,
)
from .preference_data import (
    CovarianceStats, PreferenceDataset, PreferenceRecord,
    bt_preference_prob, compute_covariances, dataset_from_csv, dataset_to_csv,
    sample_dataset, weighted_inv_norm, weighted_norm,
)
from .reward_estimation import (
    ConfidenceSpec, FitOpts, FitReport, MaxMinParams, SharedRepParams,
    bce_gradients, bce_loss, eta_mm, eta_sr, fit_maxmin, fit_sharedrep,
    project_column_ball, project_simplex,
)
from .policy_engine import (
    GroupSelection, MaxMinOpts, MaxMinSolution, PessimisticValueResult, PolicyTable,
    conditional_entropy, gibbs_policy, kl_value, pessimistic_best_response,
    pessimistic_value, solve_maxmin_policy, suboptimality, performance_gap_bound,
    unregularized_value, worst_group_by_entropy, worst_group_by_reward,
)
from .complexity_toolkit import (
    ComplexityInputs, GapProfile, binary_entropy, f_inverse_half_delta, f_of,
    fannes_bound, gap_profile, kl_divergence, kl_gibbs_bound_check,
    lambert_w_minus1, n_maxmin, n_sr, psi_u, tv_distance,
)
from .experiment_harness import (
    ScenarioConfig, TrialResult, default_scenario, emit, estimate_xi_inf,
    minority_share_scenario, run_trial, sweep,
)
