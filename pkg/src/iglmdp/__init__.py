"""Interaction-grounded learning in layered contextual MDPs.

The agent never observes its reward.  It learns to reach terminal states,
fits an inverse-kinematics posterior over actions from feedback, decodes
that posterior into a conservative reward estimate and then plans online
against the estimate.
"""

from .config import ExperimentConfig, env_from_mapping, load_config, load_env_file
from .decoder import (FiniteHypothesisClass, IdentifiabilityConstants, PosteriorHypothesis, TupleDataset,
                      collect_tuples, decode, default_hypothesis_class, derive_constants, env_constants,
                      erm_fit, fit_decoder, lower_reward, matches_truth, posterior_risk, ramp,
                      true_posterior, true_posterior_table)
from .env import (ContextModel, FeedbackModel, IglEnv, LayeredMdp, PRESETS, Trajectory,
                  build_synthetic_env, exact_value, optimal_value, rng_stream, sample_episode,
                  simulate_batch)
from .errors import (CollectionBudgetError, ConfigError, IdentifiabilityError, IglError,
                     InconsistentDataError, NumericalError, PipelineError, PosteriorDomainError)
from .occupancy import OccupancyMeasure, extract_policy, solve_occupancy
from .online import (AggregationOracle, OgdOracle, OnlineMetrics, TransitionCounts,
                     compute_theory_params, estimate_transition, gamma_schedule, logloss_regret,
                     proxy_reward, run_online_loop, sequential_product_identity, update_counts)
from .pipeline import RunReport, emit_metrics, run_experiment, run_full_pipeline
from .reachability import (HomingPolicy, Reachability, ReachableSet, build_reachable_set,
                           classify_reachability, estimate_visitation, learn_homing_policies,
                           learn_homing_policy)
from .verify import monte_carlo_posterior

__version__ = "0.1.0"
