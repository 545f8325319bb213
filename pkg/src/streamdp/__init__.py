"""Streaming, distributed, asynchronous variational inference for DP Gaussian mixtures."""
from .central import CentralPosterior, MergeReport, ProtocolError, Snapshot
from .component_id import (Matching, RegStats, ScoreMatrix, build_score_matrix, eppf_log_unnorm, eta_tilde,
                           identify, mc_regularization, naive_matching, reg_bound_term)
from .assignment import solve_lap
from .engine import RunConfig, RunTrace, batch_vi, held_out_ll, run
from .expfam import (ConventionalNiw, InvalidParameterError, NiwDomainError, NiwNatural, data_stats, from_natural,
                     log_marginal, log_partition, log_predictive, posterior_update, to_natural)
from .minibatch_vi import ConfigurationError, MinibatchPosterior, run_minibatch_vi, stats_from_resp

__version__ = "0.1.0"
