"""Federated optimization of compositional pairwise risks.

A library plus CLI for round-based federated optimization of objectives of
the form  mean over positives of f(mean over negatives of a pairwise loss),
with exact brute-force oracles, AUC / partial-AUC metrics, baselines, and a
deterministic simulation harness.
"""

from .algorithms import (
    HyperParams,
    RunTrace,
    UTable,
    centralized_run,
    fedx1_estimate,
    fedx1_run,
    fedx2_estimate,
    fedx2_run,
    fedx2_u_update,
    local_pair_run,
    local_sgd_run,
    momentum_update,
    theory_schedule,
)
from .data import (
    DataConfig,
    FederatedDataset,
    apply_heterogeneity,
    build_dataset,
    dump_dataset,
    flip_labels,
    generate,
    load_dataset,
)
from .federation import (
    Buffer,
    HistorySet,
    RoundDownload,
    RoundUpload,
    ScoreRecord,
    URecord,
    comm_cost,
    comm_cost_ints,
    server_aggregate,
)
from .harness import ConfigError, RunConfig, parse_config, parse_config_file, run, sweep
from .losses import (
    OuterFnSpec,
    PairwiseLossSpec,
    exact_grad,
    exact_inner,
    exact_objective,
    loss,
    loss_grads,
    outer_deriv,
    outer_value,
)
from .metrics import ScoredEval, auc, auc_bruteforce, partial_auc, partial_auc_bruteforce
from .model import ScorerSpec, finite_diff_grad, score, score_grad, score_many
from .rng import substream

__version__ = "0.1.0"
