"""Boosted mixtures of invertible coupling flows.

Fits a density as a stagewise combination of normalizing-flow components:
additively (a convex mixture) or multiplicatively (a product of powers with
an importance-sampled normalizer). Components train one at a time against
the frozen model so far, for maximum-likelihood density estimation on
samples or reverse-KL matching of unnormalized 2-D energies.

The pieces:

- autodiff: reverse-mode gradients for the handful of array ops used here.
- flows: affine coupling / elementwise-affine components, exact inverses.
- objectives: NLL, residual reweighting, boosted-stage objectives.
- boosting: mixture state, stage appends, partition estimation, rho search.
- targets: toy samplers, energy functions, CSV datasets.
- training: Adam, schedules, stage loop, checkpoints.
- cli: `gbnf train|grid|sample|eval|partition`.
"""

from .boosting import (
    ADDITIVE,
    MULTIPLICATIVE,
    GBNFModel,
    RecursionCheck,
    RhoSGDConfig,
    RhoSGDResult,
    StageRecord,
    additive_log_prob,
    append_component,
    empty_model,
    estimate_log_partition,
    fine_tune,
    leave_one_out,
    multiplicative_log_prob,
    recursion_check,
    rho_line_search,
    rho_sgd,
    sample_mixture,
    with_partition,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateProposalError,
    GBNFError,
    ModelStateError,
    NumericError,
    ShapeError,
    StalePartitionError,
    TrainingAbort,
)
from .flows import AFFINE, COUPLING, FlowComponent, mask_indices, new_component
from .objectives import (
    additive_de_objective,
    boosted_reverse_kl_objective,
    compute_resample_weights,
    nll_loss,
    resample,
    resample_indices,
)
from .targets import (
    ENERGY_NAMES,
    TOY_NAMES,
    EnergyTarget,
    TabularDataset,
    ToySampler,
    export_csv,
    load_tabular,
    reference_entropy,
)
from .training import (
    DENSITY_ESTIMATION,
    DENSITY_MATCHING,
    AdamState,
    CheckpointData,
    TrainConfig,
    adam_init,
    adam_step,
    cosine_lr,
    load_checkpoint,
    run_boosting,
    save_checkpoint,
    train_stage,
)

__version__ = "0.1.0"

__all__ = [
    "ADDITIVE",
    "AFFINE",
    "COUPLING",
    "DENSITY_ESTIMATION",
    "DENSITY_MATCHING",
    "ENERGY_NAMES",
    "MULTIPLICATIVE",
    "TOY_NAMES",
    "AdamState",
    "CheckpointData",
    "CheckpointError",
    "ConfigError",
    "DegenerateProposalError",
    "EnergyTarget",
    "FlowComponent",
    "GBNFError",
    "GBNFModel",
    "ModelStateError",
    "NumericError",
    "RecursionCheck",
    "RhoSGDConfig",
    "RhoSGDResult",
    "ShapeError",
    "StageRecord",
    "StalePartitionError",
    "TabularDataset",
    "ToySampler",
    "TrainConfig",
    "TrainingAbort",
    "adam_init",
    "adam_step",
    "additive_de_objective",
    "additive_log_prob",
    "append_component",
    "boosted_reverse_kl_objective",
    "compute_resample_weights",
    "cosine_lr",
    "empty_model",
    "estimate_log_partition",
    "export_csv",
    "fine_tune",
    "leave_one_out",
    "load_checkpoint",
    "load_tabular",
    "mask_indices",
    "multiplicative_log_prob",
    "new_component",
    "nll_loss",
    "recursion_check",
    "reference_entropy",
    "resample",
    "resample_indices",
    "rho_line_search",
    "rho_sgd",
    "run_boosting",
    "sample_mixture",
    "save_checkpoint",
    "train_stage",
    "with_partition",
]
