"""Activation-guided zeroth-order optimization lab.

Seeded low-rank perturbations built from activation subspaces, dense and
factored baselines, a first-order oracle, and executable checks of the
expected-cosine theory.
"""

from .diagnostics import (
    beta,
    beta_bounds_check,
    confinement_profile,
    estimator_mean_check,
    expected_cosine_agzo,
    expected_cosine_mezo,
    interaction_condition_check,
    mc_cosine,
    projector_identity_check,
    spectrum_dump,
)
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    InvariantError,
    LabError,
    NumericError,
    RankError,
)
from .models import ModelSpec, TaskSpec, backprop_oracle, forward, init_params, synth_task
from .optim import StepConfig, TrainConfig, agzo_step, lozo_step, mezo_step, train_loop
from .perturb import apply_perturbation, regenerate, restore_and_update, sample_perturbation
from .subspace import subspace_extract
from .tensor import LEDGER, SeedKey, gauss_matrix, qr_orthonormal, svd_full

__version__ = "0.1.0"
