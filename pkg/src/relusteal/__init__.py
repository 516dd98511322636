"""Hard-label parameter extraction of ReLU MLPs, with cross-layer recovery
of persistent (always-active) neurons and the supporting error analysis."""

from .network import (
    ActivationPattern,
    LocalAffine,
    MlpParams,
    activation_pattern,
    forward,
    forward_batch,
    hard_label,
    kaiming_init,
    load_model,
    local_affine,
    normalize_rows,
    permute_layer,
    plant_special_neurons,
    save_model,
)
from .oracle import BudgetExhaustedError, OracleSession, WhiteboxAccessError

__all__ = [
    "ActivationPattern",
    "BudgetExhaustedError",
    "LocalAffine",
    "MlpParams",
    "OracleSession",
    "WhiteboxAccessError",
    "activation_pattern",
    "forward",
    "forward_batch",
    "hard_label",
    "kaiming_init",
    "load_model",
    "local_affine",
    "normalize_rows",
    "permute_layer",
    "plant_special_neurons",
    "save_model",
]

__version__ = "0.1.0"
