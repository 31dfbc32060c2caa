"""Stochastic activation pruning workbench.

Thin Python face over the C++ core: SAP transform, synthetic data, SAPT
tensor io, model loading with defended prediction and attack crafting,
calibration, and the train/eval/export/verify command back ends.
"""

from sapbench._core import (
    ConfigError,
    DataError,
    FormatError,
    Model,
    NumericError,
    __version__,
    calibrate,
    read_labels,
    read_tensor,
    run_attack_export,
    run_dataset_synth,
    run_eval,
    run_train,
    run_verify,
    sap_transform,
    synth_dataset,
    write_labels,
    write_tensor,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "Model",
    "NumericError",
    "__version__",
    "calibrate",
    "read_labels",
    "read_tensor",
    "run_attack_export",
    "run_dataset_synth",
    "run_eval",
    "run_train",
    "run_verify",
    "sap_transform",
    "synth_dataset",
    "write_labels",
    "write_tensor",
]
