"""Replay-assisted federated training of a compact transformer head.

The package simulates a federation that trains a small transformer
classifier over frozen-encoder feature embeddings. Clients share a tiny
stratified slice of their features into a global replay pool; local
training mixes a replay batch into every step so clients see classes
they do not hold. Late joiners are folded in through class prototypes,
a short distillation fine-tune, and temporarily gated row aggregation.
"""

from __future__ import annotations

__version__ = "0.1.0"

from . import errors
from .config import FedConfig, load_config, save_config
from .data import (
    EmbeddingDataset,
    ReplayPool,
    gen_synthetic,
    load_fedr,
    partition_iid,
    partition_non_iid,
    save_fedr,
    stratified_split,
)
from .metrics import FULL_MODEL_PARAMS, PulseEvent, RoundReport, emit_metrics
from .simulate import (
    DatasetSpec,
    FederationData,
    SimulationResult,
    evaluate,
    load_params,
    make_federation_data,
    make_late_join_data,
    run_late_join,
    run_pulse_probe,
    run_simulation,
    save_params,
)

__all__ = [
    "errors",
    "__version__",
    "FedConfig",
    "load_config",
    "save_config",
    "EmbeddingDataset",
    "ReplayPool",
    "gen_synthetic",
    "load_fedr",
    "save_fedr",
    "stratified_split",
    "partition_iid",
    "partition_non_iid",
    "FULL_MODEL_PARAMS",
    "PulseEvent",
    "RoundReport",
    "emit_metrics",
    "DatasetSpec",
    "FederationData",
    "SimulationResult",
    "evaluate",
    "load_params",
    "save_params",
    "make_federation_data",
    "make_late_join_data",
    "run_simulation",
    "run_late_join",
    "run_pulse_probe",
]
