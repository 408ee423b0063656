from .config import ExperimentConfig, load_config
from .experiment import (
    CSV_COLUMNS,
    build_layers,
    emit_ecdf,
    load_layers,
    run_experiment,
    run_sweep,
)
from .weights import WeightFile, generate_tokens, generate_weights, load_weights, save_weights

__all__ = [
    "CSV_COLUMNS", "ExperimentConfig", "WeightFile", "build_layers", "emit_ecdf",
    "generate_tokens", "generate_weights", "load_config", "load_layers", "load_weights",
    "run_experiment", "run_sweep", "save_weights",
]
