from .experiment import (ExperimentReport, ExperimentSpec, PointStats, evaluate_with_faults, sweep,
                         verify_expectation)
from .io import FormatError, load_dataset, load_mnist, load_model, save_model

__all__ = ["ExperimentReport", "ExperimentSpec", "PointStats", "evaluate_with_faults", "sweep",
           "verify_expectation", "FormatError", "load_dataset", "load_mnist", "load_model", "save_model"]
