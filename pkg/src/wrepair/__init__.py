"""wrepair: repair targeted group errors of a neural classifier.

Five repair strategies share one knob rho in [0,1] trading overall quality
against a user-selected group error (a confused class pair or a biased class
triplet): sampling reweighting (w-aug), batch-norm statistics blending
(w-bn), loss reweighting over confused samples (w-loss), representation
centroid regularization (w-dbr), and output score smoothing (w-os); plus an
unmodified fine-tuning baseline (orig-ft).
"""

__version__ = "1.0.0"

from .data import LabeledDataset, TargetSpec
from .layers import Model, TrainConfig, load_model, mlp, save_model
from .metrics import PredictionSet, predict, target_error, overall_quality
from .repair import ALL_METHODS, RepairConfig, postprocess_wos, run_repair
from .harness import SelectionPolicy, grid_search, run_repair_experiment

__all__ = [
    "__version__", "LabeledDataset", "TargetSpec", "Model", "TrainConfig",
    "load_model", "mlp", "save_model", "PredictionSet", "predict",
    "target_error", "overall_quality", "ALL_METHODS", "RepairConfig",
    "postprocess_wos", "run_repair", "SelectionPolicy", "grid_search",
    "run_repair_experiment",
]
