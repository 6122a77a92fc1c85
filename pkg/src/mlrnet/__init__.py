"""Feed-forward networks with a closed-form ridge output layer, trained with
a loss that penalises fitting randomly permuted labels."""
from .core import MlrConfig, TrainedModel, init_weights, mlr_loss, bce_mlr_loss
from .training import train
from .ensemble import EnsembleSpec, train_ensemble, ensemble_predict

__version__ = "0.1.0"

__all__ = [
    "MlrConfig", "TrainedModel", "init_weights", "mlr_loss", "bce_mlr_loss",
    "train", "EnsembleSpec", "train_ensemble", "ensemble_predict",
]
