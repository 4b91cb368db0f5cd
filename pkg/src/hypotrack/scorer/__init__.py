from .network import NonFiniteError, Predictions, ScorerModel
from .objective import Targets, loss, loss_and_gradients, score, score_from_predictions
from .optim import OptimizerState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "NonFiniteError", "Predictions", "ScorerModel", "Targets", "loss", "loss_and_gradients", "score",
    "score_from_predictions", "OptimizerState", "adam_step", "load_checkpoint", "save_checkpoint",
]
