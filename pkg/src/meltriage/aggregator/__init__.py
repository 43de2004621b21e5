from .config import AggregatorConfig
from .model import (
    Prediction,
    attention_weights,
    ensemble_predict,
    eval_loss,
    forward,
    loss_and_grad,
)
from .params import (
    ParamLayout,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AggregatorConfig",
    "ParamLayout",
    "Prediction",
    "attention_weights",
    "ensemble_predict",
    "eval_loss",
    "forward",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "save_checkpoint",
]
