from crossflow.flowmatch.model import FlowConfig, FlowModel, from_model_space, to_model_space
from crossflow.flowmatch.sample import Translator, euler_integrate, translate, translate_batch
from crossflow.flowmatch.train import (
    PretrainConfig,
    TrainHyper,
    fm_loss,
    heldout_loss,
    interpolate,
    pretrain_base,
    train_lora,
)

__all__ = [
    "FlowConfig",
    "FlowModel",
    "PretrainConfig",
    "TrainHyper",
    "Translator",
    "euler_integrate",
    "fm_loss",
    "from_model_space",
    "heldout_loss",
    "interpolate",
    "pretrain_base",
    "to_model_space",
    "train_lora",
    "translate",
    "translate_batch",
]
