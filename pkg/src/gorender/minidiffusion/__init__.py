from .flow import TrainConfig, TrainResult, evaluation_loss, loss, loss_and_grad, sample, sample_for, train
from .model import DiTConfig, MiniDiT, ParamStore

__all__ = ["DiTConfig", "MiniDiT", "ParamStore", "TrainConfig", "TrainResult", "evaluation_loss", "loss",
           "loss_and_grad", "sample", "sample_for", "train"]
