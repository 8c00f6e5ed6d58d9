"""Recurrent deep-thinking networks with test-time iteration selection."""
from .act import ActConfig, act_loss, act_run
from .halt_estimator import IterationCurve, estimate_curve, report, select_t_opt
from .network import DeepThinkNet, NetConfig, forward_iterate, total_loss
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ActConfig",
    "DeepThinkNet",
    "IterationCurve",
    "NetConfig",
    "TrainConfig",
    "act_loss",
    "act_run",
    "estimate_curve",
    "forward_iterate",
    "load_checkpoint",
    "report",
    "save_checkpoint",
    "select_t_opt",
    "total_loss",
    "train",
]
