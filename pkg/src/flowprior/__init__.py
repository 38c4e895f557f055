"""Normalizing-flow image prior: exact-likelihood training and MAP restoration."""

from .estimators import FlowPrior, FlowRestorer
from .metrics import psnr
from .model import FlowModel, LatentStack
from .restoration import RestorationProblem, Schedule, coarse_to_fine_optimize
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FlowPrior", "FlowRestorer", "FlowModel", "LatentStack",
    "RestorationProblem", "Schedule", "coarse_to_fine_optimize",
    "TrainConfig", "train", "psnr", "__version__",
]
