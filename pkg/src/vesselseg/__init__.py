"""vesselseg: coronary-vessel segmentation at desk scale.

From-scratch tensor/autograd core, U-Net / U-Net++ / U-Net 3+ builders with
deep supervision, hybrid BCE+Dice+L2 loss, RMSProp training, Otsu
binarization, and DSC/SN/SP/HD/ASD evaluation on synthetic angiograms.
"""

from .arch import ArchConfig, ForwardOutput, Network, build_network, forward
from .loss import LossBreakdown, LossConfig, hybrid_loss
from .metrics import BinaryMask, MetricsReport
from .postproc import binarize, otsu_threshold
from .train import TrainConfig, evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BinaryMask",
    "ForwardOutput",
    "LossBreakdown",
    "LossConfig",
    "MetricsReport",
    "Network",
    "TrainConfig",
    "binarize",
    "build_network",
    "evaluate",
    "forward",
    "hybrid_loss",
    "otsu_threshold",
    "run_ablation",
    "train",
    "__version__",
]
