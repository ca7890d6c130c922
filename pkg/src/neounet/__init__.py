"""NeoUNet: polyp segmentation with neoplasm classification."""
from .encoder import EncoderConfig, HDBConfig, HarDNetEncoder, hdb_links, hdb_out_channels
from .estimator import NeoUNetSegmenter
from .losses import LossConfig, SupervisionTarget, total_loss
from .metrics import ConfusionAccumulator, dice, iou
from .network import NeoUNet, NetworkConfig, infer_labels

__version__ = "0.1.0"

__all__ = [
    "ConfusionAccumulator",
    "EncoderConfig",
    "HDBConfig",
    "HarDNetEncoder",
    "LossConfig",
    "NeoUNet",
    "NeoUNetSegmenter",
    "NetworkConfig",
    "SupervisionTarget",
    "dice",
    "hdb_links",
    "hdb_out_channels",
    "infer_labels",
    "iou",
    "total_loss",
]
