"""Federated semantic communication over simulated MIMO links.

Devices encode overlapping views of a scene with a hierarchical vision
transformer, ship compressed semantics through a 2x2 block-fading
channel with SVD precoding and learned CSI refinement, and a server
federates the weights and fuses per-device task outputs.
"""

__version__ = "0.1.0"

from .autodiff import Tensor
from .channel_codec import (BandwidthSpec, ChannelDecoder, ChannelEncoder,
                            bandwidth_to_length)
from .config import ExperimentConfig, load_config
from .csi import CsiRefiner, CsiSampleSet, evaluate_refiner, pretrain_refiner
from .data import Scene, Shard, make_scenes, overlap_stride, partition
from .federation import (FederatedResult, KdLossConfig, RoundRecord,
                         SemanticLink, aggregate_results_classification,
                         aggregate_results_reconstruction, build_link,
                         fedavg_aggregate, kd_loss, recon_loss,
                         run_federated_training, stitch_panorama,
                         train_teacher)
from .hvt import HvtConfig, HvtEncoder, hvt_preset
from .metrics import accuracy, mse, psnr, ssim
from .seeding import Purpose, substream

__all__ = [
    "Tensor", "BandwidthSpec", "ChannelDecoder", "ChannelEncoder",
    "bandwidth_to_length", "ExperimentConfig", "load_config", "CsiRefiner",
    "CsiSampleSet", "evaluate_refiner", "pretrain_refiner", "Scene", "Shard",
    "make_scenes", "overlap_stride", "partition", "FederatedResult",
    "KdLossConfig", "RoundRecord", "SemanticLink",
    "aggregate_results_classification", "aggregate_results_reconstruction",
    "build_link", "fedavg_aggregate", "kd_loss", "recon_loss",
    "run_federated_training", "stitch_panorama", "train_teacher", "HvtConfig",
    "HvtEncoder", "hvt_preset", "accuracy", "mse", "psnr", "ssim", "Purpose",
    "substream", "__version__",
]
