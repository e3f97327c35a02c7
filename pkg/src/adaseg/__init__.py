"""Saliency-guided occlusion augmentation (ADA) for U-Net segmentation, built on numpy."""

from .ada import AdaConfig, ada_generate, ada_training, build_mask, iou_matrix, mask_iou
from .data import Dataset, SyntheticSpec, generate_synthetic_dataset, load_manifest, write_dataset
from .estimator import ADASegmenter, UNetSegmenter
from .interpret import InterpretMethod, SaliencyTarget, compute_saliency, saliency_batch
from .metrics import MetricsReport, aggregate, build_robustness_data, evaluate
from .unet import UNet, UNetConfig, build_unet, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ADASegmenter", "AdaConfig", "Dataset", "InterpretMethod", "MetricsReport", "SaliencyTarget",
    "SyntheticSpec", "UNet", "UNetConfig", "UNetSegmenter", "ada_generate", "ada_training", "aggregate",
    "build_mask", "build_robustness_data", "build_unet", "compute_saliency", "evaluate",
    "generate_synthetic_dataset", "iou_matrix", "load_checkpoint", "load_manifest", "mask_iou",
    "saliency_batch", "save_checkpoint", "write_dataset",
]
