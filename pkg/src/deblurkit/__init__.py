"""deblurkit: joint reblurring/deblurring with learned spatially varying
degradation representations, on synthetic blur data."""

from .imaging import Image, MetricReport, psnr, ssim, sharpness, \
    contextual_similarity, count_macs, load_image, save_image
from .blursynth import (DatasetConfig, ImagePair, MotionField,
                        apply_spatially_varying_blur, make_dataset,
                        synthesize_motion_field)
from .encoder import DegradationEncoder, EncoderConfig, encode, encode_features, freeze
from .msdi import Generator, MSDINet, MSDINetConfig, deblur, reblur
from .losses import FrozenFeatureExtractor, LossWeights
from .training import TrainConfig, cosine_lr, train_stage1, train_stage2, \
    run_ablation, save_checkpoint, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Image", "MetricReport", "psnr", "ssim", "sharpness",
    "contextual_similarity", "count_macs", "load_image", "save_image",
    "DatasetConfig", "ImagePair", "MotionField",
    "apply_spatially_varying_blur", "make_dataset", "synthesize_motion_field",
    "DegradationEncoder", "EncoderConfig", "encode", "encode_features", "freeze",
    "Generator", "MSDINet", "MSDINetConfig", "deblur", "reblur",
    "FrozenFeatureExtractor", "LossWeights",
    "TrainConfig", "cosine_lr", "train_stage1", "train_stage2",
    "run_ablation", "save_checkpoint", "load_checkpoint",
]
