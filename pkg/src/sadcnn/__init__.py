"""Structure-aware inverse halftoning with small from-scratch CNNs."""

from .config import PROFILES, TrainConfig, profile
from .dataset import ImageTriple, PatchTriple, ingest_corpus, make_batch, sample_patches
from .halftone import error_diffuse_fs, sobel_gradient, to_grayscale
from .imageio import read_image, write_image
from .kernels import BACKEND
from .metrics import psnr, ssim
from .network import (Checkpoint, NetworkSpec, StructureAwareNet, build_baseline_dcnn,
                      load_checkpoint, save_checkpoint)
from .trainer import evaluate, pretrain_irs, run_ablation, train, train_baseline, train_end_to_end

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "PROFILES", "TrainConfig", "profile", "ImageTriple", "PatchTriple",
    "ingest_corpus", "make_batch", "sample_patches", "error_diffuse_fs", "sobel_gradient",
    "to_grayscale", "read_image", "write_image", "psnr", "ssim", "Checkpoint", "NetworkSpec",
    "StructureAwareNet", "build_baseline_dcnn", "load_checkpoint", "save_checkpoint",
    "evaluate", "pretrain_irs", "run_ablation", "train", "train_baseline", "train_end_to_end",
]
