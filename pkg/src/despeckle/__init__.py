"""Self-supervised speckle removal with a pixelwise affine masked CNN."""

from .certify import (
    certify_independence,
    gradient_field_map,
    receptive_field_map,
    variance_report,
    window_minus_center,
)
from .estimator import apply_affine, loss_add, loss_aft, loss_ft, loss_mult, loss_supervised
from .metrics import enl, psnr, read_regions, ssim
from .model import (
    AffineField,
    CheckpointError,
    DopamineModel,
    despeckle,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .noise import (
    GammaNoiseModel,
    ImageFormatError,
    apply_noise,
    augment8,
    extract_patches,
    load_image,
    sample_noise,
    save_image,
)
from .train import FinetuneConfig, TrainConfig, finetune, he_init, train_blind, train_supervised

__version__ = "0.1.0"
