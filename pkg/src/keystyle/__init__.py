"""Keyframe-driven video stylization with score-distillation structure guidance."""

from .core import (ConfigError, ContractError, FrameDataset, ImagePlane, LossWeights, TrainConfig,
                   load_dataset, make_dataset, read_image, validate_dataset, write_image)
from .distillation import build_schedule, loss_csds, loss_lineart, mix_noise
from .operator import apply_operator, init_operator, load_checkpoint, save_checkpoint
from .perceptual import gram, loss_key, loss_vgg
from .trainer import select_checkpoint, total_loss, train, train_step

__version__ = "0.1.0"
