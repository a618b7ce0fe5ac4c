"""Pedestrian attribute recognition with a windowed-attention backbone.

The model is functional: parameters live in a flat ``dict[str, Tensor]`` and
every forward function takes that dict explicitly.
"""
from .backbone import ModelConfig, backbone_forward, init_backbone_params
from .config import RunConfig, load_config
from .data import Sample, SynthSpec, generate_synthetic, load_manifest
from .feature_processing import MaskPlan, apply_batch_random_mask, center_loss, macl_loss, sample_mask_plan
from .metrics import MetricsReport, evaluate_decisions
from .model import forward, init_params
from .recognition import LossConfig, asl_loss, predict, total_loss
from .training import TrainConfig, cosine_lr, evaluate, gradcheck, read_checkpoint, train, write_checkpoint
from .viewpoint import mvcl_loss

__version__ = "0.1.0"
