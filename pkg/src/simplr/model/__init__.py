"""Miniature plain detector."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig
from .detector import (
    Proposal,
    ProposalSet,
    backbone_forward,
    decoder_forward,
    encoder_forward,
    forward,
    init_params,
    panoptic_merge,
    panoptic_pixel_head,
    predict_masks,
    project_features,
    propose_objects,
    sine_position,
    top_k,
)
from .outputs import DetectionOutput, LayerPrediction, PanopticOutput

__all__ = [
    "CheckpointError", "ConfigError", "DetectionOutput", "LayerPrediction", "ModelConfig", "PanopticOutput",
    "Proposal", "ProposalSet", "backbone_forward", "decoder_forward", "encoder_forward", "forward",
    "init_params", "load_checkpoint", "panoptic_merge", "panoptic_pixel_head", "predict_masks",
    "project_features", "propose_objects", "save_checkpoint", "sine_position", "top_k",
]
