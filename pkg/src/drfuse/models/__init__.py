from drfuse.models.backbones import BACKBONE_CHANNELS, build_backbone
from drfuse.models.core import (
    BackboneSpec,
    FusionModelSpec,
    ModelError,
    TrainedModel,
    TransferHeadSpec,
    build_transfer_model,
    build_vrfusenet,
    cross_covariance,
    extract_features,
    fuse,
    load_model,
)

__all__ = [
    "BACKBONE_CHANNELS",
    "BackboneSpec",
    "FusionModelSpec",
    "ModelError",
    "TrainedModel",
    "TransferHeadSpec",
    "build_backbone",
    "build_transfer_model",
    "build_vrfusenet",
    "cross_covariance",
    "extract_features",
    "fuse",
    "load_model",
]
