"""Transfer classifiers and the dual-backbone fusion network.

Feature fusion shifts each backbone's map by its own scalar mean and
concatenates along the channel axis (512 + 2048 = 2560), then refines the
fused map with a conv / batch-norm / max-pool stack before the dense head.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml
from torch import nn

from drfuse.dataset import GRADES
from drfuse.models.backbones import BACKBONE_CHANNELS, ModelError, build_backbone

N_CLASSES = 5


@dataclass
class BackboneSpec:
    name: str = "vgg19"
    pretrained: bool = False
    trainable: bool = True

    def __post_init__(self):
        if self.name not in BACKBONE_CHANNELS:
            raise ModelError(f"unknown backbone {self.name!r}")

    @property
    def channels(self):
        return BACKBONE_CHANNELS[self.name]


@dataclass
class TransferHeadSpec:
    dense_widths: tuple = (1024, 512)
    dropout_rates: tuple = (0.5, 0.5)
    classes: int = N_CLASSES


@dataclass
class FusionModelSpec:
    backbone_a: BackboneSpec = field(default_factory=lambda: BackboneSpec("vgg19"))
    backbone_b: BackboneSpec = field(default_factory=lambda: BackboneSpec("resnet50v2"))
    refine_channels: int = 512
    head_widths: tuple = (256, 64)
    dropout_rates: tuple = (0.5, 0.5)
    classes: int = N_CLASSES

    @property
    def fused_channels(self):
        return self.backbone_a.channels + self.backbone_b.channels


def _dense_head(in_features, widths, dropout_rates, classes):
    layers = []
    width_in = in_features
    for width, rate in zip(widths, dropout_rates):
        layers += [nn.Linear(width_in, width), nn.ReLU(inplace=True), nn.Dropout(rate)]
        width_in = width
    layers.append(nn.Linear(width_in, classes))
    return nn.Sequential(*layers)


class TransferNet(nn.Module):
    """Single backbone with flatten + dense(1024, 512) + softmax-5 head."""

    def __init__(self, backbone_spec, head_spec, input_size=128):
        super().__init__()
        self.backbone = build_backbone(backbone_spec.name, backbone_spec.pretrained)
        if not backbone_spec.trainable:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
        spatial = input_size // 32
        if spatial < 1:
            raise ModelError(f"input size {input_size} too small for the backbone")
        feat_dim = backbone_spec.channels * spatial * spatial
        self.head = _dense_head(feat_dim, head_spec.dense_widths,
                                head_spec.dropout_rates, head_spec.classes)

    @property
    def cam_layers(self):
        return {"final": self.backbone}

    def features(self, x):
        return self.backbone(x)

    def logits(self, x):
        return self.head(torch.flatten(self.features(x), 1))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class FuseShift(nn.Module):
    """Mean-shift both feature maps, then concatenate along channels."""

    def forward(self, map_a, map_b):
        if map_a.shape[0] != map_b.shape[0] or map_a.shape[2:] != map_b.shape[2:]:
            raise ModelError(
                f"fuse needs matching batch/spatial dims, got {tuple(map_a.shape)} "
                f"and {tuple(map_b.shape)}"
            )
        return torch.cat([map_a + map_a.mean(), map_b + map_b.mean()], dim=1)


class VRFuseNet(nn.Module):
    """Dual-backbone fusion classifier.

    Graph: two backbones -> mean-shift concat -> conv/BN/ReLU/max-pool
    refinement -> flatten -> dense 256 -> dropout -> dense 64 -> dropout ->
    softmax 5.
    """

    def __init__(self, spec, input_size=128):
        super().__init__()
        self.backbone_a = build_backbone(spec.backbone_a.name, spec.backbone_a.pretrained)
        self.backbone_b = build_backbone(spec.backbone_b.name, spec.backbone_b.pretrained)
        self.fuse = FuseShift()
        spatial = input_size // 32
        if spatial < 1:
            raise ModelError(f"input size {input_size} too small for the backbones")
        refine = [
            nn.Conv2d(spec.fused_channels, spec.refine_channels, 3, padding=1),
            nn.BatchNorm2d(spec.refine_channels),
            nn.ReLU(inplace=True),
        ]
        # Pooling needs at least 2x2 spatial extent; tiny desk-scale inputs skip it.
        if spatial >= 2:
            refine.append(nn.MaxPool2d(2))
            spatial //= 2
        self.refine = nn.Sequential(*refine)
        self.head = _dense_head(spec.refine_channels * spatial * spatial,
                                spec.head_widths, spec.dropout_rates, spec.classes)

    @property
    def cam_layers(self):
        return {"final": self.refine, "backbone_a": self.backbone_a,
                "backbone_b": self.backbone_b}

    def features(self, x):
        return self.refine(self.fuse(self.backbone_a(x), self.backbone_b(x)))

    def logits(self, x):
        return self.head(torch.flatten(self.features(x), 1))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def fuse(map_a, map_b):
    """Numpy-facing fusion of two NHWC feature maps."""
    a = torch.as_tensor(np.transpose(np.asarray(map_a, dtype=np.float32), (0, 3, 1, 2)))
    b = torch.as_tensor(np.transpose(np.asarray(map_b, dtype=np.float32), (0, 3, 1, 2)))
    fused = FuseShift()(a, b)
    return np.transpose(fused.numpy(), (0, 2, 3, 1))


def cross_covariance(m1, m2):
    """Cross-covariance of two pooled feature matrices (diagnostic only).

    Columns are centered, then F = m1^T m2 / (n - 1).
    """
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.ndim != 2 or m2.ndim != 2 or m1.shape[0] != m2.shape[0]:
        raise ModelError("inputs must be 2-D with equal row counts")
    n = m1.shape[0]
    if n < 2:
        raise ModelError("cross-covariance needs at least 2 rows")
    c1 = m1 - m1.mean(axis=0)
    c2 = m2 - m2.mean(axis=0)
    return c1.T @ c2 / (n - 1)


class TrainedModel:
    """Inference wrapper pairing a network with its label order and input contract.

    ``n_forward`` counts samples pushed through predict(); the Score-CAM cost
    contract is asserted against it.
    """

    def __init__(self, module, spec, input_size=128, label_order=GRADES, seed=0):
        self.module = module
        self.spec = spec
        self.input_size = input_size
        self.label_order = tuple(label_order)
        self.seed = seed
        self.n_forward = 0

    @property
    def cam_layers(self):
        return self.module.cam_layers

    def _to_torch(self, batch):
        x = np.asarray(batch, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[3] != 3:
            raise ModelError(f"expected an NHWC batch with 3 channels, got {x.shape}")
        return torch.as_tensor(np.transpose(x, (0, 3, 1, 2)))

    def predict(self, batch):
        """Class probabilities, one row per sample, rows summing to 1."""
        x = self._to_torch(batch)
        self.n_forward += len(x)
        self.module.eval()
        with torch.no_grad():
            return self.module(x).numpy()

    def predict_logits(self, batch):
        x = self._to_torch(batch)
        self.n_forward += len(x)
        self.module.eval()
        with torch.no_grad():
            return self.module.logits(x).numpy()

    def extract_features(self, batch, layer="final"):
        """Activations of a named convolutional stage, NHWC."""
        if layer not in self.cam_layers:
            raise ModelError(f"unknown layer {layer!r}; have {sorted(self.cam_layers)}")
        x = self._to_torch(batch)
        store = {}
        handle = self.cam_layers[layer].register_forward_hook(
            lambda m, i, o: store.update(a=o)
        )
        self.module.eval()
        try:
            with torch.no_grad():
                self.module.logits(x)
        finally:
            handle.remove()
        return np.transpose(store["a"].numpy(), (0, 2, 3, 1))

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        torch.save(self.module.state_dict(), os.path.join(directory, "weights.pt"))
        with open(os.path.join(directory, "spec.txt"), "w") as fh:
            yaml.safe_dump(
                {
                    "spec": self.spec,
                    "input_size": self.input_size,
                    "label_order": list(self.label_order),
                    "seed": self.seed,
                },
                fh,
                sort_keys=True,
            )


def build_transfer_model(backbone, head=None, input_size=128, seed=0):
    """Untrained single-backbone classifier wrapped as a TrainedModel."""
    head = head or TransferHeadSpec()
    torch.manual_seed(seed)
    module = TransferNet(backbone, head, input_size=input_size)
    spec = {
        "kind": "transfer",
        "backbone": backbone.name,
        "dense_widths": list(head.dense_widths),
        "dropout_rates": list(head.dropout_rates),
        "classes": head.classes,
    }
    return TrainedModel(module, spec, input_size=input_size, seed=seed)


def build_vrfusenet(spec=None, input_size=128, seed=0):
    """Untrained fusion classifier wrapped as a TrainedModel."""
    spec = spec or FusionModelSpec()
    torch.manual_seed(seed)
    module = VRFuseNet(spec, input_size=input_size)
    model_spec = {
        "kind": "vrfusenet",
        "backbone_a": spec.backbone_a.name,
        "backbone_b": spec.backbone_b.name,
        "refine_channels": spec.refine_channels,
        "head_widths": list(spec.head_widths),
        "dropout_rates": list(spec.dropout_rates),
        "classes": spec.classes,
    }
    return TrainedModel(module, model_spec, input_size=input_size, seed=seed)


def extract_features(model, batch, layer="final"):
    return model.extract_features(batch, layer=layer)


def build_from_spec(spec, input_size=128, seed=0):
    if spec["kind"] == "transfer":
        return build_transfer_model(
            BackboneSpec(spec["backbone"]),
            TransferHeadSpec(tuple(spec["dense_widths"]), tuple(spec["dropout_rates"]),
                             spec["classes"]),
            input_size=input_size,
            seed=seed,
        )
    if spec["kind"] == "vrfusenet":
        return build_vrfusenet(
            FusionModelSpec(
                backbone_a=BackboneSpec(spec["backbone_a"]),
                backbone_b=BackboneSpec(spec["backbone_b"]),
                refine_channels=spec["refine_channels"],
                head_widths=tuple(spec["head_widths"]),
                dropout_rates=tuple(spec["dropout_rates"]),
                classes=spec["classes"],
            ),
            input_size=input_size,
            seed=seed,
        )
    raise ModelError(f"unknown model kind {spec['kind']!r}")


def load_model(directory):
    with open(os.path.join(directory, "spec.txt")) as fh:
        meta = yaml.safe_load(fh)
    model = build_from_spec(meta["spec"], input_size=meta["input_size"], seed=meta["seed"])
    state = torch.load(os.path.join(directory, "weights.pt"), weights_only=True)
    model.module.load_state_dict(state)
    model.label_order = tuple(meta["label_order"])
    return model
