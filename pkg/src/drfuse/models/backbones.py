"""Convolutional feature extractors.

All five backbones reduce spatial resolution by a factor of 32, so a
128x128 input yields 4x4 feature maps. VGG and MobileNetV2 come from
torchvision; the pre-activation ResNet50V2 and Xception variants are defined
here since torchvision only ships the v1 ResNet and no Xception.
"""

from __future__ import annotations

import torch
from torch import nn
from torchvision import models as tv_models

BACKBONE_CHANNELS = {
    "vgg16": 512,
    "vgg19": 512,
    "resnet50v2": 2048,
    "mobilenetv2": 1280,
    "xception": 2048,
}


class ModelError(ValueError):
    pass


class PreActBottleneck(nn.Module):
    """ResNet v2 bottleneck: BN-ReLU precede every convolution."""

    def __init__(self, c_in, c_mid, c_out, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, c_mid, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_mid)
        self.conv2 = nn.Conv2d(c_mid, c_mid, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(c_mid)
        self.conv3 = nn.Conv2d(c_mid, c_out, 1, bias=False)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)
        else:
            self.shortcut = None

    def forward(self, x):
        pre = torch.relu(self.bn1(x))
        shortcut = x if self.shortcut is None else self.shortcut(pre)
        out = self.conv1(pre)
        out = self.conv2(torch.relu(self.bn2(out)))
        out = self.conv3(torch.relu(self.bn3(out)))
        return out + shortcut


class ResNet50V2Features(nn.Module):
    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        c_in = 64
        for c_mid, c_out, blocks, stride in (
            (64, 256, 3, 1),
            (128, 512, 4, 2),
            (256, 1024, 6, 2),
            (512, 2048, 3, 2),
        ):
            layers = [PreActBottleneck(c_in, c_mid, c_out, stride=stride)]
            layers += [PreActBottleneck(c_out, c_mid, c_out) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.post = nn.Sequential(nn.BatchNorm2d(2048), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.post(self.stages(self.stem(x)))


class SeparableConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.depthwise = nn.Conv2d(c_in, c_in, 3, padding=1, groups=c_in, bias=False)
        self.pointwise = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(self.pointwise(self.depthwise(x)))


class XceptionBlock(nn.Module):
    def __init__(self, c_in, c_out, reps, stride=1, start_with_relu=True):
        super().__init__()
        layers = []
        c = c_in
        for i in range(reps):
            if start_with_relu or i > 0:
                layers.append(nn.ReLU(inplace=False))
            layers.append(SeparableConv(c, c_out))
            c = c_out
        if stride != 1:
            layers.append(nn.MaxPool2d(3, stride=stride, padding=1))
        self.body = nn.Sequential(*layers)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )
        else:
            self.skip = None

    def forward(self, x):
        out = self.body(x)
        return out + (x if self.skip is None else self.skip(x))


class XceptionFeatures(nn.Module):
    def __init__(self):
        super().__init__()
        self.entry = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            XceptionBlock(64, 128, 2, stride=2, start_with_relu=False),
            XceptionBlock(128, 256, 2, stride=2),
            XceptionBlock(256, 728, 2, stride=2),
        )
        self.middle = nn.Sequential(*[XceptionBlock(728, 728, 3) for _ in range(8)])
        self.exit = nn.Sequential(
            XceptionBlock(728, 1024, 2, stride=2),
            SeparableConv(1024, 1536),
            nn.ReLU(inplace=True),
            SeparableConv(1536, 2048),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.exit(self.middle(self.entry(x)))


def build_backbone(name, pretrained=False):
    """Feature extractor module for one of the five supported backbones."""
    if name not in BACKBONE_CHANNELS:
        raise ModelError(f"unknown backbone {name!r}; choose from {sorted(BACKBONE_CHANNELS)}")
    if name in ("vgg16", "vgg19", "mobilenetv2"):
        factory = {
            "vgg16": tv_models.vgg16,
            "vgg19": tv_models.vgg19,
            "mobilenetv2": tv_models.mobilenet_v2,
        }[name]
        weights = "IMAGENET1K_V1" if pretrained else None
        try:
            return factory(weights=weights).features
        except Exception as exc:  # weight download unavailable offline
            if pretrained:
                raise RuntimeError(
                    f"could not load pretrained weights for {name}; "
                    "pass pretrained=False to use random initialization"
                ) from exc
            raise
    if pretrained:
        raise ModelError(f"no pretrained weights are bundled for {name}; use pretrained=False")
    if name == "resnet50v2":
        return ResNet50V2Features()
    return XceptionFeatures()
