import os
import sys

import numpy as np
import pytest
import torch
from torch import nn

sys.path.insert(0, os.path.dirname(__file__))

from drfuse.models.core import TrainedModel


class TinyCNN(nn.Module):
    """Small conv net used where the full backbones would be overkill."""

    def __init__(self, channels=8, classes=5, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(channels, classes)

    @property
    def cam_layers(self):
        return {"final": self.conv}

    def features(self, x):
        return self.conv(x)

    def logits(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


@pytest.fixture
def tiny_model():
    return TrainedModel(TinyCNN(seed=0), {"kind": "tiny"}, input_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion" in nodeid:
                name = nodeid.split("::")[-1]
                lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {name}")


def make_corpus(root, counts, seed=0, size=24):
    """Directory-per-grade tree of small random PNGs; returns the root."""
    import cv2

    from drfuse.dataset import GRADES

    rng = np.random.default_rng(seed)
    for grade, n in zip(GRADES, counts):
        d = os.path.join(root, grade)
        os.makedirs(d, exist_ok=True)
        for i in range(n):
            img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            cv2.imwrite(os.path.join(d, f"{grade}_{i:04d}.png"), img)
    return root
