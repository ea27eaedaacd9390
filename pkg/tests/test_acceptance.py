"""Acceptance suite: one test per shipped guarantee, in order.

Each test prints a single summary line; the terminal summary hook in
conftest.py repeats one PASS/FAIL line per criterion at the end of the run.
"""

import os

import numpy as np
import pytest
import torch
from torch import nn

from conftest import TinyCNN
from oracles import naive_clahe_channel, rank_sum_auc, tally_confusion, tally_metrics
from drfuse.balance import SmoteConfig, balance_class, compute_targets, load_targets_file
from drfuse.dataset import GRADES, DatasetManifest, ImageRecord, distribution, merge, scan_corpus, split
from drfuse.enhance import TileGrid, equalize_luminance
from drfuse.models.core import TrainedModel, build_vrfusenet
from drfuse.pipeline import shipped_override_path
from drfuse.synth import generate_synthetic_corpus
from drfuse.train_eval import TrainConfig, auc, confusion, evaluate, load_split_arrays, metrics, roc_curve, train
from drfuse import xai

README = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "README.md")

# Raw per-corpus class counts (Mild, Moderate, No_DR, Proliferative_DR, Severe)
RAW = {
    "aptos2019": (370, 999, 1805, 295, 193),
    "ddr": (630, 4477, 6266, 913, 236),
    "idrid": (25, 168, 168, 62, 93),
    "messidor2": (270, 347, 1017, 35, 75),
    "retino": (30, 480, 112, 265, 505),
}

# Published per-corpus counts after balancing.
BALANCED = {
    "aptos2019": (733, 999, 1805, 733, 733),
    "ddr": (2504, 4477, 6266, 2504, 2504),
    "idrid": (103, 168, 168, 103, 103),
    "messidor2": (349, 347, 1017, 349, 349),
    "retino": (278, 480, 278, 278, 505),
}

# Corpora whose balanced counts need the shipped override files; the rest
# follow from the mean-of-five-counts policy with floor rounding.
OVERRIDE_SOURCES = ("aptos2019", "messidor2")


def _dist(counts):
    return dict(zip(GRADES, counts))


def test_criterion_01_balancing_targets_reproduce_published_counts(rng):
    cells_checked = 0
    for source, raw_counts in RAW.items():
        if source in OVERRIDE_SOURCES:
            policy = load_targets_file(shipped_override_path(source))
        else:
            policy = "mean"
        targets = compute_targets(_dist(raw_counts), policy)
        assert targets == _dist(BALANCED[source]), source
        # generation actually reaches each target on toy feature vectors
        for ci, grade in enumerate(GRADES):
            n, target = _dist(raw_counts)[grade], targets[grade]
            cells_checked += 1
            if target == n:
                continue
            X = rng.random((n, 4))
            cfg = SmoteConfig(k=min(5, n - 1), seed=[0, ci], value_range=None)
            synthetic = balance_class(X, target, cfg)
            assert n + len(synthetic) == target, (source, grade)
    assert cells_checked == 25
    print("criterion 1: 25/25 balanced class counts reproduced exactly")


def test_criterion_02_hybrid_merge_sums():
    manifests = []
    for source, counts in BALANCED.items():
        records = [
            ImageRecord(path=f"/{source}/{g}/{i}.png", label=g, source=source)
            for g, n in zip(GRADES, counts) for i in range(n)
        ]
        manifests.append(DatasetManifest(records=records, provenance=source))
    dist = distribution(merge(manifests))
    assert dist["Mild"] == 3967
    assert dist["No_DR"] == 9534
    assert dist["Proliferative_DR"] == 3967
    assert dist["Moderate"] == 6471
    assert dist["Severe"] == 4194
    print("criterion 2: hybrid counts Mild=3967 No_DR=9534 Proliferative_DR=3967 "
          "Moderate=6471 Severe=4194 (exact); note: the original summary prose "
          "swaps the Moderate and Severe totals relative to these column sums")


def test_criterion_03_clahe_matches_naive_reference(rng):
    worst = 0
    for _ in range(20):
        img = rng.integers(0, 256, (32, 32), dtype=np.uint8)
        fast = equalize_luminance(img, TileGrid(2, 2))
        ref = naive_clahe_channel(img, 2, 2)
        worst = max(worst, int(np.abs(fast.astype(int) - ref.astype(int)).max()))
    assert worst <= 1
    print(f"criterion 3: 20/20 images within 1 level of the per-pixel reference "
          f"(worst abs difference {worst})")


def test_criterion_04_smote_segment_property(rng):
    # 2-D class on the line y = 2x: every interpolated sample must stay on it.
    t = rng.random(100)
    X = np.stack([t, 2 * t], axis=1)
    out = balance_class(X, 10_100, SmoteConfig(k=5, seed=0, value_range=None))
    assert len(out) == 10_000
    residual = np.abs(out[:, 1] - 2 * out[:, 0]).max()
    assert residual < 1e-9
    assert out[:, 0].min() >= X[:, 0].min() - 1e-12
    assert out[:, 0].max() <= X[:, 0].max() + 1e-12
    print(f"criterion 4: 10000/10000 synthetic vectors on the class segment "
          f"(max residual {residual:.2e})")


def test_criterion_05_metric_oracles(rng):
    y_true = rng.integers(0, 5, 500)
    scores = rng.random((500, 5))
    scores /= scores.sum(axis=1, keepdims=True)
    y_pred = scores.argmax(axis=1)

    conf = confusion(y_true, y_pred)
    assert np.array_equal(conf, tally_confusion(y_true, y_pred, 5))

    m = metrics(conf)
    accuracy, macro, per_class = tally_metrics(y_true, y_pred, 5)
    assert abs(m["accuracy"] - accuracy) < 1e-12
    assert abs(m["precision"] - macro[0]) < 1e-12
    assert abs(m["recall"] - macro[1]) < 1e-12
    assert abs(m["f1"] - macro[2]) < 1e-12
    for c in range(5):
        assert abs(m["per_class"][c]["precision"] - per_class[c][0]) < 1e-12
        assert abs(m["per_class"][c]["recall"] - per_class[c][1]) < 1e-12

    for c in range(5):
        binary = (y_true == c).astype(int)
        got = auc(roc_curve(scores[:, c], binary))
        assert abs(got - rank_sum_auc(scores[:, c], binary)) < 1e-12
    print("criterion 5: confusion exact, macro/per-class metrics and 5 per-class "
          "AUCs within 1e-12 of brute-force oracles on 500 predictions")


class GapLinear(nn.Module):
    """Identity 1x1 conv + linear head on pooled channels: the class score is
    sum_k W[c, k] * mean(A_k), giving closed-form saliency maps."""

    def __init__(self, channels, classes, weight):
        super().__init__()
        self.body = nn.Conv2d(channels, channels, 1, bias=False)
        with torch.no_grad():
            self.body.weight.copy_(torch.eye(channels).reshape(channels, channels, 1, 1))
        self.fc = nn.Linear(channels, classes, bias=False)
        with torch.no_grad():
            self.fc.weight.copy_(torch.as_tensor(weight, dtype=torch.float32))

    @property
    def cam_layers(self):
        return {"final": self.body}

    def features(self, x):
        return self.body(x)

    def logits(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def test_criterion_06_gradient_cam_analytic_oracles(rng):
    W = np.array([
        [1.0, -1.0, 0.5],
        [0.5, 0.5, -0.25],
        [-1.0, 1.0, 0.0],
        [0.25, -0.5, 1.0],
        [0.0, 0.75, -1.0],
    ])
    model = TrainedModel(GapLinear(3, 5, W), {"kind": "gap"}, input_size=8)
    img = rng.random((8, 8, 3)).astype(np.float32)
    A = img.transpose(2, 0, 1).astype(np.float64)  # identity conv: activations = input
    Z = 64.0

    for c in range(5):
        hm = xai.grad_cam(model, img, class_idx=c)
        expected = np.maximum((W[c][:, None, None] / Z * A).sum(axis=0), 0.0)
        assert np.abs(hm.raw - expected).max() < 1e-6, c

        # constant per-channel gradients G_k = W[c,k]/Z make the higher-order
        # weights collapse to a closed form checked channel by channel
        G = np.repeat(W[c][:, None, None] / Z, 8, axis=1).repeat(8, axis=2)
        pp_raw, _ = xai.gradcampp_map(A, G)
        hm_pp = xai.grad_cam_pp(model, img, class_idx=c)
        assert np.abs(hm_pp.raw - pp_raw).max() < 1e-6, c

        lc_expected = np.maximum((np.maximum(G, 0.0) * A).sum(axis=0), 0.0)
        hm_lc = xai.layer_cam(model, img, class_idx=c)[0]
        assert np.abs(hm_lc.raw - lc_expected).max() < 1e-6, c
    print("criterion 6: Grad-CAM, Grad-CAM++ and LayerCAM match analytic maps "
          "within 1e-6 for all 5 classes on the pooled-linear model")


def test_criterion_07_cam_invariant_suite(rng):
    model = TrainedModel(TinyCNN(seed=3), {"kind": "tiny"}, input_size=128)
    img = rng.random((128, 128, 3)).astype(np.float32)

    for method in xai.METHODS:
        first = xai.compute(method, model, img, class_idx=1)
        second = xai.compute(method, model, img, class_idx=1)
        assert first.values.shape == (128, 128), method
        assert first.values.min() >= 0.0 and first.values.max() <= 1.0, method
        assert np.array_equal(first.values, second.values), method

    before = model.n_forward
    xai.score_cam(model, img, class_idx=0)
    assert model.n_forward - before == 9  # 8 channels + 1 baseline

    # zero-variance channels are never selected and weights normalize to 1
    acts = np.stack([np.full((4, 4), 7.0),
                     rng.random((4, 4)),
                     rng.random((4, 4)) * 3])
    selected, weights = xai.variance_weights(acts, 2)
    assert 0 not in selected
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)
    print("criterion 7: shape/range/determinism invariants hold for all 5 methods; "
          "masked-forward budget = channels + 1; variance weighting excludes "
          "constant channels and normalizes to 1")


def test_criterion_08_deletion_faithfulness(tmp_path):
    root = str(tmp_path / "corpus")
    generate_synthetic_corpus(root, {g: 60 for g in GRADES}, seed=11, size=32)
    manifest = split(scan_corpus(root, "synthetic", validate=False),
                     (0.7, 0.15, 0.15), seed=11)
    X_train, y_train = load_split_arrays(manifest, "train", 32)
    X_val, y_val = load_split_arrays(manifest, "val", 32)
    model = TrainedModel(TinyCNN(channels=16, seed=11), {"kind": "tiny"}, input_size=32)
    cfg = TrainConfig(batch_size=32, learning_rate=5e-3, epochs=20, seed=11)
    model, history = train(model, (X_train, y_train, X_val, y_val), cfg)
    assert max(history.val_accuracy) >= 0.9

    rng = np.random.default_rng(11)
    cases = rng.choice(len(X_train), 50, replace=False)
    wins = 0
    for i in cases:
        img = X_train[i]
        c = int(model.predict(img[None])[0].argmax())
        hm = xai.grad_cam(model, img, class_idx=c)
        if xai.deletion_score_drop(model, img, hm, c, fraction=0.2) > 0:
            wins += 1
    assert wins >= 40
    print(f"criterion 8: masking the top-20% saliency region lowered the class "
          f"score in {wins}/50 cases (threshold 40)")


def test_criterion_09_desk_scale_training(tmp_path):
    root = str(tmp_path / "corpus")
    generate_synthetic_corpus(root, {g: 200 for g in GRADES}, seed=7, size=32)
    manifest = split(scan_corpus(root, "synthetic", validate=False), seed=7)
    X_train, y_train = load_split_arrays(manifest, "train", 32)
    X_val, y_val = load_split_arrays(manifest, "val", 32)
    model = build_vrfusenet(input_size=32, seed=7)
    cfg = TrainConfig(batch_size=32, learning_rate=1e-3, epochs=10, seed=7)
    model, history = train(model, (X_train, y_train, X_val, y_val), cfg)
    best_val = max(history.val_accuracy)
    assert best_val >= 0.95

    X_test, y_test = load_split_arrays(manifest, "test", 32)
    report = evaluate(model, X_test, y_test)
    assert report.auc >= 0.98
    print(f"criterion 9: dual-backbone fusion model reached val accuracy "
          f"{best_val:.3f} (>= 0.95) within 10 epochs and test macro AUC "
          f"{report.auc:.3f} (>= 0.98) at 32x32")


def test_criterion_10_full_scale_recipe_documented():
    assert os.path.isfile(README)
    text = open(README).read()
    assert "Full-scale" in text or "full-scale" in text
    # the documented recipe pins the full-scale hyperparameters
    for token in ("128", "60", "1e-5", "91.824", "98.749"):
        assert token in text, token
    # and is explicit that those headline numbers are documentation, not a test
    assert "not reproduc" in text.lower()
    print("criterion 10: full-scale recipe and headline targets are documented "
          "in README.md (documentation-only, by design)")
