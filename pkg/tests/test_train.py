import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_spec
from weakseg.core import BACKGROUND, FOREGROUND, UNCERTAIN
from weakseg.smanet import load_checkpoint
from weakseg.train import (
    TrainConfig,
    TrainingDiverged,
    fit,
    masked_loss,
    parse_stages,
    resize_min_side,
    sample_training_crop,
    train_segmentation,
)


class TestMaskedLoss:
    def test_uniform_scores(self):
        label = torch.tensor([[0, 1], [1, 0]])
        assert abs(masked_loss(torch.zeros(1, 2, 2, 2), label).item() - math.log(2)) < 1e-6

    def test_hand_example(self):
        scores = torch.zeros(1, 2, 1, 2)
        scores[0, 1, 0, 0] = math.log(0.9 / 0.1)  # p(fg) = 0.9 at the first pixel
        scores[0, :, 0, 1] = torch.tensor([37.0, -5.0])  # irrelevant: uncertain
        label = np.array([[FOREGROUND, UNCERTAIN]], dtype=np.uint8)
        assert masked_loss(scores, label).item() == pytest.approx(-math.log(0.9), abs=1e-6)
        assert masked_loss(scores, label).item() == pytest.approx(0.1054, abs=1e-4)

    def test_all_uncertain(self):
        scores = torch.randn(1, 2, 3, 3, requires_grad=True)
        loss = masked_loss(scores, torch.full((3, 3), UNCERTAIN))
        loss.backward()
        assert loss.item() == 0.0 and torch.count_nonzero(scores.grad) == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_zero_gradient_at_uncertain(self, seed):
        g = torch.Generator().manual_seed(seed)
        scores = torch.randn(2, 2, 5, 4, generator=g, requires_grad=True)
        label = torch.tensor([0, 1, 255])[torch.randint(0, 3, (2, 5, 4), generator=g)]
        masked_loss(scores, label).backward()
        assert torch.all(scores.grad.permute(0, 2, 3, 1)[label == UNCERTAIN] == 0)

    def test_equals_plain_cross_entropy_without_uncertain(self):
        scores = torch.randn(2, 2, 6, 6)
        label = torch.randint(0, 2, (2, 6, 6))
        assert torch.allclose(masked_loss(scores, label), F.cross_entropy(scores, label))

    def test_rejects_unknown_codes(self):
        with pytest.raises(ValueError, match="outside"):
            masked_loss(torch.zeros(1, 2, 1, 2), torch.tensor([[0, 7]]))


class TestCrop:
    def test_shape(self, rng):
        image = rng.integers(0, 255, (300, 400, 3), dtype=np.uint8)
        label = rng.integers(0, 2, (300, 400)).astype(np.uint8)
        img, lab = sample_training_crop(image, label, 281, [1.0], rng)
        assert img.shape == (281, 281, 3) and lab.shape == (281, 281)

    def test_padding_is_uncertain(self, rng):
        image = np.full((100, 100, 3), 9, np.uint8)
        label = np.ones((100, 100), np.uint8)
        img, lab = sample_training_crop(image, label, 281, [1.0], rng)
        assert img.shape == (281, 281, 3)
        assert (lab == FOREGROUND).sum() == 100 * 100
        assert (lab == UNCERTAIN).sum() == 281 * 281 - 100 * 100
        # padded pixels carry no loss
        scores = torch.randn(1, 2, 281, 281, requires_grad=True)
        masked_loss(scores, lab).backward()
        assert torch.all(scores.grad[0, :, 100:, :] == 0)

    def test_same_seed_same_crop(self):
        image = np.random.default_rng(0).integers(0, 255, (90, 120, 3), dtype=np.uint8)
        label = (image[..., 0] > 128).astype(np.uint8)
        a = sample_training_crop(image, label, 48, (0.75, 1.0, 1.25), np.random.default_rng(3))
        b = sample_training_crop(image, label, 48, (0.75, 1.0, 1.25), np.random.default_rng(3))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from([0.5, 0.75, 1.0, 1.25, 1.7]))
    def test_labels_stay_in_codes(self, seed, scale):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(10, 60, 2)
        label = rng.choice(np.array([BACKGROUND, FOREGROUND, UNCERTAIN], np.uint8), (h, w))
        image = rng.integers(0, 255, (h, w, 3), dtype=np.uint8)
        _, lab = sample_training_crop(image, label, 32, [scale], rng)
        assert set(np.unique(lab)) <= {0, 1, 255}

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            sample_training_crop(np.zeros((5, 5, 3), np.uint8), np.zeros((4, 5), np.uint8), 3, [1], rng)

    def test_resize_min_side(self):
        img, lab = resize_min_side(np.zeros((20, 50, 3), np.uint8), np.zeros((20, 50), np.uint8), 40)
        assert lab.shape == (40, 100) and img.shape == (40, 100, 3)


def test_parse_stages():
    assert parse_stages("synth:200k,coco_ts:100k") == [("synth", 200000), ("coco_ts", 100000)]
    assert parse_stages("a:12, b:1.5k") == [("a", 12), ("b", 1500)]
    with pytest.raises(ValueError):
        parse_stages("oops")
    with pytest.raises(ValueError):
        parse_stages("a:many")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(crop_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(scales=())
    assert TrainConfig.bgfg().crop_size == 185 and TrainConfig().crop_size == 281


def _toy_pairs(n=3, size=56, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        label = np.zeros((size, size), np.uint8)
        x, y = rng.integers(4, size - 16, 2)
        label[y:y + 10, x:x + 12] = 1
        image = np.where(label[..., None] == 1, 230, 30).astype(np.uint8).repeat(3, axis=2)
        image = np.clip(image + rng.integers(-20, 20, image.shape), 0, 255).astype(np.uint8)
        pairs.append((image, label))
    return pairs


CFG = dict(crop_size=48, learning_rate=3e-3, scales=(1.0,), batch_size=2, log_every=0)


def test_empty_stage_list():
    with pytest.raises(ValueError, match="stage"):
        train_segmentation(TrainConfig(**CFG), [], tiny_spec())


def test_stages_run_in_order_and_save(tmp_path):
    pairs = _toy_pairs()
    ckpt = train_segmentation(TrainConfig(**CFG), [("a", pairs, 3), ("b", pairs, 2)],
                              tiny_spec(), out_dir=tmp_path)
    assert ckpt.step == 5
    assert [s["stage"] for s in ckpt.metrics["stages"]] == ["a", "b"]
    for name in ("stage1_a.pt", "stage2_b.pt", "final.pt", "loss.jsonl"):
        assert (tmp_path / name).exists()
    assert load_checkpoint(tmp_path / "stage1_a.pt").step == 3
    assert len((tmp_path / "loss.jsonl").read_text().splitlines()) == 5


def test_fixed_seed_reproduces_checkpoint():
    pairs = _toy_pairs()
    cfg = TrainConfig(**CFG, seed=11)
    a = train_segmentation(cfg, [("a", pairs, 50)], tiny_spec())
    b = train_segmentation(cfg, [("a", pairs, 50)], tiny_spec())
    assert a.state_dict.keys() == b.state_dict.keys()
    assert all(torch.equal(a.state_dict[k], b.state_dict[k]) for k in a.state_dict)


def test_loss_trend_decreases():
    torch.manual_seed(0)
    from weakseg.smanet import build_network
    model = build_network(tiny_spec())
    trace = fit(model, _toy_pairs(4), TrainConfig(**CFG), 100, np.random.default_rng(0))
    smooth = np.convolve(trace, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < 0.6 * smooth[0]


def test_divergence_aborts():
    class Exploding(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.tensor(1.0))

        def forward(self, x):
            return torch.full((x.shape[0], 2) + x.shape[-2:], float("nan")) * self.w

    with pytest.raises(TrainingDiverged, match="step 0"):
        fit(Exploding(), _toy_pairs(1), TrainConfig(**CFG), 3, np.random.default_rng(0))
