from __future__ import annotations

import numpy as np
import pytest
import torch

from seg import (
    SegConfig,
    SegError,
    build_segmenter,
    dice_bce_loss,
    evaluate_cases,
    organ_filter,
    predict,
    sliding_window_logits,
    train_segmenter,
    window_starts,
)
from tests._helpers import ball, mask_of, small_case, tiny_seg_config
from volcore import Volume


@pytest.mark.parametrize(
    "n, p, s, expected",
    [(10, 4, 3, [0, 3, 6]), (11, 4, 3, [0, 3, 6, 7]), (4, 4, 1, [0]), (9, 4, 4, [0, 4, 5])],
)
def test_window_starts_cover_the_axis(n, p, s, expected):
    assert window_starts(n, p, s) == expected


def test_stride_from_overlap():
    assert SegConfig(patch_size=(32, 32, 32), sliding_overlap=0.75).stride == (8, 8, 8)
    assert SegConfig(patch_size=(8, 8, 8), sliding_overlap=0.0).stride == (8, 8, 8)


def test_sliding_window_identity_net_returns_input():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(13, 9, 20)).astype(np.float32)
    out = sliding_window_logits(lambda t: t, data, (8, 8, 8), 0.5)
    assert out.shape == data.shape
    assert np.allclose(out, data, atol=1e-6)


def test_sliding_window_pads_small_volumes():
    data = np.ones((5, 6, 7), dtype=np.float32)
    seen = []

    def net(t):
        seen.append(tuple(t.shape))
        return t * 2.0

    out = sliding_window_logits(net, data, (8, 8, 8), 0.5)
    assert seen == [(1, 1, 8, 8, 8)]
    assert out.shape == (5, 6, 7)
    assert np.allclose(out, 2.0)


def test_sliding_window_rejects_bad_overlap():
    with pytest.raises(SegError, match="overlap"):
        sliding_window_logits(lambda t: t, np.zeros((4, 4, 4)), (4, 4, 4), 1.0)


def test_predict_thresholds_logits_at_zero():
    hu = np.full((8, 8, 8), -500.0, dtype=np.float32)
    hu[2:5, 2:5, 2:5] = 200.0
    vol = Volume(hu)
    # windowed values are 0 / ~0.88; logit = x - 0.5
    m = predict(lambda t: t - 0.5, vol, tiny_seg_config(patch_size=(8, 8, 8)))
    assert m.count() == 27
    assert m.data[3, 3, 3] == 1 and m.data[0, 0, 0] == 0


def test_organ_filter_drops_components_outside_the_organ():
    organ = mask_of(ball((20, 20, 20), (6, 6, 6), 4))
    pred = np.zeros((20, 20, 20), dtype=bool)
    pred[5:8, 5:8, 5:8] = True
    pred[15:18, 15:18, 15:18] = True
    out = organ_filter(mask_of(pred), organ)
    assert out.count() == 27
    assert out.data[6, 6, 6] == 1 and out.data[16, 16, 16] == 0
    empty = mask_of(np.zeros((20, 20, 20)))
    assert organ_filter(empty, organ) is empty
    with pytest.raises(SegError, match="grid mismatch"):
        organ_filter(mask_of(np.zeros((4, 4, 4))), organ)


def test_dice_bce_loss_is_small_for_confident_correct_logits():
    target = torch.zeros(1, 1, 4, 4, 4)
    target[..., :2, :, :] = 1.0
    good = dice_bce_loss(target * 40 - 20, target, SegConfig())
    bad = dice_bce_loss(20 - target * 40, target, SegConfig())
    assert float(good["dice"]) < 1e-3
    assert float(good["loss"]) < float(bad["loss"])


@pytest.mark.parametrize(
    "kwargs, fragment",
    [
        (dict(patch_size=(16, 16, 10)), "divisible by 4"),
        (dict(sliding_overlap=1.0), "sliding_overlap"),
        (dict(patch_size=(16, 8, 16)), "square"),
        (dict(intensity_shift=(0.1, 2.0)), "intensity_shift probability"),
    ],
)
def test_config_validation(kwargs, fragment):
    with pytest.raises(SegError, match=fragment):
        SegConfig(**kwargs)


def test_build_segmenter_output_shape():
    net = build_segmenter(tiny_seg_config())
    out = net(torch.zeros(2, 1, 16, 16, 16))
    assert out.shape == (2, 1, 16, 16, 16)


def test_train_smoke_real_only():
    cases = [small_case("a", seed=0), small_case("b", seed=1)]
    model, history = train_segmenter(cases, [], None, tiny_seg_config())
    assert len(history) == 2
    assert all(np.isfinite(h["loss"]) for h in history)
    assert not model.training


def test_train_uses_healthy_cases_only_with_a_hook():
    healthy = [small_case("h", seed=3, with_lesion=False)]
    with pytest.raises(SegError, match="empty training pool"):
        train_segmenter([], healthy, None, tiny_seg_config())

    calls = []

    def hook(volume, organ, rng):
        calls.append(1)
        return volume, organ

    _model, history = train_segmenter([], healthy, hook, tiny_seg_config())
    assert len(history) == 2
    assert len(calls) == 2


def test_evaluate_cases_per_case_metrics():
    cases = [small_case("a", seed=0), small_case("h", seed=1, with_lesion=False)]
    metrics = evaluate_cases(lambda t: torch.full_like(t, -1.0), cases, tiny_seg_config())
    assert [m.case for m in metrics] == ["a", "h"]
    assert metrics[0].dsc == 0.0 and metrics[0].sensitivity == 0.0
    assert metrics[1].dsc == 1.0 and metrics[1].n_gt_tumors == 0
