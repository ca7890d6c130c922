import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from neounet.exceptions import ConfigError
from neounet.losses import (LossConfig, SupervisionTarget, focal_tversky_loss, masked_bce,
                            multi_class_loss, segmentation_loss, soft_dice_loss, soft_or,
                            total_loss, tversky_loss)
from neounet.synthetic import oracle_bce, oracle_losses, oracle_or, oracle_tversky

T = lambda *v: torch.tensor(v, dtype=torch.float64)


def central_difference(fn, x, step=1e-4):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(x).item()
        flat[i] = orig - step
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_error(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.w_c, cfg.w_s) == (0.3, 0.7, 4 / 3, 0.75, 0.25)
    with pytest.raises(ConfigError):
        LossConfig(alpha=0.3, beta=0.6)
    with pytest.raises(ConfigError):
        LossConfig(gamma=0.5)
    with pytest.raises(ConfigError):
        LossConfig(smooth=0)


def test_supervision_target_from_labels():
    labels = torch.tensor([[0, 1], [2, 3]])
    t = SupervisionTarget.from_labels(labels)
    assert t.class_targets[0, 0].tolist() == [[0, 1], [0, 0]]
    assert t.class_targets[0, 1].tolist() == [[0, 0], [1, 0]]
    assert t.known_mask[0, 0].tolist() == [[1, 1], [1, 0]]
    assert t.seg_target[0, 0].tolist() == [[0, 1], [1, 1]]
    assert torch.all(t.seg_target >= t.class_targets)
    assert torch.all(t.class_targets * (1 - t.known_mask) == 0)


def test_tversky_examples():
    assert tversky_loss(T(1, 1, 1, 1), T(1, 1, 1, 1), smooth=1.0).item() == 0.0
    value = tversky_loss(T(1, 1, 0, 0), T(1, 0, 0, 0), 0.3, 0.7, smooth=0.0).item()
    assert value == pytest.approx(1 - 1 / 1.3, abs=1e-12)
    assert value == pytest.approx(0.23077, abs=1e-5)


def test_focal_tversky_examples():
    p, t = T(1, 1, 0, 0), T(1, 0, 0, 0)
    value = focal_tversky_loss(p, t, 0.3, 0.7, 4 / 3, smooth=0.0).item()
    assert value == pytest.approx((1 - 1 / 1.3) ** 0.75, abs=1e-12)
    assert value == pytest.approx(0.33295, abs=1e-5)
    assert focal_tversky_loss(T(1, 0), T(1, 0), gamma=4 / 3).item() == 0.0
    torch.manual_seed(1)
    p, t = torch.rand(20, dtype=torch.float64), (torch.rand(20) > 0.5).double()
    assert focal_tversky_loss(p, t, gamma=1.0).item() == tversky_loss(p, t).item()


def test_tversky_rejects_bad_input():
    with pytest.raises(ValueError):
        tversky_loss(T(0.5, 0.5), T(1, 0, 0))
    with pytest.raises(ValueError):
        tversky_loss(T(1.5, 0.5), T(1, 0))


def test_masked_bce_examples():
    assert masked_bce(torch.full((3, 3), 0.5, dtype=torch.float64),
                      torch.ones(3, 3, dtype=torch.float64)).item() == pytest.approx(math.log(2))
    assert masked_bce(T(0.3, 0.2), T(1, 0), T(0, 0)).item() == 0.0
    assert masked_bce(T(0.9, 0.1), T(1, 0), T(1, 0)).item() == pytest.approx(-math.log(0.9))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30),
       st.floats(0.05, 0.95), st.floats(0.01, 2.0))
def test_tversky_matches_oracle(pairs, alpha, smooth):
    p = torch.tensor([a for a, _ in pairs], dtype=torch.float64)
    t = torch.tensor([b for _, b in pairs], dtype=torch.float64)
    ours = tversky_loss(p, t, alpha, 1 - alpha, smooth).item()
    assert ours == pytest.approx(oracle_tversky(p, t, alpha, 1 - alpha, smooth), abs=1e-12)
    assert 0 <= ours < 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1), st.integers(0, 1)),
                min_size=1, max_size=30))
def test_masked_bce_matches_oracle(triples):
    p, t, m = (torch.tensor(col, dtype=torch.float64) for col in zip(*triples))
    assert masked_bce(p, t, m).item() == pytest.approx(oracle_bce(p, t, m), abs=1e-12)


def test_soft_or():
    assert soft_or(T(0, 0).view(1, 2, 1, 1)).item() == 0.0
    assert soft_or(T(0.5, 0.5).view(1, 2, 1, 1)).item() == 0.75
    for a in (0.0, 1.0):
        for b in (0.0, 1.0):
            assert soft_or(T(a, b).view(1, 2, 1, 1)).item() == oracle_or(a, b)
    assert soft_or(T(1, 0.37).view(1, 2, 1, 1)).item() == 1.0


def two_by_two():
    pred = torch.tensor([[[0.9, 0.2], [0.1, 0.6]],
                         [[0.05, 0.7], [0.8, 0.3]]], dtype=torch.float64).unsqueeze(0)
    labels = torch.tensor([[1, 2], [0, 3]])
    return pred, labels


def test_two_by_two_against_spreadsheet_oracle():
    pred, labels = two_by_two()
    target = SupervisionTarget.from_labels(labels, torch.float64)
    cfg = LossConfig()
    ref = oracle_losses(pred[0], labels)
    assert multi_class_loss(pred, target, cfg).item() == pytest.approx(ref["L_c"], abs=1e-12)
    assert segmentation_loss(pred, target, cfg).item() == pytest.approx(ref["L_s"], abs=1e-12)
    assert total_loss([pred], target, cfg).item() == pytest.approx(ref["total"], abs=1e-12)
    assert total_loss([pred] * 4, target, cfg).item() == pytest.approx(4 * ref["total"], abs=1e-12)
    assert ref["total"] == pytest.approx(0.75 * ref["L_c"] + 0.25 * ref["L_s"])


def test_multi_class_loss_edge_cases():
    labels = torch.tensor([[1, 2], [0, 0]])
    target = SupervisionTarget.from_labels(labels, torch.float64)
    perfect = target.class_targets.clone()
    assert multi_class_loss(perfect, target).item() == pytest.approx(0.0, abs=1e-6)
    unknown = SupervisionTarget.from_labels(torch.full((2, 2), 3), torch.float64)
    pred = torch.rand(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    loss = multi_class_loss(pred, unknown)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.count_nonzero(pred.grad) == 0


def test_segmentation_loss_cases():
    labels = torch.tensor([[1, 2], [0, 3]])
    target = SupervisionTarget.from_labels(labels, torch.float64)
    exact = torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [0.0, 0.0]]],
                         dtype=torch.float64).unsqueeze(0)
    assert segmentation_loss(exact, target).item() == pytest.approx(0.0, abs=1e-6)
    only_unknown = SupervisionTarget.from_labels(torch.tensor([[3, 0], [0, 0]]), torch.float64)
    zeros = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    assert segmentation_loss(zeros, only_unknown).item() > 0


def test_unknown_perturbation_leaves_class_loss_unchanged():
    rng = torch.Generator().manual_seed(4)
    labels = torch.randint(0, 4, (2, 8, 8), generator=rng)
    target = SupervisionTarget.from_labels(labels, torch.float64)
    pred = torch.rand(2, 2, 8, 8, dtype=torch.float64, generator=rng)
    unknown = (labels == 3).unsqueeze(1).expand_as(pred)
    noisy = torch.where(unknown, torch.rand(pred.shape, dtype=torch.float64, generator=rng), pred)
    assert abs(multi_class_loss(pred, target) - multi_class_loss(noisy, target)) < 1e-12
    assert segmentation_loss(pred, target) != segmentation_loss(noisy, target)


def test_total_loss_upsamples_heads():
    labels = torch.randint(0, 4, (1, 8, 8))
    target = SupervisionTarget.from_labels(labels)
    heads = [torch.rand(1, 2, s, s) for s in (1, 2, 4, 8)]
    loss = total_loss(heads, target)
    assert loss.item() > 0 and math.isfinite(loss.item())


def test_gradients_match_finite_differences():
    torch.manual_seed(11)
    p = (torch.rand(4, 4, dtype=torch.float64) * 0.998 + 0.001)
    t = (torch.rand(4, 4) > 0.5).double()
    m = (torch.rand(4, 4) > 0.3).double()
    fns = [
        lambda x: tversky_loss(x, t, 0.3, 0.7, 1.0),
        lambda x: focal_tversky_loss(x, t, 0.3, 0.7, 4 / 3, 1.0),
        lambda x: masked_bce(x, t, m),
    ]
    for fn in fns:
        x = p.clone().requires_grad_(True)
        fn(x).backward()
        assert rel_error(x.grad, central_difference(fn, p.clone())) < 1e-4


def test_soft_dice_equals_tversky_half():
    # (TP + s) / (TP + FP/2 + FN/2 + s) == (2TP + 2s) / (2TP + FP + FN + 2s)
    torch.manual_seed(2)
    for _ in range(20):
        p, t = torch.rand(16, 16, dtype=torch.float64), (torch.rand(16, 16) > 0.5).double()
        assert abs(tversky_loss(p, t, 0.5, 0.5, 1.0) - soft_dice_loss(p, t, 2.0)) < 1e-9
        assert abs(tversky_loss(p, t, 0.5, 0.5, 0.0) - soft_dice_loss(p, t, 0.0)) < 1e-9


def test_total_loss_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(10):
        labels = torch.from_numpy(rng.integers(0, 4, (1, 6, 6)))
        target = SupervisionTarget.from_labels(labels, torch.float64)
        heads = [torch.from_numpy(rng.random((1, 2, 6, 6))) for _ in range(4)]
        assert total_loss(heads, target).item() >= 0
