import csv
import math

import numpy as np
import pytest
import torch

from neounet.data import ArrayDataset
from neounet.exceptions import ConfigError, NonFiniteLossError
from neounet.losses import LossConfig
from neounet.network import NetworkConfig
from neounet.training import (TrainConfig, build_model, evaluate, fit, load_checkpoint, lr_at,
                              make_optimizer, save_checkpoint, train_step)


def toy_arrays(n=4, size=48, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, size, size, 3)).astype(np.float32)
    labels = np.zeros((n, size, size), np.uint8)
    for i in range(n):
        y, x = rng.integers(8, size - 16, 2)
        labels[i, y:y + 10, x:x + 10] = 1 + i % 3
        images[i, y:y + 10, x:x + 10] = 0.9
    return images, labels


def small_config(**kw):
    base = dict(base_lr=0.01, warmup_epochs=1, total_epochs=2, batch_size=2, scales=(256,),
                eval_size=64)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("epoch, expected", [(0, 0.0), (2, 0.0004), (5, 0.001), (55, 0.0005),
                                             (105, 0.0)])
def test_lr_schedule_values(epoch, expected):
    assert lr_at(epoch, TrainConfig()) == pytest.approx(expected, abs=1e-12)


def test_lr_schedule_shape():
    cfg = TrainConfig()
    eps = 1e-9
    assert lr_at(5 - eps, cfg) == pytest.approx(lr_at(5, cfg), abs=1e-9)
    values = [lr_at(e / 10, cfg) for e in range(0, 1051)]
    assert max(values) == pytest.approx(cfg.base_lr)
    warm, decay = values[:51], values[50:]
    assert warm == sorted(warm) and decay == sorted(decay, reverse=True)
    with pytest.raises(ValueError):
        lr_at(106, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=10, total_epochs=10)
    with pytest.raises(ConfigError):
        TrainConfig(scales=(300,))
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0)


def one_step(seed, cfg, lr=None):
    images, labels = toy_arrays()
    model = build_model(NetworkConfig.tiny(), seed=seed)
    opt = make_optimizer(model, cfg)
    if lr is not None:
        for g in opt.param_groups:
            g["lr"] = lr
    batch = [(images[i], labels[i]) for i in range(2)]
    report = train_step(model, opt, batch, cfg)
    return model, report


def test_train_step_is_deterministic():
    cfg = small_config(scales=(256, 352))
    (m1, r1), (m2, r2) = one_step(0, cfg), one_step(0, cfg)
    assert r1.losses == r2.losses and set(r1.losses) == {256, 352}
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(a, b)


def test_zero_lr_leaves_weights_unchanged():
    cfg = small_config()
    reference = build_model(NetworkConfig.tiny(), seed=0)
    model, report = one_step(0, cfg, lr=0.0)
    assert report.grad_norm > 0
    for a, b in zip(reference.parameters(), model.parameters()):
        assert torch.equal(a, b)


def test_gradient_accumulation_mode_runs():
    cfg = small_config(scales=(256, 352), update_per_scale=False)
    model, report = one_step(0, cfg)
    assert math.isfinite(report.grad_norm) and len(report.losses) == 2


def test_loss_decreases_on_fixed_batch():
    images, labels = toy_arrays(2)
    cfg = small_config(base_lr=0.05)
    model = build_model(NetworkConfig.tiny(), seed=0)
    opt = make_optimizer(model, cfg)
    batch = [(images[i], labels[i]) for i in range(2)]
    losses = [train_step(model, opt, batch, cfg).losses[256] for _ in range(15)]
    assert min(losses[-3:]) < losses[0]


def test_unknown_only_batch_with_no_seg_weight_has_zero_grads():
    cfg = small_config(loss=LossConfig(w_c=1.0, w_s=0.0))
    model = build_model(NetworkConfig.tiny(), seed=0)
    opt = make_optimizer(model, cfg)
    image = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    report = train_step(model, opt, [(image, np.full((32, 32), 3, np.uint8))], cfg)
    assert report.losses[256] == 0.0
    assert report.grad_norm == 0.0


def test_non_finite_loss_aborts():
    model = build_model(NetworkConfig.tiny(), seed=0)
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    cfg = small_config()
    images, labels = toy_arrays(1)
    with pytest.raises(NonFiniteLossError, match="scale 256"):
        train_step(model, make_optimizer(model, cfg), [(images[0], labels[0])], cfg)


def test_fit_zero_epochs_writes_checkpoints(tmp_path):
    data = ArrayDataset(*toy_arrays(2))
    model = build_model(NetworkConfig.tiny())
    _, history = fit(model, data, data, small_config(total_epochs=0, warmup_epochs=0), tmp_path)
    assert history == []
    assert (tmp_path / "last.pt").exists() and (tmp_path / "best.pt").exists()


def test_fit_history_and_resume_match_straight_run(tmp_path):
    data = ArrayDataset(*toy_arrays(4))
    cfg = small_config(total_epochs=2)
    straight, history = fit(build_model(NetworkConfig.tiny()), data, data, cfg, tmp_path / "a")
    assert [r["epoch"] for r in history] == [1, 2]
    with open(tmp_path / "a" / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and float(rows[1]["Dice_seg"]) == pytest.approx(history[1]["Dice_seg"])

    partial = build_model(NetworkConfig.tiny())
    with pytest.raises(_Stop):
        fit(partial, data, data, cfg, tmp_path / "b", callback=_stop_after(1))
    resumed = build_model(NetworkConfig.tiny())
    _, resumed_history = fit(resumed, data, data, cfg, tmp_path / "b",
                             resume=tmp_path / "b" / "last.pt")
    assert [r["epoch"] for r in resumed_history] == [1, 2]
    last_a, _ = load_checkpoint(tmp_path / "a" / "last.pt")
    last_b, _ = load_checkpoint(tmp_path / "b" / "last.pt")
    for a, b in zip(last_a.state_dict().values(), last_b.state_dict().values()):
        assert torch.allclose(a.double(), b.double(), atol=1e-6)


class _Stop(Exception):
    pass


def _stop_after(n):
    def callback(row):
        if row["epoch"] >= n:
            raise _Stop

    return callback


def test_checkpoint_round_trip_reproduces_metrics(tmp_path):
    data = ArrayDataset(*toy_arrays(3))
    model = build_model(NetworkConfig.tiny(), seed=2)
    save_checkpoint(tmp_path / "m.pt", model, epoch=3)
    loaded, state = load_checkpoint(tmp_path / "m.pt")
    assert state["epoch"] == 3
    assert evaluate(model, data, 64).counts == evaluate(loaded, data, 64).counts


def test_load_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt")


def test_transfer_weights_skips_heads(tmp_path):
    from neounet.training import transfer_weights

    binary_cfg = NetworkConfig(**{**NetworkConfig.tiny().to_dict(), "num_classes": 1})
    source = build_model(binary_cfg, seed=1)
    save_checkpoint(tmp_path / "b.pt", source)
    target = build_model(NetworkConfig.tiny(), seed=2)
    skipped = transfer_weights(target, tmp_path / "b.pt")
    assert skipped and all(name.startswith("heads.") for name in skipped)
    src = source.state_dict()
    for name, value in target.state_dict().items():
        if name not in skipped:
            assert torch.equal(value, src[name])


def test_binary_head_loss_is_segmentation_only():
    from neounet.losses import SupervisionTarget, segmentation_loss, total_loss

    labels = torch.randint(0, 4, (1, 8, 8))
    target = SupervisionTarget.from_labels(labels)
    head = torch.rand(1, 1, 8, 8)
    assert torch.equal(total_loss([head], target), segmentation_loss(head, target))


def test_two_steps_at_default_lr_reduce_loss_on_synthetic_batch():
    # fixed-seed statistical smoke check, not a theorem
    from neounet.synthetic import SyntheticSpec, render_sample

    spec = SyntheticSpec(image_size=64)
    batch = [render_sample(spec, np.random.default_rng(i)) for i in range(2)]
    batch = [(image.astype(np.float32) / 255, labels) for image, labels in batch]
    cfg = TrainConfig(base_lr=0.001, scales=(256,))
    model = build_model(NetworkConfig.tiny(), seed=0)
    opt = make_optimizer(model, cfg)
    first, second = (train_step(model, opt, batch, cfg).losses[256] for _ in range(2))
    assert second < first
