"""Training loop: warmup + cosine SGD, multi-scale passes, checkpoints."""
from __future__ import annotations

import copy
import csv
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import build_sampler, draw_indices, make_batch, TRAIN_SCALES
from .exceptions import ConfigError, NonFiniteLossError
from .losses import LossConfig, SupervisionTarget, total_loss
from .metrics import ConfusionAccumulator
from .network import NeoUNet, NetworkConfig, infer_labels

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "neounet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    nesterov: bool = True
    warmup_epochs: int = 5
    total_epochs: int = 105
    batch_size: int = 8
    seed: int = 0
    scales: tuple = TRAIN_SCALES
    update_per_scale: bool = True
    r_max: float = 20.0
    samples_per_epoch: int | None = None
    eval_size: int = 352
    threshold: float = 0.5
    deterministic: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.scales = tuple(int(s) for s in self.scales)
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_epochs < 0:
            raise ConfigError(f"total_epochs must be >= 0, got {self.total_epochs}")
        if self.total_epochs and not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs must satisfy 0 <= t_w < total_epochs, got "
                f"{self.warmup_epochs} / {self.total_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        bad = [s for s in self.scales if s not in TRAIN_SCALES]
        if bad or not self.scales:
            raise ConfigError(f"scales must be drawn from {TRAIN_SCALES}, got {self.scales}")
        if self.eval_size % 32:
            raise ConfigError(f"eval_size {self.eval_size} is not divisible by 32")

    def to_dict(self):
        return asdict(self)


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine annealing to 0."""
    t_w, total = config.warmup_epochs, config.total_epochs
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if epoch < t_w:
        return config.base_lr * epoch / t_w
    return config.base_lr * 0.5 * (1 + math.cos(math.pi * (epoch - t_w) / (total - t_w)))


def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def build_model(config: NetworkConfig | None = None, seed: int = 0) -> NeoUNet:
    torch.manual_seed(seed)
    return NeoUNet(config)


def make_optimizer(model, config: TrainConfig):
    return torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum,
                           nesterov=config.nesterov, weight_decay=config.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _grad_norm(model):
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


@dataclass
class StepReport:
    losses: dict
    grad_norm: float


def _dump_nonfinite(model, images, labels, scale, loss):
    heads_finite = all(torch.isfinite(p).all().item() for p in model.parameters())
    return (
        f"non-finite loss {loss!r} at scale {scale}; batch {tuple(images.shape)}, "
        f"label histogram {torch.bincount(labels.flatten(), minlength=4).tolist()}, "
        f"parameters finite: {heads_finite}"
    )


def train_step(model, optimizer, batch, config: TrainConfig, device="cpu") -> StepReport:
    """One batch through every configured scale.

    ``batch`` is a list of ``(image, mask)`` pairs at native resolution. With
    ``update_per_scale`` the optimizer steps after each scale's backward pass,
    otherwise gradients accumulate and a single step follows the last scale.
    """
    model.train()
    losses = {}
    norms = []
    if not config.update_per_scale:
        optimizer.zero_grad(set_to_none=True)
    for scale in config.scales:
        images, labels = make_batch(batch, scale)
        images, labels = images.to(device), labels.to(device)
        if config.update_per_scale:
            optimizer.zero_grad(set_to_none=True)
        heads = model(images)
        loss = total_loss(heads, SupervisionTarget.from_labels(labels), config.loss)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(_dump_nonfinite(model, images, labels, scale, value))
        loss.backward()
        norms.append(_grad_norm(model))
        if config.update_per_scale:
            optimizer.step()
        losses[scale] = value
    if not config.update_per_scale:
        optimizer.step()
    return StepReport(losses, norms[-1] if config.update_per_scale else _grad_norm(model))


@torch.no_grad()
def predict_dataset(model, dataset, size=352, threshold=0.5, device="cpu", batch_size=4):
    """Yield ``(predicted labels, truth labels)`` at ``size x size``."""
    model.eval()
    for start in range(0, len(dataset), batch_size):
        items = [dataset.raw(i) for i in range(start, min(start + batch_size, len(dataset)))]
        images, labels = make_batch(items, size, allowed_scales=None)
        heads = model(images.to(device))
        preds = infer_labels(heads[-1], threshold, (size, size)).cpu().numpy()
        for pred, truth in zip(preds, labels.numpy()):
            yield pred, truth


def evaluate(model, dataset, size=352, threshold=0.5, device="cpu") -> ConfusionAccumulator:
    acc = ConfusionAccumulator()
    for pred, truth in predict_dataset(model, dataset, size, threshold, device):
        acc.accumulate(pred, truth)
    return acc


def save_checkpoint(path, model, epoch=0, optimizer=None, extra=None):
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(state, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, device="cpu"):
    """Returns ``(model, state dict)``."""
    try:
        state = torch.load(path, map_location=device, weights_only=False)
    except OSError as exc:
        raise OSError(f"failed to read checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a NeoUNet checkpoint")
    if state.get("version", 0) > CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {state['version']} is newer than supported")
    model = NeoUNet(NetworkConfig.from_dict(state["network_config"]))
    try:
        model.load_state_dict(state["state_dict"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint {path} does not match its architecture: {exc}") from exc
    return model.to(device), state


def transfer_weights(model, path, device="cpu") -> list:
    """Copy every tensor of a NeoUNet checkpoint whose name and shape match.

    Used to start the two-class model from a binary-pretrained one: the
    output heads differ in shape and keep their fresh initialisation. Returns
    the names left untouched.
    """
    _, state = load_checkpoint(path, device)
    source = state["state_dict"]
    target = model.state_dict()
    skipped = []
    for name, value in target.items():
        if name in source and source[name].shape == value.shape:
            target[name] = source[name]
        else:
            skipped.append(name)
    model.load_state_dict(target)
    return skipped


HISTORY_FIELDS = ["epoch", "lr", "loss_448", "loss_352", "loss_256",
                  "Dice_seg", "Dice_non", "Dice_neo"]


def _append_history(path, row):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in HISTORY_FIELDS})


def fit(model, train_data, valid_data, config: TrainConfig, out_dir=None, device="cpu",
        resume=None, callback=None, workers=0):
    """Train ``model`` and return ``(best state dict, history rows)``.

    ``train_data``/``valid_data`` follow the dataset protocol (``__len__``,
    ``__getitem__`` returning augmented pairs, ``raw``, ``label_counts``,
    ``set_epoch``). When ``out_dir`` is given, ``last.pt``, ``best.pt`` and
    ``history.csv`` are written there and ``resume`` may name a checkpoint to
    continue from. ``workers > 0`` loads and augments batch items on a thread
    pool; augmentation seeds depend only on (seed, entry, epoch), so results do
    not depend on the worker count.
    """
    if len(valid_data) == 0:
        raise ValueError("validation dataset is empty")
    seed_everything(config.seed, config.deterministic)
    model.to(device)
    optimizer = make_optimizer(model, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    best_dice = -1.0
    best_state = copy.deepcopy(model.state_dict())
    history = []
    if resume is not None:
        state = torch.load(resume, map_location=device, weights_only=False)
        model.load_state_dict(state["state_dict"])
        if state.get("optimizer"):
            optimizer.load_state_dict(state["optimizer"])
        start_epoch = state["epoch"]
        best_dice = state["extra"].get("best_dice", -1.0)
        history = list(state["extra"].get("history", []))
        best_path = out_dir / "best.pt" if out_dir else None
        if best_path is not None and best_path.exists():
            best_state = torch.load(best_path, map_location=device, weights_only=False)["state_dict"]

    if config.total_epochs == 0 and out_dir is not None:
        save_checkpoint(out_dir / "last.pt", model, 0, optimizer, {"history": []})
        save_checkpoint(out_dir / "best.pt", model, 0)

    weights = build_sampler(train_data.label_counts(), config.r_max)
    n_samples = config.samples_per_epoch or len(train_data)
    steps = max(1, math.ceil(n_samples / config.batch_size))

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for epoch in range(start_epoch, config.total_epochs):
            train_data.set_epoch(epoch)
            order = draw_indices(weights, n_samples, (config.seed, epoch))
            sums = {s: 0.0 for s in config.scales}
            lr = 0.0
            for step in range(steps):
                lr = lr_at(epoch + step / steps, config)
                set_lr(optimizer, lr)
                idx = order[step * config.batch_size:(step + 1) * config.batch_size]
                if pool is not None:
                    items = list(pool.map(train_data.__getitem__, (int(i) for i in idx)))
                else:
                    items = [train_data[int(i)] for i in idx]
                report = train_step(model, optimizer, items, config, device)
                for s, v in report.losses.items():
                    sums[s] += v
            acc = evaluate(model, valid_data, config.eval_size, config.threshold, device)
            row = {"epoch": epoch + 1, "lr": lr,
                   **{f"loss_{s}": sums[s] / steps for s in config.scales},
                   "Dice_seg": acc.dice("seg"), "Dice_non": acc.dice("non"),
                   "Dice_neo": acc.dice("neo")}
            history.append(row)
            logger.info("epoch %d lr %.6f %s", epoch + 1, lr,
                        " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("epoch", "lr")))
            if row["Dice_seg"] > best_dice:
                best_dice = row["Dice_seg"]
                best_state = copy.deepcopy(model.state_dict())
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.pt", model, epoch + 1, extra={"metrics": row})
            if out_dir is not None:
                _append_history(out_dir / "history.csv", row)
                save_checkpoint(out_dir / "last.pt", model, epoch + 1, optimizer,
                                {"best_dice": best_dice, "history": history})
            if callback is not None:
                callback(row)
    finally:
        if pool is not None:
            pool.shutdown()
    return best_state, history
