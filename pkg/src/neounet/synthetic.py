"""Synthetic polyp datasets and brute-force reference implementations.

The oracles below deliberately share no code with the losses and metrics
modules: they walk pixels one by one with plain Python floats so agreement
with the vectorised implementations actually means something.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

# kept local rather than imported from data.py so the oracle stays independent
PALETTE = ((0, 0, 0), (0, 255, 0), (255, 0, 0), (255, 255, 0))


@dataclass
class SyntheticSpec:
    image_size: int = 256
    num_images: int = 50
    blobs_per_image: tuple = (1, 3)
    class_mix: tuple = (0.45, 0.45, 0.10)  # non, neo, unknown
    empty_probability: float = 0.0
    radius_range: tuple = (0.08, 0.2)  # fraction of image size
    speckle_amplitude: float = 0.22
    seed: int = 0

    def __post_init__(self):
        self.blobs_per_image = tuple(int(v) for v in self.blobs_per_image)
        self.class_mix = tuple(float(v) for v in self.class_mix)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        if self.image_size < 32 or self.num_images < 1:
            raise ValueError("image_size must be >= 32 and num_images >= 1")
        lo, hi = self.blobs_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid blobs_per_image {self.blobs_per_image}")
        if len(self.class_mix) != 3 or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise ValueError(f"invalid class_mix {self.class_mix}")

    def to_dict(self):
        return asdict(self)


def _smooth_field(rng, size, n_waves=4, scale=1.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    out = np.zeros((size, size), dtype=np.float32)
    for _ in range(n_waves):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase).astype(np.float32)
    return out * (scale / n_waves)


def _blob_mask(rng, size, radius_range):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    r = rng.uniform(*radius_range) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    ratio = rng.uniform(0.7, 1.0)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    angle = np.arctan2(v, u)
    wobble = 1 + 0.08 * np.sin(3 * angle + rng.uniform(0, 2 * np.pi))
    dist = np.sqrt((u / r) ** 2 + (v / (r * ratio)) ** 2) / wobble
    return dist, dist <= 1.0


def render_sample(spec: SyntheticSpec, rng: np.random.Generator):
    """One ``(image uint8 HxWx3, labels uint8 HxW)`` pair."""
    size = spec.image_size
    base = np.array([0.72, 0.42, 0.38], dtype=np.float32) + rng.uniform(-0.05, 0.05, 3)
    shade = _smooth_field(rng, size, scale=0.12)
    image = np.clip(base[None, None] + shade[..., None], 0, 1)
    labels = np.zeros((size, size), dtype=np.uint8)

    lo, hi = spec.blobs_per_image
    n_blobs = 0 if rng.random() < spec.empty_probability else int(rng.integers(lo, hi + 1))
    mix = np.asarray(spec.class_mix) / sum(spec.class_mix)
    for _ in range(n_blobs):
        for _attempt in range(20):
            dist, inside = _blob_mask(rng, size, spec.radius_range)
            if not (inside & (labels > 0)).any():
                break
        else:
            continue
        label = int(rng.choice([1, 2, 3], p=mix))
        # unknown polyps look like either class
        neoplastic_look = label == 2 or (label == 3 and rng.random() < 0.5)
        color = np.array([0.88, 0.55, 0.45], dtype=np.float32) + rng.uniform(-0.04, 0.04, 3)
        dome = 0.12 * (1 - np.clip(dist, 0, 1) ** 2)
        polyp = color[None, None] + dome[..., None]
        if neoplastic_look:
            grain = rng.uniform(-1, 1, size=(size // 2 + 1, size // 2 + 1)).astype(np.float32)
            grain = np.kron(grain, np.ones((2, 2), dtype=np.float32))[:size, :size]
            polyp = polyp + spec.speckle_amplitude * grain[..., None]
        image = np.where(inside[..., None], np.clip(polyp, 0, 1), image)
        labels[inside] = label
    return (image * 255).round().astype(np.uint8), labels


def generate(spec: SyntheticSpec, out_dir) -> Path:
    """Write ``images/``, ``masks/``, ``manifest.json`` and ``spec.json``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset to {out_dir}: {exc}") from exc
    palette = np.asarray(PALETTE, dtype=np.uint8)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_images)
    entries = []
    for i, seq in enumerate(seeds):
        image, labels = render_sample(spec, np.random.default_rng(seq))
        stem = f"synth_{i:05d}"
        image_path = out_dir / "images" / f"{stem}.png"
        mask_path = out_dir / "masks" / f"{stem}.png"
        Image.fromarray(image).save(image_path)
        Image.fromarray(palette[labels]).save(mask_path)
        counts = np.bincount(labels.ravel(), minlength=4).tolist()
        entries.append({"image": str(image_path), "mask": str(mask_path), "counts": counts})
    manifest = {"split": "train", "root": str(out_dir), "spec": spec.to_dict(), "entries": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return out_dir


# ---------------------------------------------------------------------------
# oracles


def _as_nested(a):
    return a.tolist() if hasattr(a, "tolist") else a


def oracle_confusion(pred, truth) -> dict:
    """Pixel-by-pixel TP/FP/FN for seg, non and neo."""
    pred, truth = _as_nested(pred), _as_nested(truth)
    if len(pred) != len(truth) or any(len(a) != len(b) for a, b in zip(pred, truth)):
        raise ValueError("shape mismatch")
    counts = {c: {"tp": 0, "fp": 0, "fn": 0} for c in ("seg", "non", "neo")}
    for prow, trow in zip(pred, truth):
        for p, t in zip(prow, trow):
            pairs = [("seg", p != 0, t != 0)]
            if t != 3:
                pairs.append(("non", p == 1, t == 1))
                pairs.append(("neo", p == 2, t == 2))
            for cat, pp, tt in pairs:
                if pp and tt:
                    counts[cat]["tp"] += 1
                elif pp:
                    counts[cat]["fp"] += 1
                elif tt:
                    counts[cat]["fn"] += 1
    return counts


def oracle_scores(counts: dict) -> dict:
    out = {}
    for cat, c in counts.items():
        tp, fp, fn = c["tp"], c["fp"], c["fn"]
        out[f"Dice_{cat}"] = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        out[f"IoU_{cat}"] = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return out


def _flat(a):
    a = _as_nested(a)
    out = []
    stack = [a]
    while stack:
        item = stack.pop()
        if isinstance(item, (list, tuple)):
            stack.extend(reversed(item))
        else:
            out.append(float(item))
    return out


def _clamp(p, eps=1e-7):
    return min(max(p, eps), 1 - eps)


def oracle_bce(pred, target, mask=None) -> float:
    p, t = _flat(pred), _flat(target)
    m = [1.0] * len(p) if mask is None else _flat(mask)
    total, n = 0.0, 0.0
    for pi, ti, mi in zip(p, t, m):
        if mi:
            q = _clamp(pi)
            total += -(ti * math.log(q) + (1 - ti) * math.log(1 - q))
            n += 1
    return total / n if n else 0.0


def oracle_tversky(pred, target, alpha, beta, smooth, mask=None) -> float:
    p, t = _flat(pred), _flat(target)
    m = [1.0] * len(p) if mask is None else _flat(mask)
    tp = fp = fn = 0.0
    for pi, ti, mi in zip(p, t, m):
        if not mi:
            continue
        tp += pi * ti
        fp += pi * (1 - ti)
        fn += (1 - pi) * ti
    return 1 - (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)


def oracle_dice_loss(pred, target, smooth) -> float:
    p, t = _flat(pred), _flat(target)
    inter = sum(a * b for a, b in zip(p, t))
    return 1 - (2 * inter + smooth) / (sum(p) + sum(t) + smooth)


def oracle_losses(pred, labels, alpha=0.3, beta=0.7, gamma=4 / 3, w_c=0.75, w_s=0.25,
                  smooth=1.0) -> dict:
    """Reference value of the hybrid loss for a single two-channel head.

    ``pred`` is ``[2][H][W]`` (or an array of that shape) of probabilities and
    ``labels`` ``[H][W]`` in {0, 1, 2, 3}. Batched inputs ``[N][2][H][W]`` /
    ``[N][H][W]`` pool counts over the batch.
    """
    pred, labels = _as_nested(pred), _as_nested(labels)
    if labels and isinstance(labels[0][0], (list, tuple)):
        batch = list(zip(pred, labels))
    else:
        batch = [(pred, labels)]
    for p, lab in batch:
        if len(p) != 2 or len(p[0]) != len(lab) or any(len(r) != len(q) for r, q in zip(p[0], lab)):
            raise ValueError("shape mismatch between prediction and labels")

    bce_c_sum, bce_c_n = 0.0, 0
    counts = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    bce_s_sum, bce_s_n = 0.0, 0
    tp_s = fp_s = fn_s = 0.0
    for p, lab in batch:
        for i, row in enumerate(lab):
            for j, label in enumerate(row):
                p0, p1 = float(p[0][i][j]), float(p[1][i][j])
                # segmentation branch sees every pixel
                s = 1 - (1 - p0) * (1 - p1)
                st = 1.0 if label != 0 else 0.0
                q = _clamp(s)
                bce_s_sum += -(st * math.log(q) + (1 - st) * math.log(1 - q))
                bce_s_n += 1
                tp_s += s * st
                fp_s += s * (1 - st)
                fn_s += (1 - s) * st
                if label == 3:
                    continue
                for c, (pc, target_label) in enumerate(((p0, 1), (p1, 2))):
                    t = 1.0 if label == target_label else 0.0
                    q = _clamp(pc)
                    bce_c_sum += -(t * math.log(q) + (1 - t) * math.log(1 - q))
                    bce_c_n += 1
                    counts[c][0] += pc * t
                    counts[c][1] += pc * (1 - t)
                    counts[c][2] += (1 - pc) * t

    bce_c = bce_c_sum / bce_c_n if bce_c_n else 0.0
    focal = []
    for tp, fp, fn in counts:
        ti = (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)
        focal.append(max(1 - ti, 0.0) ** (1 / gamma))
    ft_c = sum(focal) / 2
    loss_c = (bce_c + ft_c) / 2
    bce_s = bce_s_sum / bce_s_n
    tv_s = 1 - (tp_s + smooth) / (tp_s + alpha * fp_s + beta * fn_s + smooth)
    loss_s = (bce_s + tv_s) / 2
    return {
        "bce_c": bce_c, "focal_tversky_c": ft_c, "L_c": loss_c,
        "bce_s": bce_s, "tversky_s": tv_s, "L_s": loss_s,
        "total": w_c * loss_c + w_s * loss_s,
    }


def oracle_or(p0: float, p1: float) -> float:
    """Hard OR on binary inputs, the reference for the probabilistic OR."""
    return 0.0 if (p0 == 0 and p1 == 0) else 1.0
