"""Micro-averaged Dice/IoU and the FPS benchmarking protocol."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

CATEGORIES = ("seg", "non", "neo")


@dataclass
class ConfusionAccumulator:
    """Running pixel counts pooled over a whole evaluation set.

    ``seg`` treats any polyp as positive (truth in {1, 2, 3}, prediction in
    {1, 2}). ``non`` and ``neo`` are one-vs-rest on labels 1 and 2, with
    pixels whose truth is unknown (3) left out of the class counts.
    """

    counts: dict = field(default_factory=lambda: {c: {"tp": 0, "fp": 0, "fn": 0} for c in CATEGORIES})

    def accumulate(self, pred, truth) -> "ConfusionAccumulator":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
        if np.any(pred == 3):
            raise ValueError("predictions must not contain the unknown label 3")
        if pred.size and (pred.min() < 0 or pred.max() > 3 or truth.min() < 0 or truth.max() > 3):
            raise ValueError("labels must lie in {0, 1, 2, 3}")

        self._add("seg", pred > 0, truth > 0)
        known = truth != 3
        for name, label in (("non", 1), ("neo", 2)):
            self._add(name, (pred == label) & known, (truth == label) & known)
        return self

    def _add(self, category, pred_pos, true_pos):
        c = self.counts[category]
        c["tp"] += int(np.count_nonzero(pred_pos & true_pos))
        c["fp"] += int(np.count_nonzero(pred_pos & ~true_pos))
        c["fn"] += int(np.count_nonzero(~pred_pos & true_pos))

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        merged = ConfusionAccumulator()
        for cat in CATEGORIES:
            for key in ("tp", "fp", "fn"):
                merged.counts[cat][key] = self.counts[cat][key] + other.counts[cat][key]
        return merged

    def __add__(self, other):
        return self.merge(other)

    def dice(self, category: str) -> float:
        return dice(self, category)

    def iou(self, category: str) -> float:
        return iou(self, category)

    def summary(self) -> dict:
        out = {}
        for cat in CATEGORIES:
            out[f"Dice_{cat}"] = dice(self, cat)
            out[f"IoU_{cat}"] = iou(self, cat)
        return out


def accumulate(pred, truth, acc: ConfusionAccumulator | None = None) -> ConfusionAccumulator:
    return (acc or ConfusionAccumulator()).accumulate(pred, truth)


def dice(acc: ConfusionAccumulator, category: str) -> float:
    c = acc.counts[category]
    denom = 2 * c["tp"] + c["fp"] + c["fn"]
    # an absent category that is also predicted absent scores 1
    return 1.0 if denom == 0 else 2 * c["tp"] / denom


def iou(acc: ConfusionAccumulator, category: str) -> float:
    c = acc.counts[category]
    denom = c["tp"] + c["fp"] + c["fn"]
    return 1.0 if denom == 0 else c["tp"] / denom


def format_table(summary: dict, name: str = "model") -> str:
    """Plain-text table laid out as Method | Dice/IoU seg | non | neo | FPS."""
    cols = ["Dice_seg", "IoU_seg", "Dice_non", "IoU_non", "Dice_neo", "IoU_neo"]
    header = ["Method"] + cols
    row = [name] + [f"{summary[c]:.3f}" for c in cols]
    if "fps_mean" in summary:
        header.append("FPS")
        row.append(f"{summary['fps_mean']:.1f}")
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), fmt(row)])


def benchmark_fps(infer, images, warmup: int = 10, n_images: int = 100,
                  clock=time.perf_counter, sync=None) -> dict:
    """Time ``infer(image)`` one image at a time.

    ``warmup`` untimed calls precede the timed run over the first ``n_images``
    images. ``sync`` (e.g. ``torch.cuda.synchronize``) is called before each
    clock read when given.
    """
    images = list(images)
    if len(images) < n_images:
        raise ValueError(f"benchmark needs at least {n_images} images, got {len(images)}")
    images = images[:n_images]
    for i in range(warmup):
        infer(images[i % n_images])
    if sync:
        sync()
    latencies = []
    for image in images:
        start = clock()
        infer(image)
        if sync:
            sync()
        latencies.append(clock() - start)
    lat = np.asarray(latencies)
    mean = float(lat.mean())
    return {
        "fps_mean": 1.0 / mean,
        "latency_mean": mean,
        "latency_std": float(lat.std()),
        "latency_p50": float(np.percentile(lat, 50)),
        "latency_p95": float(np.percentile(lat, 95)),
        "n_timed": len(latencies),
        "warmup_iterations": warmup,
        "per_image_latencies": latencies,
    }
