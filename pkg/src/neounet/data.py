"""Dataset ingestion: colour-coded masks, oversampling, augmentation, batching."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image

from .exceptions import ConfigError, DataIntegrityError

logger = logging.getLogger(__name__)

TRAIN_SCALES = (448, 352, 256)
IMAGE_SUFFIXES = (".jpeg", ".jpg", ".png")
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class MaskCodec:
    """RGB <-> label conversion. Labels: 0 background, 1 non-neoplastic,
    2 neoplastic, 3 unknown."""

    colors: tuple = ((0, 0, 0), (0, 255, 0), (255, 0, 0), (255, 255, 0))
    tolerance: int = 8

    def __post_init__(self):
        self.colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        if len(self.colors) != 4:
            raise ConfigError("mask codec needs exactly four colours")

    def decode(self, rgb) -> np.ndarray:
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[-1] < 3:
            raise DataIntegrityError(f"mask image must be HxWx3, got shape {rgb.shape}")
        rgb = rgb[..., :3].astype(np.int16)
        table = np.asarray(self.colors, dtype=np.int16)
        # Chebyshev distance to every palette colour
        dist = np.abs(rgb[:, :, None, :] - table[None, None]).max(axis=-1)
        labels = dist.argmin(axis=-1).astype(np.uint8)
        bad = dist.min(axis=-1) > self.tolerance
        if bad.any():
            ys, xs = np.nonzero(bad)
            sample = ", ".join(f"({y}, {x})={tuple(rgb[y, x])}" for y, x in zip(ys[:5], xs[:5]))
            raise DataIntegrityError(
                f"{len(ys)} mask pixels match no label colour within tolerance "
                f"{self.tolerance}; first offenders (row, col): {sample}"
            )
        return labels

    def encode(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size and labels.max() > 3:
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        return np.asarray(self.colors, dtype=np.uint8)[labels]


@dataclass
class BinaryMaskCodec:
    """Black/white polyp masks as published for public segmentation sets.

    Polyp pixels decode to label 3: segmentation is supervised, the class
    term is masked, which is exactly the binary task.
    """

    threshold: int = 128

    def decode(self, rgb) -> np.ndarray:
        rgb = np.asarray(rgb)
        gray = rgb[..., :3].mean(axis=-1) if rgb.ndim == 3 else rgb
        return np.where(gray >= self.threshold, 3, 0).astype(np.uint8)

    def encode(self, labels) -> np.ndarray:
        white = (np.asarray(labels) > 0).astype(np.uint8) * 255
        return np.repeat(white[..., None], 3, axis=-1)


def make_codec(mask_format="color", **kwargs):
    if mask_format == "color":
        return MaskCodec(**kwargs)
    if mask_format == "binary":
        return BinaryMaskCodec(**kwargs)
    raise ConfigError(f"unknown mask_format {mask_format!r}; expected 'color' or 'binary'")


def decode_mask(rgb, codec: MaskCodec | None = None) -> np.ndarray:
    return (codec or MaskCodec()).decode(rgb)


def encode_mask(labels, codec: MaskCodec | None = None) -> np.ndarray:
    return (codec or MaskCodec()).encode(labels)


def load_image(path) -> np.ndarray:
    """RGB float32 in [0, 1], shape HxWx3."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path, codec: MaskCodec | None = None) -> np.ndarray:
    with Image.open(path) as im:
        return decode_mask(np.asarray(im.convert("RGB")), codec)


@dataclass
class IndexEntry:
    image: str
    mask: str
    counts: list  # pixels per label 0..3


@dataclass
class DatasetIndex:
    entries: list = field(default_factory=list)
    split: str = "train"
    root: str = ""

    def __len__(self):
        return len(self.entries)

    def label_counts(self) -> np.ndarray:
        return np.asarray([e.counts for e in self.entries], dtype=np.int64).reshape(-1, 4)

    def save(self, path):
        data = {"split": self.split, "root": self.root,
                "entries": [asdict(e) for e in self.entries]}
        Path(path).write_text(json.dumps(data, indent=1))

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        data = json.loads(Path(path).read_text())
        return cls([IndexEntry(**e) for e in data["entries"]], data.get("split", "train"),
                   data.get("root", ""))


def build_index(root, split="train", codec: MaskCodec | None = None,
                manifest_name="manifest.json", use_cache=True) -> DatasetIndex:
    """Pair ``images/*`` with ``masks/*.png`` by stem and count label pixels.

    A manifest written next to the data is reused when present.
    """
    root = Path(root)
    manifest = root / manifest_name
    image_dir, mask_dir = root / "images", root / "masks"
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory: {d}")
    if use_cache and manifest.exists():
        index = DatasetIndex.load(manifest)
        if index.entries:
            index.root = str(root)
            index.split = split
            for e in index.entries:
                e.image = str(root / "images" / Path(e.image).name)
                e.mask = str(root / "masks" / Path(e.mask).name)
            return index
    masks = {p.stem: p for p in mask_dir.glob("*.png")}
    entries = []
    for image_path in sorted(image_dir.iterdir()):
        if image_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        mask_path = masks.get(image_path.stem)
        if mask_path is None:
            raise DataIntegrityError(f"no mask for image {image_path}")
        labels = load_mask(mask_path, codec)
        with Image.open(image_path) as im:
            if im.size != (labels.shape[1], labels.shape[0]):
                raise DataIntegrityError(
                    f"size mismatch between {image_path} {im.size} and {mask_path} "
                    f"{(labels.shape[1], labels.shape[0])}"
                )
        counts = np.bincount(labels.ravel(), minlength=4).tolist()
        entries.append(IndexEntry(str(image_path), str(mask_path), counts))
    return DatasetIndex(entries, split, str(root))


def build_sampler(index, r_max: float = 20.0) -> np.ndarray:
    """Per-entry sampling weights balancing non-neoplastic vs neoplastic pixels.

    Entries containing label 1 are up-weighted by ``P_neo / P_non`` (totals
    over the index), clamped to ``[1, r_max]``; everything else keeps weight 1.
    ``index`` is a :class:`DatasetIndex` or an ``(n, 4)`` array of counts.
    """
    counts = index.label_counts() if hasattr(index, "label_counts") else np.asarray(index)
    counts = counts.reshape(-1, 4)
    if len(counts) == 0:
        raise ValueError("cannot build a sampler for an empty index")
    p_non, p_neo = counts[:, 1].sum(), counts[:, 2].sum()
    weights = np.ones(len(counts), dtype=np.float64)
    if p_non == 0:
        if p_neo > 0:
            warnings.warn("no non-neoplastic pixels in index; falling back to uniform weights")
        return weights
    ratio = float(np.clip(p_neo / p_non, 1.0, r_max))
    weights[counts[:, 1] > 0] = ratio
    return weights


def draw_indices(weights, num_samples, seed) -> np.ndarray:
    """Weighted sampling with replacement, deterministic for a given seed."""
    weights = np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.choice(len(weights), size=num_samples, replace=True, p=weights / weights.sum())


@dataclass
class AugmentationPolicy:
    operations: tuple = ("rotate", "hflip", "vflip", "motion_blur", "color_jitter")
    apply_probability: float = 0.7
    max_rotation: float = 30.0
    blur_kernel: tuple = (3, 7)
    jitter: float = 0.2

    def __post_init__(self):
        self.operations = tuple(self.operations)
        self.blur_kernel = tuple(self.blur_kernel)
        unknown = set(self.operations) - set(_AUGMENTATIONS)
        if unknown:
            raise ConfigError(f"unknown augmentation(s): {sorted(unknown)}")
        if not 0 <= self.apply_probability <= 1:
            raise ConfigError("apply_probability must lie in [0, 1]")


def rotate(image, mask, angle):
    """Rotate about the centre; quarter turns are exact, other angles fill
    uncovered pixels with 0 (background)."""
    if angle % 90 == 0:
        k = int(angle // 90) % 4
        return np.ascontiguousarray(np.rot90(image, k)), np.ascontiguousarray(np.rot90(mask, k))
    h, w = mask.shape
    matrix = cv2.getRotationMatrix2D((w / 2, h / 2), angle, 1.0)
    image = cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask = cv2.warpAffine(mask, matrix, (w, h), flags=cv2.INTER_NEAREST,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return image, mask


def hflip(image, mask):
    return np.ascontiguousarray(image[:, ::-1]), np.ascontiguousarray(mask[:, ::-1])


def vflip(image, mask):
    return np.ascontiguousarray(image[::-1]), np.ascontiguousarray(mask[::-1])


def motion_blur(image, size, angle):
    kernel = np.zeros((size, size), dtype=np.float32)
    kernel[size // 2, :] = 1.0
    matrix = cv2.getRotationMatrix2D((size / 2 - 0.5, size / 2 - 0.5), angle, 1.0)
    kernel = cv2.warpAffine(kernel, matrix, (size, size))
    kernel /= max(kernel.sum(), 1e-8)
    return cv2.filter2D(image, -1, kernel, borderType=cv2.BORDER_REFLECT)


def color_jitter(image, brightness, contrast, saturation):
    out = image * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=-1, keepdims=True)
    out = (out - gray) * saturation + gray
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _aug_rotate(image, mask, policy, rng):
    return rotate(image, mask, rng.uniform(-policy.max_rotation, policy.max_rotation))


def _aug_blur(image, mask, policy, rng):
    lo, hi = policy.blur_kernel
    size = int(rng.choice(np.arange(lo, hi + 1, 2)))
    return motion_blur(image, size, rng.uniform(0, 180)), mask


def _aug_jitter(image, mask, policy, rng):
    j = policy.jitter
    factors = rng.uniform(1 - j, 1 + j, size=3)
    return color_jitter(image, *factors), mask


_AUGMENTATIONS = {
    "rotate": _aug_rotate,
    "hflip": lambda im, m, p, rng: hflip(im, m),
    "vflip": lambda im, m, p, rng: vflip(im, m),
    "motion_blur": _aug_blur,
    "color_jitter": _aug_jitter,
}


def augment(image, mask, policy: AugmentationPolicy, rng_seed):
    """Apply a random non-empty subset of the enabled ops with probability
    ``policy.apply_probability``.

    ``rng_seed`` is an int, a sequence of ints (e.g. ``(seed, entry, epoch)``)
    or a ``numpy.random.Generator``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ops = policy.operations
    if not ops or rng.random() >= policy.apply_probability:
        return image, mask
    chosen = np.zeros(len(ops), dtype=bool)
    while not chosen.any():
        chosen = rng.random(len(ops)) < 0.5
    image = np.asarray(image, dtype=np.float32)
    for op, use in zip(ops, chosen):
        if use:
            image, mask = _AUGMENTATIONS[op](image, mask, policy, rng)
    return image, mask


class FolderDataset(torch.utils.data.Dataset):
    """Images and decoded masks behind a :class:`DatasetIndex`.

    Items are ``(image HxWx3 float32 in [0, 1], labels HxW uint8)``. With a
    policy set, ``set_epoch`` must be called so augmentation seeds follow
    ``(seed, entry, epoch)``.
    """

    def __init__(self, index: DatasetIndex, codec: MaskCodec | None = None,
                 policy: AugmentationPolicy | None = None, seed: int = 0, cache: bool = True):
        self.index = index
        self.codec = codec or MaskCodec()
        self.policy = policy
        self.seed = seed
        self.epoch = 0
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.index)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def label_counts(self):
        return self.index.label_counts()

    def raw(self, i):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        entry = self.index.entries[i]
        try:
            item = load_image(entry.image), load_mask(entry.mask, self.codec)
        except OSError as exc:
            raise OSError(f"failed to read {entry.image} / {entry.mask}: {exc}") from exc
        if self._cache is not None:
            self._cache[i] = item
        return item

    def __getitem__(self, i):
        image, mask = self.raw(i)
        if self.policy is not None:
            image, mask = augment(image, mask, self.policy, (self.seed, i, self.epoch))
        return image, mask


class ArrayDataset(torch.utils.data.Dataset):
    """In-memory images ``(N, H, W, 3)`` and label maps ``(N, H, W)``."""

    def __init__(self, images, labels, policy: AugmentationPolicy | None = None, seed: int = 0):
        self.images = images
        self.labels = labels
        self.policy = policy
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return len(self.images)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def label_counts(self):
        return np.stack([np.bincount(np.asarray(m).ravel(), minlength=4)[:4] for m in self.labels])

    def raw(self, i):
        return np.asarray(self.images[i], dtype=np.float32), np.asarray(self.labels[i], dtype=np.uint8)

    def __getitem__(self, i):
        image, mask = self.raw(i)
        if self.policy is not None:
            image, mask = augment(image, mask, self.policy, (self.seed, i, self.epoch))
        return image, mask


def resize_pair(image, mask, size):
    """Bilinear for the image, nearest neighbour for the mask."""
    image = cv2.resize(np.asarray(image, dtype=np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
    mask = None if mask is None else cv2.resize(np.asarray(mask, dtype=np.uint8), (size, size),
                                                interpolation=cv2.INTER_NEAREST)
    return image, mask


def to_tensor(image) -> torch.Tensor:
    """HxWx3 [0, 1] array -> normalised 3xHxW tensor."""
    image = (np.asarray(image, dtype=np.float32) - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def make_batch(entries, scale, allowed_scales=TRAIN_SCALES):
    """Stack ``(image, mask)`` pairs at ``scale x scale``.

    Returns ``(images (N, 3, s, s) float32, labels (N, s, s) int64)``; ``mask``
    may be None, in which case labels is None.
    """
    if allowed_scales is not None and scale not in allowed_scales:
        raise ConfigError(f"scale {scale} not in allowed set {tuple(allowed_scales)}")
    if scale % 32:
        raise ConfigError(f"scale {scale} is not divisible by 32")
    images, masks = [], []
    for image, mask in entries:
        image, mask = resize_pair(image, mask, scale)
        images.append(to_tensor(image))
        if mask is not None:
            masks.append(torch.from_numpy(mask.astype(np.int64)))
    labels = torch.stack(masks) if masks else None
    return torch.stack(images), labels
