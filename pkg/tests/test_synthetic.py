import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from neounet.data import build_index, load_mask
from neounet.synthetic import SyntheticSpec, generate, oracle_dice_loss, render_sample


def digest(root):
    h = hashlib.sha256()
    for sub in ("images", "masks"):
        for p in sorted((root / sub).iterdir()):
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(image_size=64, num_images=4, seed=9)
    a = generate(spec, tmp_path / "a")
    b = generate(spec, tmp_path / "b")
    assert digest(a) == digest(b)
    c = generate(SyntheticSpec(image_size=64, num_images=4, seed=10), tmp_path / "c")
    assert digest(a) != digest(c)


def test_no_unknown_when_mix_excludes_it(clean_dataset):
    for p in (clean_dataset / "masks").iterdir():
        rgb = np.asarray(Image.open(p).convert("RGB"))
        assert not np.all(rgb == (255, 255, 0), axis=-1).any()


def test_manifest_counts_match_decoded_masks(small_dataset):
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    for entry in manifest["entries"]:
        labels = load_mask(small_dataset / "masks" / entry["mask"].split("/")[-1])
        assert np.bincount(labels.ravel(), minlength=4).tolist() == entry["counts"]
    fresh = build_index(small_dataset, use_cache=False)
    assert [e.counts for e in fresh.entries] == [e["counts"] for e in manifest["entries"]]


def test_all_labels_present_in_small_dataset(small_dataset):
    totals = np.sum([e.counts for e in build_index(small_dataset).entries], axis=0)
    assert all(totals > 0)


def test_empty_probability_one_gives_background_only():
    spec = SyntheticSpec(image_size=32, empty_probability=1.0)
    _, labels = render_sample(spec, np.random.default_rng(0))
    assert labels.max() == 0


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(image_size=16)
    with pytest.raises(ValueError):
        SyntheticSpec(class_mix=(0, 0, 0))


def test_dice_oracle_hand_value():
    # 2*1 + 1 over (2 + 1 + 1)
    assert oracle_dice_loss([1, 1, 0], [1, 0, 0], 1.0) == pytest.approx(1 - 3 / 4)
