"""Fundus dataset ingestion, deterministic splits, patch sampling, and class
balance statistics.

Dataset roots follow the published layouts:
  drive      root/training/{images,1st_manual,mask}, root/test/{...}
  chase_db1  flat directory, labels named *_1stHO.png
  stare      root/stare-images/, root/labels-ah/

Images are resized per dataset (bilinear) and labels with nearest-neighbour
then re-binarized, so label values stay in {0, 1}.
"""

import glob
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .weightmap import compute_weight_map

DATASET_SIZES = {"drive": 512, "chase_db1": 768, "stare": 592}


@dataclass
class FundusSample:
    id: str
    image: np.ndarray                    # H x W x 3 float32 in [0, 1]
    label: np.ndarray                    # H x W uint8 in {0, 1}
    fov: Optional[np.ndarray] = None     # H x W uint8 in {0, 1}
    subset: Optional[str] = None         # 'training' / 'test' where published
    weight_map: Optional[np.ndarray] = None


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list
    test_ids: list


@dataclass
class PatchBatch:
    images: torch.Tensor                 # B x 3 x P x P float32
    labels: torch.Tensor                 # B x P x P int64
    weight_maps: torch.Tensor            # B x P x P float32
    class_weights: tuple = (1.0, 1.0)


def _read_image(path, size):
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.Resampling.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0)


def _read_mask(path, size):
    img = Image.open(path).convert("L")
    if img.size != (size, size):
        img = img.resize((size, size), Image.Resampling.NEAREST)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return (arr > 0.5).astype(np.uint8)


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing dataset file or directory: {path}")
    return path


def _glob_one(pattern):
    hits = sorted(glob.glob(pattern))
    if not hits:
        raise FileNotFoundError(f"no file matches {pattern}")
    return hits[0]


def _load_drive(root, size):
    samples = []
    for subset in ("training", "test"):
        img_dir = _require(os.path.join(root, subset, "images"))
        paths = sorted(glob.glob(os.path.join(img_dir, "*.*")))
        if not paths:
            raise FileNotFoundError(f"no images found under {img_dir}")
        for path in paths:
            stem = os.path.splitext(os.path.basename(path))[0]  # e.g. 21_training
            num = stem.split("_")[0]
            label_path = _glob_one(os.path.join(root, subset, "1st_manual",
                                                f"{num}_manual1.*"))
            fov = None
            fov_pattern = os.path.join(root, subset, "mask", f"{num}_{subset}_mask.*")
            fov_hits = sorted(glob.glob(fov_pattern))
            if fov_hits:
                fov = _read_mask(fov_hits[0], size)
            samples.append(FundusSample(
                id=stem, image=_read_image(path, size),
                label=_read_mask(label_path, size), fov=fov, subset=subset))
    return samples


def _load_chase(root, size):
    labels = sorted(glob.glob(os.path.join(root, "*_1stHO.png")))
    if not labels:
        raise FileNotFoundError(f"no *_1stHO.png labels found under {root}")
    samples = []
    for label_path in labels:
        stem = os.path.basename(label_path)[: -len("_1stHO.png")]
        img_path = _glob_one(os.path.join(root, stem + ".*"))
        samples.append(FundusSample(
            id=stem, image=_read_image(img_path, size),
            label=_read_mask(label_path, size)))
    return samples


def _load_stare(root, size):
    img_dir = _require(os.path.join(root, "stare-images"))
    label_dir = _require(os.path.join(root, "labels-ah"))
    paths = sorted(glob.glob(os.path.join(img_dir, "*.*")))
    if not paths:
        raise FileNotFoundError(f"no images found under {img_dir}")
    samples = []
    for path in paths:
        stem = os.path.basename(path).split(".")[0]  # e.g. im0001
        label_path = _glob_one(os.path.join(label_dir, stem + ".ah.*"))
        fov = None
        fov_dir = os.path.join(root, "masks")
        if os.path.isdir(fov_dir):
            hits = sorted(glob.glob(os.path.join(fov_dir, stem + ".*")))
            if hits:
                fov = _read_mask(hits[0], size)
        samples.append(FundusSample(
            id=stem, image=_read_image(path, size),
            label=_read_mask(label_path, size), fov=fov))
    return samples


def load_dataset(name, root):
    """Load one of the supported datasets, resized to its working resolution."""
    name = name.lower()
    if name not in DATASET_SIZES:
        raise ValueError(f"unknown dataset '{name}'; choose from {sorted(DATASET_SIZES)}")
    _require(root)
    size = DATASET_SIZES[name]
    loader = {"drive": _load_drive, "chase_db1": _load_chase, "stare": _load_stare}[name]
    return loader(root, size)


def make_splits(name, samples, seed=0):
    """Deterministic train/test folds.

    drive uses its published 20/20 partition; chase_db1 and stare get a
    4-fold cross-validation shuffled by the seed, with every sample in
    exactly one fold's test set.
    """
    if not samples:
        raise ValueError("no samples to split")
    name = name.lower()
    ids = [s.id for s in samples]
    if name == "drive":
        train = [s.id for s in samples if s.subset == "training"]
        test = [s.id for s in samples if s.subset == "test"]
        if not train or not test:
            raise ValueError("drive samples missing the published training/test tags")
        return [FoldSplit(0, train, test)]
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(perm)), 4)
    folds = []
    for k, chunk in enumerate(chunks):
        test = [perm[i] for i in chunk]
        train = [i for i in perm if i not in test]
        folds.append(FoldSplit(k, train, test))
    return folds


def split_samples(samples, fold):
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in fold.train_ids], [by_id[i] for i in fold.test_ids]


def flip_rotate(arr, hflip, vflip, quarter_turns):
    """Apply a horizontal/vertical flip and a multiple-of-90-degree rotation.

    Works on (H, W) and (H, W, C) arrays; the same arguments applied to an
    image, its label, and its weight map keep them aligned.
    """
    out = arr
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    if quarter_turns % 4:
        out = np.rot90(out, k=quarter_turns % 4, axes=(0, 1))
    return np.ascontiguousarray(out)


def attach_weight_map(sample, alpha=5.0, beta=2.0):
    """Compute the sample's full-resolution weight map once, for later cropping."""
    sample.weight_map = compute_weight_map(sample.label, alpha, beta).astype(np.float32)
    return sample


def sample_patches(sample, count, augment, rng, patch_size=128,
                   class_weights=(1.0, 1.0), arbitrary_rotation=False):
    """Crop `count` aligned image/label/weight-map patches at random corners.

    With augment on, each patch independently gets a random horizontal flip,
    vertical flip, and rotation by a multiple of 90 degrees (the same
    transform for image, label, and weight map). arbitrary_rotation enables
    free-angle rotation with nearest-neighbour label resampling.
    """
    h, w = sample.label.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"sample {sample.id}: {h}x{w} smaller than patch {patch_size}")
    wm = sample.weight_map
    if wm is None:
        wm = np.ones_like(sample.label, dtype=np.float32)

    images, labels, weights = [], [], []
    for _ in range(count):
        r = int(rng.integers(0, h - patch_size + 1))
        c = int(rng.integers(0, w - patch_size + 1))
        img = sample.image[r:r + patch_size, c:c + patch_size]
        lab = sample.label[r:r + patch_size, c:c + patch_size]
        wmp = wm[r:r + patch_size, c:c + patch_size]
        if augment:
            hf, vf = bool(rng.integers(2)), bool(rng.integers(2))
            k = int(rng.integers(4))
            img = flip_rotate(img, hf, vf, k)
            lab = flip_rotate(lab, hf, vf, k)
            wmp = flip_rotate(wmp, hf, vf, k)
            if arbitrary_rotation:
                from scipy import ndimage as ndi
                angle = float(rng.uniform(0, 360))
                img = ndi.rotate(img, angle, reshape=False, order=1, mode="reflect")
                lab = ndi.rotate(lab, angle, reshape=False, order=0, mode="reflect")
                wmp = ndi.rotate(wmp, angle, reshape=False, order=0, mode="reflect")
        images.append(np.transpose(img, (2, 0, 1)))
        labels.append(lab)
        weights.append(wmp)

    return PatchBatch(
        images=torch.from_numpy(np.stack(images).astype(np.float32)),
        labels=torch.from_numpy(np.stack(labels).astype(np.int64)),
        weight_maps=torch.from_numpy(np.stack(weights).astype(np.float32)),
        class_weights=tuple(float(x) for x in class_weights),
    )


def make_batch(samples, batch_size, augment, rng, patch_size=128,
               class_weights=(1.0, 1.0), arbitrary_rotation=False):
    """One training batch, each patch drawn from a randomly chosen sample."""
    parts = []
    for _ in range(batch_size):
        s = samples[int(rng.integers(len(samples)))]
        parts.append(sample_patches(s, 1, augment, rng, patch_size,
                                    class_weights, arbitrary_rotation))
    return PatchBatch(
        images=torch.cat([p.images for p in parts]),
        labels=torch.cat([p.labels for p in parts]),
        weight_maps=torch.cat([p.weight_maps for p in parts]),
        class_weights=tuple(float(x) for x in class_weights),
    )


def class_balance_weights(labels):
    """Per-class weights inversely proportional to pixel frequency, mean 1."""
    if not len(labels):
        raise ValueError("no labels given")
    counts = np.zeros(2, dtype=np.int64)
    for label in labels:
        arr = np.asarray(label)
        counts[1] += int((arr > 0).sum())
        counts[0] += int((arr == 0).sum())
    if (counts == 0).any():
        missing = int(np.where(counts == 0)[0][0])
        raise ValueError(f"class {missing} has no pixels across the given labels")
    inv = counts.sum() / counts.astype(np.float64)
    inv /= inv.mean()
    return tuple(inv)
