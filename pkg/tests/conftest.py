import numpy as np
import pytest
from PIL import Image

from vesselseg.network import NetworkSpec


@pytest.fixture
def tiny_spec():
    """Small network for fast structural tests."""
    return NetworkSpec(channels=(8, 16, 32, 64))


def random_mask(rng, shape=(32, 32), p=0.2):
    """Random binary mask guaranteed to contain at least one vessel pixel."""
    mask = (rng.random(shape) < p).astype(np.uint8)
    if not mask.any():
        mask[shape[0] // 2, shape[1] // 2] = 1
    return mask


def _save(path, arr, mode="L"):
    Image.fromarray(arr, mode=mode).save(path)


def make_fake_drive(root, size=64, n_train=3, n_test=2):
    """DRIVE-shaped directory tree with small random images."""
    rng = np.random.default_rng(7)
    for subset, count, offset in (("training", n_train, 21), ("test", n_test, 1)):
        (root / subset / "images").mkdir(parents=True)
        (root / subset / "1st_manual").mkdir(parents=True)
        (root / subset / "mask").mkdir(parents=True)
        for i in range(count):
            num = f"{offset + i:02d}"
            img = (rng.random((size, size, 3)) * 255).astype(np.uint8)
            _save(root / subset / "images" / f"{num}_{subset}.tif", img, "RGB")
            lab = (random_mask(rng, (size, size), 0.15) * 255).astype(np.uint8)
            _save(root / subset / "1st_manual" / f"{num}_manual1.gif", lab)
            fov = np.zeros((size, size), dtype=np.uint8)
            fov[4:-4, 4:-4] = 255
            _save(root / subset / "mask" / f"{num}_{subset}_mask.gif", fov)
    return root


def make_fake_chase(root, size=64, n=6):
    rng = np.random.default_rng(8)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        side = "LR"[i % 2]
        stem = f"Image_{i // 2 + 1:02d}{side}"
        img = (rng.random((size, size, 3)) * 255).astype(np.uint8)
        _save(root / f"{stem}.jpg", img, "RGB")
        lab = (random_mask(rng, (size, size), 0.15) * 255).astype(np.uint8)
        _save(root / f"{stem}_1stHO.png", lab)
    return root


def make_fake_stare(root, size=64, n=8):
    rng = np.random.default_rng(9)
    (root / "stare-images").mkdir(parents=True)
    (root / "labels-ah").mkdir(parents=True)
    for i in range(n):
        stem = f"im{i + 1:04d}"
        img = (rng.random((size, size, 3)) * 255).astype(np.uint8)
        _save(root / "stare-images" / f"{stem}.ppm", img, "RGB")
        lab = (random_mask(rng, (size, size), 0.15) * 255).astype(np.uint8)
        _save(root / "labels-ah" / f"{stem}.ah.ppm", lab)
    return root
