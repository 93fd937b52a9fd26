"""Procedural fundus-like data: bright curvilinear structures of known widths
on a noisy background. Used by the desk-scale end-to-end checks and demos,
where real retinal data may not be available.

Besides the binary label, the generator returns a per-pixel width map taken
from the stroke widths it drew, so tests can slice metrics by structure
width without re-estimating widths from the mask.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from .datasets import FundusSample


def _draw_structure(label, width_map, intensity, rng, width, size):
    """Stamp one random smooth curve of the given width onto the canvases.

    Brightness fades in and out along the curve (the label stays continuous),
    so segmenting a whole structure requires bridging its dim stretches.
    """
    margin = 8
    y = float(rng.uniform(margin, size - margin))
    x = float(rng.uniform(margin, size - margin))
    heading = float(rng.uniform(0, 2 * np.pi))
    n_steps = int(rng.integers(int(0.6 * size), int(1.6 * size)))
    step = 0.5
    curviness = float(rng.uniform(0.01, 0.08))
    base = float(np.clip(0.14 + 0.085 * width, 0.0, 0.75))
    fade_depth = float(rng.uniform(0.2, 0.5))
    fade_freq = float(rng.uniform(2 * np.pi / 300, 2 * np.pi / 80))
    fade_phase = float(rng.uniform(0, 2 * np.pi))

    # even widths center between pixel rows, odd widths on a pixel center
    off = 0.5 if width % 2 == 0 else 0.0
    rad2 = (width / 2.0) ** 2 - 1e-9
    reach = int(np.ceil(width / 2.0)) + 1

    for t in range(n_steps):
        heading += float(rng.normal(0, curviness))
        y += step * np.sin(heading)
        x += step * np.cos(heading)
        if not (1 <= y < size - 1 and 1 <= x < size - 1):
            break
        cy, cx = y + off, x + off
        yi, xi = int(round(cy)), int(round(cx))
        y0, y1 = max(0, yi - reach), min(size, yi + reach + 1)
        x0, x1 = max(0, xi - reach), min(size, xi + reach + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        hit = (yy - cy) ** 2 + (xx - cx) ** 2 < rad2
        label[y0:y1, x0:x1] |= hit
        np.maximum(width_map[y0:y1, x0:x1], hit * width,
                   out=width_map[y0:y1, x0:x1])
        fade = 1.0 - fade_depth * (0.5 + 0.5 * np.sin(fade_freq * t + fade_phase))
        np.maximum(intensity[y0:y1, x0:x1], hit * (base * fade),
                   out=intensity[y0:y1, x0:x1])


def synthetic_sample(rng, size=256, n_structures=None, sample_id="synthetic"):
    """One synthetic image/label pair plus the true per-pixel width map.

    Thin structures are drawn with lower contrast, mirroring how tiny
    vessels photograph, so that they are genuinely harder to segment.
    """
    if n_structures is None:
        n_structures = int(rng.integers(6, 11))
    label = np.zeros((size, size), dtype=bool)
    width_map = np.zeros((size, size), dtype=np.float32)
    intensity = np.zeros((size, size), dtype=np.float32)

    widths = list(rng.integers(1, 8, size=n_structures))
    widths += [1, 2, 3]  # guarantee a tiny-structure population
    for w in widths:
        _draw_structure(label, width_map, intensity, rng, int(w), size)

    background = 0.15 + 0.10 * gaussian_filter(
        rng.normal(0, 1, (size, size)).astype(np.float32), 16)
    gray = background + gaussian_filter(intensity, 0.6)
    gray = gray + rng.normal(0, 0.07, (size, size)).astype(np.float32)
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)

    sample = FundusSample(
        id=sample_id,
        image=np.repeat(gray[:, :, None], 3, axis=2),
        label=label.astype(np.uint8),
    )
    return sample, width_map


def make_synthetic_dataset(n, seed=0, size=256):
    """n samples and their width maps, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    samples, width_maps = [], []
    for i in range(n):
        s, wm = synthetic_sample(rng, size=size, sample_id=f"synthetic_{i:03d}")
        samples.append(s)
        width_maps.append(wm)
    return samples, width_maps
