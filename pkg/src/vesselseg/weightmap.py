"""Vessel weight maps from the label distance transform, and the weighted
cross-entropy losses built on them.

The weight map gives every pixel a multiplier alpha * exp(-d^2 / beta^2),
where d is the Euclidean distance to the nearest vessel pixel. Vessel pixels
and the narrow background corridors between vessels get the largest weights,
which is what penalizes breakage of thin structures.
"""

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


def distance_transform(mask):
    """Exact Euclidean distance from every pixel to the nearest vessel pixel.

    Args:
        mask: H x W binary array, nonzero = vessel.

    Returns:
        H x W float64 array, zero exactly on vessel pixels.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    fg = mask > 0
    if not fg.any():
        raise ValueError("mask contains no vessel pixels; distance undefined")
    # distance_transform_edt measures distance to the nearest zero, so feed it
    # the inverted mask: vessels become the zeros we measure towards.
    return ndimage.distance_transform_edt(~fg)


def compute_weight_map(mask, alpha=5.0, beta=2.0):
    """Pixel-wise loss multipliers alpha * exp(-d^2 / beta^2).

    The maximum, alpha, is attained exactly on vessel pixels (d = 0) and the
    weight decays monotonically with distance from the vessel tree.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = distance_transform(mask)
    return alpha * np.exp(-(d ** 2) / beta ** 2)


def weighted_cross_entropy(logits, target, pixel_weights=None, class_weights=None):
    """Mean over pixels of -w(p) * log softmax(logits)(p)[target(p)].

    The per-pixel weight w(p) is class_weights[target(p)] multiplied by
    pixel_weights(p) when a weight map is supplied, else the class weight
    alone (unit weight if neither is given).

    Args:
        logits: (C, H, W) or (B, C, H, W) raw scores, tensor or array.
        target: (H, W) or (B, H, W) integer class indices.
        pixel_weights: optional weight map matching target's shape.
        class_weights: optional length-C sequence.

    Returns:
        Scalar tensor, differentiable in logits.
    """
    logits = torch.as_tensor(logits)
    if not logits.dtype.is_floating_point:
        logits = logits.double()
    target = torch.as_tensor(np.asarray(target) if not torch.is_tensor(target) else target)
    target = target.long()

    squeeze_batch = logits.dim() == 3
    if squeeze_batch:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if logits.dim() != 4 or target.dim() != 3:
        raise ValueError("logits must be (C,H,W) or (B,C,H,W) with matching target")
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    n_classes = logits.shape[1]
    if int(target.max()) >= n_classes or int(target.min()) < 0:
        raise ValueError("target contains class indices outside [0, C)")

    log_p = F.log_softmax(logits, dim=1)
    picked = log_p.gather(1, target.unsqueeze(1)).squeeze(1)  # (B, H, W)

    weight = torch.ones_like(picked)
    if class_weights is not None:
        cw = torch.as_tensor(np.asarray(class_weights, dtype=np.float64)
                             if not torch.is_tensor(class_weights) else class_weights)
        cw = cw.to(picked.dtype)
        if cw.numel() != n_classes:
            raise ValueError("class_weights length must equal the class count")
        weight = weight * cw[target]
    if pixel_weights is not None:
        pw = torch.as_tensor(np.asarray(pixel_weights)
                             if not torch.is_tensor(pixel_weights) else pixel_weights)
        pw = pw.to(picked.dtype)
        if squeeze_batch and pw.dim() == 2:
            pw = pw.unsqueeze(0)
        if pw.shape != picked.shape:
            raise ValueError(
                f"pixel_weights shape {tuple(pw.shape)} does not match target")
        weight = weight * pw

    return -(weight * picked).mean()
