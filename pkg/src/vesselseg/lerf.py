"""Layer-wise receptive fields, vessel width statistics, and placement of the
auxiliary head.

The layer whose receptive field is closest to the average vessel width (the
"preeminent" layer) hosts the auxiliary output, and its encoder stage picks
the decoder target stage that receives the localization connections.

Receptive fields use the standard recursion
    rf_l = rf_{l-1} + (k_l - 1) * jump_{l-1},   jump_l = jump_{l-1} * s_l
with rf_0 = jump_0 = 1. A gradient-footprint measurement is provided as an
independent diagnostic of the same quantity.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage
from skimage.morphology import skeletonize


@dataclass(frozen=True)
class LayerSpec:
    """One encoder layer, as far as receptive-field math is concerned."""
    kind: str            # 'conv' or 'pool'
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class LayerRF:
    layer_index: int     # 1-based position in the encoder
    kind: str
    kernel: int
    stride: int
    rf: int              # receptive-field side length, in input pixels
    jump: int            # cumulative stride after this layer
    stage: int           # 1-based encoder stage (pools open the next stage)


@dataclass
class VesselWidthStats:
    mean_width: float
    histogram: dict      # rounded width -> skeleton pixel count
    n_skeleton_pixels: int


def receptive_fields(layers):
    """Receptive field and cumulative stride after each encoder layer."""
    if not layers:
        raise ValueError("empty layer spec")
    rf, jump, stage = 1, 1, 1
    out = []
    for i, layer in enumerate(layers, start=1):
        if layer.kernel < 1 or layer.stride < 1:
            raise ValueError(f"layer {i}: kernel and stride must be >= 1")
        rf = rf + (layer.kernel - 1) * jump
        jump = jump * layer.stride
        if layer.kind == "pool":
            stage += 1
        out.append(LayerRF(i, layer.kind, layer.kernel, layer.stride, rf, jump, stage))
    return out


def gradient_rf_footprint(layers, seed=0):
    """Measure the receptive field empirically from gradient support.

    Builds a single-channel network from the layer spec with all-positive
    conv weights (and average pooling in place of max), backprops from one
    interior output pixel, and returns the side length of the bounding box
    of nonzero input gradients. With positive weights and no activation,
    every input inside the theoretical window contributes, so this equals
    the recursion's rf. Diagnostic only.
    """
    rfs = receptive_fields(layers)
    rf, jump = rfs[-1].rf, rfs[-1].jump

    torch.manual_seed(seed)
    ops = []
    for layer in layers:
        if layer.kind == "pool":
            ops.append(nn.AvgPool2d(layer.kernel, stride=layer.stride))
        else:
            conv = nn.Conv2d(1, 1, layer.kernel, stride=layer.stride, bias=False)
            with torch.no_grad():
                conv.weight.copy_(conv.weight.abs() + 0.1)
            ops.append(conv)
    net = nn.Sequential(*ops)

    n = rf + 4 * jump
    x = torch.ones(1, 1, n, n, requires_grad=True)
    y = net(x)
    out_idx = 1  # window [jump, jump + rf) fits inside the input
    y[0, 0, out_idx, out_idx].backward()
    footprint = x.grad[0, 0].abs() > 1e-12
    rows = int(footprint.any(dim=1).sum())
    cols = int(footprint.any(dim=0).sum())
    if rows != cols:
        raise RuntimeError(f"non-square gradient footprint {rows}x{cols}")
    return rows


def vessel_width_stats(labels):
    """Skeleton-based width statistics over a set of binary vessel labels.

    Each label is thinned to its skeleton; the width at a skeleton pixel is
    2*d - 1 where d is the Euclidean distance to the nearest background
    pixel (the diameter, in pixels, of the inscribed disk centred there).
    Labels without vessel pixels are skipped with a warning.
    """
    widths = []
    for i, label in enumerate(labels):
        mask = np.asarray(label) > 0
        if not mask.any():
            warnings.warn(f"label {i} has no vessel pixels; skipped")
            continue
        if mask.all():
            warnings.warn(f"label {i} has no background; width unbounded, skipped")
            continue
        skel = skeletonize(mask)
        if not skel.any():
            continue
        d_bg = ndimage.distance_transform_edt(mask)
        widths.append(2.0 * d_bg[skel] - 1.0)
    if not widths:
        raise ValueError("no usable labels: every mask was empty")
    widths = np.concatenate(widths)
    rounded = np.rint(widths).astype(int)
    hist = {int(w): int(c) for w, c in zip(*np.unique(rounded, return_counts=True))}
    return VesselWidthStats(
        mean_width=float(widths.mean()),
        histogram=hist,
        n_skeleton_pixels=int(widths.size),
    )


def vessel_pixel_widths(mask):
    """Width assigned to every vessel pixel: the skeleton width (2*d - 1)
    of its nearest skeleton pixel. Returns an H x W array, zero off-vessel."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise ValueError("mask has no vessel pixels")
    skel = skeletonize(mask)
    if not skel.any():
        raise ValueError("skeleton is empty")
    d_bg = ndimage.distance_transform_edt(mask)
    skel_widths = np.zeros(mask.shape)
    skel_widths[skel] = 2.0 * d_bg[skel] - 1.0
    _, (ri, ci) = ndimage.distance_transform_edt(~skel, return_indices=True)
    widths = skel_widths[ri, ci]
    widths[~mask] = 0.0
    return widths


def select_preeminent_layer(rfs, stats):
    """Layer whose receptive field best matches the mean vessel width.

    Ties break towards the deeper layer. Returns (layer_index, stage), both
    1-based.
    """
    if not rfs:
        raise ValueError("empty receptive-field table")
    target = stats.mean_width if hasattr(stats, "mean_width") else float(stats)
    best = None
    for entry in rfs:
        dist = abs(entry.rf - target)
        if best is None or dist <= best[0]:
            best = (dist, entry)
    return best[1].layer_index, best[1].stage


def target_stage(preeminent_stage, num_stages):
    """Decoder stage receiving the localization connections.

    Decoder stages mirror encoder stages, so the target is the preeminent
    encoder stage itself.
    """
    if not 1 <= preeminent_stage <= num_stages:
        raise ValueError(
            f"preeminent stage {preeminent_stage} outside [1, {num_stages}]")
    return preeminent_stage
