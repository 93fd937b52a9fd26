"""Pixel-level evaluation: ROC AUC, accuracy, specificity, sensitivity;
sliding-window full-image inference; probability-difference maps; and the
ablation matrix harness.

AUC is the trapezoidal area under the ROC curve over all unique score
thresholds, which (with ties handled by the diagonal segments the trapezoid
induces) equals the pairwise-ranking statistic.
"""

import csv
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from PIL import Image


@dataclass
class MetricsReport:
    auc: float
    acc: float
    spe: float
    sen: float
    threshold: float = 0.5
    fov_restricted: bool = False
    dataset: str = ""
    config_hash: str = ""
    n_pixels: int = 0

    def row(self):
        return [f"{100 * v:.2f}" for v in (self.auc, self.acc, self.spe, self.sen)]


@dataclass
class AblationRow:
    uncert: str          # 'learned' or the static lambda setting
    wt_map: bool
    ilcs: str            # 'none', 'target', or 'all_shared'
    metrics: Optional[MetricsReport]
    error: str = ""


def roc_auc(scores, labels):
    """Trapezoidal area under the ROC curve over unique score thresholds."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: only one class present")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    # cumulative true/false positives at each threshold boundary
    tps = np.cumsum(sorted_labels)
    fps = np.cumsum(~sorted_labels)
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.r_[distinct, sorted_scores.size - 1]
    tpr = np.r_[0.0, tps[idx] / n_pos]
    fpr = np.r_[0.0, fps[idx] / n_neg]
    return float(np.trapezoid(tpr, fpr))


def compute_metrics(probs, label, fov=None, threshold=0.5, fov_restricted=None,
                    dataset="", config_hash=""):
    """Confusion-matrix metrics at the threshold plus ROC AUC.

    Pixels outside the field-of-view mask are excluded when fov_restricted
    (defaults to True whenever a fov mask is supplied).
    """
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if probs.shape != label.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs label {label.shape}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if fov_restricted is None:
        fov_restricted = fov is not None
    if fov_restricted and fov is not None:
        fov = np.asarray(fov)
        if fov.shape != label.shape:
            raise ValueError("fov shape does not match label")
        include = fov > 0
    else:
        include = np.ones(label.shape, dtype=bool)
        fov_restricted = False

    p = probs[include]
    y = label[include] > 0
    auc = roc_auc(p, y)
    pred = p > threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return MetricsReport(
        auc=auc,
        acc=(tp + tn) / (tp + tn + fp + fn),
        spe=tn / (tn + fp),
        sen=tp / (tp + fn),
        threshold=threshold,
        fov_restricted=fov_restricted,
        dataset=dataset,
        config_hash=config_hash,
        n_pixels=int(include.sum()),
    )


def pooled_metrics(items, threshold=0.5, fov_restricted=None, dataset="",
                   config_hash=""):
    """Metrics over the pooled pixels of (probs, label, fov) items."""
    all_p, all_y = [], []
    restricted = False
    for probs, label, fov in items:
        probs = np.asarray(probs, dtype=np.float64)
        label = np.asarray(label)
        use_fov = fov is not None if fov_restricted is None else fov_restricted
        if use_fov and fov is not None:
            include = np.asarray(fov) > 0
            restricted = True
        else:
            include = np.ones(label.shape, dtype=bool)
        all_p.append(probs[include])
        all_y.append((label > 0)[include])
    p = np.concatenate(all_p)
    y = np.concatenate(all_y)
    report = compute_metrics(p, y.astype(np.uint8), None, threshold,
                             fov_restricted=False, dataset=dataset,
                             config_hash=config_hash)
    report.fov_restricted = restricted
    return report


def infer_full_image(model, sample, patch_size=128, overlap=0.5):
    """Sliding-window vessel probabilities at the sample's resolution.

    Windows of patch_size with the given overlap are averaged; the last
    window in each axis is aligned to the border so the whole image is
    covered. Probability is the softmax vessel channel of the main output.
    """
    h, w = sample.label.shape
    if h < patch_size or w < patch_size:
        raise ValueError(
            f"sample {sample.id}: {h}x{w} smaller than the {patch_size} window")
    stride = max(1, int(round(patch_size * (1.0 - overlap))))
    starts_r = list(range(0, h - patch_size + 1, stride))
    starts_c = list(range(0, w - patch_size + 1, stride))
    if starts_r[-1] != h - patch_size:
        starts_r.append(h - patch_size)
    if starts_c[-1] != w - patch_size:
        starts_c.append(w - patch_size)

    image = np.transpose(sample.image, (2, 0, 1)).astype(np.float32)
    acc = np.zeros((h, w), dtype=np.float64)
    cover = np.zeros((h, w), dtype=np.float64)
    model.eval()
    with torch.no_grad():
        for r in starts_r:
            for c in starts_c:
                tile = torch.from_numpy(
                    image[None, :, r:r + patch_size, c:c + patch_size])
                out = model(tile)
                prob = torch.softmax(out.y_main, dim=1)[0, 1].numpy()
                acc[r:r + patch_size, c:c + patch_size] += prob
                cover[r:r + patch_size, c:c + patch_size] += 1.0
    return acc / cover


def probability_difference_map(probs_a, probs_b):
    """Signed per-pixel difference probs_a - probs_b."""
    a = np.asarray(probs_a, dtype=np.float64)
    b = np.asarray(probs_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def render_signed_map(diff, path=None):
    """Render a signed map with a blue-white-red colormap centred at zero."""
    diff = np.asarray(diff, dtype=np.float64)
    scale = np.abs(diff).max()
    norm = diff / scale if scale > 0 else np.zeros_like(diff)
    rgb = np.ones(diff.shape + (3,), dtype=np.float64)
    pos, neg = np.clip(norm, 0, 1), np.clip(-norm, 0, 1)
    rgb[..., 1] -= pos + neg        # green fades for either sign
    rgb[..., 2] -= pos              # positive -> red
    rgb[..., 0] -= neg              # negative -> blue
    img = Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8))
    if path is not None:
        img.save(path)
    return img


def render_probability_map(probs, path=None):
    img = Image.fromarray((np.clip(np.asarray(probs), 0, 1) * 255).astype(np.uint8))
    if path is not None:
        img.save(path)
    return img


def write_metrics_csv(path, per_image, pooled):
    """Per-image rows plus a pooled row, stable across reruns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "auc", "acc", "spe", "sen", "threshold",
                         "fov_restricted", "n_pixels"])
        for sample_id, rep in per_image:
            writer.writerow([sample_id, f"{rep.auc:.6f}", f"{rep.acc:.6f}",
                             f"{rep.spe:.6f}", f"{rep.sen:.6f}", rep.threshold,
                             rep.fov_restricted, rep.n_pixels])
        writer.writerow(["pooled", f"{pooled.auc:.6f}", f"{pooled.acc:.6f}",
                         f"{pooled.spe:.6f}", f"{pooled.sen:.6f}", pooled.threshold,
                         pooled.fov_restricted, pooled.n_pixels])


# The eight ablation configurations, in table order:
# (label, loss_mode, lambda, weight map?, ilc mode)
ABLATION_CONFIGS = (
    ("lambda=1", "static", 1.0, False, "none"),
    ("lambda=1", "static", 1.0, False, "target"),
    ("lambda=0.1", "static", 0.1, True, "target"),
    ("lambda=0.01", "static", 0.01, True, "target"),
    ("lambda=0.001", "static", 0.001, True, "target"),
    ("learned", "uncertainty", 1.0, True, "all_shared"),
    ("learned", "uncertainty", 1.0, False, "target"),
    ("learned", "uncertainty", 1.0, True, "target"),
)


def run_ablation(train_samples, test_samples, base_config, out_dir,
                 schedule_scale=1.0, progress=None):
    """Train and evaluate every ablation configuration.

    schedule_scale < 1 shrinks total_epochs (and the halving period with it)
    for desk-scale runs. Per-row failures are recorded and the remaining
    rows still run.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for label, loss_mode, lam, wt, ilc in ABLATION_CONFIGS:
        config = replace(
            base_config, loss_mode=loss_mode, lambda_aux=lam,
            use_weightmap=wt, ilc_mode=ilc,
            total_epochs=max(1, int(base_config.total_epochs * schedule_scale)),
            lr_halving_period=max(1, int(base_config.lr_halving_period * schedule_scale)),
        )
        row_dir = os.path.join(
            out_dir, f"{label.replace('=', '_')}_wt{int(wt)}_{ilc}")
        try:
            from .training import fit, load_checkpoint, restore
            ckpt_path, _ = fit(train_samples, test_samples, config, row_dir)
            model, *_ = restore(load_checkpoint(ckpt_path))
            items = [(infer_full_image(model, s, config.patch_size), s.label, s.fov)
                     for s in test_samples]
            rep = pooled_metrics(items, dataset=config.dataset,
                                 config_hash=config.hash())
            results.append(AblationRow(label, wt, ilc, rep))
        except Exception as exc:  # keep going; the row records its failure
            results.append(AblationRow(label, wt, ilc, None, error=str(exc)))
        if progress is not None:
            progress(results[-1])

    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["uncert", "wt_map", "ilcs", "auc", "acc", "spe", "sen",
                         "error"])
        for row in results:
            vals = row.metrics.row() if row.metrics else ["", "", "", ""]
            writer.writerow([row.uncert, int(row.wt_map), row.ilcs, *vals, row.error])
    return results
