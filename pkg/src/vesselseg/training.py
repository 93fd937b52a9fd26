"""Training loop: patch batches in, uncertainty-combined losses out, Adam
updates with the halving learning-rate schedule, CSV logging, and resumable
checkpoints.

The schedule counts "epochs" as optimization steps over sampled patch
batches by default (epoch_unit='step'); epoch_unit='full_pass' counts one
epoch per sweep of the training images instead.
"""

import csv
import hashlib
import math
import os
from dataclasses import dataclass, asdict, fields

import numpy as np
import torch

from .datasets import attach_weight_map, class_balance_weights, make_batch
from .network import NetworkSpec, build_network, spec_from_dict
from .uncertainty import (LossBreakdown, UncertaintyParams, combined_loss,
                          static_combined_loss)
from .weightmap import weighted_cross_entropy

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "lr", "l_main", "l_aux", "sigma_main", "sigma_aux", "combined")
LOSS_MODES = ("uncertainty", "static", "main_only")


@dataclass
class TrainConfig:
    dataset: str = "synthetic"
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    total_epochs: int = 20000
    lr_halving_period: int = 5000
    epoch_unit: str = "step"          # 'step' or 'full_pass'
    batch_size: int = 8
    patch_size: int = 128
    loss_mode: str = "uncertainty"    # 'uncertainty', 'static', 'main_only'
    lambda_aux: float = 1.0
    class_balance: bool = True
    use_weightmap: bool = True
    alpha: float = 5.0
    beta: float = 2.0
    ilc_mode: str = "target"
    grad_clip: float = 0.0
    eval_interval: int = 0
    augment: bool = True
    arbitrary_rotation: bool = False
    seed: int = 0
    num_stages: int = 4
    channels: tuple = (64, 128, 256, 512)
    convs_per_stage: int = 2
    kernel_size: int = 3
    downsample: int = 2
    target_stage: int = 1
    preeminent_layer: int = 2
    padding_mode: str = "zeros"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self):
        if self.lr <= 0 or self.total_epochs <= 0 or self.lr_halving_period <= 0:
            raise ValueError("lr, total_epochs, and lr_halving_period must be positive")
        if self.batch_size <= 0 or self.patch_size <= 0:
            raise ValueError("batch_size and patch_size must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.loss_mode == "static" and self.lambda_aux <= 0:
            raise ValueError("static loss mode needs a positive lambda_aux")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.epoch_unit not in ("step", "full_pass"):
            raise ValueError("epoch_unit must be 'step' or 'full_pass'")
        self.network_spec().validate()

    def network_spec(self):
        return NetworkSpec(
            num_stages=self.num_stages, channels=self.channels,
            convs_per_stage=self.convs_per_stage, kernel_size=self.kernel_size,
            downsample=self.downsample, target_stage=self.target_stage,
            preeminent_layer=self.preeminent_layer, ilc_mode=self.ilc_mode,
            padding_mode=self.padding_mode)

    def hash(self):
        text = ";".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha1(text.encode()).hexdigest()[:12]


def _parse_value(field_type, raw):
    raw = raw.strip()
    if field_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    if field_type is tuple:
        return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(","))
    return raw


def apply_overrides(config, overrides):
    """Apply key=value overrides in place; unknown keys are an error."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, raw in overrides.items():
        if key not in by_name:
            raise KeyError(f"unknown config key: {key}")
        setattr(config, key, _parse_value(type(getattr(config, key)), str(raw)))
    return config


def load_config(path):
    """Read a flat key=value config file ('#' starts a comment)."""
    overrides = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected KEY=VALUE, got {line!r}")
            key, value = line.split("=", 1)
            overrides[key.strip()] = value
    return apply_overrides(TrainConfig(), overrides)


def save_config(config, path):
    with open(path, "w") as fh:
        for key, value in asdict(config).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key}={value}\n")


def lr_at(epoch, config):
    """Learning rate at an epoch: halved every lr_halving_period epochs."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    return config.lr * 0.5 ** (epoch // config.lr_halving_period)


def make_optimizer(model, uparams, config):
    params = list(model.parameters())
    if config.loss_mode == "uncertainty":
        params += list(uparams.parameters())
    return torch.optim.Adam(params, lr=config.lr,
                            betas=(config.beta1, config.beta2), eps=config.eps)


def train_step(model, uparams, optimizer, batch, config):
    """One optimization step; returns the loss breakdown for logging."""
    model.train()
    out = model(batch.images)
    cw = batch.class_weights
    l_main = weighted_cross_entropy(out.y_main, batch.labels, None, cw)
    l_aux = weighted_cross_entropy(
        out.y_aux, batch.labels,
        batch.weight_maps if config.use_weightmap else None, cw)

    if config.loss_mode == "uncertainty":
        breakdown = combined_loss(l_main, l_aux, uparams)
    elif config.loss_mode == "static":
        breakdown = LossBreakdown(float(l_main.detach()), float(l_aux.detach()),
                                  static_combined_loss(l_main, l_aux, config.lambda_aux),
                                  1.0, 1.0)
    else:  # main_only
        breakdown = LossBreakdown(float(l_main.detach()), float(l_aux.detach()),
                                  l_main, 1.0, 1.0)

    total = breakdown.combined
    if not torch.isfinite(total):
        raise RuntimeError(
            "non-finite loss: "
            f"l_main={breakdown.l_main}, l_aux={breakdown.l_aux}, "
            f"sigma_main={breakdown.sigma_main}, sigma_aux={breakdown.sigma_aux}")
    optimizer.zero_grad()
    total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in optimizer.param_groups for p in g["params"]], config.grad_clip)
    optimizer.step()
    breakdown.combined = float(total.detach())
    return breakdown


def save_checkpoint(path, model, uparams, optimizer, epoch, config, rng):
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "network_spec": asdict(model.spec),
        "model_state": model.state_dict(),
        "uncertainty_state": uparams.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state,
        "config": asdict(config),
        "config_hash": config.hash(),
    }, path)


def load_checkpoint(path):
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version}")
    return state


def restore(state, config=None):
    """Rebuild (model, uparams, optimizer, rng, epoch) from a checkpoint."""
    if config is None:
        cfg_dict = dict(state["config"])
        cfg_dict["channels"] = tuple(cfg_dict["channels"])
        config = TrainConfig(**cfg_dict)
    spec = spec_from_dict(state["network_spec"])
    model = build_network(spec, config.seed)
    model.load_state_dict(state["model_state"])
    uparams = UncertaintyParams()
    uparams.load_state_dict(state["uncertainty_state"])
    optimizer = make_optimizer(model, uparams, config)
    optimizer.load_state_dict(state["optimizer_state"])
    torch.set_rng_state(state["torch_rng"])
    rng = np.random.default_rng()
    rng.bit_generator.state = state["numpy_rng"]
    return model, uparams, optimizer, rng, state["epoch"], config


def fit(train_samples, test_samples, config, out_dir, resume=False,
        progress=None):
    """Run the full schedule; returns (final checkpoint path, log rows).

    Writes training_log.csv, checkpoint_last.pt, and (when eval_interval is
    set and test samples are given) checkpoint_best.pt with the best pooled
    test AUC, into out_dir.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.txt"))

    if config.use_weightmap:
        for s in train_samples:
            if s.weight_map is None:
                attach_weight_map(s, config.alpha, config.beta)
    class_weights = (class_balance_weights([s.label for s in train_samples])
                     if config.class_balance else (1.0, 1.0))

    last_path = os.path.join(out_dir, "checkpoint_last.pt")
    best_path = os.path.join(out_dir, "checkpoint_best.pt")
    log_path = os.path.join(out_dir, "training_log.csv")

    if resume and os.path.exists(last_path):
        state = load_checkpoint(last_path)
        model, uparams, optimizer, rng, start_step, config = restore(state, config)
        log_mode = "a"
    else:
        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        model = build_network(config.network_spec(), config.seed)
        uparams = UncertaintyParams()
        optimizer = make_optimizer(model, uparams, config)
        start_step = 0
        log_mode = "w"

    steps_per_pass = max(1, math.ceil(len(train_samples) / config.batch_size))
    total_steps = (config.total_epochs if config.epoch_unit == "step"
                   else config.total_epochs * steps_per_pass)

    best_auc = -1.0
    rows = []
    with open(log_path, log_mode, newline="") as fh:
        writer = csv.writer(fh)
        if log_mode == "w":
            writer.writerow(LOG_COLUMNS)
        for step in range(start_step, total_steps):
            epoch = step if config.epoch_unit == "step" else step // steps_per_pass
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = make_batch(train_samples, config.batch_size, config.augment,
                               rng, config.patch_size, class_weights,
                               config.arbitrary_rotation)
            bd = train_step(model, uparams, optimizer, batch, config)
            row = (step, lr, bd.l_main, bd.l_aux, bd.sigma_main, bd.sigma_aux,
                   bd.combined)
            writer.writerow(row)
            rows.append(row)
            if progress is not None:
                progress(step, bd)

            if (config.eval_interval > 0 and test_samples
                    and (step + 1) % config.eval_interval == 0):
                auc = _pooled_auc(model, test_samples, config)
                if auc > best_auc:
                    best_auc = auc
                    save_checkpoint(best_path, model, uparams, optimizer,
                                    step + 1, config, rng)

    save_checkpoint(last_path, model, uparams, optimizer, total_steps, config, rng)
    return last_path, rows


def _pooled_auc(model, samples, config):
    from .evaluation import infer_full_image, pooled_metrics
    items = [(infer_full_image(model, s, config.patch_size), s.label, s.fov)
             for s in samples]
    return pooled_metrics(items).auc
