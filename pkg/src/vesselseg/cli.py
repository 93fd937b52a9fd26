"""Single entry-point command line: prepare, train, eval, ablate, lerf,
weightmap-preview, and describe subcommands.

Every flag has a config-file equivalent (flat KEY=VALUE lines); flags win
over the file, and the resolved config is echoed into every output
directory. All randomness flows from the single seed. The prepared-data
cache directory defaults to ./cache and can be overridden with the
VESSELSEG_CACHE environment variable.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import datasets as ds
from . import evaluation as ev
from . import lerf as lerf_mod
from . import synthetic as syn
from . import training as tr
from . import weightmap as wm
from .network import build_network, count_parameters

DATASET_CHOICES = ("drive", "chase_db1", "stare", "synthetic")
SYNTHETIC_N = 16


def cache_dir():
    return os.environ.get("VESSELSEG_CACHE", os.path.join(os.getcwd(), "cache"))


def _parse_set_args(pairs, parser):
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            parser.error(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def resolve_config(args, parser):
    config = tr.load_config(args.config) if args.config else tr.TrainConfig()
    if getattr(args, "dataset", None):
        config.dataset = args.dataset
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    try:
        tr.apply_overrides(config, _parse_set_args(args.set, parser))
    except (KeyError, ValueError) as exc:
        parser.error(str(exc))
    if getattr(args, "reduced_schedule", False):
        config.total_epochs = max(1, config.total_epochs // 10)
        config.lr_halving_period = max(1, config.lr_halving_period // 10)
    return config


# -- prepared-data cache ----------------------------------------------------

def save_prepared(samples, splits, config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    has_fov = np.array([s.fov is not None for s in samples])
    blank = np.zeros_like(samples[0].label)
    np.savez_compressed(
        os.path.join(out_dir, "prepared.npz"),
        ids=np.array([s.id for s in samples]),
        subsets=np.array([s.subset or "" for s in samples]),
        images=np.stack([s.image for s in samples]),
        labels=np.stack([s.label for s in samples]),
        has_fov=has_fov,
        fovs=np.stack([s.fov if s.fov is not None else blank for s in samples]),
        weight_maps=np.stack([s.weight_map for s in samples]),
    )
    with open(os.path.join(out_dir, "splits.json"), "w") as fh:
        json.dump([{"fold_index": f.fold_index, "train_ids": list(f.train_ids),
                    "test_ids": list(f.test_ids)} for f in splits], fh, indent=1)
    tr.save_config(config, os.path.join(out_dir, "config.txt"))


def load_prepared(prep_dir):
    data = np.load(os.path.join(prep_dir, "prepared.npz"), allow_pickle=False)
    samples = []
    for i, sid in enumerate(data["ids"]):
        samples.append(ds.FundusSample(
            id=str(sid), image=data["images"][i], label=data["labels"][i],
            fov=data["fovs"][i] if data["has_fov"][i] else None,
            subset=str(data["subsets"][i]) or None,
            weight_map=data["weight_maps"][i]))
    with open(os.path.join(prep_dir, "splits.json")) as fh:
        splits = [ds.FoldSplit(d["fold_index"], d["train_ids"], d["test_ids"])
                  for d in json.load(fh)]
    return samples, splits


def get_samples_and_splits(config, root=None):
    """Prepared cache if present, else load (or generate) from scratch."""
    if config.dataset == "synthetic":
        samples, _ = syn.make_synthetic_dataset(SYNTHETIC_N, config.seed)
        for s in samples:
            ds.attach_weight_map(s, config.alpha, config.beta)
        n_test = max(1, SYNTHETIC_N // 4)
        split = ds.FoldSplit(0, [s.id for s in samples[:-n_test]],
                             [s.id for s in samples[-n_test:]])
        return samples, [split]
    prep_dir = os.path.join(cache_dir(), config.dataset)
    if os.path.exists(os.path.join(prep_dir, "prepared.npz")):
        return load_prepared(prep_dir)
    if root is None:
        raise FileNotFoundError(
            f"no prepared cache under {prep_dir} and no --root given; "
            "run `vesselseg prepare` first or pass --root")
    samples = ds.load_dataset(config.dataset, root)
    for s in samples:
        ds.attach_weight_map(s, config.alpha, config.beta)
    return samples, ds.make_splits(config.dataset, samples, config.seed)


def pick_fold(splits, fold_index):
    for f in splits:
        if f.fold_index == fold_index:
            return f
    raise ValueError(f"fold {fold_index} not found; have {[f.fold_index for f in splits]}")


# -- subcommands -------------------------------------------------------------

def cmd_prepare(args, parser):
    config = resolve_config(args, parser)
    if config.dataset == "synthetic":
        samples, splits = get_samples_and_splits(config)
    else:
        if not args.root:
            parser.error("prepare needs --root for real datasets")
        samples = ds.load_dataset(config.dataset, args.root)
        for s in samples:
            ds.attach_weight_map(s, config.alpha, config.beta)
        splits = ds.make_splits(config.dataset, samples, config.seed)
    out = args.out or os.path.join(cache_dir(), config.dataset)
    save_prepared(samples, splits, config, out)
    print(f"prepared {len(samples)} samples, {len(splits)} fold(s) -> {out}")
    return 0


def cmd_train(args, parser):
    config = resolve_config(args, parser)
    samples, splits = get_samples_and_splits(config, args.root)
    fold = pick_fold(splits, args.fold)
    train_samples, test_samples = ds.split_samples(samples, fold)
    out = args.out or os.path.join("runs", f"train_{config.dataset}_f{args.fold}_{config.hash()}")
    ckpt, rows = tr.fit(train_samples, test_samples, config, out, resume=args.resume)
    print(f"trained {len(rows)} steps; final combined loss "
          f"{rows[-1][-1]:.4f}; checkpoint -> {ckpt}")
    return 0


def cmd_eval(args, parser):
    resolve_config(args, parser)  # surface bad --set keys as usage errors
    state = tr.load_checkpoint(args.checkpoint)
    model, _, _, _, _, config = tr.restore(state)
    samples, splits = get_samples_and_splits(config, args.root)
    fold = pick_fold(splits, args.fold)
    _, test_samples = ds.split_samples(samples, fold)

    fov_mode = {"auto": None, "on": True, "off": False}[args.fov_restricted]
    out = args.out or os.path.join("runs", f"eval_{config.dataset}_f{args.fold}")
    os.makedirs(out, exist_ok=True)
    tr.save_config(config, os.path.join(out, "config.txt"))

    other = None
    if args.compare_checkpoint:
        other, *_ = tr.restore(tr.load_checkpoint(args.compare_checkpoint))

    per_image, items = [], []
    for s in test_samples:
        probs = ev.infer_full_image(model, s, config.patch_size)
        rep = ev.compute_metrics(probs, s.label, s.fov, args.threshold,
                                 fov_restricted=fov_mode, dataset=config.dataset,
                                 config_hash=config.hash())
        per_image.append((s.id, rep))
        items.append((probs, s.label, s.fov))
        ev.render_probability_map(probs, os.path.join(out, f"{s.id}_prob.png"))
        if other is not None:
            diff = ev.probability_difference_map(
                probs, ev.infer_full_image(other, s, config.patch_size))
            ev.render_signed_map(diff, os.path.join(out, f"{s.id}_diff.png"))
    pooled = ev.pooled_metrics(items, args.threshold, fov_mode,
                               dataset=config.dataset, config_hash=config.hash())
    ev.write_metrics_csv(os.path.join(out, "metrics.csv"), per_image, pooled)
    print(f"pooled: AUC {pooled.auc:.4f} Acc {pooled.acc:.4f} "
          f"Spe {pooled.spe:.4f} Sen {pooled.sen:.4f} "
          f"(fov_restricted={pooled.fov_restricted}) -> {out}")
    return 0


def cmd_ablate(args, parser):
    config = resolve_config(args, parser)
    samples, splits = get_samples_and_splits(config, args.root)
    fold = pick_fold(splits, args.fold)
    train_samples, test_samples = ds.split_samples(samples, fold)
    out = args.out or os.path.join("runs", f"ablate_{config.dataset}_f{args.fold}")
    os.makedirs(out, exist_ok=True)
    tr.save_config(config, os.path.join(out, "config.txt"))

    def progress(row):
        if row.metrics:
            print(f"  {row.uncert:12s} wt={int(row.wt_map)} ilc={row.ilcs:10s} "
                  f"AUC {row.metrics.auc:.4f} Sen {row.metrics.sen:.4f}")
        else:
            print(f"  {row.uncert:12s} wt={int(row.wt_map)} ilc={row.ilcs:10s} "
                  f"FAILED: {row.error}")

    # --reduced-schedule already shrank the config in resolve_config
    ev.run_ablation(train_samples, test_samples, config, out, progress=progress)
    print(f"ablation table -> {os.path.join(out, 'ablation.csv')}")
    return 0


def cmd_lerf(args, parser):
    config = resolve_config(args, parser)
    spec = config.network_spec()
    rfs = lerf_mod.receptive_fields(spec.encoder_layers())

    stats = None
    if args.mean_width is not None:
        stats = lerf_mod.VesselWidthStats(args.mean_width, {}, 0)
    else:
        try:
            samples, splits = get_samples_and_splits(config, args.root)
            train_samples, _ = ds.split_samples(samples, splits[args.fold])
            stats = lerf_mod.vessel_width_stats([s.label for s in train_samples])
        except FileNotFoundError as exc:
            parser.error(f"need --mean-width or dataset labels ({exc})")

    print(f"{'layer':>5} {'kind':>5} {'kernel':>6} {'stride':>6} {'rf':>5} {'jump':>5} {'stage':>5}")
    for e in rfs:
        print(f"{e.layer_index:>5} {e.kind:>5} {e.kernel:>6} {e.stride:>6} "
              f"{e.rf:>5} {e.jump:>5} {e.stage:>5}")
    layer, stage = lerf_mod.select_preeminent_layer(rfs, stats)
    t = lerf_mod.target_stage(stage, spec.num_stages)
    print(f"mean vessel width: {stats.mean_width:.2f} px "
          f"({stats.n_skeleton_pixels} skeleton px)")
    print(f"preeminent layer: {layer} (stage {stage}); target decoder stage: {t}")
    if args.hist_csv and stats.histogram:
        with open(args.hist_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["width", "pixel_count"])
            for k in sorted(stats.histogram):
                writer.writerow([k, stats.histogram[k]])
        print(f"width histogram -> {args.hist_csv}")
    return 0


def cmd_weightmap_preview(args, parser):
    config = resolve_config(args, parser)
    alpha = args.alpha if args.alpha is not None else config.alpha
    beta = args.beta if args.beta is not None else config.beta
    from PIL import Image
    mask = (np.asarray(Image.open(args.label).convert("L")) > 127).astype(np.uint8)
    weights = wm.compute_weight_map(mask, alpha, beta)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    tr.save_config(config, os.path.join(out, "config.txt"))
    png_path = os.path.join(out, "weightmap.png")
    csv_path = os.path.join(out, "weightmap.csv")
    Image.fromarray(np.round(weights / alpha * 255).astype(np.uint8)).save(png_path)
    np.savetxt(csv_path, weights, delimiter=",", fmt="%.6f")
    print(f"weight map (max {weights.max():.4f}) -> {png_path}, {csv_path}")
    return 0


def cmd_describe(args, parser):
    config = resolve_config(args, parser)
    spec = config.network_spec()
    rfs = lerf_mod.receptive_fields(spec.encoder_layers())
    chans = spec.encoder_layer_channels()
    print(f"{'layer':>5} {'kind':>5} {'ch':>5} {'kernel':>6} {'stride':>6} {'rf':>5} {'jump':>5} {'stage':>5}")
    for e, c in zip(rfs, chans):
        print(f"{e.layer_index:>5} {e.kind:>5} {c:>5} {e.kernel:>6} {e.stride:>6} "
              f"{e.rf:>5} {e.jump:>5} {e.stage:>5}")
    net = build_network(spec, config.seed)
    print(f"ilc_mode={spec.ilc_mode}  target_stage={spec.target_stage}  "
          f"preeminent_layer={spec.preeminent_layer}")
    print(f"parameters: {count_parameters(net):,}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="vesselseg",
        description="Vessel segmentation with uncertainty-weighted dual objectives")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="flat KEY=VALUE config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--dataset", choices=DATASET_CHOICES)
        sp.add_argument("--root", help="raw dataset root directory")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--reduced-schedule", action="store_true",
                        help="shrink the schedule 10x for desk-scale runs")

    sp = sub.add_parser("prepare", help="cache resized datasets, weight maps, splits")
    add_common(sp)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="run the training schedule on one fold")
    add_common(sp)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="full-image inference and metrics")
    add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--compare-checkpoint",
                    help="second checkpoint; emits probability-difference PNGs")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--fov-restricted", choices=("auto", "on", "off"), default="auto")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate the ablation matrix")
    add_common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("lerf", help="receptive-field table and head placement")
    add_common(sp)
    sp.add_argument("--mean-width", type=float,
                    help="skip label loading and use this mean vessel width")
    sp.add_argument("--hist-csv", help="write the width histogram here")
    sp.set_defaults(func=cmd_lerf)

    sp = sub.add_parser("weightmap-preview", help="render a label's weight map")
    add_common(sp)
    sp.add_argument("--label", required=True, help="binary label image")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.set_defaults(func=cmd_weightmap_preview)

    sp = sub.add_parser("describe", help="layer table with rf/jump and parameter count")
    add_common(sp)
    sp.set_defaults(func=cmd_describe)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except Exception as exc:
        print(f"vesselseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
