"""Command-line entry point for the whole pipeline."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
from filelock import FileLock

from . import synth as synthmod
from .config import PipelineConfig, echo_config, load_config
from .enlarge import enlarge as enlarge_sets
from .inference import classifier_cell_probs, second_opinion_filter, segment_volume
from .metrics import dsc, surface_distances
from .nets import load_checkpoint, save_checkpoint
from .nifti import write_nifti
from .pseudolabel import load_pseudolabels, save_pseudolabels, synthesize
from .tags import load_tags, save_tags
from .training import (
    TrainConfig,
    classifier_examples,
    segmenter_crops,
    split_dataset,
    train_classifier,
    train_segmenter,
)
from .volume import Volume, compute_brain_mask, load_volume, normalize_dataset, save_mask


def _lock(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(out_dir / ".weakvessel.lock")


def _fail(message: str) -> None:
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(1)


def _load_volumes(data_dir: Path, ids: list[str] | None = None) -> list[Volume]:
    vols = []
    for p in sorted(data_dir.glob("*.nii.gz")):
        if "_label" in p.name or "_pseudo" in p.name or "_seg" in p.name:
            continue
        v = load_volume(p)
        if ids is None or v.id in ids:
            vols.append(v)
    if not vols:
        _fail(f"no volumes found in {data_dir}")
    return vols


def _train_config(cfg: PipelineConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        batch_size=t.batch_size,
        max_epochs=t.max_epochs,
        patience=t.patience,
        seed=t.seed,
        augment=t.augment,
        seg_lr=t.seg_lr,
        seg_patch_size=cfg.seg_patch_size,
        seg_base_channels=t.seg_base_channels,
        seg_dropout=t.seg_dropout,
        crops_per_epoch=t.crops_per_epoch,
        background_crop_fraction=t.background_crop_fraction,
        cls_lr=t.cls_lr,
        cls_momentum=t.cls_momentum,
        cls_dropout=t.cls_dropout,
        cls_channels=t.cls_channels,
        patches_per_epoch=t.patches_per_epoch,
        device=cfg.device,
    )


config_option = click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                             help="TOML or JSON pipeline configuration.")


@click.group()
def main():
    """Weakly supervised vessel segmentation toolkit."""


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n", "count", type=int, default=20, show_default=True)
@click.option("--shape", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--noise-sigma", type=float, default=25.0, show_default=True)
@click.option("--polarity", type=click.Choice(["bright", "dark"]), default="bright")
@click.option("--density", type=float, default=0.019, show_default=True)
@click.option("--flip-prob", type=float, default=0.0, show_default=True,
              help="Simulated rater tag-error rate.")
@config_option
def synth(out_dir, count, shape, seed, noise_sigma, polarity, density, flip_prob, config_path):
    """Generate paired synthetic image/label volumes plus oracle tags."""
    cfg = load_config(config_path, overrides={"polarity": polarity})
    out = Path(out_dir)
    with _lock(out):
        echo_config(cfg, out)
        scfg = synthmod.SynthConfig(
            shape=(shape, shape, shape), noise_sigma=noise_sigma,
            polarity=polarity, target_density=density,
        )
        manifest = []
        for i in range(count):
            vol, labels = synthmod.generate_volume(seed + i, scfg)
            write_nifti(out / f"{vol.id}.nii.gz", vol.data, vol.spacing)
            save_mask(labels, vol.spacing, out / f"{vol.id}_label.nii.gz")
            tags = synthmod.simulate_tags(labels, patch_size=cfg.patch_size,
                                          flip_prob=flip_prob, seed=seed + i, volume_id=vol.id)
            save_tags(tags, out / f"{vol.id}_tags.json")
            manifest.append({"id": vol.id, "seed": seed + i,
                             "vessel_fraction": float(labels.mean())})
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    click.echo(f"wrote {count} volumes to {out}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--tags", "tags_path", type=click.Path(exists=True), required=True,
              help="Tag file or directory of *_tags.json files.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--polarity", type=click.Choice(["bright", "dark"]), default=None)
@click.option("--method", type=click.Choice(["kmeans", "gmm"]), default=None)
@config_option
def pseudolabel(data_dir, tags_path, out_dir, polarity, method, config_path):
    """Synthesize pixel-wise pseudo-label volumes from patch tags."""
    cfg = load_config(config_path, overrides={"polarity": polarity, "pseudo_method": method})
    out = Path(out_dir)
    tags_path = Path(tags_path)
    tag_files = sorted(tags_path.glob("*_tags.json")) if tags_path.is_dir() else [tags_path]
    if not tag_files:
        _fail(f"no tag files under {tags_path}")
    with _lock(out):
        echo_config(cfg, out)
        for tf in tag_files:
            tags = load_tags(tf)
            vol = load_volume(Path(data_dir) / f"{tags.volume_id}.nii.gz")
            pls = synthesize(vol, tags, cfg.polarity, method=cfg.pseudo_method)
            save_pseudolabels(pls, out, spacing=vol.spacing)
    click.echo(f"wrote pseudo-labels for {len(tag_files)} volumes to {out}")


@main.command("train-cls")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--tags-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--arch", type=click.Choice(["pnetcl", "unetcl"]), default="pnetcl")
@click.option("--train-ids", default=None, help="Comma-separated volume ids (default: split).")
@click.option("--val-ids", default=None)
@config_option
def train_cls(data_dir, tags_dir, out_path, arch, train_ids, val_ids, config_path):
    """Train the vessel/non-vessel patch classifier."""
    cfg = load_config(config_path)
    data_dir = Path(data_dir)
    volumes = _load_volumes(data_dir)
    by_id = {v.id: v for v in volumes}
    if train_ids and val_ids:
        train = [by_id[i] for i in train_ids.split(",")]
        val = [by_id[i] for i in val_ids.split(",")]
    else:
        spec = split_dataset(sorted(by_id), cfg.split_seed)
        train = [by_id[i] for i in spec.train]
        val = [by_id[i] for i in spec.val]
    tag_sets = {v.id: load_tags(Path(tags_dir) / f"{v.id}_tags.json") for v in train + val}
    masks = {v.id: compute_brain_mask(v) for v in train}
    norm = normalize_dataset(train, [masks[v.id] for v in train])
    out_path = Path(out_path)
    with _lock(out_path.parent):
        echo_config(cfg, out_path.parent)
        ckpt = train_classifier(
            classifier_examples(train, tag_sets, norm),
            classifier_examples(val, tag_sets, norm),
            _train_config(cfg), norm, arch=arch, patch_size=cfg.patch_size,
            log_path=out_path.with_suffix(".log.jsonl"),
        )
        save_checkpoint(ckpt, out_path)
    click.echo(f"classifier saved to {out_path} (val F1 {ckpt.meta['val_f1']:.4f})")


@main.command("train-seg")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--pseudo-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--arch", type=click.Choice(["wnetseg", "unetseg"]), default="wnetseg")
@click.option("--train-ids", default=None)
@click.option("--val-ids", default=None)
@click.option("--seg-patch-size", type=int, default=None)
@config_option
def train_seg(data_dir, pseudo_dir, out_path, arch, train_ids, val_ids, seg_patch_size, config_path):
    """Train the patch segmenter on pseudo-labels."""
    cfg = load_config(config_path, overrides={"seg_patch_size": seg_patch_size})
    volumes = _load_volumes(Path(data_dir))
    by_id = {v.id: v for v in volumes}
    if train_ids and val_ids:
        train = [by_id[i] for i in train_ids.split(",")]
        val = [by_id[i] for i in val_ids.split(",")]
    else:
        spec = split_dataset(sorted(by_id), cfg.split_seed)
        train = [by_id[i] for i in spec.train]
        val = [by_id[i] for i in spec.val]
    labels = {v.id: load_pseudolabels(pseudo_dir, v.id).mask for v in train + val}
    masks = {v.id: compute_brain_mask(v) for v in train + val}
    norm = normalize_dataset(train, [masks[v.id] for v in train])
    tc = _train_config(cfg)
    out_path = Path(out_path)
    with _lock(out_path.parent):
        echo_config(cfg, out_path.parent)
        ckpt = train_segmenter(
            segmenter_crops(train, labels, norm, tc.seg_patch_size, masks),
            segmenter_crops(val, labels, norm, tc.seg_patch_size, masks),
            tc, norm, arch=arch, log_path=out_path.with_suffix(".log.jsonl"),
        )
        save_checkpoint(ckpt, out_path)
    click.echo(f"segmenter saved to {out_path} (val DSC {ckpt.meta['val_dsc']:.4f})")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="Directory holding the unlabeled pool volumes.")
@click.option("--pool-ids", required=True, help="Comma-separated pool volume ids.")
@click.option("--clf", "clf_path", type=click.Path(exists=True), required=True)
@click.option("--pseudo-dir", type=click.Path(exists=True), required=True,
              help="Existing pseudo-label directory (read and extended).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--threshold", type=float, default=None)
@click.option("--use-calibrated", is_flag=True, default=False)
@config_option
def enlarge(data_dir, pool_ids, clf_path, pseudo_dir, out_dir, threshold, use_calibrated, config_path):
    """Enlarge the pseudo-labeled set with classifier-tagged pool volumes."""
    cfg = load_config(config_path)
    clf = load_checkpoint(clf_path)
    if use_calibrated and clf.threshold is not None and threshold is None:
        threshold = clf.threshold
    pool = _load_volumes(Path(data_dir), ids=pool_ids.split(","))
    pseudo_dir = Path(pseudo_dir)
    existing = [load_pseudolabels(pseudo_dir, p.name[: -len("_pseudo.nii.gz")])
                for p in sorted(pseudo_dir.glob("*_pseudo.nii.gz"))]
    out = Path(out_dir)
    with _lock(out):
        echo_config(cfg, out)
        merged = enlarge_sets(existing, pool, clf, cfg.polarity,
                              method=cfg.pseudo_method, patch_size=cfg.patch_size,
                              threshold=threshold, device=cfg.device)
        for pls in merged:
            save_pseudolabels(pls, out)
    click.echo(f"pseudo-label set now covers {len(merged)} volumes (in {out})")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--ids", default=None, help="Comma-separated volume ids (default: all).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--threshold", type=float, default=None, help="Segmentation threshold.")
@click.option("--filter", "filter_mode", type=click.Choice(["off", "on", "lq-only"]), default="off")
@click.option("--lq-list", default=None, help="Comma-separated low-quality volume ids.")
@click.option("--clf", "clf_path", type=click.Path(exists=True), default=None)
@config_option
def segment(model_path, data_dir, ids, out_dir, threshold, filter_mode, lq_list, clf_path, config_path):
    """Segment volumes; optionally apply the classifier as a second opinion."""
    cfg = load_config(config_path)
    seg_threshold = cfg.seg_threshold if threshold is None else threshold
    seg = load_checkpoint(model_path)
    clf = load_checkpoint(clf_path) if clf_path else None
    if filter_mode != "off" and clf is None:
        _fail("--filter requires --clf")
    lq = set((lq_list or "").split(",")) if lq_list else set()
    volumes = _load_volumes(Path(data_dir), ids=ids.split(",") if ids else None)
    out = Path(out_dir)
    with _lock(out):
        echo_config(cfg, out)
        report = []
        for v in volumes:
            res = segment_volume(seg, v, seg_threshold=seg_threshold, device=cfg.device)
            apply_filter = filter_mode == "on" or (filter_mode == "lq-only" and v.id in lq)
            disagreement_cells = []
            if clf is not None:
                cell_probs = classifier_cell_probs(clf, v, patch_size=cfg.patch_size, device=cfg.device)
                t = clf.threshold if clf.threshold is not None else cfg.cls_threshold
                filtered = second_opinion_filter(res, cell_probs, t)
                for s, (grid, probs) in sorted(cell_probs.items()):
                    for cell in range(grid.n_cells):
                        r, c, p = grid.window(cell)
                        if filtered.disagreement[r, c, s]:
                            if filtered.disagreement[r : r + p, c : c + p, s].all():
                                disagreement_cells.append({"slice": s, "cell": cell})
                write_nifti(out / f"{v.id}_disagreement.nii.gz",
                            filtered.disagreement.astype(np.uint8), v.spacing)
                if apply_filter:
                    res = filtered
            write_nifti(out / f"{v.id}_seg.nii.gz", res.binary.astype(np.uint8), v.spacing)
            write_nifti(out / f"{v.id}_prob.nii.gz", res.prob.astype(np.float32), v.spacing)
            report.append({
                "id": v.id,
                "segmented_voxels": int(res.binary.sum()),
                "filtered": bool(apply_filter),
                "disagreement_cells": disagreement_cells,
            })
        (out / "segment_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    click.echo(f"segmented {len(volumes)} volumes into {out}")


@main.command()
@click.option("--pred-dir", type=click.Path(exists=True), required=True)
@click.option("--gt-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_csv", type=click.Path(), required=True)
@config_option
def evaluate(pred_dir, gt_dir, out_csv, config_path):
    """Per-volume DSC and surface distances against ground-truth labels."""
    load_config(config_path)
    preds = sorted(Path(pred_dir).glob("*_seg.nii.gz"))
    if not preds:
        _fail(f"no *_seg.nii.gz files in {pred_dir}")
    rows = []
    for p in preds:
        vid = p.name[: -len("_seg.nii.gz")]
        gt_path = Path(gt_dir) / f"{vid}_label.nii.gz"
        if not gt_path.exists():
            _fail(f"missing ground truth {gt_path}")
        from .volume import load_mask

        pred = load_mask(p)
        gt = load_mask(gt_path)
        row = {"id": vid, "dsc": dsc(pred, gt)}
        if pred.any() and gt.any():
            rep = surface_distances(pred, gt)
            row.update({"hd": rep.hd, "hd95": rep.hd95, "mean_sd": rep.mean_sd})
        else:
            row.update({"hd": "", "hd95": "", "mean_sd": ""})
        rows.append(row)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["id", "dsc", "hd", "hd95", "mean_sd"])
        writer.writeheader()
        writer.writerows(rows)
    numeric = {k: [r[k] for r in rows if r[k] != ""] for k in ("dsc", "hd", "hd95", "mean_sd")}
    summary = {k: {"mean": float(np.mean(v)), "std": float(np.std(v))}
               for k, v in numeric.items() if v}
    out_csv.with_suffix(".summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    click.echo(json.dumps(summary["dsc"]))


@main.command("serve-annotation")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--tags-dir", type=click.Path(), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8008, show_default=True)
@click.option("--token", default=None, help="Static bearer token; omit to disable auth.")
@config_option
def serve_annotation(data_dir, tags_dir, host, port, token, config_path):
    """Serve the annotation HTTP API for the browser UI."""
    import uvicorn

    cfg = load_config(config_path)
    Path(tags_dir).mkdir(parents=True, exist_ok=True)
    from .server import create_app

    app = create_app(data_dir, tags_dir, patch_size=cfg.patch_size, token=token)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
