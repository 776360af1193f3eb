"""Dataset splitting, geometric augmentation, and the two training loops.

The classifier trains on 32x32 tagged patches with SGD + binary
cross-entropy; each epoch sees every vessel patch plus an equal-count
random sample of non-vessel patches. The segmenter trains on larger crops
recropped from the assembled pseudo-label volumes with Adam + Dice loss.
Both select the checkpoint with the best validation metric (earliest epoch
wins ties).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .nets import (
    ModelCheckpoint,
    PnetClConfig,
    UnetClConfig,
    WnetSegConfig,
    build_pnetcl,
    build_unetcl,
    build_unetseg,
    build_wnetseg,
    dice_loss,
    make_checkpoint,
)
from .metrics import classification_metrics
from .tags import PatchTagSet
from .volume import NormStats, Volume, extract_patches, make_grid, mask_bbox_2d


@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def all_ids(self) -> list[str]:
        return self.train + self.val + self.test


def split_dataset(volume_ids: list[str], seed: int) -> SplitSpec:
    """Deterministic 70/10/20 split by volume id (train takes the remainder)."""
    if len(volume_ids) < 3:
        raise ValueError(f"need at least 3 volumes to split, got {len(volume_ids)}")
    ids = sorted(volume_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_val = int(0.1 * n + 0.5)
    n_test = int(0.2 * n + 0.5)
    test = sorted(ids[:n_test])
    val = sorted(ids[n_test : n_test + n_val])
    train = sorted(ids[n_test + n_val :])
    return SplitSpec(train=train, val=val, test=test, seed=seed)


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    shear: float = 0.0
    flip_h: bool = False
    flip_v: bool = False

    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.shear == 0.0 and not self.flip_h and not self.flip_v


def draw_augment_params(rng: np.random.Generator, max_rotation_deg: float = 15.0,
                        max_shear: float = 0.1, flip_prob: float = 0.5) -> AugmentParams:
    return AugmentParams(
        rotation_deg=float(rng.uniform(-max_rotation_deg, max_rotation_deg)),
        shear=float(rng.uniform(-max_shear, max_shear)),
        flip_h=bool(rng.random() < flip_prob),
        flip_v=bool(rng.random() < flip_prob),
    )


def apply_geometric(patch: np.ndarray, mask: np.ndarray | None, params: AugmentParams):
    """Apply one spatial transform to a patch and (optionally) its mask.

    Flips are exact; rotation and shear resample about the patch center
    (bilinear for the patch, nearest for the mask)."""
    patch = np.asarray(patch)
    if mask is not None and np.asarray(mask).shape != patch.shape:
        raise ValueError("patch and mask must be aligned")
    if params.is_identity():
        return patch.copy(), None if mask is None else np.asarray(mask).copy()
    img = patch
    msk = None if mask is None else np.asarray(mask)
    if params.flip_h:
        img = img[:, ::-1]
        msk = None if msk is None else msk[:, ::-1]
    if params.flip_v:
        img = img[::-1, :]
        msk = None if msk is None else msk[::-1, :]
    if params.rotation_deg != 0.0 or params.shear != 0.0:
        theta = math.radians(params.rotation_deg)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        sh = np.array([[1.0, params.shear], [0.0, 1.0]])
        fwd = rot @ sh
        inv = np.linalg.inv(fwd)
        center = (np.asarray(img.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - inv @ center
        img = ndimage.affine_transform(img.astype(np.float32), inv, offset=offset, order=1, mode="constant")
        if msk is not None:
            msk = ndimage.affine_transform(msk.astype(np.uint8), inv, offset=offset, order=0, mode="constant")
    img = np.ascontiguousarray(img)
    msk = None if msk is None else np.ascontiguousarray((msk > 0).astype(np.uint8))
    return img, msk


def geometric_augment(patch: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator):
    """Draw a random transform and apply it identically to patch and mask."""
    return apply_geometric(patch, mask, draw_augment_params(rng))


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    augment: bool = True
    # segmenter (Adam)
    seg_lr: float = 1e-4
    seg_betas: tuple[float, float] = (0.9, 0.999)
    seg_patch_size: int = 96
    seg_base_channels: int = 64
    seg_dropout: float = 0.1
    crops_per_epoch: int | None = None
    background_crop_fraction: float = 0.25
    # classifier (SGD)
    cls_lr: float = 0.01
    cls_momentum: float = 0.9
    cls_dropout: float = 0.5
    cls_channels: int = 64
    patches_per_epoch: int | None = None
    device: str = "cpu"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.seg_lr <= 0 or self.cls_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class PatchExamples:
    """Flat classifier example store: patches and binary labels."""

    x: np.ndarray  # (n, p, p) float32, already normalized
    y: np.ndarray  # (n,) uint8


def classifier_examples(volumes: list[Volume], tag_sets: dict[str, PatchTagSet],
                        norm: NormStats) -> PatchExamples:
    xs, ys = [], []
    for v in volumes:
        tags = tag_sets[v.id]
        for s, st in sorted(tags.slices.items()):
            patches = extract_patches(v, st.grid)
            for cell, patch in enumerate(patches):
                xs.append(norm.transform(patch.pixels))
                ys.append(int(st.tags[cell]))
    if not xs:
        raise ValueError("no tagged patches available")
    return PatchExamples(x=np.stack(xs).astype(np.float32), y=np.asarray(ys, dtype=np.uint8))


@dataclass
class CropExamples:
    """Segmenter crop store: image crops and pseudo-label masks."""

    x: np.ndarray  # (n, p, p) float32, normalized
    y: np.ndarray  # (n, p, p) uint8
    has_label: np.ndarray  # (n,) bool


def segmenter_crops(volumes: list[Volume], label_masks: dict[str, np.ndarray],
                    norm: NormStats, crop_size: int,
                    brain_masks: dict[str, np.ndarray] | None = None) -> CropExamples:
    """Recrop assembled label volumes into training windows."""
    xs, ys, flags = [], [], []
    for v in volumes:
        labels = label_masks[v.id]
        if labels.shape != v.shape:
            raise ValueError(f"{v.id}: label shape {labels.shape} != volume shape {v.shape}")
        bmask = None if brain_masks is None else brain_masks.get(v.id)
        for s in range(v.n_slices):
            if bmask is not None:
                bbox = mask_bbox_2d(bmask[:, :, s])
                if bbox is None:
                    continue
            else:
                bbox = (0, v.shape[0], 0, v.shape[1])
            grid = make_grid(v.shape[:2], bbox, crop_size, slice_index=s)
            sl_img = norm.transform(v.slice(s))
            sl_lab = labels[:, :, s]
            for r, c in grid.offsets:
                crop_lab = sl_lab[r : r + crop_size, c : c + crop_size]
                xs.append(sl_img[r : r + crop_size, c : c + crop_size])
                ys.append((crop_lab > 0).astype(np.uint8))
                flags.append(bool(crop_lab.any()))
    if not xs:
        raise ValueError("no crops available")
    return CropExamples(
        x=np.stack(xs).astype(np.float32),
        y=np.stack(ys),
        has_label=np.asarray(flags, dtype=bool),
    )


def _epoch_indices_balanced(y: np.ndarray, rng: np.random.Generator,
                            cap: int | None = None) -> np.ndarray:
    """All positives plus an equal-count random sample of negatives,
    optionally subsampled to a per-epoch budget."""
    pos = np.where(y == 1)[0]
    neg = np.where(y == 0)[0]
    k = min(len(pos), len(neg))
    if len(neg) > k:
        neg = rng.choice(neg, size=max(k, 1), replace=False)
    idx = np.concatenate([pos, neg])
    rng.shuffle(idx)
    if cap is not None and idx.size > cap:
        idx = idx[:cap]
    return idx


def _epoch_indices_crops(ex: CropExamples, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """All labeled crops plus a fraction of background crops, optionally
    subsampled to a per-epoch budget."""
    fg = np.where(ex.has_label)[0]
    bg = np.where(~ex.has_label)[0]
    n_bg = min(len(bg), int(round(cfg.background_crop_fraction * max(len(fg), 1))))
    if n_bg > 0:
        bg = rng.choice(bg, size=n_bg, replace=False)
        idx = np.concatenate([fg, bg])
    else:
        idx = fg
    rng.shuffle(idx)
    if cfg.crops_per_epoch is not None and idx.size > cfg.crops_per_epoch:
        idx = idx[: cfg.crops_per_epoch]
    return idx


def _augment_batch(xb: np.ndarray, yb: np.ndarray | None, rng: np.random.Generator):
    out_x = np.empty_like(xb)
    out_y = None if yb is None else np.empty_like(yb)
    for i in range(xb.shape[0]):
        img, msk = geometric_augment(xb[i], None if yb is None else yb[i], rng)
        out_x[i] = img
        if out_y is not None:
            out_y[i] = msk
    return out_x, out_y


def _write_log(log: list[dict], log_path) -> None:
    if log_path is None:
        return
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def train_classifier(train_ex: PatchExamples, val_ex: PatchExamples, cfg: TrainConfig,
                     norm: NormStats, arch: str = "pnetcl", patch_size: int = 32,
                     log_path=None) -> ModelCheckpoint:
    """Train the vessel/non-vessel patch classifier; select best val F1."""
    cfg.validate()
    classes = np.unique(train_ex.y)
    if classes.size < 2:
        raise ValueError("training set must contain both classes")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if arch == "pnetcl":
        net_cfg = PnetClConfig(input_size=patch_size, channels=cfg.cls_channels,
                               dropout=cfg.cls_dropout)
        model = build_pnetcl(net_cfg)
    elif arch == "unetcl":
        net_cfg = UnetClConfig(input_size=patch_size, base_channels=cfg.cls_channels,
                               dropout=cfg.cls_dropout)
        model = build_unetcl(net_cfg)
    else:
        raise ValueError(f"unknown classifier arch {arch!r}")
    model.to(cfg.device)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.cls_lr, momentum=cfg.cls_momentum)
    bce = torch.nn.BCELoss()

    best_f1 = -1.0
    best_state = None
    best_epoch = -1
    log: list[dict] = []
    for epoch in range(cfg.max_epochs):
        model.train()
        idx = _epoch_indices_balanced(train_ex.y, rng, cap=cfg.patches_per_epoch)
        losses = []
        for start in range(0, idx.size, cfg.batch_size):
            batch = idx[start : start + cfg.batch_size]
            xb = train_ex.x[batch]
            if cfg.augment:
                xb, _ = _augment_batch(xb, None, rng)
            xt = torch.from_numpy(xb).unsqueeze(1).to(cfg.device)
            yt = torch.from_numpy(train_ex.y[batch].astype(np.float32)).unsqueeze(1).to(cfg.device)
            opt.zero_grad()
            pred = model(xt)
            loss = bce(pred, yt)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_pred = predict_patches(model, val_ex.x, cfg.batch_size, cfg.device)
        rep = classification_metrics(val_pred >= 0.5, val_ex.y)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "val_f1": rep.f1,
            "val_precision": rep.precision,
            "val_recall": rep.recall,
            "train_pos": int((train_ex.y[idx] == 1).sum()),
            "train_neg": int((train_ex.y[idx] == 0).sum()),
        }
        log.append(entry)
        if rep.f1 > best_f1:
            best_f1 = rep.f1
            best_epoch = epoch
            best_state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        if epoch - best_epoch >= cfg.patience:
            break
    _write_log(log, log_path)
    model.load_state_dict(best_state)
    return make_checkpoint(
        arch, net_cfg, model, norm_stats=norm,
        meta={"best_epoch": best_epoch, "val_f1": best_f1, "log": log},
    )


def predict_patches(model: torch.nn.Module, x: np.ndarray, batch_size: int = 256,
                    device: str = "cpu") -> np.ndarray:
    """Classifier probabilities for a stack of patches."""
    model.eval()
    out = []
    with torch.inference_mode():
        for start in range(0, x.shape[0], batch_size):
            xt = torch.from_numpy(x[start : start + batch_size]).unsqueeze(1).to(device)
            out.append(model(xt).squeeze(1).cpu().numpy())
    return np.concatenate(out) if out else np.empty(0, dtype=np.float32)


def _val_dice(model: torch.nn.Module, ex: CropExamples, batch_size: int, device: str) -> float:
    """Hard Dice at 0.5 over all validation crops, pooled."""
    model.eval()
    inter = 0.0
    total = 0.0
    with torch.inference_mode():
        for start in range(0, ex.x.shape[0], batch_size):
            xt = torch.from_numpy(ex.x[start : start + batch_size]).unsqueeze(1).to(device)
            pred = (model(xt).squeeze(1).cpu().numpy() >= 0.5)
            target = ex.y[start : start + batch_size] > 0
            inter += 2.0 * np.logical_and(pred, target).sum()
            total += pred.sum() + target.sum()
    return float(inter / total) if total > 0 else 1.0


def train_segmenter(train_ex: CropExamples, val_ex: CropExamples, cfg: TrainConfig,
                    norm: NormStats, arch: str = "wnetseg", log_path=None) -> ModelCheckpoint:
    """Train the patch segmenter on pseudo-label crops; select best val DSC."""
    cfg.validate()
    if not train_ex.has_label.any():
        raise ValueError("empty vessel class: no crop contains a labeled pixel")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net_cfg = WnetSegConfig(
        input_size=cfg.seg_patch_size, base_channels=cfg.seg_base_channels, dropout=cfg.seg_dropout
    )
    if arch == "wnetseg":
        model = build_wnetseg(net_cfg)
    elif arch == "unetseg":
        model = build_unetseg(net_cfg)
    else:
        raise ValueError(f"unknown segmenter arch {arch!r}")
    model.to(cfg.device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.seg_lr, betas=cfg.seg_betas)

    best_dsc = -1.0
    best_state = None
    best_epoch = -1
    log: list[dict] = []
    for epoch in range(cfg.max_epochs):
        model.train()
        idx = _epoch_indices_crops(train_ex, cfg, rng)
        losses = []
        for start in range(0, idx.size, cfg.batch_size):
            batch = idx[start : start + cfg.batch_size]
            xb = train_ex.x[batch]
            yb = train_ex.y[batch]
            if cfg.augment:
                xb, yb = _augment_batch(xb, yb, rng)
            xt = torch.from_numpy(xb).unsqueeze(1).to(cfg.device)
            yt = torch.from_numpy(yb.astype(np.float32)).unsqueeze(1).to(cfg.device)
            opt.zero_grad()
            pred = model(xt)
            loss = dice_loss(pred, yt)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_dsc = _val_dice(model, val_ex, cfg.batch_size, cfg.device)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None, "val_dsc": val_dsc}
        log.append(entry)
        if val_dsc > best_dsc:
            best_dsc = val_dsc
            best_epoch = epoch
            best_state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        if epoch - best_epoch >= cfg.patience:
            break
    _write_log(log, log_path)
    model.load_state_dict(best_state)
    return make_checkpoint(
        arch, net_cfg, model, norm_stats=norm,
        meta={"best_epoch": best_epoch, "val_dsc": best_dsc, "log": log},
    )
