"""Full-volume segmentation, threshold calibration, and second opinions.

Slices are tiled at the segmenter's input size, predicted per tile, and
recombined (pointwise max of probabilities on overlaps, so thresholding
commutes with recombination). The classifier can veto segmented pixels per
32x32 cell; cells where the two networks disagree form an uncertainty map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .nets import ModelCheckpoint
from .training import predict_patches
from .volume import (
    Volume,
    compute_brain_mask,
    extract_patches,
    make_grid,
    mask_bbox_2d,
    reassemble_max,
)

CAL_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class SegmentationResult:
    volume_id: str
    binary: np.ndarray  # (H, W, S) uint8
    prob: np.ndarray  # (H, W, S) float32
    seg_threshold: float
    disagreement: np.ndarray | None = None  # patch-constant uint8
    config: dict = field(default_factory=dict)


def _predict_tiles(model: torch.nn.Module, tiles: np.ndarray, batch_size: int, device: str) -> np.ndarray:
    out = []
    with torch.inference_mode():
        for start in range(0, tiles.shape[0], batch_size):
            xt = torch.from_numpy(tiles[start : start + batch_size]).unsqueeze(1).to(device)
            out.append(model(xt).squeeze(1).cpu().numpy())
    return np.concatenate(out, axis=0)


def segment_volume(seg: ModelCheckpoint, v: Volume, seg_threshold: float = 0.5,
                   pad: bool = True, batch_size: int = 32, device: str = "cpu",
                   brain_mask: np.ndarray | None = None) -> SegmentationResult:
    """Patch-wise prediction of a whole volume, recombined per slice."""
    if seg.norm_stats is None:
        raise ValueError("checkpoint has no normalization stats; was it trained?")
    p = int(seg.config["input_size"])
    H, W, S = v.shape
    pad_r = max(0, p - H)
    pad_c = max(0, p - W)
    if (pad_r or pad_c) and not pad:
        raise ValueError(f"volume in-plane shape {(H, W)} smaller than patch size {p}")

    model = seg.build_model().to(device)
    data = v.data
    if pad_r or pad_c:
        fill = float(np.quantile(v.data, 0.01))
        data = np.pad(v.data, ((0, pad_r), (0, pad_c), (0, 0)), constant_values=fill)
    work = Volume(data=data, spacing=v.spacing, id=v.id)
    if brain_mask is None:
        brain_mask = compute_brain_mask(work)
    elif pad_r or pad_c:
        brain_mask = np.pad(brain_mask, ((0, pad_r), (0, pad_c), (0, 0)))
    norm = seg.norm_stats

    Hp, Wp = work.shape[:2]
    prob = np.zeros(work.shape, dtype=np.float32)
    for s in range(S):
        bbox = mask_bbox_2d(brain_mask[:, :, s])
        if bbox is None:
            continue
        grid = make_grid((Hp, Wp), bbox, p, slice_index=s)
        patches = extract_patches(work, grid)
        tiles = np.stack([norm.transform(pt.pixels) for pt in patches]).astype(np.float32)
        preds = _predict_tiles(model, tiles, batch_size, device)
        prob[:, :, s] = reassemble_max(list(preds), grid, (Hp, Wp))
    prob = prob[:H, :W, :]
    binary = (prob >= seg_threshold).astype(np.uint8)
    return SegmentationResult(
        volume_id=v.id,
        binary=binary,
        prob=prob,
        seg_threshold=seg_threshold,
        config={"patch_size": p, "padded": bool(pad_r or pad_c)},
    )


def classifier_cell_probs(clf: ModelCheckpoint, v: Volume, patch_size: int = 32,
                          batch_size: int = 256, device: str = "cpu",
                          brain_mask: np.ndarray | None = None):
    """Per-slice grids and classifier probabilities for every grid cell."""
    if clf.norm_stats is None:
        raise ValueError("classifier checkpoint has no normalization stats")
    model = clf.build_model().to(device)
    if brain_mask is None:
        brain_mask = compute_brain_mask(v)
    norm = clf.norm_stats
    out = {}
    for s in range(v.n_slices):
        bbox = mask_bbox_2d(brain_mask[:, :, s])
        if bbox is None:
            continue
        grid = make_grid(v.shape[:2], bbox, patch_size, slice_index=s)
        patches = extract_patches(v, grid)
        tiles = np.stack([norm.transform(pt.pixels) for pt in patches]).astype(np.float32)
        probs = predict_patches(model, tiles, batch_size, device)
        out[s] = (grid, probs)
    return out


def second_opinion_filter(res: SegmentationResult, cell_probs: dict, threshold: float) -> SegmentationResult:
    """Veto segmented pixels in cells the classifier calls non-vessel and
    mark cells where the two networks disagree.

    Disagreement: classifier says non-vessel but the segmenter fired in the
    cell, or classifier says vessel but the segmenter found nothing."""
    binary = res.binary.copy()
    prob = res.prob.copy()
    disagreement = np.zeros_like(res.binary)
    for s, (grid, probs) in cell_probs.items():
        p = grid.patch_size
        seg_slice = res.binary[:, :, s]
        for cell, (r, c) in enumerate(grid.offsets):
            clf_vessel = bool(probs[cell] >= threshold)
            seg_fired = bool(seg_slice[r : r + p, c : c + p].any())
            if not clf_vessel:
                binary[r : r + p, c : c + p, s] = 0
                prob[r : r + p, c : c + p, s] = 0.0
            if clf_vessel != seg_fired:
                disagreement[r : r + p, c : c + p, s] = 1
    return SegmentationResult(
        volume_id=res.volume_id,
        binary=binary,
        prob=prob,
        seg_threshold=res.seg_threshold,
        disagreement=disagreement,
        config={**res.config, "filter_threshold": threshold},
    )


def calibrate_threshold(clf: ModelCheckpoint, val_volumes: list[Volume],
                        val_masks: dict[str, np.ndarray], seg: ModelCheckpoint,
                        seg_threshold: float = 0.5, device: str = "cpu") -> float:
    """Sweep the classifier threshold grid and keep the value whose filtered
    segmentations maximize mean validation DSC (lowest threshold on ties).
    The result is stored on the classifier checkpoint."""
    from .metrics import dsc as dsc_fn

    if not val_volumes:
        raise ValueError("empty validation set")
    results = []
    probs = []
    for v in val_volumes:
        res = segment_volume(seg, v, seg_threshold=seg_threshold, device=device)
        results.append(res)
        probs.append(classifier_cell_probs(clf, v, device=device))
    best_t = None
    best_score = -1.0
    for t in CAL_GRID:
        scores = []
        for v, res, cp in zip(val_volumes, results, probs):
            filtered = second_opinion_filter(res, cp, t)
            scores.append(dsc_fn(filtered.binary, val_masks[v.id]))
        mean = float(np.mean(scores))
        if mean > best_score:
            best_score = mean
            best_t = t
    clf.threshold = float(best_t)
    return float(best_t)
