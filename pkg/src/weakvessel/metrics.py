"""Segmentation, classification, and inter-rater agreement metrics.

Surface distances use boundary voxels (mask voxels with at least one
background 6-neighbor, the volume border counting as background) and pool
both directed distance sets before taking max / 95th percentile / mean.
Distances are in voxel units unless a spacing multiplier is given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity coefficient 2|A∩B| / (|A|+|B|); 1.0 if both empty."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


@dataclass
class SurfaceDistanceReport:
    hd: float
    hd95: float
    mean_sd: float
    directed_ab: np.ndarray | None = None
    directed_ba: np.ndarray | None = None


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (N, ndim) of mask voxels with a background 6-neighbor;
    voxels touching the volume border count as boundary."""
    m = np.asarray(mask) > 0
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    interior = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return np.argwhere(m & ~interior)


def _percentile_linear(sorted_vals: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile over pre-sorted values."""
    n = sorted_vals.size
    if n == 1:
        return float(sorted_vals[0])
    pos = (q / 100.0) * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=None,
                      keep_directed: bool = False) -> SurfaceDistanceReport:
    """Hausdorff, 95th-percentile Hausdorff, and mean surface distance
    between the boundaries of two nonempty masks."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("undefined surface distance: empty mask")
    pa = boundary_voxels(a).astype(np.float64)
    pb = boundary_voxels(b).astype(np.float64)
    if spacing is not None:
        scale = np.asarray(spacing, dtype=np.float64)
        pa = pa * scale
        pb = pb * scale
    d_ab = cKDTree(pb).query(pa, k=1)[0]
    d_ba = cKDTree(pa).query(pb, k=1)[0]
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    return SurfaceDistanceReport(
        hd=float(pooled[-1]),
        hd95=_percentile_linear(pooled, 95.0),
        mean_sd=float(pooled.mean()),
        directed_ab=d_ab if keep_directed else None,
        directed_ba=d_ba if keep_directed else None,
    )


@dataclass
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True
    f1_defined: bool = True


def classification_metrics(pred, true) -> ClassificationReport:
    """Precision/recall/F1 with vessel (1) as the positive class.
    Zero-denominator cases report 0 and are flagged undefined."""
    pred = np.asarray(pred).astype(bool).ravel()
    true = np.asarray(true).astype(bool).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    p_def = (tp + fp) > 0
    r_def = (tp + fn) > 0
    precision = tp / (tp + fp) if p_def else 0.0
    recall = tp / (tp + fn) if r_def else 0.0
    f_def = (precision + recall) > 0
    f1 = 2 * precision * recall / (precision + recall) if f_def else 0.0
    return ClassificationReport(precision, recall, f1, p_def, r_def, f_def)


def cohens_kappa(ratings_a, ratings_b, categories=None) -> float:
    """Chance-corrected agreement between two raters over the same items."""
    a = list(ratings_a)
    b = list(ratings_b)
    if len(a) != len(b):
        raise ValueError("rating sequences must have equal length")
    if categories is None:
        categories = sorted(set(a) | set(b))
    cats = list(categories)
    index = {c: i for i, c in enumerate(cats)}
    for r in a + b:
        if r not in index:
            raise ValueError(f"rating {r!r} not in categories {cats}")
    n = len(a)
    table = np.zeros((len(cats), len(cats)), dtype=np.float64)
    for ra, rb in zip(a, b):
        table[index[ra], index[rb]] += 1
    table /= n
    p_o = float(np.trace(table))
    p_e = float(np.sum(table.sum(axis=1) * table.sum(axis=0)))
    if p_e >= 1.0:
        return 1.0  # both raters constant and identical
    return (p_o - p_e) / (1.0 - p_e)
