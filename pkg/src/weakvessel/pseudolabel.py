"""Pixel-wise pseudo-label synthesis from patch tags.

Untagged patches contribute all-zero masks. Tagged patches are split into
two intensity clusters; the vessel cluster is picked by modality polarity
(bright vessels vs dark vessels). The two-cluster fit is solved exactly by
a threshold sweep over the sorted intensities, which for 1D data finds the
global two-means optimum without initialization randomness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .nifti import write_nifti, read_nifti
from .tags import PatchTagSet
from .volume import Volume, extract_patches, reassemble

POLARITIES = ("bright", "dark")

NOISY_VESSEL_FRACTION = 0.30


def _best_split(values: np.ndarray) -> int | None:
    """Index k that minimizes two-cluster within-SSE of the sorted values
    (clusters = sorted[:k], sorted[k:]). None if all values are equal."""
    x = np.sort(values.astype(np.float64).ravel())
    n = x.size
    if x[0] == x[-1]:
        return None
    prefix = np.cumsum(x)
    total = prefix[-1]
    ks = np.nonzero(np.diff(x))[0] + 1  # splits only between distinct values
    s1 = prefix[ks - 1]
    s2 = total - s1
    k = ks.astype(np.float64)
    between = s1 * s1 / k + s2 * s2 / (n - k)
    best = int(np.argmax(between))
    # exact tie refinement for integral data, where near-equal float scores
    # can hide the true optimum
    if np.all(x == np.round(x)):
        close = np.nonzero(between >= between[best] * (1.0 - 1e-12))[0]
        if close.size > 1:
            xi = [int(v) for v in x]
            pre = [0]
            for v in xi:
                pre.append(pre[-1] + v)
            tot = pre[-1]
            best_frac = None
            best_i = best
            for i in close:
                kk = int(ks[i])
                a, b = pre[kk], tot - pre[kk]
                score = Fraction(a * a, kk) + Fraction(b * b, n - kk)
                if best_frac is None or score > best_frac:
                    best_frac = score
                    best_i = int(i)
            best = best_i
    return int(ks[best])


def two_means_threshold(values: np.ndarray) -> float | None:
    """Boundary intensity t such that {x >= t} is the upper cluster of the
    exact 1D two-means partition. None for constant input."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    k = _best_split(x)
    if k is None:
        return None
    return float(x[k])


def kmeans2(patch: np.ndarray, polarity: str, rng_seed: int | None = None) -> np.ndarray:
    """Two-cluster intensity mask of a patch; vessel = high cluster for
    bright polarity, low cluster for dark. Constant patches give zeros."""
    _check_polarity(polarity)
    px = np.asarray(patch, dtype=np.float64)
    t = two_means_threshold(px)
    if t is None:
        return np.zeros(px.shape, dtype=np.uint8)
    upper = px >= t
    vessel = upper if polarity == "bright" else ~upper
    return vessel.astype(np.uint8)


def gmm2(patch: np.ndarray, polarity: str, rng_seed: int | None = None,
         max_iter: int = 200, tol: float = 1e-6) -> np.ndarray:
    """Two-component 1D Gaussian mixture mask, EM-fit from the two-means
    split; falls back to the two-means mask if EM does not converge."""
    _check_polarity(polarity)
    px = np.asarray(patch, dtype=np.float64)
    x = px.ravel()
    t = two_means_threshold(x)
    if t is None:
        return np.zeros(px.shape, dtype=np.uint8)

    hi = x >= t
    span = float(x.max() - x.min())
    var_floor = max((1e-3 * span) ** 2, 1e-12)
    mu = np.array([x[~hi].mean(), x[hi].mean()])
    var = np.array([max(x[~hi].var(), var_floor), max(x[hi].var(), var_floor)])
    w = np.array([(~hi).mean(), hi.mean()])

    converged = False
    for _ in range(max_iter):
        # E step
        log_p = -0.5 * ((x[:, None] - mu) ** 2 / var + np.log(2 * np.pi * var)) + np.log(w)
        log_p -= log_p.max(axis=1, keepdims=True)
        resp = np.exp(log_p)
        resp /= resp.sum(axis=1, keepdims=True)
        # M step
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-9):
            break
        new_mu = (resp * x[:, None]).sum(axis=0) / nk
        new_var = np.maximum((resp * (x[:, None] - new_mu) ** 2).sum(axis=0) / nk, var_floor)
        new_w = nk / x.size
        shift = np.max(np.abs(new_mu - mu))
        mu, var, w = new_mu, new_var, new_w
        if shift < tol * max(span, 1.0):
            converged = True
            break
    if not converged:
        return kmeans2(px, polarity)

    log_p = -0.5 * ((x[:, None] - mu) ** 2 / var + np.log(2 * np.pi * var)) + np.log(w)
    comp = np.argmax(log_p, axis=1)
    vessel_comp = int(np.argmax(mu)) if polarity == "bright" else int(np.argmin(mu))
    return (comp == vessel_comp).reshape(px.shape).astype(np.uint8)


def noisy_patch_filter(mask: np.ndarray) -> np.ndarray:
    """Zero out masks whose vessel fraction exceeds the noisy-patch cap."""
    m = np.asarray(mask)
    if m.mean() > NOISY_VESSEL_FRACTION:
        return np.zeros_like(m)
    return m


@dataclass
class PseudoLabelSet:
    """Synthesized pixel-wise labels for one volume."""

    volume_id: str
    mask: np.ndarray  # (H, W, S) uint8
    source: str = "human"
    method: str = "kmeans"
    polarity: str = "bright"
    patch_size: int = 32
    stats: dict = field(default_factory=dict)


def _check_polarity(polarity: str) -> None:
    if polarity not in POLARITIES:
        raise ValueError(f"polarity must be one of {POLARITIES}, got {polarity!r}")


def synthesize(volume: Volume, tags: PatchTagSet, polarity: str,
               method: str = "kmeans", rng_seed: int | None = None) -> PseudoLabelSet:
    """Build the pseudo-label volume for all tagged slices of ``volume``."""
    _check_polarity(polarity)
    if method not in ("kmeans", "gmm"):
        raise ValueError(f"method must be 'kmeans' or 'gmm', got {method!r}")
    cluster = kmeans2 if method == "kmeans" else gmm2
    out = np.zeros(volume.shape, dtype=np.uint8)
    n_vessel = 0
    n_filtered = 0
    n_degenerate = 0
    for s, st in sorted(tags.slices.items()):
        grid = st.grid
        patches = extract_patches(volume, grid)
        masks = []
        for cell, patch in enumerate(patches):
            if not st.tags[cell]:
                masks.append(np.zeros((grid.patch_size, grid.patch_size), dtype=np.uint8))
                continue
            n_vessel += 1
            m = cluster(patch.pixels, polarity, rng_seed)
            if m.max() == 0:
                n_degenerate += 1
            filtered = noisy_patch_filter(m)
            if filtered.max() == 0 and m.max() != 0:
                n_filtered += 1
            masks.append(filtered)
        out[:, :, s] = reassemble(masks, grid, grid.slice_shape)
    stats = {
        "vessel_patches": n_vessel,
        "noisy_filtered": n_filtered,
        "degenerate": n_degenerate,
    }
    return PseudoLabelSet(
        volume_id=volume.id,
        mask=out,
        source=tags.source,
        method=method,
        polarity=polarity,
        patch_size=tags.patch_size,
        stats=stats,
    )


def save_pseudolabels(pls: PseudoLabelSet, out_dir, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Persist mask as NIfTI plus a JSON provenance sidecar; returns mask path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / f"{pls.volume_id}_pseudo.nii.gz"
    write_nifti(mask_path, pls.mask.astype(np.uint8), spacing)
    sidecar = {
        "volume_id": pls.volume_id,
        "source": pls.source,
        "method": pls.method,
        "polarity": pls.polarity,
        "patch_size": pls.patch_size,
        "stats": pls.stats,
    }
    (out_dir / f"{pls.volume_id}_pseudo.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))
    return mask_path


def load_pseudolabels(out_dir, volume_id: str) -> PseudoLabelSet:
    out_dir = Path(out_dir)
    data, _ = read_nifti(out_dir / f"{volume_id}_pseudo.nii.gz")
    meta = json.loads((out_dir / f"{volume_id}_pseudo.json").read_text())
    return PseudoLabelSet(
        volume_id=volume_id,
        mask=(data > 0).astype(np.uint8),
        source=meta.get("source", "human"),
        method=meta.get("method", "kmeans"),
        polarity=meta.get("polarity", "bright"),
        patch_size=int(meta.get("patch_size", 32)),
        stats=meta.get("stats", {}),
    )
