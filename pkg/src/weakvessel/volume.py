"""Volumes, brain masks, patch grids, and patch assembly.

Conventions: a volume array has shape (H, W, S) with axial slices indexed
by the last axis. Grids tile a 2D slice with p x p windows; when an extent
is not a multiple of p the final window is shifted back to end flush with
the extent, overlapping its predecessor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import read_nifti, write_nifti


class IngestionError(ValueError):
    """Raised when a file cannot be loaded as a valid volume."""


class GridError(ValueError):
    """Raised for invalid grid geometry requests."""


@dataclass
class Volume:
    """A 3D scalar image with spacing metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    id: str

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise IngestionError(f"volume '{self.id}': data must be 3D, got {self.data.ndim}D")
        if any(s <= 0 for s in self.spacing):
            raise IngestionError(f"volume '{self.id}': spacing must be positive")
        if not np.all(np.isfinite(self.data)):
            raise IngestionError(f"volume '{self.id}': non-finite intensity")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    def slice(self, s: int) -> np.ndarray:
        return self.data[:, :, s]


@dataclass(frozen=True)
class PatchGrid:
    """Deterministic tiling of one slice by p x p windows."""

    slice_index: int
    patch_size: int
    offsets: tuple[tuple[int, int], ...]
    slice_shape: tuple[int, int]

    @property
    def n_cells(self) -> int:
        return len(self.offsets)

    def window(self, cell: int) -> tuple[int, int, int]:
        """(row, col, p) of one cell's pixel window."""
        if not 0 <= cell < self.n_cells:
            raise GridError(f"cell {cell} out of range for {self.n_cells}-cell grid")
        r, c = self.offsets[cell]
        return r, c, self.patch_size

    def to_dict(self) -> dict:
        return {
            "slice_index": self.slice_index,
            "patch_size": self.patch_size,
            "slice_shape": list(self.slice_shape),
            "offsets": [list(o) for o in self.offsets],
        }

    @staticmethod
    def from_dict(d: dict) -> "PatchGrid":
        return PatchGrid(
            slice_index=int(d["slice_index"]),
            patch_size=int(d["patch_size"]),
            offsets=tuple((int(r), int(c)) for r, c in d["offsets"]),
            slice_shape=tuple(int(x) for x in d["slice_shape"]),
        )


@dataclass(frozen=True)
class Patch:
    """One grid cell's pixel window, copied out of a slice."""

    volume_id: str
    slice_index: int
    cell_index: int
    window: tuple[int, int, int]
    pixels: np.ndarray


@dataclass
class NormStats:
    """Dataset-level intensity statistics used for input normalization."""

    mean: float
    std: float

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float32) - self.mean) / self.std


def load_volume(path) -> Volume:
    """Load a NIfTI-1 file or the toolkit's raw float32+JSON format."""
    path = Path(path)
    name = path.name
    try:
        if name.endswith(".nii") or name.endswith(".nii.gz"):
            data, spacing = read_nifti(path)
            if data.ndim != 3:
                raise IngestionError(f"{path}: expected 3D data, got {data.ndim}D")
            vid = name[: -len(".nii.gz")] if name.endswith(".nii.gz") else path.stem
            spacing3 = tuple(spacing[:3]) if len(spacing) >= 3 else (1.0, 1.0, 1.0)
            return Volume(data=np.ascontiguousarray(data, dtype=np.float32), spacing=spacing3, id=vid)
        if name.endswith(".f32"):
            sidecar = path.with_suffix(".json")
            meta = json.loads(sidecar.read_text())
            shape = tuple(int(x) for x in meta["shape"])
            data = np.fromfile(path, dtype="<f4").reshape(shape)
            return Volume(data=data, spacing=tuple(float(x) for x in meta["spacing"]), id=str(meta["id"]))
    except IngestionError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise IngestionError(f"cannot read volume {path}: {exc}") from exc
    raise IngestionError(f"unrecognized volume format: {path}")


def save_volume(v: Volume, path) -> None:
    """Write a volume in the format implied by the path suffix."""
    path = Path(path)
    if path.name.endswith(".nii") or path.name.endswith(".nii.gz"):
        write_nifti(path, v.data.astype(np.float32), v.spacing)
        return
    if path.name.endswith(".f32"):
        path.parent.mkdir(parents=True, exist_ok=True)
        v.data.astype("<f4").tofile(path)
        sidecar = path.with_suffix(".json")
        sidecar.write_text(
            json.dumps({"shape": list(v.shape), "spacing": list(v.spacing), "id": v.id}, sort_keys=True)
        )
        return
    raise IngestionError(f"unrecognized volume format: {path}")


def save_mask(mask: np.ndarray, spacing, path) -> None:
    """Write a binary mask volume as uint8 NIfTI."""
    write_nifti(path, np.asarray(mask, dtype=np.uint8), spacing)


def load_mask(path) -> np.ndarray:
    data, _ = read_nifti(path)
    return (data > 0).astype(np.uint8)


_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def compute_brain_mask(v: Volume, threshold_quantile: float = 0.05) -> np.ndarray:
    """Largest 6-connected component of voxels at/above an intensity quantile."""
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must be in (0,1)")
    if not np.any(v.data != 0):
        raise ValueError("empty brain mask: volume is all zeros")
    thr = float(np.quantile(v.data, threshold_quantile))
    if thr <= 0.0 and float(v.data.max()) > thr:
        cand = v.data > thr  # quantile collapsed onto a zero-level background
    else:
        cand = v.data >= thr
    if not cand.any():
        raise ValueError("empty brain mask: no voxels above threshold")
    labels, n = ndimage.label(cand, structure=_SIX_CONN)
    if n == 0:
        raise ValueError("empty brain mask: no connected component")
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return (labels == int(np.argmax(counts))).astype(np.uint8)


def mask_bbox_2d(mask_slice: np.ndarray) -> tuple[int, int, int, int] | None:
    """Half-open bounding box (r0, r1, c0, c1) of a 2D mask, or None if empty."""
    rows = np.any(mask_slice, axis=1)
    cols = np.any(mask_slice, axis=0)
    if not rows.any():
        return None
    r = np.where(rows)[0]
    c = np.where(cols)[0]
    return int(r[0]), int(r[-1]) + 1, int(c[0]), int(c[-1]) + 1


def _axis_offsets(start: int, extent: int, length: int, p: int) -> list[int]:
    """Tile one axis: dilate [start, start+extent) to >= p (and to a multiple
    of p when the axis allows), then step by p with a flush final window."""
    target = max(p, int(np.ceil(extent / p)) * p)
    if target > length:
        target = max(p, extent)
    grow = target - extent
    left = grow // 2
    a = start - left
    b = a + target
    if a < 0:
        a, b = 0, target
    if b > length:
        a, b = length - target, length
    e = b - a
    n = int(np.ceil(e / p))
    return [a + min(i * p, e - p) for i in range(n)]


def make_grid(slice_shape: tuple[int, int], mask_bbox: tuple[int, int, int, int], p: int,
              slice_index: int = 0) -> PatchGrid:
    """Build the annotation grid covering a slice's mask bounding box."""
    H, W = slice_shape
    if p > H or p > W:
        raise GridError(f"patch size {p} exceeds slice extent {slice_shape}")
    r0, r1, c0, c1 = mask_bbox
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise GridError(f"bbox {mask_bbox} not inside slice {slice_shape}")
    rows = _axis_offsets(r0, r1 - r0, H, p)
    cols = _axis_offsets(c0, c1 - c0, W, p)
    offsets = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(slice_index=slice_index, patch_size=p, offsets=offsets, slice_shape=(H, W))


def extract_patches(v: Volume, g: PatchGrid) -> list[Patch]:
    """Copy one patch per grid cell, in grid order."""
    sl = v.slice(g.slice_index)
    p = g.patch_size
    out = []
    for k, (r, c) in enumerate(g.offsets):
        out.append(
            Patch(
                volume_id=v.id,
                slice_index=g.slice_index,
                cell_index=k,
                window=(r, c, p),
                pixels=sl[r : r + p, c : c + p].copy(),
            )
        )
    return out


def reassemble(masks: list[np.ndarray], g: PatchGrid, slice_shape: tuple[int, int]) -> np.ndarray:
    """Recombine per-cell binary masks into a slice mask (logical OR on overlaps)."""
    if len(masks) != g.n_cells:
        raise GridError(f"got {len(masks)} masks for a {g.n_cells}-cell grid")
    out = np.zeros(slice_shape, dtype=np.uint8)
    p = g.patch_size
    for m, (r, c) in zip(masks, g.offsets):
        m = np.asarray(m)
        if m.shape != (p, p):
            raise GridError(f"mask shape {m.shape} does not match patch size {p}")
        out[r : r + p, c : c + p] |= (m > 0).astype(np.uint8)
    return out


def reassemble_max(tiles: list[np.ndarray], g: PatchGrid, slice_shape: tuple[int, int]) -> np.ndarray:
    """Recombine per-cell float maps into a slice map (pointwise max on overlaps)."""
    if len(tiles) != g.n_cells:
        raise GridError(f"got {len(tiles)} tiles for a {g.n_cells}-cell grid")
    out = np.zeros(slice_shape, dtype=np.float32)
    p = g.patch_size
    for t, (r, c) in zip(tiles, g.offsets):
        win = out[r : r + p, c : c + p]
        np.maximum(win, t, out=win)
    return out


def normalize_dataset(volumes: list[Volume], masks: list[np.ndarray] | None = None) -> NormStats:
    """Mean/std over the (brain-masked) voxels of all training volumes."""
    if not volumes:
        raise ValueError("need at least one volume")
    chunks = []
    for i, v in enumerate(volumes):
        if masks is not None:
            chunks.append(v.data[masks[i] > 0].ravel())
        else:
            chunks.append(v.data.ravel())
    allvox = np.concatenate(chunks).astype(np.float64)
    mean = float(allvox.mean())
    std = float(allvox.std())
    if std == 0.0:
        raise ValueError("zero variance: cannot normalize")
    return NormStats(mean=mean, std=std)
