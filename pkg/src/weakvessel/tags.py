"""Patch-level vessel tags: the only human-provided label.

A tag set stores, per annotated slice, the grid descriptor and one bit per
grid cell (1 = the cell contains at least one vessel pixel). Files are JSON
with a canonical byte form so independently produced tag sets can be
compared verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import PatchGrid

FORMAT_TAG = "weakvessel-tags/1"


class TagFileError(ValueError):
    """Raised when a tag file violates the schema."""


def indicator(pixel_marks: np.ndarray) -> int:
    """1 iff any pixel of the patch carries a mark."""
    return int(np.any(np.asarray(pixel_marks) != 0))


@dataclass
class SliceTags:
    grid: PatchGrid
    tags: np.ndarray  # bool, one per grid cell

    def __post_init__(self):
        self.tags = np.asarray(self.tags, dtype=bool)
        if self.tags.shape != (self.grid.n_cells,):
            raise TagFileError(
                f"bitset length {self.tags.shape} does not match grid cell count {self.grid.n_cells}"
            )


@dataclass
class PatchTagSet:
    volume_id: str
    patch_size: int
    slices: dict[int, SliceTags] = field(default_factory=dict)
    source: str = "human"

    def set_slice(self, index: int, grid: PatchGrid, tags: np.ndarray) -> None:
        self.slices[index] = SliceTags(grid=grid, tags=tags)

    def tagged_cells(self, index: int) -> list[int]:
        return [int(i) for i in np.where(self.slices[index].tags)[0]]

    def n_vessel_cells(self) -> int:
        return int(sum(st.tags.sum() for st in self.slices.values()))

    def n_cells(self) -> int:
        return int(sum(st.grid.n_cells for st in self.slices.values()))


def apply_click(tags: PatchTagSet, slice_index: int, cell_index: int, value: bool) -> PatchTagSet:
    """Return a copy of the tag set with one cell's bit set to ``value``."""
    if slice_index not in tags.slices:
        raise KeyError(f"slice {slice_index} has no grid in this tag set")
    st = tags.slices[slice_index]
    if not 0 <= cell_index < st.grid.n_cells:
        raise IndexError(f"cell {cell_index} out of range for {st.grid.n_cells}-cell grid")
    out = PatchTagSet(volume_id=tags.volume_id, patch_size=tags.patch_size, source=tags.source)
    for idx, s in tags.slices.items():
        out.slices[idx] = SliceTags(grid=s.grid, tags=s.tags.copy())
    out.slices[slice_index].tags[cell_index] = bool(value)
    return out


def merge_tags(a: PatchTagSet, b: PatchTagSet) -> PatchTagSet:
    """Multi-rater merge: logical OR per cell. Grids must agree."""
    if a.volume_id != b.volume_id or a.patch_size != b.patch_size:
        raise TagFileError("cannot merge tag sets for different volumes or patch sizes")
    out = PatchTagSet(volume_id=a.volume_id, patch_size=a.patch_size, source="merged")
    for idx in sorted(set(a.slices) | set(b.slices)):
        if idx in a.slices and idx in b.slices:
            sa, sb = a.slices[idx], b.slices[idx]
            if sa.grid != sb.grid:
                raise TagFileError(f"slice {idx}: grid mismatch between raters")
            out.slices[idx] = SliceTags(grid=sa.grid, tags=sa.tags | sb.tags)
        else:
            s = a.slices.get(idx) or b.slices[idx]
            out.slices[idx] = SliceTags(grid=s.grid, tags=s.tags.copy())
    return out


def _slice_entry(index: int, st: SliceTags) -> dict:
    g = st.grid
    return {
        "index": index,
        "grid": {
            "slice_shape": list(g.slice_shape),
            "offsets": [list(o) for o in g.offsets],
        },
        "tags": [int(i) for i in np.where(st.tags)[0]],
    }


def tags_document(tags: PatchTagSet, include_source: bool = True) -> dict:
    doc = {
        "format": FORMAT_TAG,
        "volume_id": tags.volume_id,
        "patch_size": tags.patch_size,
        "slices": [_slice_entry(i, tags.slices[i]) for i in sorted(tags.slices)],
    }
    if include_source:
        doc["source"] = tags.source
    return doc


def canonical_tag_bytes(tags: PatchTagSet) -> bytes:
    """Provenance-free canonical serialization (sorted keys, no whitespace)."""
    doc = tags_document(tags, include_source=False)
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_tags(tags: PatchTagSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tags_document(tags), sort_keys=True, separators=(",", ":")))


def load_tags(path) -> PatchTagSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TagFileError(f"cannot read tag file {path}: {exc}") from exc
    return tags_from_document(doc)


def tags_from_document(doc: dict) -> PatchTagSet:
    for key in ("volume_id", "patch_size", "slices"):
        if key not in doc:
            raise TagFileError(f"tag file missing required key '{key}'")
    p = int(doc["patch_size"])
    out = PatchTagSet(volume_id=str(doc["volume_id"]), patch_size=p, source=doc.get("source", "human"))
    for entry in doc["slices"]:
        index = int(entry["index"])
        gd = entry["grid"]
        grid = PatchGrid(
            slice_index=index,
            patch_size=p,
            offsets=tuple((int(r), int(c)) for r, c in gd["offsets"]),
            slice_shape=tuple(int(x) for x in gd["slice_shape"]),
        )
        tag_idx = entry["tags"]
        bits = np.zeros(grid.n_cells, dtype=bool)
        for i in tag_idx:
            if not 0 <= int(i) < grid.n_cells:
                raise TagFileError(f"slice {index}: tag index {i} out of range for {grid.n_cells} cells")
            bits[int(i)] = True
        out.slices[index] = SliceTags(grid=grid, tags=bits)
    return out
