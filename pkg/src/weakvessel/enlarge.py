"""Classifier-driven enlargement of the pseudo-labeled training set.

Unlabeled volumes are tagged by the trained patch classifier instead of a
human; the tagged patches then go through the same pseudo-label synthesis.
Human-tagged entries are never modified and repeated enlargement with the
same pool adds nothing new.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import classifier_cell_probs
from .nets import ModelCheckpoint
from .pseudolabel import PseudoLabelSet, synthesize
from .tags import PatchTagSet, SliceTags
from .volume import Volume


@dataclass
class UnlabeledPool:
    volume_ids: list[str] = field(default_factory=list)

    def validate_disjoint(self, annotated_ids: list[str]) -> None:
        overlap = set(self.volume_ids) & set(annotated_ids)
        if overlap:
            raise ValueError(f"pool overlaps annotated volumes: {sorted(overlap)}")


def classify_volume(clf: ModelCheckpoint, v: Volume, patch_size: int = 32,
                    threshold: float | None = None, use_calibrated: bool = False,
                    device: str = "cpu") -> PatchTagSet:
    """Estimate patch tags for an unlabeled volume with the classifier."""
    if clf.norm_stats is None:
        raise ValueError("untrained classifier checkpoint (no normalization stats)")
    if threshold is None:
        threshold = clf.threshold if (use_calibrated and clf.threshold is not None) else 0.5
    cell_probs = classifier_cell_probs(clf, v, patch_size=patch_size, device=device)
    out = PatchTagSet(volume_id=v.id, patch_size=patch_size, source="classifier")
    for s, (grid, probs) in sorted(cell_probs.items()):
        out.slices[s] = SliceTags(grid=grid, tags=np.asarray(probs) >= threshold)
    return out


def enlarge(existing: list[PseudoLabelSet], pool_volumes: list[Volume],
            clf: ModelCheckpoint, polarity: str, method: str = "kmeans",
            patch_size: int = 32, threshold: float | None = None,
            device: str = "cpu") -> list[PseudoLabelSet]:
    """Union of the existing pseudo-label sets and classifier-tagged sets
    synthesized for each pool volume not already covered."""
    known = {pls.volume_id for pls in existing}
    out = list(existing)
    for v in pool_volumes:
        if v.id in known:
            continue
        tags = classify_volume(clf, v, patch_size=patch_size, threshold=threshold, device=device)
        out.append(synthesize(v, tags, polarity, method=method))
        known.add(v.id)
    return out
