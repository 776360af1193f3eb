"""Weakly supervised 3D vessel segmentation from patch-level tags."""

from .volume import (
    Volume,
    PatchGrid,
    Patch,
    NormStats,
    load_volume,
    save_volume,
    compute_brain_mask,
    make_grid,
    extract_patches,
    reassemble,
    normalize_dataset,
)
from .tags import PatchTagSet, SliceTags, indicator, apply_click, save_tags, load_tags, merge_tags
from .pseudolabel import PseudoLabelSet, kmeans2, gmm2, noisy_patch_filter, synthesize
from .metrics import dsc, surface_distances, classification_metrics, cohens_kappa
from .nets import (
    WnetSegConfig,
    PnetClConfig,
    UnetClConfig,
    ModelCheckpoint,
    build_wnetseg,
    build_unetseg,
    build_pnetcl,
    build_unetcl,
    dice_loss,
    count_parameters,
    save_checkpoint,
    load_checkpoint,
)
from .training import (
    SplitSpec,
    TrainConfig,
    split_dataset,
    geometric_augment,
    train_classifier,
    train_segmenter,
)
from .enlarge import UnlabeledPool, classify_volume, enlarge
from .inference import SegmentationResult, segment_volume, calibrate_threshold, second_opinion_filter
from .synth import (
    TubeTree,
    GrowthParams,
    SynthConfig,
    generate_tree,
    rasterize,
    render_intensity,
    simulate_tags,
    generate_volume,
)

__version__ = "0.1.0"
