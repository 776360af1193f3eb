"""Synthetic vascular volumes with exact ground truth.

Vessels are capsules (cylinders with spherical caps) along randomly grown
bifurcating trees. Rasterization is an exact geometric test on voxel
centers, so every generated volume doubles as its own oracle. Rendered
intensities are two-level plus optional Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tags import PatchTagSet, SliceTags
from .volume import Volume, make_grid

VESSEL_LEVEL = 200.0
BACKGROUND_LEVEL = 50.0


@dataclass(frozen=True)
class Segment:
    start: np.ndarray  # (3,) voxel coordinates
    end: np.ndarray
    radius: float


@dataclass
class TubeTree:
    segments: list[Segment] = field(default_factory=list)

    def max_radius(self) -> float:
        return max((s.radius for s in self.segments), default=0.0)


@dataclass
class GrowthParams:
    depth: int = 4
    branch_prob: float = 0.6
    radius_range: tuple[float, float] = (1.3, 2.4)
    taper: float = 0.85
    step_fraction: tuple[float, float] = (0.18, 0.30)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0.0, 0.0])


def _perturb(direction: np.ndarray, rng: np.random.Generator, angle_sd: float) -> np.ndarray:
    return _unit(direction + rng.normal(0.0, angle_sd, size=3))


def generate_tree(seed: int, shape: tuple[int, int, int], params: GrowthParams | None = None) -> TubeTree:
    """Grow one random bifurcating tube tree, deterministic per seed."""
    params = params or GrowthParams()
    shape = tuple(int(x) for x in shape)
    if min(shape) < 32:
        raise ValueError(f"shape must be at least 32 per axis, got {shape}")
    if params.radius_range[1] > min(shape) / 4:
        raise ValueError(
            f"max radius {params.radius_range[1]} infeasible for shape {shape} (limit {min(shape) / 4})"
        )
    rng = np.random.default_rng(seed)
    margin = params.radius_range[1] + 1.0
    lo = np.full(3, margin)
    hi = np.asarray(shape, dtype=np.float64) - 1.0 - margin

    def clamp(p: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(p, lo), hi)

    root = rng.uniform(lo, hi)
    direction = _unit(rng.normal(size=3))
    radius = float(rng.uniform(*params.radius_range))
    tree = TubeTree()
    step_lo = params.step_fraction[0] * min(shape)
    step_hi = params.step_fraction[1] * min(shape)

    stack = [(root, direction, radius, params.depth)]
    while stack:
        pos, d, r, depth = stack.pop()
        if depth <= 0 or r < 0.6:
            continue
        length = rng.uniform(step_lo, step_hi)
        end = clamp(pos + d * length)
        tree.segments.append(Segment(start=pos.copy(), end=end.copy(), radius=r))
        new_d = _perturb(end - pos, rng, 0.45)
        stack.append((end, new_d, r * params.taper, depth - 1))
        if rng.random() < params.branch_prob:
            branch_d = _perturb(end - pos, rng, 1.2)
            stack.append((end, branch_d, r * params.taper, depth - 1))
    return tree


def _capsule_hits(seg: Segment, shape: tuple[int, int, int]) -> np.ndarray:
    """Integer voxel coordinates whose centers lie within the segment's
    capsule, restricted to its bounding box."""
    s, e, r = seg.start, seg.end, seg.radius
    lo = np.maximum(np.floor(np.minimum(s, e) - r), 0).astype(int)
    hi = np.minimum(np.ceil(np.maximum(s, e) + r), np.asarray(shape) - 1).astype(int)
    if np.any(hi < lo):
        return np.empty((0, 3), dtype=int)
    ranges = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3).astype(np.float64)
    v = e - s
    vv = float(v @ v)
    if vv == 0.0:
        d = np.linalg.norm(grid - s, axis=1)
    else:
        t = np.clip((grid - s) @ v / vv, 0.0, 1.0)
        proj = s + t[:, None] * v
        d = np.linalg.norm(grid - proj, axis=1)
    return grid[d <= r].astype(int)


def rasterize(tree: TubeTree, shape: tuple[int, int, int]) -> np.ndarray:
    """Binary mask of voxels whose centers fall within any segment capsule."""
    shape = tuple(int(x) for x in shape)
    out = np.zeros(shape, dtype=np.uint8)
    for seg in tree.segments:
        coords = _capsule_hits(seg, shape)
        if coords.size:
            out[coords[:, 0], coords[:, 1], coords[:, 2]] = 1
    return out


def render_intensity(labels: np.ndarray, polarity: str, noise_sigma: float, seed: int) -> np.ndarray:
    """Two-level rendering (vessel 200 / background 50, swapped for dark
    polarity) plus additive Gaussian noise."""
    if polarity not in ("bright", "dark"):
        raise ValueError(f"polarity must be 'bright' or 'dark', got {polarity!r}")
    labels = np.asarray(labels) > 0
    if polarity == "bright":
        img = np.where(labels, VESSEL_LEVEL, BACKGROUND_LEVEL).astype(np.float32)
    else:
        img = np.where(labels, BACKGROUND_LEVEL, VESSEL_LEVEL).astype(np.float32)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, noise_sigma, size=img.shape).astype(np.float32)
    return img


def simulate_tags(labels: np.ndarray, patch_size: int = 32, flip_prob: float = 0.0,
                  seed: int = 0, volume_id: str = "synthetic") -> PatchTagSet:
    """Oracle annotator: a cell is tagged iff ground truth intersects its
    window. Optional per-cell tag flips model rater error."""
    labels = np.asarray(labels) > 0
    H, W, S = labels.shape
    rng = np.random.default_rng(seed)
    out = PatchTagSet(volume_id=volume_id, patch_size=patch_size, source="oracle")
    for s in range(S):
        grid = make_grid((H, W), (0, H, 0, W), patch_size, slice_index=s)
        sl = labels[:, :, s]
        bits = np.zeros(grid.n_cells, dtype=bool)
        for k, (r, c) in enumerate(grid.offsets):
            bits[k] = bool(sl[r : r + patch_size, c : c + patch_size].any())
        if flip_prob > 0:
            flips = rng.random(grid.n_cells) < flip_prob
            bits = bits ^ flips
        out.slices[s] = SliceTags(grid=grid, tags=bits)
    return out


@dataclass
class SynthConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    target_density: float = 0.019
    max_trees: int = 40
    noise_sigma: float = 25.0
    polarity: str = "bright"
    growth: GrowthParams = field(default_factory=GrowthParams)


def generate_labels(seed: int, cfg: SynthConfig) -> np.ndarray:
    """Union of rasterized trees, grown until the vessel-voxel fraction
    reaches the target density (or the tree cap)."""
    labels = np.zeros(cfg.shape, dtype=np.uint8)
    total = float(np.prod(cfg.shape))
    for i in range(cfg.max_trees):
        tree = generate_tree(seed * 1000 + i, cfg.shape, cfg.growth)
        labels |= rasterize(tree, cfg.shape)
        if labels.sum() / total >= cfg.target_density:
            break
    return labels


def generate_volume(seed: int, cfg: SynthConfig | None = None,
                    volume_id: str | None = None) -> tuple[Volume, np.ndarray]:
    """One synthetic volume and its ground-truth label mask."""
    cfg = cfg or SynthConfig()
    vid = volume_id or f"synth{seed:04d}"
    labels = generate_labels(seed, cfg)
    img = render_intensity(labels, cfg.polarity, cfg.noise_sigma, seed=seed + 77_777)
    vol = Volume(data=img, spacing=(1.0, 1.0, 1.0), id=vid)
    return vol, labels
