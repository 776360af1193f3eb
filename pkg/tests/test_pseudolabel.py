from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakvessel.pseudolabel import (
    PseudoLabelSet,
    gmm2,
    kmeans2,
    load_pseudolabels,
    noisy_patch_filter,
    save_pseudolabels,
    synthesize,
)
from weakvessel.synth import simulate_tags
from weakvessel.tags import PatchTagSet, SliceTags
from weakvessel.volume import Volume, make_grid


def brute_force_two_means(values):
    """Exact 1D two-means oracle: try every split of the sorted multiset,
    score with exact rational arithmetic, return the best upper-cluster set.

    Returns (best_score, upper_start_index, sorted_values)."""
    x = sorted(int(v) for v in values)
    n = len(x)
    best = None
    best_k = None
    for k in range(1, n):
        if x[k - 1] == x[k]:
            continue  # identical values may not straddle the boundary
        s1 = sum(x[:k])
        s2 = sum(x[k:])
        score = Fraction(s1 * s1, k) + Fraction(s2 * s2, n - k)
        if best is None or score > best:
            best = score
            best_k = k
    return best, best_k, x


def partition_score(patch, mask):
    """Between-cluster score of an arbitrary binary partition, exact."""
    inside = [int(v) for v in np.asarray(patch).ravel()[np.asarray(mask).ravel() > 0]]
    outside = [int(v) for v in np.asarray(patch).ravel()[np.asarray(mask).ravel() == 0]]
    score = Fraction(0)
    for part in (inside, outside):
        if part:
            s = sum(part)
            score += Fraction(s * s, len(part))
    return score


# ---------------------------------------------------------------- kmeans2

def test_kmeans2_bright_four_pixel_example():
    patch = np.full((4, 4), 10.0)
    patch[0, 0] = patch[1, 2] = patch[3, 3] = patch[2, 1] = 200.0
    mask = kmeans2(patch, "bright")
    assert mask.sum() == 4
    assert np.array_equal(mask > 0, patch == 200.0)
    best, k, x = brute_force_two_means(patch.ravel())
    assert partition_score(patch, mask) == best


def test_kmeans2_dark_polarity_flips():
    patch = np.full((4, 4), 10.0)
    patch[0, 0] = patch[1, 2] = patch[3, 3] = patch[2, 1] = 200.0
    mask = kmeans2(patch, "dark")
    assert mask.sum() == 12
    assert np.array_equal(mask > 0, patch == 10.0)


def test_kmeans2_constant_patch():
    assert kmeans2(np.full((8, 8), 7.0), "bright").sum() == 0


def test_kmeans2_rejects_bad_polarity():
    with pytest.raises(ValueError):
        kmeans2(np.zeros((2, 2)), "sideways")


def test_kmeans2_matches_oracle_on_random_integer_patches():
    rng = np.random.default_rng(11)
    for _ in range(300):
        patch = rng.integers(0, 256, size=(8, 8))
        mask = kmeans2(patch.astype(np.float64), "bright")
        best, k, x = brute_force_two_means(patch.ravel())
        if best is None:
            assert mask.sum() == 0
            continue
        assert partition_score(patch, mask) == best


def test_kmeans2_polarity_complement():
    rng = np.random.default_rng(12)
    for _ in range(50):
        patch = rng.integers(0, 256, size=(6, 6))
        if patch.min() == patch.max():
            continue
        bright = kmeans2(patch, "bright")
        dark = kmeans2(patch, "dark")
        assert np.array_equal(bright + dark, np.ones_like(bright))


@given(
    scale=st.floats(0.5, 20.0),
    offset=st.floats(-100.0, 100.0),
)
@settings(max_examples=40, deadline=None)
def test_kmeans2_invariant_to_positive_affine(scale, offset):
    rng = np.random.default_rng(13)
    patch = rng.integers(0, 100, size=(6, 6)).astype(np.float64)
    if patch.min() == patch.max():
        return
    a = kmeans2(patch, "bright")
    b = kmeans2(patch * scale + offset, "bright")
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- gmm2

def test_gmm2_matches_kmeans_on_separated_modes():
    rng = np.random.default_rng(14)
    for _ in range(20):
        low = rng.normal(0.0, 1.0, size=40)
        high = rng.normal(400.0, 1.0, size=24)  # separation 400 sigma
        patch = np.concatenate([low, high]).reshape(8, 8)
        assert np.array_equal(gmm2(patch, "bright"), kmeans2(patch, "bright"))


def test_gmm2_constant_patch():
    assert gmm2(np.full((8, 8), 3.3), "dark").sum() == 0


def test_gmm2_nonconvergence_falls_back(monkeypatch):
    rng = np.random.default_rng(15)
    patch = rng.normal(size=(8, 8))
    out = gmm2(patch, "bright", max_iter=0)
    assert np.array_equal(out, kmeans2(patch, "bright"))


# ---------------------------------------------------------------- noisy filter

def test_noisy_filter_over_threshold():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask.ravel()[:308] = 1  # 308/1024 = 30.08% > 30%
    assert noisy_patch_filter(mask).sum() == 0


def test_noisy_filter_under_threshold():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask.ravel()[:307] = 1  # 307/1024 = 29.98% <= 30%
    assert np.array_equal(noisy_patch_filter(mask), mask)


def test_noisy_filter_zero_and_idempotent():
    zero = np.zeros((8, 8), dtype=np.uint8)
    assert np.array_equal(noisy_patch_filter(zero), zero)
    busy = np.ones((8, 8), dtype=np.uint8)
    once = noisy_patch_filter(busy)
    assert np.array_equal(noisy_patch_filter(once), once)


# ---------------------------------------------------------------- synthesize

def _tagged_volume():
    data = np.full((64, 64, 2), 10.0, dtype=np.float32)
    data[4, 4, 0] = data[5, 4, 0] = data[4, 5, 0] = data[10, 40, 0] = 200.0
    v = Volume(data=data, spacing=(1, 1, 1), id="pv")
    ts = PatchTagSet(volume_id="pv", patch_size=32)
    for s in range(2):
        grid = make_grid((64, 64), (0, 64, 0, 64), 32, slice_index=s)
        ts.slices[s] = SliceTags(grid=grid, tags=np.zeros(grid.n_cells, dtype=bool))
    return v, ts


def test_synthesize_zero_tags_zero_mask():
    v, ts = _tagged_volume()
    pls = synthesize(v, ts, "bright")
    assert pls.mask.sum() == 0


def test_synthesize_single_vessel_patch():
    v, ts = _tagged_volume()
    ts.slices[0].tags[0] = True  # cell covering rows/cols [0,32)
    pls = synthesize(v, ts, "bright")
    expected = np.zeros((64, 64, 2), dtype=np.uint8)
    expected[4, 4, 0] = expected[5, 4, 0] = expected[4, 5, 0] = 1
    assert np.array_equal(pls.mask, expected)


def test_synthesize_untagged_cells_exactly_zero():
    rng = np.random.default_rng(16)
    data = rng.normal(100, 30, size=(64, 64, 3)).astype(np.float32)
    v = Volume(data=data, spacing=(1, 1, 1), id="z")
    ts = PatchTagSet(volume_id="z", patch_size=32)
    for s in range(3):
        grid = make_grid((64, 64), (0, 64, 0, 64), 32, slice_index=s)
        tags = rng.random(grid.n_cells) < 0.5
        ts.slices[s] = SliceTags(grid=grid, tags=tags)
    pls = synthesize(v, ts, "bright")
    for s in range(3):
        st_ = ts.slices[s]
        for cell, (r, c) in enumerate(st_.grid.offsets):
            if not st_.tags[cell]:
                window = pls.mask[r : r + 32, c : c + 32, s]
                # overlap-free grid: untagged windows must be exactly zero
                assert window.sum() == 0


def test_synthesize_gmm_variant_runs():
    v, ts = _tagged_volume()
    ts.slices[0].tags[0] = True
    pls = synthesize(v, ts, "bright", method="gmm")
    assert pls.method == "gmm"
    assert pls.mask[:, :, 1].sum() == 0


def test_pseudolabel_roundtrip(tmp_path):
    v, ts = _tagged_volume()
    ts.slices[0].tags[0] = True
    pls = synthesize(v, ts, "bright")
    save_pseudolabels(pls, tmp_path)
    back = load_pseudolabels(tmp_path, "pv")
    assert np.array_equal(back.mask, pls.mask)
    assert back.method == "kmeans"
    assert back.source == pls.source
