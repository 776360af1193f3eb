import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakvessel.metrics import (
    boundary_voxels,
    classification_metrics,
    cohens_kappa,
    dsc,
    surface_distances,
)


# ---------------------------------------------------------------- oracles

def brute_boundary(mask):
    """Pure-python boundary extraction (6-neighborhood, border = background)."""
    m = np.asarray(mask) > 0
    out = []
    for idx in np.argwhere(m):
        x, y, z = idx
        boundary = False
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nx, ny, nz = x + dx, y + dy, z + dz
            if not (0 <= nx < m.shape[0] and 0 <= ny < m.shape[1] and 0 <= nz < m.shape[2]):
                boundary = True
            elif not m[nx, ny, nz]:
                boundary = True
        if boundary:
            out.append((int(x), int(y), int(z)))
    return out


def brute_surface_report(a, b):
    """O(n^2) pairwise surface distances with a hand-rolled percentile."""
    pa = brute_boundary(a)
    pb = brute_boundary(b)
    d_ab = [min(math.dist(p, q) for q in pb) for p in pa]
    d_ba = [min(math.dist(p, q) for q in pa) for p in pb]
    pooled = sorted(d_ab + d_ba)
    n = len(pooled)
    pos = 0.95 * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    hd95 = pooled[lo] * (1 - (pos - lo)) + pooled[hi] * (pos - lo)
    return max(pooled), hd95, sum(pooled) / n


def random_mask(rng, shape, p=0.2):
    m = (rng.random(shape) < p).astype(np.uint8)
    if not m.any():
        m[tuple(rng.integers(0, s) for s in shape)] = 1
    return m


# ---------------------------------------------------------------- dsc

def test_dsc_identity():
    m = np.zeros((4, 4, 4), dtype=np.uint8)
    m[1:3, 1:3, 1:3] = 1
    assert dsc(m, m) == 1.0


def test_dsc_disjoint():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert dsc(a, b) == 0.0


def test_dsc_half_overlap():
    a = np.zeros((4, 4, 1), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0, 0, 0] = a[0, 1, 0] = 1
    b[0, 0, 0] = b[2, 2, 0] = 1
    assert dsc(a, b) == 0.5


def test_dsc_both_empty():
    z = np.zeros((3, 3, 3), dtype=np.uint8)
    assert dsc(z, z) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2)), np.zeros((3, 3)))


def test_dsc_symmetry_random():
    rng = np.random.default_rng(21)
    for _ in range(20):
        a = random_mask(rng, (6, 6, 6))
        b = random_mask(rng, (6, 6, 6))
        assert dsc(a, b) == dsc(b, a)


# ---------------------------------------------------------------- surface distances

def test_surface_identity_zero():
    m = np.zeros((5, 5, 5), dtype=np.uint8)
    m[1:4, 1:4, 1:4] = 1
    rep = surface_distances(m, m)
    assert rep.hd == rep.hd95 == rep.mean_sd == 0.0


def test_surface_two_single_voxels_345():
    a = np.zeros((6, 6, 6), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0, 0, 0] = 1
    b[3, 4, 0] = 1
    rep = surface_distances(a, b)
    assert rep.hd == pytest.approx(5.0)
    assert rep.hd95 == pytest.approx(5.0)
    assert rep.mean_sd == pytest.approx(5.0)


def test_surface_empty_mask_errors():
    m = np.zeros((4, 4, 4), dtype=np.uint8)
    full = m.copy()
    full[1, 1, 1] = 1
    with pytest.raises(ValueError, match="surface distance"):
        surface_distances(m, full)


def test_boundary_matches_bruteforce():
    rng = np.random.default_rng(22)
    for _ in range(20):
        m = random_mask(rng, (7, 6, 5), p=0.35)
        ours = {tuple(v) for v in boundary_voxels(m)}
        assert ours == set(brute_boundary(m))


def test_surface_matches_bruteforce_random():
    rng = np.random.default_rng(23)
    for _ in range(60):
        shape = tuple(rng.integers(3, 13, size=3))
        a = random_mask(rng, shape)
        b = random_mask(rng, shape)
        rep = surface_distances(a, b)
        hd, hd95, mean_sd = brute_surface_report(a, b)
        assert rep.hd == pytest.approx(hd, abs=1e-9)
        assert rep.hd95 == pytest.approx(hd95, abs=1e-9)
        assert rep.mean_sd == pytest.approx(mean_sd, abs=1e-9)


def test_surface_symmetric_and_ordered():
    rng = np.random.default_rng(24)
    for _ in range(30):
        a = random_mask(rng, (8, 8, 8))
        b = random_mask(rng, (8, 8, 8))
        r1 = surface_distances(a, b)
        r2 = surface_distances(b, a)
        assert r1.hd == pytest.approx(r2.hd)
        assert r1.hd95 == pytest.approx(r2.hd95)
        assert r1.mean_sd == pytest.approx(r2.mean_sd)
        assert 0 <= r1.mean_sd <= r1.hd95 + 1e-12
        assert r1.hd95 <= r1.hd + 1e-12


def test_surface_translation_invariance():
    rng = np.random.default_rng(25)
    a = np.zeros((10, 10, 10), dtype=np.uint8)
    b = np.zeros_like(a)
    a[2:4, 2:5, 2:3] = 1
    b[3:6, 2:4, 2:4] = 1
    r1 = surface_distances(a, b)
    shift = np.roll(np.roll(a, 2, axis=0), 3, axis=1), np.roll(np.roll(b, 2, axis=0), 3, axis=1)
    r2 = surface_distances(*shift)
    assert r1.hd == pytest.approx(r2.hd)
    assert r1.hd95 == pytest.approx(r2.hd95)
    assert r1.mean_sd == pytest.approx(r2.mean_sd)
    assert dsc(a, b) == dsc(*shift)


def test_surface_spacing_multiplier():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0, 0, 0] = 1
    b[0, 0, 2] = 1
    rep = surface_distances(a, b, spacing=(1.0, 1.0, 0.5))
    assert rep.hd == pytest.approx(1.0)


# ---------------------------------------------------------------- classification

def test_classification_perfect():
    rep = classification_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert rep.precision == rep.recall == rep.f1 == 1.0


def test_classification_direct_values():
    # TP=3, FP=1, FN=1 -> P = R = F1 = 0.75
    pred = [1, 1, 1, 1, 0, 0]
    true = [1, 1, 1, 0, 1, 0]
    rep = classification_metrics(pred, true)
    assert rep.precision == pytest.approx(0.75)
    assert rep.recall == pytest.approx(0.75)
    assert rep.f1 == pytest.approx(0.75)


def test_classification_degenerate_all_negative():
    rep = classification_metrics([0, 0, 0], [1, 0, 1])
    assert rep.recall == 0.0
    assert rep.precision == 0.0
    assert not rep.precision_defined
    assert rep.recall_defined


def test_classification_length_mismatch():
    with pytest.raises(ValueError):
        classification_metrics([1, 0], [1])


# ---------------------------------------------------------------- kappa

def test_kappa_identical():
    assert cohens_kappa([1, 2, 1, 2], [1, 2, 1, 2]) == pytest.approx(1.0)


def test_kappa_independent_is_zero():
    # p_o equals p_e by construction: rater B splits evenly within each A class
    a = [0, 0, 1, 1]
    b = [0, 1, 0, 1]
    assert cohens_kappa(a, b) == pytest.approx(0.0)


def test_kappa_hand_contingency():
    a = (3, 3, 2, 2, 3)
    b = (3, 2, 2, 3, 3)
    # contingency: agreements on 3 items -> p_o = 3/5
    # marginals: A: 3->3/5, 2->2/5; B: 3->3/5, 2->2/5 -> p_e = 9/25 + 4/25
    p_o = 3 / 5
    p_e = 13 / 25
    expected = (p_o - p_e) / (1 - p_e)
    assert cohens_kappa(a, b) == pytest.approx(expected)


def test_kappa_constant_identical_raters():
    assert cohens_kappa([1, 1, 1], [1, 1, 1]) == 1.0


def test_kappa_rejects_unknown_category():
    with pytest.raises(ValueError):
        cohens_kappa([1, 5], [1, 1], categories=[1, 2])
