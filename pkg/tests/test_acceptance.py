"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. The desk-scale pipeline runs once (session fixtures) and
several criteria read its artifacts.

Budgets are sized for a 2-core CPU box; the full module takes roughly
20-30 minutes. Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from scipy.spatial.distance import cdist

from weakvessel.cli import main as cli_main
from weakvessel.enlarge import enlarge
from weakvessel.inference import (
    calibrate_threshold,
    classifier_cell_probs,
    second_opinion_filter,
    segment_volume,
)
from weakvessel.metrics import classification_metrics, dsc, surface_distances
from weakvessel.nets import (
    build_pnetcl,
    build_wnetseg,
    count_parameters,
    dice_loss,
    load_checkpoint,
)
from weakvessel.pseudolabel import kmeans2, noisy_patch_filter, synthesize
from weakvessel.synth import simulate_tags
from weakvessel.tags import load_tags
from weakvessel.training import (
    TrainConfig,
    classifier_examples,
    predict_patches,
    segmenter_crops,
    split_dataset,
    train_classifier,
    train_segmenter,
)
from weakvessel.volume import (
    Volume,
    compute_brain_mask,
    extract_patches,
    load_volume,
    make_grid,
    normalize_dataset,
    reassemble,
)

torch.set_num_threads(2)

# ---- desk-scale budgets ----------------------------------------------------
N_VOLUMES = 20
SHAPE = 64
SEED = 11
SEG_EPOCHS = 24
CLS_EPOCHS = 10
ABL_EPOCHS = 8
ABL_TRAIN_VOLUMES = 5
BASE_CHANNELS = 16
CLS_CHANNELS = 32
CROPS_PER_EPOCH = 320
PATCHES_PER_EPOCH = 512
BATCH = 16


def crit(name: str, ok: bool, detail: str = ""):
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" — {detail}"
    print(line, flush=True)
    assert ok, line


# ============================================================ oracle suites


def test_metric_oracle_suite():
    """DSC/HD/95HD/mean surface distance vs brute force on 500 random pairs."""

    def brute_boundary(mask):
        m = np.asarray(mask) > 0
        out = []
        for x, y, z in np.argwhere(m):
            edge = False
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nx, ny, nz = x + dx, y + dy, z + dz
                if not (0 <= nx < m.shape[0] and 0 <= ny < m.shape[1] and 0 <= nz < m.shape[2]):
                    edge = True
                elif not m[nx, ny, nz]:
                    edge = True
            if edge:
                out.append((int(x), int(y), int(z)))
        return np.asarray(out, dtype=np.float64)

    start = time.monotonic()
    rng = np.random.default_rng(77)
    checked = 0
    for _ in range(500):
        shape = tuple(int(x) for x in rng.integers(3, 13, size=3))
        a = (rng.random(shape) < 0.25).astype(np.uint8)
        b = (rng.random(shape) < 0.25).astype(np.uint8)
        # dsc: exact against set arithmetic
        sa = {tuple(v) for v in np.argwhere(a > 0)}
        sb = {tuple(v) for v in np.argwhere(b > 0)}
        expected = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
        assert dsc(a, b) == expected
        if not a.any() or not b.any():
            continue
        pa = brute_boundary(a)
        pb = brute_boundary(b)
        d = cdist(pa, pb)
        pooled = np.sort(np.concatenate([d.min(axis=1), d.min(axis=0)]))
        n = pooled.size
        pos = 0.95 * (n - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n - 1)
        hd95 = pooled[lo] * (1 - (pos - lo)) + pooled[hi] * (pos - lo)
        rep = surface_distances(a, b)
        assert abs(rep.hd - pooled[-1]) < 1e-9
        assert abs(rep.hd95 - hd95) < 1e-9
        assert abs(rep.mean_sd - pooled.mean()) < 1e-9
        checked += 1
    elapsed = time.monotonic() - start
    crit("metric-oracles", checked > 400 and elapsed < 60.0,
         f"{checked} distance pairs + 500 dsc pairs in {elapsed:.1f}s")


def test_pseudolabel_oracle_suite():
    """Two-means equals the exhaustive sweep optimum; zero case and 30% rule."""
    rng = np.random.default_rng(99)
    for i in range(1000):
        patch = rng.integers(0, 256, size=(8, 8))
        mask = kmeans2(patch.astype(np.float64), "bright")
        x = sorted(int(v) for v in patch.ravel())
        n = len(x)
        best = None
        for k in range(1, n):
            if x[k - 1] == x[k]:
                continue
            s1, s2 = sum(x[:k]), sum(x[k:])
            score = Fraction(s1 * s1, k) + Fraction(s2 * s2, n - k)
            best = score if best is None or score > best else best
        if best is None:
            assert mask.sum() == 0
            continue
        inside = [int(v) for v in patch.ravel()[mask.ravel() > 0]]
        outside = [int(v) for v in patch.ravel()[mask.ravel() == 0]]
        ours = Fraction(0)
        for part in (inside, outside):
            if part:
                s = sum(part)
                ours += Fraction(s * s, len(part))
        assert ours == best, f"patch {i}: sweep score {ours} != optimum {best}"

    # untagged-patch zero case, exact, via synthesize on random tag patterns
    data = rng.normal(120, 40, size=(64, 64, 4)).astype(np.float32)
    vol = Volume(data=data, spacing=(1, 1, 1), id="oracle")
    tags = simulate_tags((rng.random((64, 64, 4)) < 0.01).astype(np.uint8), volume_id="oracle")
    pls = synthesize(vol, tags, "bright")
    for s, st in tags.slices.items():
        for cell, (r, c) in enumerate(st.grid.offsets):
            if not st.tags[cell]:
                assert pls.mask[r : r + 32, c : c + 32, s].sum() == 0

    # 30% rule boundary, exact
    m308 = np.zeros(1024, dtype=np.uint8)
    m308[:308] = 1
    m307 = np.zeros(1024, dtype=np.uint8)
    m307[:307] = 1
    assert noisy_patch_filter(m308.reshape(32, 32)).sum() == 0
    assert noisy_patch_filter(m307.reshape(32, 32)).sum() == 307
    crit("pseudolabel-oracles", True, "1000 sweep optima exact; zero case and 30% rule exact")


def test_grid_reassembly_suite():
    """Partition -> reassemble is a bit-level identity, non-multiple shapes included."""
    rng = np.random.default_rng(55)
    for i in range(100):
        h = int(rng.integers(33, 131))
        w = int(rng.integers(33, 131))
        p = int(rng.choice([16, 32]))
        data = (rng.random((h, w, 1)) < 0.3).astype(np.float32)
        v = Volume(data=data, spacing=(1, 1, 1), id=f"g{i}")
        g = make_grid((h, w), (0, h, 0, w), p, slice_index=0)
        patches = extract_patches(v, g)
        masks = [(pt.pixels > 0).astype(np.uint8) for pt in patches]
        back = reassemble(masks, g, (h, w))
        assert np.array_equal(back, (data[:, :, 0] > 0).astype(np.uint8)), (h, w, p)
    g560 = make_grid((560, 560), (0, 560, 0, 560), 32)
    rows = sorted({r for r, _ in g560.offsets})
    assert len(rows) == 18 and rows == list(range(0, 544, 32)) + [528]
    crit("grid-reassembly", True, "100 identities bit-exact; 560 -> 18 offsets with 528 tail")


def test_architecture_checks():
    n = count_parameters(build_wnetseg())
    ok_params = 1.5e7 <= n <= 1.7e7
    m = build_wnetseg()
    m.eval()
    with torch.inference_mode():
        y = m(torch.zeros(1, 1, 96, 96))
    ok_shape = tuple(y.shape) == (1, 1, 96, 96)
    p = build_pnetcl()
    sizes = []
    handles = [c.register_forward_hook(lambda _m, _i, o: sizes.append(tuple(o.shape[-2:])))
               for c in p.dilated]
    p.eval()
    with torch.inference_mode():
        p(torch.zeros(1, 1, 32, 32))
    for hd in handles:
        hd.remove()
    ok_dil = sizes == [(32, 32)] * 5
    crit("architecture", ok_params and ok_shape and ok_dil,
         f"params {n} in [1.5e7,1.7e7]; 96->96 {ok_shape}; dilated maps {sizes[:2]}...")


def test_dice_gradient_check():
    torch.manual_seed(7)
    worst = 0.0
    for _ in range(20):
        pred = torch.rand(8, 8, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(8, 8, dtype=torch.float64) > 0.55).double()
        dice_loss(pred, target).backward()
        analytic = pred.grad.clone()
        h = 1e-6
        fd = torch.zeros_like(analytic)
        with torch.no_grad():
            for i in range(8):
                for j in range(8):
                    up = pred.detach().clone()
                    dn = pred.detach().clone()
                    up[i, j] += h
                    dn[i, j] -= h
                    fd[i, j] = (dice_loss(up, target) - dice_loss(dn, target)) / (2 * h)
        worst = max(worst, float(torch.norm(analytic - fd) / torch.norm(fd)))
    crit("dice-gradient", worst < 1e-4, f"max relative error {worst:.2e}")


# ============================================================ desk-scale pipeline


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Synthesize the dataset and run pseudolabel + training through the CLI."""
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    pseudo = root / "pseudo"
    runner = CliRunner()

    r = runner.invoke(cli_main, ["synth", "--out", str(data), "--n", str(N_VOLUMES),
                                 "--shape", str(SHAPE), "--seed", str(SEED)],
                      catch_exceptions=False)
    assert r.exit_code == 0, r.output
    r = runner.invoke(cli_main, ["pseudolabel", "--data", str(data), "--tags", str(data),
                                 "--out", str(pseudo)], catch_exceptions=False)
    assert r.exit_code == 0, r.output

    seg_cfg = root / "seg.toml"
    seg_cfg.write_text(
        f'seg_patch_size = {SHAPE}\n'
        f'[training]\n'
        f'max_epochs = {SEG_EPOCHS}\n'
        f'patience = {SEG_EPOCHS}\n'
        f'batch_size = {BATCH}\n'
        f'seg_base_channels = {BASE_CHANNELS}\n'
        f'crops_per_epoch = {CROPS_PER_EPOCH}\n'
    )
    cls_cfg = root / "cls.toml"
    cls_cfg.write_text(
        f'[training]\n'
        f'max_epochs = {CLS_EPOCHS}\n'
        f'patience = {CLS_EPOCHS}\n'
        f'cls_channels = {CLS_CHANNELS}\n'
        f'patches_per_epoch = {PATCHES_PER_EPOCH}\n'
    )

    seg_path = root / "models" / "seg.pt"
    t0 = time.monotonic()
    r = runner.invoke(cli_main, ["train-seg", "--data", str(data), "--pseudo-dir", str(pseudo),
                                 "--out", str(seg_path), "--config", str(seg_cfg)],
                      catch_exceptions=False)
    assert r.exit_code == 0, r.output
    seg_train_time = time.monotonic() - t0

    clf_path = root / "models" / "clf.pt"
    r = runner.invoke(cli_main, ["train-cls", "--data", str(data), "--tags-dir", str(data),
                                 "--out", str(clf_path), "--config", str(cls_cfg)],
                      catch_exceptions=False)
    assert r.exit_code == 0, r.output

    ids = sorted(v.stem.replace(".nii", "") for v in data.glob("*.nii.gz")
                 if "_label" not in v.name)
    split = split_dataset(ids, 0)

    volumes = {vid: load_volume(data / f"{vid}.nii.gz") for vid in ids}
    labels = {}
    for vid in ids:
        lab = load_volume(data / f"{vid}_label.nii.gz")
        labels[vid] = (lab.data > 0).astype(np.uint8)

    seg_out = root / "seg_out"
    r = runner.invoke(cli_main, ["segment", "--model", str(seg_path), "--data", str(data),
                                 "--ids", ",".join(split.test), "--out", str(seg_out),
                                 "--config", str(seg_cfg)], catch_exceptions=False)
    assert r.exit_code == 0, r.output
    csv_path = root / "eval" / "metrics.csv"
    r = runner.invoke(cli_main, ["evaluate", "--pred-dir", str(seg_out), "--gt-dir", str(data),
                                 "--out", str(csv_path)], catch_exceptions=False)
    assert r.exit_code == 0, r.output

    return {
        "root": root, "data": data, "pseudo": pseudo,
        "seg_path": seg_path, "clf_path": clf_path,
        "split": split, "volumes": volumes, "labels": labels,
        "csv": csv_path, "seg_out": seg_out,
        "seg_cfg": seg_cfg, "seg_train_time": seg_train_time,
    }


@pytest.fixture(scope="session")
def desk_norm(desk):
    split = desk["split"]
    train = [desk["volumes"][vid] for vid in split.train]
    masks = {v.id: compute_brain_mask(v) for v in train}
    norm = normalize_dataset(train, [masks[v.id] for v in train])
    return norm, masks


def _pseudo_dsc(desk, vids):
    """DSC of oracle-tag pseudo-labels against ground truth for given volumes."""
    scores = []
    for vid in vids:
        tags = load_tags(desk["data"] / f"{vid}_tags.json")
        pls = synthesize(desk["volumes"][vid], tags, "bright")
        scores.append(dsc(pls.mask, desk["labels"][vid]))
    return scores


def test_end_to_end_desk_scale(desk):
    summary = json.loads(desk["csv"].with_suffix(".summary.json").read_text())
    mean_dsc = summary["dsc"]["mean"]
    pseudo_scores = _pseudo_dsc(desk, desk["split"].test)
    pseudo_mean = float(np.mean(pseudo_scores))
    minutes = desk["seg_train_time"] / 60.0
    ok = mean_dsc >= 0.70 and mean_dsc > pseudo_mean
    crit("end-to-end", ok,
         f"held-out mean DSC {mean_dsc:.4f} (floor 0.70) vs pseudo-label DSC "
         f"{pseudo_mean:.4f}; segmenter training {minutes:.1f} min")


def test_classifier_quality(desk, desk_norm):
    norm, _ = desk_norm
    clf = load_checkpoint(desk["clf_path"])
    model = clf.build_model()
    split = desk["split"]
    test_vols = [desk["volumes"][vid] for vid in split.test]
    tag_sets = {vid: load_tags(desk["data"] / f"{vid}_tags.json") for vid in split.test}
    ex = classifier_examples(test_vols, tag_sets, clf.norm_stats)
    pred = predict_patches(model, ex.x)
    rep = classification_metrics(pred >= 0.5, ex.y)
    crit("classifier-quality", rep.f1 >= 0.90,
         f"test F1 {rep.f1:.4f} (P {rep.precision:.4f}, R {rep.recall:.4f}) on "
         f"{ex.y.size} patches")


def test_ablation_direction(desk, desk_norm):
    norm, masks_train = desk_norm
    split = desk["split"]
    abl_ids = split.train[:ABL_TRAIN_VOLUMES]
    train = [desk["volumes"][vid] for vid in abl_ids]
    val = [desk["volumes"][vid] for vid in split.val]
    masks = {v.id: compute_brain_mask(v) for v in train + val}
    pseudo = {}
    for vid in abl_ids + split.val:
        tags = load_tags(desk["data"] / f"{vid}_tags.json")
        pseudo[vid] = synthesize(desk["volumes"][vid], tags, "bright").mask
    tr = segmenter_crops(train, pseudo, norm, SHAPE, masks)
    va = segmenter_crops(val, pseudo, norm, SHAPE, masks)
    wins = 0
    pairs = []
    for seed in (0, 1, 2):
        tc = TrainConfig(max_epochs=ABL_EPOCHS, patience=ABL_EPOCHS, batch_size=BATCH,
                         seed=seed, seg_patch_size=SHAPE, seg_base_channels=BASE_CHANNELS,
                         crops_per_epoch=256)
        w = train_segmenter(tr, va, tc, norm, arch="wnetseg").meta["val_dsc"]
        u = train_segmenter(tr, va, tc, norm, arch="unetseg").meta["val_dsc"]
        pairs.append((w, u))
        wins += int(w >= u)
    crit("ablation-direction", wins >= 2,
         "cascade vs single half val DSC per seed: "
         + ", ".join(f"{w:.4f}/{u:.4f}" for w, u in pairs) + f"; wins {wins}/3")


def test_augmentation_loop(desk, desk_norm):
    norm, _ = desk_norm
    split = desk["split"]
    half_ids = split.train[: len(split.train) // 2]
    pool_ids = split.train[len(split.train) // 2 :]
    half = [desk["volumes"][vid] for vid in half_ids]
    pool = [desk["volumes"][vid] for vid in pool_ids]
    val = [desk["volumes"][vid] for vid in split.val]
    all_train = half + pool
    masks = {v.id: compute_brain_mask(v) for v in all_train + val}

    tag_sets = {vid: load_tags(desk["data"] / f"{vid}_tags.json")
                for vid in half_ids + split.val}
    tcc = TrainConfig(max_epochs=CLS_EPOCHS, patience=CLS_EPOCHS, batch_size=64, seed=0,
                      cls_channels=CLS_CHANNELS, patches_per_epoch=PATCHES_PER_EPOCH)
    clf_half = train_classifier(
        classifier_examples(half, tag_sets, norm),
        classifier_examples(val, {vid: tag_sets[vid] for vid in split.val}, norm),
        tcc, norm,
    )

    human_sets = []
    for vid in half_ids:
        human_sets.append(synthesize(desk["volumes"][vid], tag_sets[vid], "bright"))
    merged = enlarge(human_sets, pool, clf_half, "bright")
    assert len(merged) == len(split.train)
    merged_masks = {p.volume_id: p.mask for p in merged}

    val_pseudo = {}
    for vid in split.val:
        val_pseudo[vid] = synthesize(desk["volumes"][vid], tag_sets[vid], "bright").mask
    tc = TrainConfig(max_epochs=SEG_EPOCHS, patience=SEG_EPOCHS, batch_size=BATCH, seed=0,
                     seg_patch_size=SHAPE, seg_base_channels=BASE_CHANNELS,
                     crops_per_epoch=CROPS_PER_EPOCH)
    seg_b = train_segmenter(
        segmenter_crops(all_train, merged_masks, norm, SHAPE, masks),
        segmenter_crops(val, val_pseudo, norm, SHAPE, masks),
        tc, norm,
    )
    b_scores = [dsc(segment_volume(seg_b, desk["volumes"][vid]).binary, desk["labels"][vid])
                for vid in split.test]
    summary = json.loads(desk["csv"].with_suffix(".summary.json").read_text())
    a_mean = summary["dsc"]["mean"]
    b_mean = float(np.mean(b_scores))
    crit("augmentation-loop", b_mean >= a_mean - 0.03,
         f"50% human + enlarged {b_mean:.4f} vs 100% human {a_mean:.4f} "
         f"(allowed gap 0.03)")


@pytest.fixture(scope="session")
def calibrated(desk):
    seg = load_checkpoint(desk["seg_path"])
    clf = load_checkpoint(desk["clf_path"])
    split = desk["split"]
    val = [desk["volumes"][vid] for vid in split.val]
    t = calibrate_threshold(clf, val, {vid: desk["labels"][vid] for vid in split.val}, seg)
    return seg, clf, t


def test_second_opinion_properties(desk, calibrated):
    seg, clf, t = calibrated
    split = desk["split"]
    rng = np.random.default_rng(123)
    subset_ok = True
    clean_drops = []
    fp_un = 0
    fp_fi = 0
    for vid in split.test:
        v = desk["volumes"][vid]
        gt = desk["labels"][vid] > 0
        res = segment_volume(seg, v)
        probs = classifier_cell_probs(clf, v)
        filt = second_opinion_filter(res, probs, t)
        subset_ok &= bool(np.all(filt.binary <= res.binary))
        clean_drops.append(dsc(res.binary, gt) - dsc(filt.binary, gt))
        noisy = Volume(data=(v.data + rng.normal(0, 40.0, v.shape)).astype(np.float32),
                       spacing=v.spacing, id=v.id)
        nres = segment_volume(seg, noisy)
        nprobs = classifier_cell_probs(clf, noisy)
        nfilt = second_opinion_filter(nres, nprobs, t)
        subset_ok &= bool(np.all(nfilt.binary <= nres.binary))
        fp_un += int(np.sum((nres.binary > 0) & ~gt))
        fp_fi += int(np.sum((nfilt.binary > 0) & ~gt))
    max_drop = max(clean_drops)
    ok = subset_ok and fp_fi < fp_un and max_drop < 0.03
    crit("second-opinion", ok,
         f"filtered within unfiltered: {subset_ok}; noisy FP {fp_un} -> {fp_fi}; "
         f"max clean DSC drop {max_drop:.4f} (cap 0.03); threshold {t}")
