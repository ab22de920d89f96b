"""Acceptance criteria 1-8. Each test prints one ``PASS``/``FAIL`` line.

Criteria 6-8 train real networks and dominate the runtime (tens of
minutes on one core). Run just this file with
``pytest tests/test_acceptance.py -v -s``.
"""
import dataclasses
import math
import time

import numpy as np
import pytest
from scipy import ndimage
from threadpoolctl import threadpool_limits

from mssunet import config as C
from mssunet import experiment
from mssunet import infer as I
from mssunet import loss as L
from mssunet import metrics as M
from mssunet import postprocess as pp
from mssunet import preprocess as prep
from mssunet.nn.unet import UNetConfig
from mssunet.volume import LabelMask, Volume
from oracles import (brute_hausdorff, enumerate_sparse_masks, flood_fill_components, gradient_check,
                     ids_partition, pointset_partition, random_point, same_partition,
                     soft_dice_formula, sorted_percentile)

E2E_EPOCHS = 10  # of 100 iterations; criterion 6 allows up to 60
ABLATION_SEEDS = (0, 1, 2)


def report(capsys, criterion: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")


def e2e_config(train_seed: int = 0, epochs: int = E2E_EPOCHS) -> C.Config:
    cfg = C.apply_profile(C.Config(), "desk")
    return dataclasses.replace(
        cfg, train=dataclasses.replace(cfg.train, epochs=epochs, iterations_per_epoch=100,
                                       seed=train_seed))


# -- 1 ---------------------------------------------------------------------------

def test_c1_gradient_oracle(capsys):
    t0 = time.perf_counter()
    cfg = UNetConfig(levels=2, base_channels=2, dtype="float64")
    results = []
    for seed in range(3):
        net, x, y = random_point(cfg, seed)
        results.append(gradient_check(net, x, y, L.LossConfig(), h=1e-4))
    elapsed = time.perf_counter() - t0
    worst = max(r.rel_error for r in results)
    skipped = sum(r.skipped_kinks for r in results)
    checked = sum(r.checked for r in results)
    ok = worst < 1e-4 and elapsed < 120 and all(r.checked > 0.95 * (r.checked + r.skipped_kinks)
                                                for r in results)
    report(capsys, 1, ok, f"worst rel error {worst:.2e} over 3 points, {checked} elements "
                          f"({skipped} kink-straddling skipped), {elapsed:.0f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_c2_loss_fixed_points(capsys):
    a = L.exp_log_dice(1.0, 1.0)
    e1 = math.exp(-1)
    b = L.exp_log_dice(e1, e1)
    weights_sum = sum(L.DEFAULT_LAYER_WEIGHTS)
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=(1, 16, 16, 16)).transpose(0, 4, 1, 2, 3)
    lab = rng.integers(0, 3, size=(1, 16, 16, 16))
    layer = L.layer_loss(probs, lab)
    # the same layer loss at all five heads, fed straight into the weighted sum
    total = sum(w * layer for w in L.DEFAULT_LAYER_WEIGHTS)
    ok = a == 0.0 and abs(b - 1.0) <= 1e-9 and abs(weights_sum - 1) <= 1e-12 \
        and abs(total - layer) <= 1e-12
    report(capsys, 2, ok, f"exp_log(1,1)={a}, exp_log(e^-1,e^-1)={b:.12f}, "
                          f"sum(weights)={weights_sum!r}, |total-layer|={abs(total - layer):.1e}")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_c3_oracle_equivalence(capsys):
    rng = np.random.default_rng(3)
    cc_ok = True
    for i in range(30):
        m = (rng.random((20, 20, 20)) < rng.uniform(0.05, 0.4)).astype(np.uint8)
        for conn in (6, 26):
            lab = pp.connected_components(m, 1, conn)
            cc_ok &= same_partition(lab.ids, flood_fill_components(m, conn))
    n_small = 0
    for m, coords in enumerate_sparse_masks((3, 3, 3), 6):
        for conn in (6, 26):
            ids = pp.connected_components(m, 1, conn).ids
            cc_ok &= ids_partition(ids, coords) == pointset_partition(coords, conn)
            n_small += 1

    hd_err = 0.0
    for _ in range(200):
        a = rng.integers(0, 30, size=(rng.integers(1, 51), 3))
        b = rng.integers(0, 30, size=(rng.integers(1, 51), 3))
        s = rng.uniform(0.5, 3.0, size=3)
        hd_err = max(hd_err, abs(M.hausdorff_mm(a, b, s) - brute_hausdorff(a, b, s)))

    sd_err = 0.0
    for _ in range(200):
        p, t = rng.random(40), (rng.random(40) > 0.5).astype(float)
        sd_err = max(sd_err, abs(L.soft_dice(p, t) - soft_dice_formula(p, t)))

    pct_ok = True
    for _ in range(200):
        v = rng.normal(size=rng.integers(1, 500)) * 100
        q = float(rng.uniform(0, 100))
        pct_ok &= prep.percentile(v, q) == sorted_percentile(v, q)
    ramp = np.arange(1, 1001, dtype=float)
    pct_ok &= prep.percentile(ramp, 0.5) == sorted_percentile(ramp, 0.5)

    ok = bool(cc_ok) and hd_err <= 1e-9 and sd_err <= 1e-7 and bool(pct_ok)
    report(capsys, 3, ok, f"components exact on 30 random 20^3 masks and {n_small} enumerated 3^3 "
                          f"masks; hausdorff max err {hd_err:.1e} mm; soft dice max err {sd_err:.1e}; "
                          f"percentiles exact={bool(pct_ok)}")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_c4_aggregation(capsys):
    rng = np.random.default_rng(4)
    q = np.array([0.25, 0.6, 0.15])

    def constant(x):
        return np.broadcast_to(q[None, :, None, None, None], (x.shape[0], 3) + x.shape[2:]).copy()

    def equivariant(x):
        z = np.concatenate([np.zeros_like(x), 2 * x, -x * x], axis=1)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    v = Volume(rng.normal(size=(40, 27, 35)).astype(np.float32))
    dev = 0.0
    for tta in (I.NO_TTA, I.TtaPolicy()):
        p = I.predict_volume(constant, v, (16, 16, 16), tta)
        dev = max(dev, float(np.abs(p.data - q[:, None, None, None]).max()))
    a = I.predict_volume(equivariant, v, (16, 16, 16), I.NO_TTA)
    b = I.predict_volume(equivariant, v, (16, 16, 16), I.TtaPolicy())
    mirror_dev = float(np.abs(a.data - b.data).max())

    covered = 0
    for _ in range(50):
        vol = tuple(int(n) for n in rng.integers(1, 70, size=3))
        patch = tuple(int(rng.integers(1, n + 1)) for n in vol)
        grid = I.make_grid(vol, patch)
        hits = np.zeros(vol, bool)
        for z, y, x in grid.origins:
            hits[z : z + patch[0], y : y + patch[1], x : x + patch[2]] = True
        covered += bool(hits.all())
    ok = dev <= 1e-6 and mirror_dev <= 1e-6 and covered == 50
    report(capsys, 4, ok, f"constant stub max dev {dev:.1e}; mirror TTA on equivariant stub "
                          f"max dev {mirror_dev:.1e}; coverage {covered}/50 shapes")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def _ball(shape, centre, r):
    z, y, x = np.indices(shape)
    return (z - centre[0]) ** 2 + (y - centre[1]) ** 2 + (x - centre[2]) ** 2 <= r * r


def test_c5_postprocess_contract(capsys):
    shape = (32, 40, 64)
    m = np.zeros(shape, np.uint8)
    m[_ball(shape, (16, 20, 16), 8)] = 1
    m[_ball(shape, (16, 20, 48), 7)] = 1
    attached = _ball(shape, (16, 20, 26), 4)  # straddles the left kidney's surface
    floating = _ball(shape, (5, 5, 32), 3)
    m[attached] = 2
    m[floating] = 2
    out = pp.postprocess(LabelMask(m)).data
    expected = m.copy()
    expected[floating] = 0
    fixture_ok = np.array_equal(out, expected)

    rng = np.random.default_rng(5)
    idem = never_adds = 0
    for _ in range(50):
        k = ndimage.gaussian_filter(rng.random((16, 16, 16)), 1.2)
        t = ndimage.gaussian_filter(rng.random((16, 16, 16)), 1.2)
        r = np.zeros(k.shape, np.uint8)
        r[k > np.quantile(k, rng.uniform(0.6, 0.9))] = 1
        r[t > np.quantile(t, rng.uniform(0.8, 0.97))] = 2
        once = pp.postprocess(LabelMask(r)).data
        twice = pp.postprocess(LabelMask(once)).data
        idem += np.array_equal(once, twice)
        changed = once != r
        never_adds += bool(np.all(once[changed] == 0))
    ok = fixture_ok and idem == 50 and never_adds == 50
    report(capsys, 5, ok, f"fixture floating tumor removed, rest intact={fixture_ok}; "
                          f"idempotent {idem}/50; never adds foreground {never_adds}/50")
    assert ok


# -- 6 and 8 ------------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    """Criterion 6 run twice, single-threaded, same seeds."""
    runs = []
    for i in range(2):
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            res = experiment.run(e2e_config(), tmp_path_factory.mktemp(f"e2e{i}"))
        runs.append((res, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_c6_end_to_end(capsys, e2e_runs):
    res, secs = e2e_runs[0]
    spec = C.Config().phantom
    ok = res.kidney_dice >= 0.90 and res.tumor_dice >= 0.75 and secs <= 45 * 60
    report(capsys, 6, ok, f"kidney Dice {res.kidney_dice:.4f} (>= 0.90), tumor Dice "
                          f"{res.tumor_dice:.4f} (>= 0.75) on 5 held-out {spec.shape} phantoms; "
                          f"{len(res.history)} epochs x 100 iterations; {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c8_determinism(capsys, e2e_runs):
    (a, _), (b, _) = e2e_runs
    same = {}
    for name in ("net.ckpt", "report.csv", "summary.json", "history.csv", "audit.json"):
        same[name] = a.path(name).read_bytes() == b.path(name).read_bytes()
    for f in sorted((a.workdir / "post").iterdir()):
        same[f"post/{f.name}"] = f.read_bytes() == (b.workdir / "post" / f.name).read_bytes()
    ok = all(same.values())
    diff = [k for k, v in same.items() if not v]
    report(capsys, 8, ok, f"{sum(same.values())}/{len(same)} artefacts bit-identical "
                          f"(checkpoint, reports, history, masks)" + (f"; differ: {diff}" if diff else ""))
    assert ok


# -- 7 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c7_ablation_direction(capsys, e2e_runs, tmp_path_factory):
    # Both arms get the criterion-6 budget and chain: the baseline converges faster at first,
    # so only the final scores are compared. Seed 0 of the full arm is the criterion-6 run.
    data = e2e_runs[0][0].workdir
    base = tmp_path_factory.mktemp("ablation")
    rows = []
    with threadpool_limits(limits=1):
        for seed in ABLATION_SEEDS:
            cfg = e2e_config(seed)
            if seed == 0:
                full = e2e_runs[0][0]
            else:
                full = experiment.run(cfg, base / f"full{seed}", data_dir=data)
            abl = experiment.run(experiment.ablation_config(cfg), base / f"abl{seed}", data_dir=data)
            rows.append((seed, full.tumor_dice, abl.tumor_dice))
    wins = sum(a <= f for _, f, a in rows)
    ok = wins >= 2
    detail = "; ".join(f"seed {s}: MSS+exp-log {f:.4f} vs classic+plain {a:.4f}" for s, f, a in rows)
    report(capsys, 7, ok, f"baseline <= full in {wins}/3 ({detail})")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
