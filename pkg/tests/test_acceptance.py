"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end synthetic
training (criterion 7) takes a few minutes; everything else is fast.
"""

import os
import time

import numpy as np
import pytest

from mimhsi import autodiff as ad
from mimhsi.autodiff import Tensor
from mimhsi.cli import main as cli_main
from mimhsi.data import (
    HsiCube,
    LabelMap,
    confusion_matrix,
    load_cube,
    load_labels,
    load_manifest,
    make_split,
    metrics,
    pca_reduce,
    save_cube,
    save_labels,
    save_manifest,
    synth_generate,
)
from mimhsi.encoder import gdm
from mimhsi.gradcheck import check_full_model, check_primitives, check_selective_scan
from mimhsi.model import MimModel, load_checkpoint, predict_classes, save_checkpoint
from mimhsi.scan import continuity_stats, mcs_map, split_center
from mimhsi.ssm import (
    init_ssm_params,
    lti_scan_sequential,
    selective_scan_parallel,
    selective_scan_sequential,
    ssm_kernel_conv,
    zoh_discretize,
)


def report(num, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
    assert ok, f"criterion {num}: {detail}"


def _mixed_rel(a, b):
    """Elementwise |a-b| / max(1, |a|, |b|): relative for large values with an
    absolute floor of 1 so exact cancellations near zero do not explode."""
    return ad.rel_error(a, b, floor=1.0)


# -- criterion 1: scan correctness ------------------------------------------------


def test_criterion_1_scan_correctness():
    t0 = time.time()
    for p in (1, 3, 5, 7, 9, 11, 13, 15):
        grid = {(r, c) for r in range(p) for c in range(p)}
        center = ((p - 1) // 2, (p - 1) // 2)
        for type_id in (1, 2, 3, 4):
            m = mcs_map(p, type_id)
            assert sorted(m.order) == sorted(grid)
            assert continuity_stats(m)[0] == 0
            assert m.order[(p * p - 1) // 2] == center
            s = split_center(m)
            assert len(s.forward) == len(s.backward) == (p * p + 1) // 2
            assert s.forward[-1] == center and s.backward[-1] == center
            assert set(s.forward) | set(s.backward) == grid
            assert set(s.forward) & set(s.backward) == {center}
    elapsed = time.time() - t0
    report(1, elapsed < 1.0, f"all p<=15, 4 types: bijective, 0 jumps, centered splits ({elapsed:.2f}s < 1s)")


# -- criterion 2: parallel-scan oracle ----------------------------------------------


def test_criterion_2_parallel_scan_oracle():
    rng = np.random.default_rng(2024)
    lengths = [13, 41] + [int(v) for v in rng.integers(2, 258, size=98)]
    t0 = time.time()
    worst = 0.0
    for i, length in enumerate(lengths):
        d = int(rng.choice([1, 4]))
        n = int(rng.choice([1, 16]))
        params = init_ssm_params(rng, d, n)
        x = Tensor(rng.normal(size=(length, d)))
        with ad.no_grad():
            y_seq = selective_scan_sequential(x, params)
        y_par = selective_scan_parallel(x, params)
        worst = max(worst, _mixed_rel(y_seq, y_par))
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 10.0
    report(2, ok, f"100 instances (L incl. 13, 41): parallel vs sequential "
                  f"max err {worst:.2e} <= 1e-10 ({elapsed:.1f}s < 10s)")


# -- criterion 3: LTI cross-check ------------------------------------------------------


def test_criterion_3_lti_kernel_cross_check():
    rng = np.random.default_rng(3)
    t0 = time.time()
    worst = 0.0
    for _ in range(20):
        d, n = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        length = int(rng.integers(8, 129))
        a = -np.exp(rng.normal(size=(d, n)))
        delta = np.exp(rng.normal(scale=0.5, size=(d,)))
        a_bar = np.exp(delta[:, None] * a)
        b_bar = rng.normal(size=(d, n))
        c = rng.normal(size=(n,))
        d_skip = rng.normal(size=(d,))
        x = rng.normal(size=(length, d))
        y_rec = lti_scan_sequential(x, a_bar, b_bar, c, d_skip)
        y_conv = ssm_kernel_conv(x, a_bar, b_bar, c, d_skip)
        worst = max(worst, _mixed_rel(y_rec, y_conv))
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and elapsed < 5.0
    report(3, ok, f"20 frozen systems: recurrence vs kernel max err {worst:.2e} <= 1e-9 ({elapsed:.1f}s < 5s)")


# -- criterion 4: zero-order hold -------------------------------------------------------


def test_criterion_4_zoh():
    from scipy.integrate import simpson

    a_bar, b_bar = zoh_discretize(np.array([[-1.0]]), np.array([[1.0]]), np.array([[np.log(2.0)]]))
    analytic_ok = abs(a_bar.ravel()[0] - 0.5) < 1e-12 and abs(b_bar.ravel()[0] - 0.5) < 1e-12

    rng = np.random.default_rng(4)
    worst_quad = 0.0
    for _ in range(50):
        a = -np.exp(rng.normal(size=()))
        delta = np.exp(rng.normal(scale=0.7, size=()))
        b = rng.normal(size=())
        s = np.linspace(0.0, delta, 4001)
        integral = simpson(np.exp(a * s), x=s) * b
        _, b_bar = zoh_discretize(np.array([[a]]), np.array([[b]]), np.array([[delta]]))
        worst_quad = max(worst_quad, abs(b_bar.ravel()[0] - integral))

    worst_switch = 0.0
    for z in (1e-6, -1e-6, 9.999e-7, -9.999e-7):
        worst_switch = max(worst_switch, abs(np.expm1(z) / z - (1.0 + 0.5 * z)))

    ok = analytic_ok and worst_quad <= 1e-8 and worst_switch <= 1e-9
    report(4, ok, f"analytic exact, quadrature err {worst_quad:.2e} <= 1e-8, "
                  f"Taylor switch gap {worst_switch:.2e} <= 1e-9")


# -- criterion 5: gradient suites ---------------------------------------------------------


def test_criterion_5_gradient_suites():
    t0 = time.time()
    prim = check_primitives(seed=0, n_trials=20)
    scan = check_selective_scan(seed=0, n_trials=6)
    full = check_full_model(seed=0)
    elapsed = time.time() - t0
    worst_prim = max(r.max_rel_err for r in prim + scan)
    worst_full = full[0].max_rel_err
    bad = [r.op for r in prim + scan + full if not r.passed]
    ok = not bad and elapsed < 120.0
    report(5, ok, f"primitives+scan max err {worst_prim:.2e} < 1e-4, "
                  f"tiny full model {worst_full:.2e} < 1e-3 ({elapsed:.0f}s < 120s)"
                  + (f"; failing: {bad}" if bad else ""))


# -- criterion 6: Gaussian decay mask -------------------------------------------------------


def test_criterion_6_gdm():
    rng = np.random.default_rng(6)
    ok = True
    for length in (2, 3, 5, 13, 25):
        weights, _ = gdm(Tensor(rng.normal(size=(2, length, 5))))
        ok &= abs(weights.w_idx.data.sum() - 1.0) < 1e-9
        ok &= bool(np.all(np.abs(weights.w_fea.data.sum(axis=-1) - 1.0) < 1e-9))
        ok &= bool(np.all(np.diff(weights.w_idx.data) >= 0))
    hand, _ = gdm(Tensor(rng.normal(size=(1, 3, 4))))
    ok &= bool(np.all(np.abs(hand.w_idx.data - [0.1859, 0.3620, 0.4521]) < 1e-3))
    degen, _ = gdm(Tensor(np.ones((1, 4, 3))))
    ok &= bool(np.all(np.abs(degen.w_fea.data - 0.25) < 1e-12))
    report(6, ok, "masks sum to 1 +/- 1e-9, index mask monotone, length-3 hand values "
                  "within 1e-3, degenerate spread falls back to uniform")


# -- criteria 7-9: end-to-end synthetic runs --------------------------------------------------


RECIPE = """[data]
cube = {data}/cube.hsic
labels = {data}/labels.hsil
manifest = {data}/manifest.txt

[model]
patch = 7
pca_bands = 16
embed_dim = 32
hidden_dim = 32
state_dim = 8
depth = 1
conv_width = 4
scan_design = mamba
scan_types = 4
fusion = pre-merge

[train]
seed = {seed}
epochs = 50
batch_size = 8
lr = 0.002
out_dir = {out}
"""


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    os.environ.pop("MIM_SEED", None)
    base = tmp_path_factory.mktemp("acceptance")
    data = base / "data"
    t0 = time.time()
    rc = cli_main(["synth", "--seed", "7", "--hw", "64x64", "--bands", "32",
                   "--classes", "4", "--train-per-class", "20", "--out", str(data)])
    assert rc == 0
    cube = pca_reduce(load_cube(data / "cube.hsic"), 16)
    manifest = load_manifest(data / "manifest.txt")
    coords, true = [], []
    for cls in sorted(manifest.test):
        for rc_ in manifest.test[cls]:
            coords.append(rc_)
            true.append(cls)
    coords, true = np.asarray(coords), np.asarray(true)

    runs = []
    for seed in (0, 1, 2):
        out = base / f"run{seed}"
        cfg_path = base / f"run{seed}.cfg"
        cfg_path.write_text(RECIPE.format(data=data, out=out, seed=seed))
        rc = cli_main(["train", "--config", str(cfg_path)])
        assert rc == 0
        model, _ = load_checkpoint(out / "checkpoint.mimc")
        pred = predict_classes(model, cube, coords)
        m = metrics(confusion_matrix(true, pred, 4))
        runs.append({"seed": seed, "oa": m["oa"], "kappa": m["kappa"], "out": out})
    return {"data": data, "base": base, "runs": runs, "elapsed": time.time() - t0}


def test_criterion_7_end_to_end_synthetic(synthetic_run):
    oas = [r["oa"] for r in synthetic_run["runs"]]
    kappas = [r["kappa"] for r in synthetic_run["runs"]]
    mean_oa, mean_kappa = float(np.mean(oas)), float(np.mean(kappas))
    ok = mean_oa >= 0.95 and mean_kappa >= 0.90
    per_seed = " ".join(f"seed{r['seed']}:OA={r['oa']:.4f}" for r in synthetic_run["runs"])
    report(7, ok, f"3-seed synthetic run: mean OA {mean_oa:.4f} >= 0.95, "
                  f"mean kappa {mean_kappa:.4f} >= 0.90 ({per_seed}; "
                  f"{synthetic_run['elapsed']:.0f}s, target < 600s)")


def test_criterion_8_ablation_direction_soft(tmp_path):
    out_csv = tmp_path / "ablation.csv"
    rc = cli_main(["ablate", "--grid", "components", "--seeds", "3", "--epochs", "12",
                   "--variants", "none,stl+gdm+stf", "--out", str(out_csv)])
    assert rc == 0
    rows = out_csv.read_text().strip().splitlines()
    assert rows[0] == "variant,seed,oa,aa,kappa"
    table = {}
    for line in rows[1:]:
        variant, _seed, oa, _aa, _kappa = line.split(",")
        table.setdefault(variant, []).append(float(oa))
    mean_full = float(np.mean(table["stl+gdm+stf"]))
    mean_none = float(np.mean(table["none"]))
    ordered = mean_full >= mean_none
    # soft criterion: the ordering is reported, only the grid/CSV are gated
    print(f"\n[{'PASS' if ordered else 'SOFT-FAIL'}] criterion 8 (reported, not gated): "
          f"full components mean OA {mean_full:.4f} vs all-off {mean_none:.4f} "
          f"(csv: {out_csv})")
    report(8, len(rows) == 7, "ablation CSV emitted with 3 seeds x 2 variants")


def test_criterion_9_determinism(tmp_path):
    os.environ.pop("MIM_SEED", None)
    data = tmp_path / "data"
    assert cli_main(["synth", "--seed", "11", "--hw", "16x16", "--bands", "8",
                     "--classes", "2", "--train-per-class", "4", "--out", str(data)]) == 0
    cfg = """[data]
cube = {data}/cube.hsic
labels = {data}/labels.hsil
manifest = {data}/manifest.txt
[model]
patch = 3
pca_bands = 4
embed_dim = 4
hidden_dim = 4
state_dim = 4
depth = 1
conv_width = 2
[train]
seed = 5
epochs = 2
batch_size = 4
lr = 0.001
out_dir = {out}
"""
    blobs, maps = [], []
    for tag in ("a", "b"):
        out = tmp_path / tag
        cfg_path = tmp_path / f"{tag}.cfg"
        cfg_path.write_text(cfg.format(data=data, out=out))
        assert cli_main(["--threads", "1", "train", "--config", str(cfg_path)]) == 0
        blobs.append((out / "checkpoint.mimc").read_bytes())
        ppm = tmp_path / f"{tag}.ppm"
        assert cli_main(["predict-map", "--checkpoint", str(out / "checkpoint.mimc"),
                         "--data", str(data / "cube.hsic"),
                         "--labels", str(data / "labels.hsil"), "--out", str(ppm)]) == 0
        maps.append(ppm.read_bytes())
    ok = blobs[0] == blobs[1] and maps[0] == maps[1]
    report(9, ok, "same seed, --threads 1: checkpoints and classification maps bit-identical")


def test_criterion_10_format_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    ok = True

    cube = HsiCube(data=rng.normal(size=(4, 5, 3)).astype(np.float32))
    save_cube(tmp_path / "c.hsic", cube)
    ok &= bool(np.array_equal(load_cube(tmp_path / "c.hsic").data, cube.data))
    save_cube(tmp_path / "c2.hsic", load_cube(tmp_path / "c.hsic"))
    ok &= (tmp_path / "c.hsic").read_bytes() == (tmp_path / "c2.hsic").read_bytes()

    labels = LabelMap(data=rng.integers(0, 4, size=(4, 5)).astype(np.uint16))
    save_labels(tmp_path / "l.hsil", labels)
    ok &= bool(np.array_equal(load_labels(tmp_path / "l.hsil").data, labels.data))

    _, synth_labels = synth_generate(2, 10, 10, 4, 2)
    manifest = make_split(synth_labels, 3, seed=2)
    save_manifest(tmp_path / "m.txt", manifest)
    back = load_manifest(tmp_path / "m.txt")
    ok &= back.train == manifest.train and back.test == manifest.test

    from mimhsi.gradcheck import tiny_model_config

    model = MimModel(tiny_model_config(), seed=1)
    save_checkpoint(tmp_path / "k.mimc", model, seed=1)
    loaded, _ = load_checkpoint(tmp_path / "k.mimc")
    for (_, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        ok &= bool(np.array_equal(a.data, b.data))
    save_checkpoint(tmp_path / "k2.mimc", loaded, seed=1)
    ok &= (tmp_path / "k.mimc").read_bytes() == (tmp_path / "k2.mimc").read_bytes()

    # corrupted magic must be rejected with exit code 2 at the CLI surface
    raw = bytearray((tmp_path / "c.hsic").read_bytes())
    raw[:4] = b"EVIL"
    (tmp_path / "bad.hsic").write_bytes(bytes(raw))
    save_labels(tmp_path / "bl.hsil", LabelMap(data=np.ones((4, 5), dtype=np.uint16)))
    rc = cli_main(["predict-map", "--checkpoint", str(tmp_path / "k.mimc"),
                   "--data", str(tmp_path / "bad.hsic"),
                   "--labels", str(tmp_path / "bl.hsil"), "--out", str(tmp_path / "x.ppm")])
    ok &= rc == 2

    report(10, ok, "cube/labels/manifest/checkpoint round-trip bit-exact; "
                   "corrupted magic rejected with exit code 2")
