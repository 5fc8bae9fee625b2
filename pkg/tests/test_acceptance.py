"""Acceptance suite: one test (or group) per criterion, each at its stated
tolerance and time budget.  A PASS/FAIL line per criterion is printed in
the run summary (see conftest.py)."""
import hashlib
import json
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from ascfusion.cli import main as cli_main
from ascfusion.dataset import SyntheticSceneSpec, generate_synthetic_dataset, iter_recordings, load_recording
from ascfusion.features import SEGMENT_DIM, SegmentFeatureExtractor
from ascfusion.frontend import (
    LogMelExtractor,
    build_mel_filterbank,
    fit_scaler,
    hz_to_mel,
    segment_patches,
)
from ascfusion.fusion import fuse_simple
from ascfusion.gbm import GbmConfig, bin_features, fit_gbm
from ascfusion.lda import fit_lda, generalized_residual, scatter_matrices
from ascfusion.nn.gradcheck import check_layer, check_network
from ascfusion.nn.layers import BatchNorm, Conv2D, Dense, Flatten, MaxPool2D, ParallelConv2D, ReLU
from ascfusion.nn.network import FILTER_CONFIGURATIONS, NetworkConfig, build_network, parameter_count
from oracles import brute_force_split, random_split_instance

ROOT = Path(__file__).parents[1]
CONFIGS = ROOT / "configs"
criterion = pytest.mark.criterion


def run_cli(*args):
    code = cli_main([*args, "--log-level", "WARNING"])
    assert code == 0, f"ascfusion {' '.join(args)} exited with {code}"


# 1 ----------------------------------------------------------------------------


@criterion(1, "parameter counts: CNN_4 / CNN_sq within 0.5%, all configurations in [647k, 661k], < 1 s")
def test_parameter_counts(record_property):
    t0 = time.perf_counter()
    counts = {name: parameter_count(NetworkConfig(name)) for name in FILTER_CONFIGURATIONS}
    elapsed = time.perf_counter() - t0
    record_property("CNN_4", counts["CNN_4"])
    record_property("CNN_sq", counts["CNN_sq"])
    record_property("seconds", f"{elapsed:.3f}")
    assert abs(counts["CNN_4"] - 656_639) <= 0.005 * 656_639
    assert abs(counts["CNN_sq"] - 647_823) <= 0.005 * 647_823
    assert len(counts) == 6
    for name, n in counts.items():
        assert 647_000 <= n <= 661_000, (name, n)
    assert elapsed < 1.0


# 2 ----------------------------------------------------------------------------

F64 = np.float64


def layer_cases(r):
    return [
        ("conv_same", Conv2D(1, 3, (3, 8), "same", l2=1e-3, rng=r, dtype=F64), (4, 1, 6, 12)),
        ("conv_valid", Conv2D(2, 3, (3, 3), "valid", rng=r, dtype=F64), (4, 2, 6, 7)),
        ("conv_wide", Conv2D(1, 2, (2, 49), "same", rng=r, dtype=F64), (4, 1, 3, 52)),
        ("conv_large_map", Conv2D(2, 2, (3, 3), "same", rng=r, dtype=F64), (4, 2, 30, 80)),
        ("parallel_conv", ParallelConv2D([Conv2D(1, 2, (3, 3), rng=r, dtype=F64),
                                          Conv2D(1, 2, (3, 7), rng=r, dtype=F64)]), (4, 1, 5, 9)),
        ("batchnorm", BatchNorm(3, dtype=F64), (4, 3, 3, 5)),
        ("maxpool", MaxPool2D((2, 3)), (4, 2, 4, 7)),
        ("relu", ReLU(), (4, 3, 5)),
        ("flatten", Flatten(), (4, 2, 3, 2)),
        ("dense", Dense(12, 5, rng=r, dtype=F64), (4, 12)),
    ]


@criterion(2, "gradient checks: every layer type + composed CNN_4, float64, step 1e-5, "
              "4-sample batches, 5 seeds, rel. error < 1e-4, < 2 min")
def test_gradient_checks(record_property):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(5):
        r = np.random.default_rng(seed)
        for name, layer, shape in layer_cases(r):
            for p in layer.params.values():
                p += r.normal(scale=0.3, size=p.shape)
            x = r.normal(size=shape)
            if name in ("relu", "maxpool"):  # keep clear of kinks and ties
                x = np.sign(x) * (0.1 + np.abs(x)) + 1e-3 * r.permutation(x.size).reshape(shape)
            # the large map (> 2048 positions) takes the per-sample product path;
            # its 19200 input entries are checked on a random subset
            errs = check_layer(layer, x, r, step=1e-5, n_probe=600 if name == "conv_large_map" else None)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
        net = build_network(NetworkConfig("CNN_4"), seed=seed, dtype=F64)
        errs = check_network(net, r.normal(size=(4, 75, 128)), r.integers(0, 15, 4), r, step=1e-5)
        worst["CNN_4"] = max(worst.get("CNN_4", 0.0), max(errs.values()))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_error", f"{max(worst.values()):.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    for name, err in worst.items():
        assert err < 1e-4, (name, err)
    assert elapsed < 120


# 3 ----------------------------------------------------------------------------


@criterion(3, "GBM split oracle: 50 instances (n<=200, f<=5, bins<=16), every split = brute-force maximizer, < 1 min")
def test_gbm_split_oracle(record_property):
    t0 = time.perf_counter()
    n_splits = 0
    for i in range(50):
        rng = np.random.default_rng(1000 + i)
        X, y, k = random_split_instance(rng)
        assert len(X) <= 200 and X.shape[1] <= 5
        cfg = GbmConfig(learning_rate=0.3, max_bins=int(rng.integers(2, 17)), num_leaves=8,
                        min_data_in_leaf=int(rng.integers(1, 6)), num_rounds=3)
        binned = bin_features(X, cfg.max_bins)
        assert binned.n_bins.max() <= 16
        ens = fit_gbm(binned, y, cfg, k, record_splits=True)
        nb = int(binned.n_bins.max())
        for s in ens.split_log:
            ref = brute_force_split(binned.bins, s.samples, s.grad, s.hess, nb, cfg.lambda_l2,
                                    cfg.min_data_in_leaf, cfg.min_sum_hessian_in_leaf)
            assert ref is not None and (s.feature, s.bin) == ref[:2], (i, s.feature, s.bin, ref)
            n_splits += 1
    elapsed = time.perf_counter() - t0
    record_property("splits_checked", n_splits)
    record_property("seconds", f"{elapsed:.1f}")
    assert n_splits > 0 and elapsed < 60


# 4 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_segment_features(tmp_path_factory):
    """820-dim segment features of a 15-class x 8-recording synthetic corpus."""
    root = tmp_path_factory.mktemp("acc_corpus")
    manifest = generate_synthetic_dataset(SyntheticSceneSpec(15, 8, 10.0, seed=0), root)
    ex = SegmentFeatureExtractor()
    X, y = [], []
    for rec in iter_recordings(manifest):
        X.append(ex(rec))
        y += [rec.label] * len(X[-1])
    return np.concatenate(X), np.array(y)


@criterion(4, "GBM training log-loss non-increasing over 100 rounds on synthetic 820-dim features (1e-12)")
def test_gbm_loss_monotone(synthetic_segment_features, record_property):
    X, y = synthetic_segment_features
    assert X.shape[1] == SEGMENT_DIM == 820
    cfg = GbmConfig(learning_rate=0.1, max_bins=64, num_leaves=8, min_data_in_leaf=10, num_rounds=100)
    ens = fit_gbm(bin_features(X, cfg.max_bins), y, cfg, 15)
    steps = np.diff(ens.train_loss)
    record_property("rounds", len(steps))
    record_property("max_step", f"{steps.max():.2e}")
    record_property("final_loss", f"{ens.train_loss[-1]:.4g}")
    assert len(steps) == 100
    assert np.all(steps <= 1e-12)


# 5 ----------------------------------------------------------------------------


@criterion(5, "LDA: two-class Fisher cosine >= 0.999; 15-class residual < 1e-6; effective rank <= 14")
def test_lda_closed_form(record_property):
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(size=(500, 2)), rng.normal(size=(500, 2)) + [10.0, 0.0]])
    y = np.repeat([0, 1], 500)
    model = fit_lda(X, y, 1)
    Sw, _, _ = scatter_matrices(X, y)
    ref = np.linalg.solve(Sw, X[y == 0].mean(0) - X[y == 1].mean(0))
    cos = abs(model.projection[0] @ ref) / (np.linalg.norm(model.projection[0]) * np.linalg.norm(ref))

    means = rng.normal(scale=3.0, size=(15, 60))
    y15 = np.repeat(np.arange(15), 40)
    X15 = means[y15] + rng.normal(size=(len(y15), 60))
    residuals, ranks = [], []
    for d in (5, 14, 40):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = fit_lda(X15, y15, d)
        residuals.append(generalized_residual(m, X15, y15).max())
        ranks.append(m.effective_rank)
    record_property("cosine", f"{cos:.6f}")
    record_property("max_residual", f"{max(residuals):.2e}")
    record_property("rank", max(ranks))
    assert cos >= 0.999
    assert max(residuals) < 1e-6
    assert max(ranks) <= 14


# 6 ----------------------------------------------------------------------------


@criterion(6, "front end: 128 filters with peak 1.0, mel(1000)=15, 10 s -> 7x75x128 patches and 7x820 "
              "segments, scaler mean/std errors < 1e-9")
def test_frontend_invariants(tiny_corpus, record_property):
    fb = build_mel_filterbank()
    assert fb.weights.shape[0] == 128
    assert np.all(fb.weights.max(axis=1) == 1.0)
    assert float(hz_to_mel(1000.0)) == 15.0

    rec = load_recording(tiny_corpus.audio_path(tiny_corpus.ids[0]))
    assert rec.duration == 10.0
    mel = LogMelExtractor()(rec)
    assert segment_patches(mel).shape == (7, 75, 128)
    assert SegmentFeatureExtractor()(rec).shape == (7, 820)

    extractor = LogMelExtractor()
    train = [extractor(r) for r in iter_recordings(tiny_corpus, tiny_corpus.ids[:6])]
    scaler = fit_scaler(train)
    z = np.concatenate([scaler.transform(m) for m in train])
    mean_err = np.abs(z.mean(axis=0)).max()
    std_err = np.abs(z.std(axis=0) - 1).max()
    record_property("scaler_mean_err", f"{mean_err:.1e}")
    record_property("scaler_std_err", f"{std_err:.1e}")
    assert mean_err < 1e-9 and std_err < 1e-9


# 7 ----------------------------------------------------------------------------


@pytest.mark.slow
@criterion(7, "end-to-end synthetic 15x8, 4-fold CV via the CLI, < 30 min: CNN >= 0.90, GBM >= 0.80, "
              "stacked >= max - 0.01")
def test_end_to_end_synthetic(tmp_path, record_property):
    cfg = str(CONFIGS / "synthetic_desk.ini")
    t0 = time.perf_counter()
    for cmd in (["gen-synthetic"], ["extract", "mel"], ["extract", "features"], ["evaluate", "cv"]):
        run_cli(*cmd, "--config", cfg, "--out", str(tmp_path))
    elapsed = time.perf_counter() - t0
    m = json.loads((tmp_path / "cv" / "metrics.json").read_text())
    cnn = m["branches"]["cnn"]["accuracy_fold_mean"]
    gbm = m["branches"]["gbm"]["accuracy_fold_mean"]
    stacked = m["fusion"]["stacking"]["accuracy_pooled"]
    record_property("cnn", f"{cnn:.4f}")
    record_property("gbm", f"{gbm:.4f}")
    record_property("stacked", f"{stacked:.4f}")
    record_property("minutes", f"{elapsed / 60:.1f}")
    assert sum(m["branches"]["cnn"]["confusion"][0]) == 8  # 8 recordings per class
    assert np.sum(m["branches"]["cnn"]["confusion"]) == 120
    assert elapsed < 30 * 60
    assert cnn >= 0.90
    assert gbm >= 0.80
    assert stacked >= max(cnn, gbm) - 0.01


# 8 ----------------------------------------------------------------------------


@criterion(8, "fusion: 1000 random pairs give distributions (sum 1 +- 1e-6), arithmetic/geometric symmetric, "
              "rank fusion invariant under 100 monotone maps")
def test_fusion_properties(record_property):
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.full(15, 0.5), 1000)
    q = rng.dirichlet(np.full(15, 0.5), 1000)
    worst = 0.0
    for method in ("arithmetic", "geometric", "rank"):
        fused, _ = fuse_simple(method, p, q)
        assert np.all(fused >= 0)
        worst = max(worst, np.abs(fused.sum(axis=1) - 1).max())
    for method in ("arithmetic", "geometric"):
        a, la = fuse_simple(method, p, q)
        b, lb = fuse_simple(method, q, p)
        assert np.array_equal(a, b) and np.array_equal(la, lb)
    base, labels = fuse_simple("rank", p, q)
    for _ in range(100):
        # random strictly increasing map: positive mixture of power laws
        w = rng.uniform(0.1, 2.0, 3)
        e = rng.uniform(0.2, 3.0, 3)
        mp = sum(wi * p ** ei for wi, ei in zip(w, e))
        mp /= mp.sum(axis=1, keepdims=True)
        fused, lab = fuse_simple("rank", mp, q)
        assert np.array_equal(fused, base) and np.array_equal(lab, labels)
    record_property("max_sum_error", f"{worst:.1e}")
    assert worst <= 1e-6


# 9 ----------------------------------------------------------------------------


def _metric_hashes(out):
    files = sorted(p for p in (out / "cv").rglob("*") if p.suffix in (".json", ".csv"))
    return {p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


@pytest.mark.slow
@criterion(9, "CLI re-run with --threads 1 gives hash-identical metric files")
def test_cli_determinism(tmp_path, record_property):
    cfg = str(CONFIGS / "synthetic_tiny.ini")
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in (["gen-synthetic"], ["extract", "mel"], ["extract", "features"], ["evaluate", "cv"]):
            run_cli(*cmd, "--config", cfg, "--out", str(out), "--threads", "1")
        hashes.append(_metric_hashes(out))
    record_property("files_compared", len(hashes[0]))
    assert "cv/metrics.json" in hashes[0]
    assert hashes[0] == hashes[1]


# 10 ---------------------------------------------------------------------------

TUT_DEV = Path(os.environ.get("ASCFUSION_TUT_DEV", ROOT / "data" / "TUT-acoustic-scenes-2017-development"))


@pytest.mark.slow
@pytest.mark.skipif(not (TUT_DEV / "meta.txt").exists(),
                    reason=f"TUT Acoustic Scenes 2017 development set not found at {TUT_DEV}")
@criterion(10, "optional TUT 2017 track: GBM+LDA development CV accuracy within 81.1 +- 6 points")
def test_tut_gbm_lda(tmp_path, record_property):
    args = ["--config", str(CONFIGS / "tut2017_cnn4_gbm_lda.ini"), "--out", str(tmp_path),
            "--dataset.manifest", str(TUT_DEV / "meta.txt"),
            "--dataset.folds_dir", str(TUT_DEV / "evaluation_setup"),
            "--evaluation.branches", "gbm"]
    run_cli("extract", "features", *args)
    run_cli("evaluate", "cv", *args)
    acc = json.loads((tmp_path / "cv" / "metrics.json").read_text())["branches"]["gbm"]["accuracy_fold_mean"]
    record_property("gbm_lda_dev", f"{100 * acc:.1f}")
    if not abs(100 * acc - 81.1) <= 6.0:
        # the optional track is reported but never blocks the build
        pytest.xfail(f"GBM+LDA dev accuracy {100 * acc:.1f} outside 81.1 +- 6")
