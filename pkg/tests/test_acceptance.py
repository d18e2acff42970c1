"""Acceptance suite. Each test records one PASS/FAIL line, printed together
in the terminal summary. Thresholds are pinned below.

The ECG5000 checks read the UCR files from ``$FMMHEAD_ECG5000_DIR``; without
them they record FAIL and are reported as expected failures.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fmmhead.autoencoder import DenseAE, FMMDenseAE
from fmmhead.dataio import SyntheticSpec, ecg5000_files, generate_synthetic, load_ecg5000, truth_matrix
from fmmhead.fit import fit_many
from fmmhead.metrics import auroc, circular_correlation, coefficient_correlations
from fmmhead.model import circular_distance, encode
from fmmhead.training import LR_SWEEP, TrainConfig, anomaly_scores, train_anomaly, warmup

from conftest import ACCEPTANCE
from test_cli import run_pipeline
from test_metrics import direct_circular_correlation, mann_whitney

pytestmark = pytest.mark.slow

ECG5000_BASELINE_MIN = 0.97
ECG5000_FMM_MIN = 0.95
ECG5000_MAX_SECONDS = 30 * 60
ROUNDTRIP_ALPHA_TOL = 0.05
ROUNDTRIP_R2_MIN = 0.995
WARMUP_CORR_MIN = 0.4
SPEEDUP_MIN = 100.0
EXTRACT_BATCH = 16
GRADIENT_SUITE_SECONDS = 60.0
METRIC_TOL = 1e-12
LIFT_MARGIN = 0.02
LIFT_MIN_AUROC = 0.85

TESTS = Path(__file__).parent


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def ecg5000_or_fail(n):
    d = os.environ.get("FMMHEAD_ECG5000_DIR")
    if not d or not Path(d).is_dir():
        ACCEPTANCE[n] = (False, "ECG5000 not available (set FMMHEAD_ECG5000_DIR)")
        pytest.xfail("ECG5000 not available")
    return load_ecg5000(*ecg5000_files(d))


def sweep_auroc(make_model, train, test):
    normal = [b for b in train if b.is_normal]
    y = test.binary_labels()
    results = {}
    for lr in LR_SWEEP:
        model = make_model()
        train_anomaly(model, normal, TrainConfig(learning_rate=lr, seed=0))
        results[lr] = auroc(anomaly_scores(model, test.beats), y)
    return results


def test_1_ecg5000_baseline():
    train, test = ecg5000_or_fail(1)
    start = time.perf_counter()
    res = sweep_auroc(lambda: DenseAE(train.l_pad, seed=0), train, test)
    elapsed = time.perf_counter() - start
    best_lr = max(res, key=res.get)
    record(1, res[best_lr] >= ECG5000_BASELINE_MIN and elapsed <= ECG5000_MAX_SECONDS,
           f"DenseAE AUROC {res[best_lr]:.4f} at lr {best_lr:g} (need >= {ECG5000_BASELINE_MIN}); "
           f"sweep {elapsed:.0f} s (limit {ECG5000_MAX_SECONDS} s)")


def test_2_ecg5000_fmm():
    train, test = ecg5000_or_fail(2)
    res = sweep_auroc(lambda: FMMDenseAE(train.l_pad, seed=0), train, test)
    best_lr = max(res, key=res.get)
    record(2, res[best_lr] >= ECG5000_FMM_MIN,
           f"FMM-DenseAE (no warm-up) AUROC {res[best_lr]:.4f} at lr {best_lr:g} (need >= {ECG5000_FMM_MIN})")


def test_3_oracle_round_trip():
    ds, truth = generate_synthetic(SyntheticSpec(n_beats=200, noise_sigma=0.0, seed=303))
    fits = fit_many(ds.beats)
    worst_alpha, worst_r2, failed = 0.0, 1.0, 0
    for (res, _), p in zip(fits, truth):
        if res is None:
            failed += 1
            continue
        d = max(circular_distance(a.alpha, b.alpha) for a, b in zip(res.params.waves, p.waves))
        worst_alpha = max(worst_alpha, d)
        worst_r2 = min(worst_r2, res.r2)
    ok = failed == 0 and worst_alpha < ROUNDTRIP_ALPHA_TOL and worst_r2 >= ROUNDTRIP_R2_MIN
    record(3, ok, f"200 beats: worst alpha error {worst_alpha:.2e} rad (< {ROUNDTRIP_ALPHA_TOL}), "
                  f"worst r2 {worst_r2:.6f} (>= {ROUNDTRIP_R2_MIN}), failed fits {failed}")


@pytest.fixture(scope="module")
def warm():
    ds, truth = generate_synthetic(SyntheticSpec(n_beats=2000, seed=404))
    model = FMMDenseAE(ds.l_pad, seed=0)
    warmup(model, ds.beats, truth_matrix(truth), TrainConfig(seed=0))
    held, held_truth = generate_synthetic(SyntheticSpec(n_beats=500, seed=405))
    return model, held, held_truth


def test_4_warmup_correlation(warm):
    model, held, held_truth = warm
    pred = model.coefficients(held.arrays()[0])
    rows = {(w, p): v for w, p, _, v in coefficient_correlations(pred, truth_matrix(held_truth), strict=False)}
    picked = {f"{w} {p}": rows[(w, p)] for w in ("P", "T") for p in ("alpha", "beta")}
    ok = all(v > WARMUP_CORR_MIN for v in picked.values())
    record(4, ok, ", ".join(f"{k} {v:.3f}" for k, v in picked.items()) + f" (need > {WARMUP_CORR_MIN})")


def test_5_speed_ordering(warm):
    model, held, _ = warm
    beats = held.beats[:64]
    fit_ms = np.mean([ms for _, ms in fit_many(beats)])
    x = held.arrays()[0][:64]
    model.coefficients(x[:EXTRACT_BATCH])  # warm caches
    per_beat = []
    for lo in range(0, len(beats), EXTRACT_BATCH):
        start = time.perf_counter()
        model.coefficients(x[lo:lo + EXTRACT_BATCH])
        per_beat.append(1000.0 * (time.perf_counter() - start) / EXTRACT_BATCH)
    head_ms = float(np.mean(per_beat))
    ratio = fit_ms / head_ms
    record(5, ratio >= SPEEDUP_MIN,
           f"fit_beat {fit_ms:.2f} ms/beat, head {head_ms:.4f} ms/beat, ratio {ratio:.0f}x (need >= {SPEEDUP_MIN:.0f}x)")


GRADIENT_TESTS = [
    "test_nn.py::TestBackward",
    "test_nn.py::TestActivations::test_derivatives",
    "test_head.py::TestActivation::test_activate_grad",
    "test_head.py::TestReconstruct::test_backward_finite_differences",
    "test_head.py::TestLosses::test_regression_gradient",
    "test_head.py::TestEndToEndGradient",
    "test_head.py::TestPooling::test_timestep_linear_gradient",
]


def test_6_gradient_suite():
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *[str(TESTS / t) for t in GRADIENT_TESTS]],
        capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - start
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()
    record(6, proc.returncode == 0 and elapsed < GRADIENT_SUITE_SECONDS,
           f"{last}; {elapsed:.1f} s (limit {GRADIENT_SUITE_SECONDS:.0f} s)")


def test_7_metric_oracles():
    rng = np.random.default_rng(707)
    worst_auc = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        s = np.round(rng.normal(size=n) + y, 1)
        worst_auc = max(worst_auc, abs(auroc(s, y) - mann_whitney(s, y)))
    worst_circ = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 51))
        a = rng.vonmises(rng.uniform(0, 2 * np.pi), 2.0, size=n)
        b = a + rng.normal(0, 0.6, size=n)
        worst_circ = max(worst_circ, abs(circular_correlation(a, b) - direct_circular_correlation(a, b)))
    record(7, worst_auc <= METRIC_TOL and worst_circ <= METRIC_TOL,
           f"max |auroc - pair count| {worst_auc:.1e}, max |circ corr - direct| {worst_circ:.1e} "
           f"(tolerance {METRIC_TOL:.0e})")


def test_8_determinism(tmp_path):
    a = run_pipeline(tmp_path / "a", n_beats=100, seed=7)
    b = run_pipeline(tmp_path / "b", n_beats=100, seed=7)
    sa = (a / "eval" / "summary.json").read_bytes()
    sb = (b / "eval" / "summary.json").read_bytes()
    record(8, sa == sb, f"summary.json {'identical' if sa == sb else 'differs'} across two seeded runs "
                        f"({len(sa)} bytes)")


def test_9_missing_p_lift():
    train, _ = generate_synthetic(SyntheticSpec(n_beats=500, noise_sigma=0.01, seed=21))
    test, _ = generate_synthetic(SyntheticSpec(n_beats=400, noise_sigma=0.01, anomaly="missing-P",
                                               anomaly_fraction=0.5, seed=22))
    y = test.binary_labels()
    cfg = TrainConfig(seed=0)

    baseline = DenseAE(train.l_pad, seed=0)
    train_anomaly(baseline, train.beats, cfg)
    auc_base = auroc(anomaly_scores(baseline, test.beats), y)

    # warm-up targets come from the fitting oracle, as in the real pipeline
    fits = fit_many(train.beats)
    kept = [i for i, (r, _) in enumerate(fits) if r is not None]
    targets = np.stack([encode(fits[i][0].params) for i in kept])
    model = FMMDenseAE(train.l_pad, seed=0)
    warmup(model, [train.beats[i] for i in kept], targets, cfg)
    train_anomaly(model, train.beats, cfg)
    auc_fmm = auroc(anomaly_scores(model, test.beats), y)

    ok = auc_fmm >= auc_base - LIFT_MARGIN and auc_fmm >= LIFT_MIN_AUROC
    record(9, ok, f"FMM-DenseAE with warm-up {auc_fmm:.4f}, DenseAE {auc_base:.4f} "
                  f"(need >= baseline - {LIFT_MARGIN} and >= {LIFT_MIN_AUROC})")
