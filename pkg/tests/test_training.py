import numpy as np
import pytest

from fmmhead.autoencoder import build_model, copy_parameters
from fmmhead.dataio import SyntheticSpec, generate_synthetic, truth_matrix
from fmmhead.errors import StructuralError, ValidationError
from fmmhead.preprocessing import Heartbeat
from fmmhead.training import (
    TrainConfig, anomaly_score, anomaly_scores, fit_protocol, split_indices, train_anomaly, warmup,
)


def small_model(kind="fmm_dense_ae", l_pad=200, seed=0):
    kw = {"hidden": (64,), "latent": 16, "seed": seed}
    if kind == "fmm_dense_ae":
        kw["head_hidden"] = 64
    return build_model(kind, l_pad, **kw)


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SyntheticSpec(n_beats=200, seed=5))


@pytest.fixture(scope="module")
def trained(synth):
    ds, truth = synth
    model = small_model()
    cfg = TrainConfig(warmup_epochs=60, train_epochs=30, batch_size=32)
    reports = fit_protocol(model, ds.beats, cfg, truth_matrix(truth))
    return model, reports


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestWarmup:
    def test_loss_drops(self, trained):
        _, (report, _) = trained
        assert report.phase == "warmup"
        assert report.best_val_loss < 0.1 * report.val_loss[0]

    def test_best_epoch_is_minimum(self, trained):
        for report in trained[1]:
            assert report.best_val_loss == min(report.val_loss)
            assert len(report.train_loss) == len(report.val_loss) == len(report.epoch_seconds)

    def test_zero_epochs(self, synth):
        ds, truth = synth
        model = small_model()
        before = copy_parameters(model)
        report = warmup(model, ds.beats, truth_matrix(truth), TrainConfig(warmup_epochs=0))
        assert report.train_loss == [] and report.best_epoch is None
        assert same_params(before, model.parameters())

    def test_deterministic(self, synth):
        ds, truth = synth
        cfg = TrainConfig(warmup_epochs=5, batch_size=32, seed=3)
        runs = []
        for _ in range(2):
            model = small_model()
            report = warmup(model, ds.beats[:80], truth_matrix(truth[:80]), cfg)
            runs.append((report.train_loss, report.val_loss, copy_parameters(model)))
        assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
        assert same_params(runs[0][2], runs[1][2])

    def test_needs_targets(self, synth):
        ds, _ = synth
        with pytest.raises(ValidationError):
            warmup(small_model(), [], np.zeros((0, 31)))
        with pytest.raises(StructuralError):
            warmup(small_model(), ds.beats[:3], np.zeros((2, 31)))

    def test_needs_fmm_head(self, synth):
        ds, truth = synth
        with pytest.raises(ValidationError):
            warmup(small_model("dense_ae"), ds.beats[:5], truth_matrix(truth[:5]))


class TestAnomalyTraining:
    def test_improves(self, trained):
        _, (_, report) = trained
        assert report.phase == "anomaly"
        assert report.best_val_loss < report.val_loss[0]

    def test_starts_from_warmup(self, trained):
        # the anomaly phase's epoch-0 evaluation is the restored warm-up model,
        # which already reconstructs far better than an untrained one
        _, (_, report) = trained
        assert report.val_loss[0] < 0.01

    def test_patience_zero(self, synth):
        ds, _ = synth
        model = small_model("dense_ae")
        report = train_anomaly(model, ds.beats[:60],
                               TrainConfig(train_epochs=500, early_stop_patience=0, learning_rate=0.05, seed=1))
        assert report.stopped_early
        last = len(report.val_loss) - 1
        assert last == report.best_epoch + 1
        assert report.val_loss[last] >= report.val_loss[report.best_epoch]
        assert all(a > b for a, b in zip(report.val_loss[:last], report.val_loss[1:last]))

    def test_rejects_abnormal(self, synth):
        ds, _ = synth
        bad = ds.beats[:5] + [Heartbeat(ds.beats[0].samples, ds.beats[0].valid_len, 0, label="class2")]
        with pytest.raises(ValidationError, match="class2"):
            train_anomaly(small_model(), bad, TrainConfig(train_epochs=1))

    def test_accepts_unknown(self, synth):
        ds, _ = synth
        beats = [Heartbeat(b.samples, b.valid_len, b.r_peak_offset) for b in ds.beats[:20]]
        report = train_anomaly(small_model("dense_ae"), beats, TrainConfig(train_epochs=1))
        assert len(report.val_loss) == 2

    def test_deterministic(self, synth):
        ds, _ = synth
        cfg = TrainConfig(train_epochs=4, batch_size=16, seed=9)
        a = train_anomaly(small_model(), ds.beats[:50], cfg)
        b = train_anomaly(small_model(), ds.beats[:50], cfg)
        assert a.to_dict(timings=False) == b.to_dict(timings=False)


class TestScores:
    def test_flipped_beat_scores_higher(self, trained, synth):
        model, _ = trained
        ds, _ = synth
        beats = ds.beats[:10]
        flipped = [Heartbeat(-b.samples, b.valid_len, b.r_peak_offset) for b in beats]
        assert np.all(anomaly_scores(model, beats) < anomaly_scores(model, flipped))

    def test_zero_model_zero_beat(self):
        model = small_model("dense_ae", l_pad=20)
        for v in model.parameters().values():
            v[...] = 0
        model.touch()
        beat = Heartbeat(np.zeros(20), 15, 3)
        assert anomaly_score(model, beat) == 0.0

    def test_padding_content_ignored(self, trained, synth):
        model, _ = trained
        src = synth[0].beats[0]
        clean = Heartbeat(np.where(np.arange(200) < 170, src.samples, 0.0), 170, src.r_peak_offset)
        # bypass the constructor check to smuggle content into the padding
        dirty = Heartbeat(clean.samples.copy(), 170, src.r_peak_offset)
        dirty.samples[170:] = 7.0
        assert anomaly_score(model, dirty) == anomaly_score(model, clean)

    def test_batch_size_irrelevant(self, trained, synth):
        model, _ = trained
        beats = synth[0].beats[:20]
        np.testing.assert_allclose(anomaly_scores(model, beats, 16), anomaly_scores(model, beats, 7), rtol=1e-12)

    def test_non_negative(self, trained, synth):
        assert np.all(anomaly_scores(trained[0], synth[0].beats[:30]) >= 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"warmup_epochs": -1}, {"val_split": 0.0}, {"val_split": 1.0},
                                    {"batch_size": 0}, {"early_stop_patience": -2}, {"learning_rate": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)

    def test_split(self):
        tr, va = split_indices(100, 0.1, 0)
        assert va.size == 10 and tr.size == 90
        assert set(tr) | set(va) == set(range(100)) and not set(tr) & set(va)
        assert np.array_equal(split_indices(100, 0.1, 0)[1], va)
