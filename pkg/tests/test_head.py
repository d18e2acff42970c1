import json
import struct

import numpy as np
import pytest

from fmmhead.autoencoder import (
    CHECKPOINT_MAGIC, DenseAE, FMMDenseAE, build_model, copy_parameters, load_checkpoint,
    restore_parameters, save_checkpoint,
)
from fmmhead.errors import StructuralError, ValidationError
from fmmhead.head import (
    FMMHead, Pooling, default_regression_weights, per_beat_errors, reconstruct, reconstruct_backward,
    reconstruction_loss, regression_loss,
)
from fmmhead.model import (
    A_IDX, COS_ALPHA_IDX, COS_BETA_IDX, M_INDEX, N_COEFFS, OMEGA_IDX, SIN_ALPHA_IDX, SIN_BETA_IDX,
    coeff_index, encode, eval_beat, phase_grid,
)

from conftest import central_diff, random_params, rel_err

SINCOS = np.concatenate([SIN_ALPHA_IDX, COS_ALPHA_IDX, SIN_BETA_IDX, COS_BETA_IDX])


def tiny(kind="fmm_dense_ae", l_pad=32, seed=3):
    kw = {"hidden": (16,), "latent": 8, "seed": seed}
    if kind == "fmm_dense_ae":
        kw["head_hidden"] = 12
    return build_model(kind, l_pad, **kw)


class TestActivation:
    def test_zero_preactivation(self):
        head = FMMHead(4, hidden=6)
        last = head.fc.layers[-1]
        last.weights[...] = 0
        last.bias[...] = 0
        c, _ = head.forward(np.ones((3, 4)))
        np.testing.assert_allclose(c[:, A_IDX], np.log(2), atol=1e-15)
        np.testing.assert_allclose(c[:, OMEGA_IDX], 0.25, atol=1e-15)
        np.testing.assert_array_equal(c[:, SINCOS], 0)
        np.testing.assert_array_equal(c[:, M_INDEX], 0)

    def test_ranges(self):
        rng = np.random.default_rng(0)
        head = FMMHead(32, omega_max=0.5, rng=rng)
        z = rng.normal(scale=10.0, size=(10_000, 32))
        c, _ = head.forward(z)
        assert np.all(np.isfinite(c))
        assert np.all(c[:, A_IDX] >= 0)
        assert np.all((c[:, OMEGA_IDX] > 0) & (c[:, OMEGA_IDX] < 0.5))
        assert np.all(np.abs(c[:, SINCOS]) < 1)

    def test_deterministic(self):
        head = FMMHead(5, hidden=7, rng=np.random.default_rng(1))
        z = np.random.default_rng(2).normal(size=(4, 5))
        np.testing.assert_array_equal(head.forward(z)[0], head.forward(z)[0])

    def test_activate_grad(self):
        head = FMMHead(3, hidden=4)
        raw = np.random.default_rng(3).normal(size=(2, N_COEFFS))
        g = head.activate_grad(raw)
        h = 1e-6
        fd = (head.activate(raw + h) - head.activate(raw - h)) / (2 * h)
        np.testing.assert_allclose(g, fd, atol=1e-8)

    def test_bad_omega_max(self):
        with pytest.raises(ValidationError):
            FMMHead(3, omega_max=1.5)

    def test_latent_width_mismatch(self):
        with pytest.raises(StructuralError):
            FMMHead(4, hidden=3).forward(np.ones((1, 5)))


class TestReconstruct:
    def test_constant_with_padding(self):
        c = np.zeros(N_COEFFS)
        c[M_INDEX] = 0.7
        c[OMEGA_IDX] = 0.1
        out = reconstruct(c, 6, l_pad=10)
        np.testing.assert_array_equal(out[0], [0.7] * 6 + [0.0] * 4)

    def test_matches_eval_beat(self, rng):
        for _ in range(20):
            p = random_params(rng)
            n = int(rng.integers(40, 300))
            np.testing.assert_allclose(reconstruct(encode(p), n)[0], eval_beat(p, phase_grid(n)), atol=1e-9)

    def test_batch_padding(self, rng):
        ps = [random_params(rng) for _ in range(3)]
        lens = [50, 80, 64]
        out = reconstruct(np.stack([encode(p) for p in ps]), lens, l_pad=100)
        for row, p, n in zip(out, ps, lens):
            np.testing.assert_allclose(row[:n], eval_beat(p, phase_grid(n)), atol=1e-9)
            assert np.all(row[n:] == 0)

    def test_unnormalised_pairs(self, rng):
        p = random_params(rng)
        c = encode(p)
        c2 = c.copy()
        c2[SINCOS] *= 0.4
        np.testing.assert_allclose(reconstruct(c2, 90), reconstruct(c, 90), atol=1e-12)

    def test_backward_finite_differences(self, rng):
        c = np.stack([encode(random_params(rng)) for _ in range(3)])
        c[:, SINCOS] *= rng.uniform(0.5, 1.5, size=(3, SINCOS.size))
        lens = np.array([40, 33, 48])
        target = rng.normal(size=(3, 48))

        def loss():
            return reconstruction_loss(reconstruct(c, lens, 48), target, lens)[0]

        out, cache = reconstruct(c, lens, 48, return_cache=True)
        _, g = reconstruction_loss(out, target, lens)
        assert rel_err(reconstruct_backward(cache, g), central_diff(loss, c)) < 1e-6

    def test_errors(self):
        with pytest.raises(StructuralError):
            reconstruct(np.zeros(30), 10)
        with pytest.raises(ValidationError):
            reconstruct(np.zeros(N_COEFFS), 20, l_pad=10)


class TestLosses:
    def test_regression_zero(self, rng):
        t = rng.normal(size=(4, N_COEFFS))
        loss, g = regression_loss(t, t)
        assert loss == 0 and np.all(g == 0)

    def test_regression_r_weight(self):
        t = np.zeros((1, N_COEFFS))
        p = t.copy()
        p[0, coeff_index(2, "A")] = 1.0
        assert regression_loss(p, t)[0] == pytest.approx(10 / 31, abs=1e-15)
        p = t.copy()
        p[0, coeff_index(0, "A")] = 1.0
        assert regression_loss(p, t)[0] == pytest.approx(1 / 31, abs=1e-15)

    def test_regression_weights_layout(self):
        w = default_regression_weights()
        assert list(np.flatnonzero(w == 10)) == list(range(13, 19))

    def test_regression_gradient(self, rng):
        p, t = rng.normal(size=(3, N_COEFFS)), rng.normal(size=(3, N_COEFFS))
        _, g = regression_loss(p, t)
        assert rel_err(g, central_diff(lambda: regression_loss(p, t)[0], p)) < 1e-6

    def test_reconstruction_padding_ignored(self, rng):
        x = np.zeros((2, 10))
        pred = np.zeros((2, 10))
        pred[:, 7:] = rng.normal(size=(2, 3))
        loss, g = reconstruction_loss(pred, x, [7, 7])
        assert loss == 0 and np.all(g == 0)

    def test_reconstruction_single_error(self):
        v, delta = 12, 0.3
        x = np.zeros((1, 20))
        pred = x.copy()
        pred[0, 5] = delta
        assert reconstruction_loss(pred, x, v)[0] == pytest.approx(delta ** 2 / v, abs=1e-15)

    def test_per_beat(self):
        x = np.zeros((2, 4))
        pred = np.array([[1.0, 1.0, 9.0, 9.0], [2.0, 0.0, 0.0, 0.0]])
        np.testing.assert_allclose(per_beat_errors(pred, x, [2, 4]), [1.0, 1.0])


class TestEndToEndGradient:
    @pytest.mark.parametrize("kind", ["fmm_dense_ae", "dense_ae"])
    @pytest.mark.parametrize("training", [False, True])
    def test_reconstruction_path(self, kind, training):
        model = tiny(kind)
        rng = np.random.default_rng(9)
        lens = np.array([32, 27])
        x = rng.normal(size=(2, 32)) * (np.arange(32)[None, :] < lens[:, None])

        def loss():
            out, _ = model.forward(x, lens, training, np.random.default_rng(5))
            return reconstruction_loss(out, x, lens)[0]

        out, cache = model.forward(x, lens, training, np.random.default_rng(5))
        grads = model.backward(cache, reconstruction_loss(out, x, lens)[1])
        params = model.parameters()
        assert set(grads) == set(params)
        for name, value in params.items():
            assert rel_err(grads[name], central_diff(loss, value)) < 1e-3, name

    def test_regression_path(self):
        model = tiny()
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 32))
        target = np.stack([encode(random_params(rng)) for _ in range(2)])

        def loss():
            return regression_loss(model.coefficients(x), target)[0]

        c, cache = model.coefficients(x, return_cache=True)
        grads = model.backward_coefficients(cache, regression_loss(c, target)[1])
        for name, value in model.parameters().items():
            assert rel_err(grads[name], central_diff(loss, value)) < 1e-3, name

    def test_stale_cache_after_update(self):
        model = tiny()
        x = np.zeros((1, 32))
        out, cache = model.forward(x, 32)
        model.touch()
        with pytest.raises(StructuralError):
            model.backward(cache, out)


class TestPooling:
    def test_identity_rejects_3d(self):
        with pytest.raises(StructuralError):
            Pooling().forward(np.zeros((2, 3, 4)))

    def test_flatten(self):
        z = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(Pooling("flatten").forward(z), z.reshape(2, 12))

    def test_timestep_linear_gradient(self):
        rng = np.random.default_rng(6)
        head = FMMHead(5, hidden=6, pooling="timestep_linear", n_features=3, rng=rng)
        z = rng.normal(size=(2, 5, 3))
        target = rng.normal(size=(2, N_COEFFS))

        def loss():
            return regression_loss(head.forward(z)[0], target)[0]

        c, cache = head.forward(z)
        grads, gz = head.backward(cache, regression_loss(c, target)[1])
        for name, value in head.parameters().items():
            assert rel_err(grads[name], central_diff(loss, value)) < 1e-5, name
        assert rel_err(gz, central_diff(loss, z)) < 1e-5

    def test_unknown(self):
        with pytest.raises(ValidationError):
            Pooling("mean")


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["fmm_dense_ae", "dense_ae"])
    def test_round_trip(self, tmp_path, kind):
        model = tiny(kind)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, {"phase": "test"})
        loaded, header = load_checkpoint(path)
        assert type(loaded) is type(model)
        assert header["extra"] == {"phase": "test"}
        x = np.random.default_rng(0).normal(size=(3, 32))
        np.testing.assert_array_equal(loaded.reconstruct(x, 32), model.reconstruct(x, 32))

    def _rewrite(self, path, mutate):
        data = path.read_bytes()
        off = len(CHECKPOINT_MAGIC)
        (size,) = struct.unpack("<Q", data[off:off + 8])
        header = json.loads(data[off + 8:off + 8 + size])
        mutate(header)
        blob = json.dumps(header).encode()
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob + data[off + 8 + size:])

    def test_rejects_layout_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny())
        self._rewrite(path, lambda h: h.update(layout_version=99))
        with pytest.raises(StructuralError, match="layout"):
            load_checkpoint(path)

    def test_rejects_wrong_architecture(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny())
        self._rewrite(path, lambda h: h["architecture"].update(latent=9))
        with pytest.raises(StructuralError):
            load_checkpoint(path)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(StructuralError):
            load_checkpoint(path)
        save_checkpoint(path, tiny())
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(StructuralError, match="trailing"):
            load_checkpoint(path)

    def test_snapshot_restore(self):
        model = tiny()
        snap = copy_parameters(model)
        x = np.ones((1, 32))
        before = model.reconstruct(x, 32)
        for v in model.parameters().values():
            v += 0.1
        restore_parameters(model, snap)
        np.testing.assert_array_equal(model.reconstruct(x, 32), before)


def test_build_model_unknown():
    with pytest.raises(ValidationError):
        build_model("conv", 32)


def test_default_architecture():
    m = FMMDenseAE(100)
    p = m.parameters()
    assert p["encoder.0.weights"].shape == (256, 100)
    assert p["head.fc.1.weights"].shape == (N_COEFFS, 256)
    d = DenseAE(100)
    assert d.parameters()["decoder.2.weights"].shape == (100, 256)
