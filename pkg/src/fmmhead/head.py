"""FMM-Head: maps an encoder latent to 31 constrained FMM coefficients and
rebuilds the heartbeat from them.

Reconstruction gradients are analytic. With ``u = (t - alpha) / 2`` and
``D = sin(u)**2 + omega**2 * cos(u)**2`` the wave ``A cos(beta + phi0)`` has

    d phi0 / d alpha = -omega / D
    d phi0 / d omega = -sin(2u) / D

and ``alpha = atan2(s, c)`` contributes ``d alpha / ds = c / r**2``,
``d alpha / dc = -s / r**2`` with ``r**2 = s**2 + c**2``. ``D >= omega**2``,
so everything stays finite across the point where ``tan(u)`` diverges.
"""

from __future__ import annotations

import numpy as np

from .errors import StructuralError, ValidationError
from .model import (
    A_IDX, COS_ALPHA_IDX, COS_BETA_IDX, M_INDEX, N_COEFFS, OMEGA_IDX, R_SLOT, SIN_ALPHA_IDX,
    SIN_BETA_IDX, TWO_PI, coeff_index,
)
from .nn import MLP, sigmoid_scaled, sigmoid_scaled_grad, softplus, softplus_grad

POOLINGS = ("identity", "flatten", "timestep_linear")
# guards atan2 derivatives when a predicted sin/cos pair collapses to the origin
_RADIUS_EPS = 1e-12

_SINCOS_IDX = np.sort(np.concatenate([SIN_ALPHA_IDX, COS_ALPHA_IDX, SIN_BETA_IDX, COS_BETA_IDX]))


def default_regression_weights(r_weight=10.0):
    """Unit weights with the six R-wave entries scaled by ``r_weight``."""
    w = np.ones(N_COEFFS)
    start = coeff_index(R_SLOT, "A")
    w[start:start + 6] = r_weight
    return w


class Pooling:
    """Reduces any latent layout to a ``(batch, features)`` matrix.

    ``identity`` passes 2D latents through, ``flatten`` reshapes
    ``(batch, steps, channels)`` outputs, and ``timestep_linear`` applies one
    learned linear map to each time step's feature vector.
    """

    def __init__(self, kind="identity", n_features=None, rng=None):
        if kind not in POOLINGS:
            raise ValidationError(f"unknown pooling {kind!r}")
        self.kind = kind
        self.weights = None
        self.bias = None
        if kind == "timestep_linear":
            if n_features is None:
                raise ValidationError("timestep_linear pooling needs n_features")
            rng = rng or np.random.default_rng(0)
            limit = np.sqrt(6.0 / (n_features + 1))
            self.weights = rng.uniform(-limit, limit, size=n_features)
            self.bias = np.zeros(1)

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            if z.ndim != 2:
                raise StructuralError(f"identity pooling expects a 2D latent, got {z.shape}")
            return z
        if z.ndim != 3:
            raise StructuralError(f"{self.kind} pooling expects a 3D latent, got {z.shape}")
        if self.kind == "flatten":
            return z.reshape(z.shape[0], -1)
        if z.shape[2] != self.weights.size:
            raise StructuralError(f"timestep_linear pooling expects {self.weights.size} features, got {z.shape[2]}")
        return z @ self.weights + self.bias[0]

    def backward(self, z, g):
        """Returns ``(grad_latent, param_grads)``."""
        if self.kind == "identity":
            return g, {}
        if self.kind == "flatten":
            return g.reshape(z.shape), {}
        grads = {"pool.weights": np.einsum("bt,btf->f", g, z), "pool.bias": np.array([g.sum()])}
        return g[:, :, None] * self.weights[None, None, :], grads

    def parameters(self):
        if self.kind != "timestep_linear":
            return {}
        return {"pool.weights": self.weights, "pool.bias": self.bias}


class FMMHead:
    def __init__(self, n_latent, hidden=256, omega_max=0.5, pooling="identity", n_features=None, rng=None):
        if not 0.0 < omega_max <= 1.0:
            raise ValidationError(f"omega_max must lie in (0, 1], got {omega_max}")
        rng = rng or np.random.default_rng(0)
        self.omega_max = float(omega_max)
        self.pooling = Pooling(pooling, n_features, rng)
        self.fc = MLP.build([n_latent, hidden, N_COEFFS], ["tanh", "linear"], rng)

    @property
    def generation(self):
        return self.fc.generation

    def touch(self):
        self.fc.generation += 1

    def activate(self, raw):
        """Map unconstrained outputs onto valid coefficient ranges."""
        out = np.array(raw, dtype=float, copy=True)
        out[:, A_IDX] = softplus(raw[:, A_IDX])
        out[:, OMEGA_IDX] = sigmoid_scaled(raw[:, OMEGA_IDX], 0.0, self.omega_max)
        out[:, _SINCOS_IDX] = sigmoid_scaled(raw[:, _SINCOS_IDX], -1.0, 1.0)
        return out

    def activate_grad(self, raw):
        d = np.ones_like(raw)
        d[:, A_IDX] = softplus_grad(raw[:, A_IDX])
        d[:, OMEGA_IDX] = sigmoid_scaled_grad(raw[:, OMEGA_IDX], 0.0, self.omega_max)
        d[:, _SINCOS_IDX] = sigmoid_scaled_grad(raw[:, _SINCOS_IDX], -1.0, 1.0)
        return d

    def forward(self, latent):
        """Returns ``(coefficients, cache)``."""
        pooled = self.pooling.forward(latent)
        if pooled.shape[1] != self.fc.n_in:
            raise StructuralError(f"head expects {self.fc.n_in} pooled features, got {pooled.shape[1]}")
        raw, fc_cache = self.fc.forward(pooled)
        return self.activate(raw), (np.asarray(latent, dtype=float), raw, fc_cache)

    def backward(self, cache, grad_coeffs):
        """Returns ``(param_grads, grad_latent)``."""
        latent, raw, fc_cache = cache
        g_raw = grad_coeffs * self.activate_grad(raw)
        fc_grads, g_pooled = self.fc.backward(fc_cache, g_raw)
        g_latent, pool_grads = self.pooling.backward(latent, g_pooled)
        grads = MLP.named_grads(fc_grads, "head.fc.")
        grads.update(pool_grads)
        return grads, g_latent

    def parameters(self):
        params = self.fc.parameters("head.fc.")
        params.update(self.pooling.parameters())
        return params


def _phase_grid_batch(valid_lens, l_pad):
    valid_lens = np.asarray(valid_lens, dtype=int)
    if np.any(valid_lens < 1):
        raise ValidationError("valid lengths must be >= 1")
    if np.any(valid_lens > l_pad):
        raise ValidationError(f"valid length exceeds padded length {l_pad}")
    idx = np.arange(l_pad)[None, :]
    mask = idx < valid_lens[:, None]
    t = TWO_PI * idx / valid_lens[:, None]
    return t, mask


def reconstruct(coeffs, valid_lens, l_pad=None, return_cache=False):
    """Evaluate the beat encoded by each coefficient row on its own
    ``valid_len`` phase grid; positions past ``valid_len`` are zero."""
    c = np.atleast_2d(np.asarray(coeffs, dtype=float))
    if c.shape[1] != N_COEFFS:
        raise StructuralError(f"coefficients must have {N_COEFFS} columns, got {c.shape[1]}")
    valid_lens = np.broadcast_to(np.asarray(valid_lens, dtype=int), (c.shape[0],))
    l_pad = int(valid_lens.max()) if l_pad is None else int(l_pad)
    t, mask = _phase_grid_batch(valid_lens, l_pad)

    A = c[:, A_IDX][:, :, None]
    sa, ca = c[:, SIN_ALPHA_IDX][:, :, None], c[:, COS_ALPHA_IDX][:, :, None]
    sb, cb = c[:, SIN_BETA_IDX][:, :, None], c[:, COS_BETA_IDX][:, :, None]
    om = c[:, OMEGA_IDX][:, :, None]
    alpha = np.arctan2(sa, ca)
    beta = np.arctan2(sb, cb)
    u = 0.5 * (t[:, None, :] - alpha)
    su, cu = np.sin(u), np.cos(u)
    theta = beta + 2.0 * np.arctan2(su, om * cu)
    cos_t = np.cos(theta)
    out = (c[:, M_INDEX][:, None] + (A * cos_t).sum(axis=1)) * mask
    if not return_cache:
        return out
    return out, (c, mask, A, sa, ca, sb, cb, om, su, cu, theta, cos_t)


def reconstruct_backward(cache, grad_out):
    """Gradient of a scalar loss w.r.t. the coefficient rows, given its
    gradient w.r.t. the reconstructed signals."""
    c, mask, A, sa, ca, sb, cb, om, su, cu, theta, cos_t = cache
    g = (np.asarray(grad_out, dtype=float) * mask)[:, None, :]
    grad = np.zeros_like(c)
    grad[:, M_INDEX] = g[:, 0, :].sum(axis=1)
    grad[:, A_IDX] = (g * cos_t).sum(axis=2)
    g_theta = -g * A * np.sin(theta)
    D = su * su + om * om * cu * cu
    g_beta = g_theta.sum(axis=2)
    g_alpha = (g_theta * (-om / D)).sum(axis=2)
    grad[:, OMEGA_IDX] = (g_theta * (-2.0 * su * cu / D)).sum(axis=2)
    ra = sa[:, :, 0] ** 2 + ca[:, :, 0] ** 2 + _RADIUS_EPS
    rb = sb[:, :, 0] ** 2 + cb[:, :, 0] ** 2 + _RADIUS_EPS
    grad[:, SIN_ALPHA_IDX] = g_alpha * ca[:, :, 0] / ra
    grad[:, COS_ALPHA_IDX] = -g_alpha * sa[:, :, 0] / ra
    grad[:, SIN_BETA_IDX] = g_beta * cb[:, :, 0] / rb
    grad[:, COS_BETA_IDX] = -g_beta * sb[:, :, 0] / rb
    return grad


def regression_loss(pred, target, weights=None):
    """Weighted MSE over the 31 coefficients, averaged over the batch.

    Returns ``(loss, grad_pred)``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape != target.shape or pred.shape[1] != N_COEFFS:
        raise StructuralError(f"regression shapes differ: {pred.shape} vs {target.shape}")
    w = default_regression_weights() if weights is None else np.asarray(weights, dtype=float)
    diff = pred - target
    n = pred.shape[0] * N_COEFFS
    loss = float((w * diff * diff).sum() / n)
    return loss, 2.0 * w * diff / n


def reconstruction_loss(pred, samples, valid_lens):
    """Per-beat MSE over the first ``valid_len`` samples, averaged over the batch.

    Returns ``(loss, grad_pred)``; padded positions get exactly zero gradient.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if pred.shape != x.shape:
        raise StructuralError(f"reconstruction shapes differ: {pred.shape} vs {x.shape}")
    per = per_beat_errors(pred, x, valid_lens)
    v = np.broadcast_to(np.asarray(valid_lens, dtype=float), (x.shape[0],))
    mask = np.arange(x.shape[1])[None, :] < v[:, None]
    grad = np.where(mask, 2.0 * (pred - x) / (v[:, None] * x.shape[0]), 0.0)
    return float(per.mean()), grad


def per_beat_errors(pred, samples, valid_lens):
    """MSE of each row over its valid samples."""
    pred = np.atleast_2d(pred)
    x = np.atleast_2d(samples)
    v = np.broadcast_to(np.asarray(valid_lens, dtype=int), (x.shape[0],))
    mask = np.arange(x.shape[1])[None, :] < v[:, None]
    diff = np.where(mask, pred - x, 0.0)
    return (diff * diff).sum(axis=1) / v
