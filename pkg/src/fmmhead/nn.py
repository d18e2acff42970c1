"""A small dense network engine in numpy with exact reverse-mode gradients.

Layers compute ``y = act(x @ W.T + b)`` on row batches. Dropout follows the
hidden activations during training only; it zeroes units with probability
``p`` and leaves survivors unscaled, so inference multiplies by ``1 - p``
to keep the expected activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import StructuralError, TrainingError, ValidationError

ACTIVATIONS = ("linear", "relu", "tanh")
# pre-activations are clipped here so the bounded maps stay strictly inside their range
_SIGMOID_CLIP = 30.0


def relu(x):
    return np.maximum(x, 0.0)


def tanh(x):
    return np.tanh(x)


def softplus(x):
    """``ln(1 + e^x)``, stable for large ``|x|``."""
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return expit(x)


def sigmoid_scaled(x, lo, hi):
    """``lo + (hi - lo) * sigmoid(x)``; strictly inside ``(lo, hi)`` for any finite ``x``."""
    return lo + (hi - lo) * expit(np.clip(x, -_SIGMOID_CLIP, _SIGMOID_CLIP))


def sigmoid_scaled_grad(x, lo, hi):
    s = expit(np.clip(x, -_SIGMOID_CLIP, _SIGMOID_CLIP))
    return np.where(np.abs(x) < _SIGMOID_CLIP, (hi - lo) * s * (1.0 - s), 0.0)


def _activate(name, z):
    if name == "relu":
        return relu(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise StructuralError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}")

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]

    @classmethod
    def glorot(cls, n_in, n_out, activation, rng):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation)


@dataclass
class ForwardCache:
    inputs: list
    pre: list
    post: list
    masks: list
    generation: int
    owner: int


class MLP:
    """Stack of dense layers. Dropout is applied after every hidden layer
    (and after the last one when ``dropout_last`` is set)."""

    def __init__(self, layers, dropout_rate=0.0, dropout_last=False):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValidationError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_out:
                raise StructuralError(
                    f"layer {i} expects {layers[i].n_in} inputs but layer {i - 1} gives {layers[i - 1].n_out}")
        self.layers = list(layers)
        self.dropout_rate = float(dropout_rate)
        self.dropout_last = dropout_last
        self.generation = 0

    @classmethod
    def build(cls, sizes, activations, rng, dropout_rate=0.0, dropout_last=False):
        if len(activations) != len(sizes) - 1:
            raise StructuralError("need one activation per layer")
        layers = [DenseLayer.glorot(a, b, act, rng) for a, b, act in zip(sizes[:-1], sizes[1:], activations)]
        return cls(layers, dropout_rate, dropout_last)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def _has_dropout(self, i):
        return self.dropout_rate > 0 and (i < len(self.layers) - 1 or self.dropout_last)

    def forward(self, x, training=False, rng=None):
        """Returns ``(output, cache)``. ``rng`` drives the dropout masks and is
        required when training with dropout."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise StructuralError(f"expected a 2D batch, got shape {x.shape}")
        inputs, pre, post, masks = [], [], [], []
        h = x
        for i, layer in enumerate(self.layers):
            if h.shape[1] != layer.n_in:
                raise StructuralError(f"layer {i} expects {layer.n_in} features, got {h.shape[1]}")
            inputs.append(h)
            z = h @ layer.weights.T + layer.bias
            a = _activate(layer.activation, z)
            pre.append(z)
            post.append(a)
            mask = None
            if self._has_dropout(i):
                if training:
                    if rng is None:
                        raise ValidationError("training with dropout needs an rng")
                    mask = (rng.random(a.shape) >= self.dropout_rate).astype(float)
                    a = a * mask
                else:
                    a = a * (1.0 - self.dropout_rate)
            masks.append(mask)
            h = a
        return h, ForwardCache(inputs, pre, post, masks, self.generation, id(self))

    def backward(self, cache, grad_out):
        """Gradients for every layer's ``(weights, bias)`` and for the input batch."""
        if cache.owner != id(self) or cache.generation != self.generation:
            raise StructuralError("stale forward cache: parameters changed since the forward pass")
        g = np.asarray(grad_out, dtype=float)
        grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            if cache.masks[i] is not None:
                g = g * cache.masks[i]
            elif self._has_dropout(i):
                g = g * (1.0 - self.dropout_rate)
            g = g * _activation_grad(layer.activation, cache.pre[i], cache.post[i])
            grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
            g = g @ layer.weights
        return grads, g

    def parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weights"] = layer.weights
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    @staticmethod
    def named_grads(grads, prefix=""):
        out = {}
        for i, (gw, gb) in enumerate(grads):
            out[f"{prefix}{i}.weights"] = gw
            out[f"{prefix}{i}.bias"] = gb
        return out


class Adam:
    """Adam with bias correction. Parameters are updated in place."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.step_count = 0

    def step(self, params, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name}", parameter=name)
        for name in grads:
            if name not in params:
                raise StructuralError(f"gradient for unknown parameter {name}")
            if params[name].shape != grads[name].shape:
                raise StructuralError(
                    f"gradient shape {grads[name].shape} does not match parameter {name} {params[name].shape}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= (self.learning_rate / bc1) * m / (np.sqrt(v / bc2) + self.eps)
