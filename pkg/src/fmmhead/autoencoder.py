"""Dense autoencoders: the plain dumbbell baseline and the FMM-Head variant.

Both share the encoder ``l_pad -> 256 -> 128 -> 32`` (ReLU, dropout 0.1).
The baseline decodes with ``32 -> 128 -> 256 -> l_pad``; the FMM variant
replaces that decoder with :class:`~fmmhead.head.FMMHead`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import StructuralError, ValidationError
from .head import FMMHead, reconstruct, reconstruct_backward
from .model import LAYOUT_VERSION, N_COEFFS
from .nn import MLP

ENCODER_SIZES = (256, 128)
LATENT = 32
DROPOUT = 0.1
CHECKPOINT_MAGIC = b"FMMHCKPT"
CHECKPOINT_VERSION = 1


class _Autoencoder:
    kind = None

    def __init__(self, l_pad, hidden=ENCODER_SIZES, latent=LATENT, dropout=DROPOUT, seed=0):
        self.l_pad = int(l_pad)
        self.hidden = tuple(int(h) for h in hidden)
        self.latent = int(latent)
        self.dropout = float(dropout)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        sizes = (self.l_pad, *self.hidden, self.latent)
        self.encoder = MLP.build(sizes, ["relu"] * (len(sizes) - 1), rng, self.dropout, dropout_last=True)
        self._build_decoder(rng)

    def parameters(self):
        params = self.encoder.parameters("encoder.")
        params.update(self._decoder_parameters())
        return params

    def apply_gradients(self, optimizer, grads):
        optimizer.step(self.parameters(), grads)
        self.touch()

    def touch(self):
        """Mark parameters as changed so older forward caches are rejected."""
        self.encoder.generation += 1
        self._touch_decoder()

    def config(self):
        return {
            "kind": self.kind, "l_pad": self.l_pad, "hidden": list(self.hidden),
            "latent": self.latent, "dropout": self.dropout, "seed": self.seed,
        }

    def _encode(self, x, training, rng):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.l_pad:
            raise StructuralError(f"model expects beats of length {self.l_pad}, got {x.shape[1]}")
        return self.encoder.forward(x, training, rng)

    def reconstruct(self, x, valid_lens, training=False, rng=None):
        return self.forward(x, valid_lens, training, rng)[0]


class DenseAE(_Autoencoder):
    kind = "dense_ae"

    def _build_decoder(self, rng):
        sizes = (self.latent, *reversed(self.hidden), self.l_pad)
        acts = ["relu"] * (len(sizes) - 2) + ["linear"]
        self.decoder = MLP.build(sizes, acts, rng, self.dropout)

    def _decoder_parameters(self):
        return self.decoder.parameters("decoder.")

    def _touch_decoder(self):
        self.decoder.generation += 1

    def forward(self, x, valid_lens, training=False, rng=None):
        """Returns ``(reconstruction, cache)``; padded positions are zeroed."""
        z, enc_cache = self._encode(x, training, rng)
        out, dec_cache = self.decoder.forward(z, training, rng)
        v = np.broadcast_to(np.asarray(valid_lens, dtype=int), (out.shape[0],))
        mask = np.arange(self.l_pad)[None, :] < v[:, None]
        return out * mask, (enc_cache, dec_cache, mask)

    def backward(self, cache, grad_out):
        enc_cache, dec_cache, mask = cache
        dec_grads, g_z = self.decoder.backward(dec_cache, grad_out * mask)
        enc_grads, _ = self.encoder.backward(enc_cache, g_z)
        grads = MLP.named_grads(enc_grads, "encoder.")
        grads.update(MLP.named_grads(dec_grads, "decoder."))
        return grads


class FMMDenseAE(_Autoencoder):
    kind = "fmm_dense_ae"

    def __init__(self, l_pad, hidden=ENCODER_SIZES, latent=LATENT, dropout=DROPOUT, seed=0,
                 omega_max=0.5, head_hidden=256):
        self.omega_max = float(omega_max)
        self.head_hidden = int(head_hidden)
        super().__init__(l_pad, hidden, latent, dropout, seed)

    def _build_decoder(self, rng):
        self.head = FMMHead(self.latent, self.head_hidden, self.omega_max, rng=rng)

    def _decoder_parameters(self):
        return self.head.parameters()

    def _touch_decoder(self):
        self.head.touch()

    def config(self):
        cfg = super().config()
        cfg.update(omega_max=self.omega_max, head_hidden=self.head_hidden)
        return cfg

    def coefficients(self, x, training=False, rng=None, return_cache=False):
        z, enc_cache = self._encode(x, training, rng)
        coeffs, head_cache = self.head.forward(z)
        if return_cache:
            return coeffs, (enc_cache, head_cache)
        return coeffs

    def backward_coefficients(self, cache, grad_coeffs):
        enc_cache, head_cache = cache
        grads, g_z = self.head.backward(head_cache, grad_coeffs)
        enc_grads, _ = self.encoder.backward(enc_cache, g_z)
        grads.update(MLP.named_grads(enc_grads, "encoder."))
        return grads

    def forward(self, x, valid_lens, training=False, rng=None):
        coeffs, cache = self.coefficients(x, training, rng, return_cache=True)
        out, rec_cache = reconstruct(coeffs, valid_lens, self.l_pad, return_cache=True)
        return out, (cache, rec_cache)

    def backward(self, cache, grad_out):
        coeff_cache, rec_cache = cache
        return self.backward_coefficients(coeff_cache, reconstruct_backward(rec_cache, grad_out))


MODEL_KINDS = {cls.kind: cls for cls in (DenseAE, FMMDenseAE)}


def build_model(kind, l_pad, **kwargs):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValidationError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(l_pad, **kwargs)


def _model_from_config(cfg):
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    l_pad = cfg.pop("l_pad")
    cfg["hidden"] = tuple(cfg["hidden"])
    return build_model(kind, l_pad, **cfg)


def save_checkpoint(path, model, extra=None):
    """Binary container: magic, little-endian u64 header size, JSON header,
    then every parameter as little-endian float64 in header order."""
    params = model.parameters()
    header = {
        "tool_version": __version__,
        "checkpoint_version": CHECKPOINT_VERSION,
        "layout_version": LAYOUT_VERSION,
        "n_coefficients": N_COEFFS,
        "architecture": model.config(),
        "seed": model.seed,
        "omega_max": getattr(model, "omega_max", None),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(model, header)``."""
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise StructuralError(f"{path}: not an fmmhead checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    try:
        header = json.loads(data[off:off + size])
    except ValueError as exc:
        raise StructuralError(f"{path}: corrupt checkpoint header") from exc
    off += size
    if header.get("layout_version") != LAYOUT_VERSION or header.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise StructuralError(
            f"{path}: checkpoint layout {header.get('layout_version')}/{header.get('checkpoint_version')} "
            f"does not match {LAYOUT_VERSION}/{CHECKPOINT_VERSION}")
    model = _model_from_config(header["architecture"])
    params = model.parameters()
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params or params[name].shape != shape:
            raise StructuralError(f"{path}: parameter {name} {shape} does not fit the architecture")
        count = int(np.prod(shape))
        block = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        params[name][...] = block.reshape(shape)
        off += 8 * count
    if off != len(data):
        raise StructuralError(f"{path}: trailing bytes after parameter blocks")
    model.touch()
    return model, header


def copy_parameters(model):
    return {k: v.copy() for k, v in model.parameters().items()}


def restore_parameters(model, snapshot):
    params = model.parameters()
    for k, v in snapshot.items():
        params[k][...] = v
    model.touch()
