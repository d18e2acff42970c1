"""Two-phase training: warm-up regression onto oracle coefficients, then
reconstruction training on normal beats, both with validation-based early
stopping and best-epoch restore."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autoencoder import FMMDenseAE, copy_parameters, restore_parameters
from .errors import StructuralError, ValidationError
from .head import default_regression_weights, per_beat_errors, reconstruction_loss, regression_loss
from .model import N_COEFFS
from .nn import Adam
from .preprocessing import NORMAL, UNKNOWN

logger = logging.getLogger(__name__)

LR_SWEEP = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_epochs: int = 500
    train_epochs: int = 500
    batch_size: int = 64
    inference_batch_size: int = 16
    early_stop_patience: int = 25
    val_split: float = 0.1
    seed: int = 0
    r_weight: float = 10.0

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.train_epochs < 0:
            raise ValidationError("epoch counts must be >= 0")
        if not 0.0 < self.val_split < 1.0:
            raise ValidationError(f"val_split must lie in (0, 1), got {self.val_split}")
        if self.batch_size < 1 or self.inference_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.early_stop_patience < 0:
            raise ValidationError("early_stop_patience must be >= 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")


@dataclass
class TrainReport:
    """Per-epoch losses of one phase. Epoch 0 is the evaluation before any update."""

    phase: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    checkpoint: str | None = None

    @property
    def best_val_loss(self):
        return None if self.best_epoch is None else self.val_loss[self.best_epoch]

    def to_dict(self, timings=True):
        d = asdict(self)
        if not timings:
            d.pop("epoch_seconds")
        return d


def split_indices(n, val_split, seed):
    """Seeded train/validation split; at least one beat lands on each side when n >= 2."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if n < 2:
        return perm, perm
    n_val = min(n - 1, max(1, int(round(val_split * n))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def beats_to_arrays(beats):
    if len(beats) == 0:
        raise ValidationError("no beats given")
    x = np.stack([b.samples for b in beats])
    v = np.array([b.valid_len for b in beats], dtype=int)
    return x, v


def _run_phase(phase, model, n, cfg, epochs, batch_loss, rng):
    """Generic early-stopped loop. ``batch_loss(idx, training, rng)`` returns
    ``(loss, grads or None)``."""
    report = TrainReport(phase)
    if epochs == 0:
        return report
    train_idx, val_idx = split_indices(n, cfg.val_split, cfg.seed)

    def evaluate(idx):
        total = 0.0
        for lo in range(0, idx.size, cfg.batch_size):
            b = idx[lo:lo + cfg.batch_size]
            total += batch_loss(b, False, None)[0] * b.size
        return total / idx.size

    start = time.perf_counter()
    report.train_loss.append(evaluate(train_idx))
    report.val_loss.append(evaluate(val_idx))
    report.epoch_seconds.append(time.perf_counter() - start)
    report.best_epoch = 0
    best_params = copy_parameters(model)
    opt = Adam(cfg.learning_rate)

    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(train_idx)
        total = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            b = order[lo:lo + cfg.batch_size]
            loss, grads = batch_loss(b, True, rng)
            model.apply_gradients(opt, grads)
            total += loss * b.size
        report.train_loss.append(total / order.size)
        report.val_loss.append(evaluate(val_idx))
        report.epoch_seconds.append(time.perf_counter() - start)
        if report.val_loss[-1] < report.val_loss[report.best_epoch]:
            report.best_epoch = epoch
            best_params = copy_parameters(model)
        elif epoch - report.best_epoch > cfg.early_stop_patience:
            report.stopped_early = True
            break
    restore_parameters(model, best_params)
    logger.info("%s: best epoch %d of %d, val loss %.6g", phase, report.best_epoch,
                len(report.val_loss) - 1, report.best_val_loss)
    return report


def warmup(model, beats, targets, cfg=None):
    """Regress the head's coefficients onto oracle targets (one per beat)."""
    cfg = cfg or TrainConfig()
    if not isinstance(model, FMMDenseAE):
        raise ValidationError("warm-up needs a model with an FMM head")
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0 or len(beats) == 0:
        raise ValidationError("warm-up needs at least one beat with an oracle target")
    targets = np.atleast_2d(targets)
    if targets.shape != (len(beats), N_COEFFS):
        raise StructuralError(f"targets must be ({len(beats)}, {N_COEFFS}), got {targets.shape}")
    x, _ = beats_to_arrays(beats)
    weights = default_regression_weights(cfg.r_weight)
    rng = np.random.default_rng(cfg.seed + 1)

    def batch_loss(idx, training, rng_):
        coeffs, cache = model.coefficients(x[idx], training, rng_, return_cache=True)
        loss, g = regression_loss(coeffs, targets[idx], weights)
        return loss, model.backward_coefficients(cache, g) if training else None

    return _run_phase("warmup", model, len(beats), cfg, cfg.warmup_epochs, batch_loss, rng)


def check_normal_only(beats):
    for b in beats:
        if b.label not in (NORMAL, UNKNOWN):
            raise ValidationError(
                f"anomaly training accepts normal beats only; beat {b.beat_id!r} is labelled {b.label!r}")


def train_anomaly(model, beats, cfg=None):
    """Train as a plain autoencoder on normal beats (reconstruction loss over valid samples)."""
    cfg = cfg or TrainConfig()
    check_normal_only(beats)
    x, v = beats_to_arrays(beats)
    rng = np.random.default_rng(cfg.seed + 2)

    def batch_loss(idx, training, rng_):
        out, cache = model.forward(x[idx], v[idx], training, rng_)
        loss, g = reconstruction_loss(out, x[idx], v[idx])
        return loss, model.backward(cache, g) if training else None

    return _run_phase("anomaly", model, len(beats), cfg, cfg.train_epochs, batch_loss, rng)


def anomaly_scores(model, beats, batch_size=16):
    """Per-beat reconstruction MSE over the valid samples (inference mode)."""
    x, v = beats_to_arrays(beats)
    # padding content must not leak into the score
    x = np.where(np.arange(x.shape[1])[None, :] < v[:, None], x, 0.0)
    out = np.empty(len(beats))
    for lo in range(0, len(beats), batch_size):
        sl = slice(lo, lo + batch_size)
        rec = model.reconstruct(x[sl], v[sl])
        out[sl] = per_beat_errors(rec, x[sl], v[sl])
    return out


def anomaly_score(model, beat):
    return float(anomaly_scores(model, [beat])[0])


def fit_protocol(model, beats, cfg=None, targets=None):
    """Warm-up (when targets are given and epochs > 0) followed by anomaly training.

    Returns the list of phase reports.
    """
    cfg = cfg or TrainConfig()
    reports = []
    if targets is not None and cfg.warmup_epochs > 0:
        reports.append(warmup(model, beats, targets, cfg))
    reports.append(train_anomaly(model, beats, cfg))
    return reports
