"""Circular and linear statistics for coefficient agreement, plus ROC/AUROC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError, UndefinedMeanError, ValidationError
from .model import (
    A_IDX, M_INDEX, N_COEFFS, OMEGA_IDX, WAVE_NAMES, decode_angles, wrap_angle,
)

# resultant lengths below this make the circular mean undefined
RESULTANT_TOL = 1e-12


def circular_mean(angles):
    """``atan2(sum sin, sum cos)`` reduced to ``[0, 2*pi)``."""
    a = np.asarray(angles, dtype=float).ravel()
    if a.size == 0:
        raise ValidationError("circular mean of an empty sample")
    s, c = np.sin(a).sum(), np.cos(a).sum()
    if np.hypot(s, c) < RESULTANT_TOL * a.size:
        raise UndefinedMeanError("circular mean undefined: resultant vector vanishes")
    return wrap_angle(float(np.arctan2(s, c)))


def circular_correlation(a, b):
    """Circular correlation coefficient of two paired angle samples.

    ``sum sin(a - abar) sin(b - bbar) / sqrt(sum sin^2(a - abar) * sum sin^2(b - bbar))``
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValidationError(f"angle samples differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValidationError("circular correlation of empty samples")
    try:
        sa = np.sin(a - circular_mean(a))
        sb = np.sin(b - circular_mean(b))
    except UndefinedMeanError as exc:
        raise ValidationError(f"circular correlation undefined: {exc}") from exc
    den = np.sqrt((sa * sa).sum() * (sb * sb).sum())
    if den == 0.0:
        raise ValidationError("circular correlation undefined: a sample has no spread")
    return float((sa * sb).sum() / den)


def pearson(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValidationError(f"samples differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValidationError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("pearson undefined for zero variance")
    r = (dx * dy).sum() / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float


def roc_auroc(scores, labels):
    """ROC curve over the unique scores, high score = positive.

    Equal scores form a single step, so the trapezoidal area equals the
    Mann-Whitney probability with ties counted as one half. The first point
    (threshold ``+inf``) is ``(0, 0)``; the last is ``(1, 1)``.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    y = y.astype(bool) if y.dtype != bool else y
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both positive and negative labels")

    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(~y)[ends]]
    # integer trapezoid: sum (fp_i - fp_{i-1}) * (tp_i + tp_{i-1}) / (2 P N)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auroc = twice_area / (2.0 * n_pos * n_neg)
    return RocCurve(
        thresholds=np.r_[np.inf, s[ends]],
        fpr=fp / n_neg,
        tpr=tp / n_pos,
        auroc=float(auroc),
    )


def auroc(scores, labels):
    return roc_auroc(scores, labels).auroc


def _as_batch(v):
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if v.shape[1] != N_COEFFS:
        raise StructuralError(f"coefficient batch must have {N_COEFFS} columns, got {v.shape[1]}")
    return v


def coefficient_correlations(predicted, oracle, strict=True):
    """Agreement table between two aligned coefficient batches.

    Rows are ``(wave, parameter, kind, value)``: circular correlation for
    alpha and beta (decoded with atan2), Pearson for A, omega and M. With
    ``strict=False`` undefined entries (zero spread) become NaN instead of
    raising.
    """
    p, o = _as_batch(predicted), _as_batch(oracle)
    if p.shape != o.shape:
        raise StructuralError(f"batches differ in shape: {p.shape} vs {o.shape}")
    if p.shape[0] < 3:
        raise ValidationError("coefficient correlations need at least 3 beats")
    pa, pb = decode_angles(p)
    oa, ob = decode_angles(o)
    cols = []
    for j, name in enumerate(WAVE_NAMES):
        cols += [
            (name, "A", "pearson", p[:, A_IDX[j]], o[:, A_IDX[j]]),
            (name, "alpha", "circular", pa[:, j], oa[:, j]),
            (name, "beta", "circular", pb[:, j], ob[:, j]),
            (name, "omega", "pearson", p[:, OMEGA_IDX[j]], o[:, OMEGA_IDX[j]]),
        ]
    cols.append(("-", "M", "pearson", p[:, M_INDEX], o[:, M_INDEX]))
    rows = []
    for wave, param, kind, a, b in cols:
        fn = circular_correlation if kind == "circular" else pearson
        try:
            value = fn(a, b)
        except ValidationError:
            if strict:
                raise
            value = float("nan")
        rows.append((wave, param, kind, value))
    return rows
