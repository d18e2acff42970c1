"""FMM wave model: parameter types, evaluation and the flat coefficient layout.

A single FMM wave is

    W(t) = A * cos(beta + phi0(t; alpha, omega))
    phi0(t; alpha, omega) = 2 * atan2(sin((t - alpha) / 2), omega * cos((t - alpha) / 2))

``phi0`` sweeps quickly through ``(-pi, pi)`` around ``t = alpha`` (slope
``1 / omega`` there) and is nearly constant elsewhere, so ``alpha`` is the
location of the lobe, ``omega`` its width and ``beta`` its direction
(``beta = 0`` is an upward peak, ``beta = pi`` a downward one). With
``omega = 1`` the phase reduces to ``t - alpha``. The atan2 form is total: it
has no branch point where ``tan`` would diverge.

A heartbeat is an offset ``M`` plus five waves named P, Q, R, S, T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError, ValidationError

TWO_PI = 2.0 * np.pi
WAVE_NAMES = ("P", "Q", "R", "S", "T")
N_WAVES = len(WAVE_NAMES)
R_SLOT = WAVE_NAMES.index("R")

# Flat coefficient layout, version 1:
#   [M, then per wave (A, sin alpha, cos alpha, sin beta, cos beta, omega)]
LAYOUT_VERSION = 1
WAVE_FIELDS = ("A", "sin_alpha", "cos_alpha", "sin_beta", "cos_beta", "omega")
N_WAVE_FIELDS = len(WAVE_FIELDS)
N_COEFFS = 1 + N_WAVES * N_WAVE_FIELDS
M_INDEX = 0


def coeff_index(wave, field_name):
    """Position of ``field_name`` of ``wave`` (name or slot) in the flat vector."""
    slot = WAVE_NAMES.index(wave) if isinstance(wave, str) else int(wave)
    return 1 + slot * N_WAVE_FIELDS + WAVE_FIELDS.index(field_name)


def layout_header():
    """Column names of the flat coefficient vector, in order."""
    cols = ["M"]
    for name in WAVE_NAMES:
        cols.extend(f"{name}_{f}" for f in WAVE_FIELDS)
    return cols


# index arrays used by vectorised code
A_IDX = np.array([coeff_index(j, "A") for j in range(N_WAVES)])
SIN_ALPHA_IDX = A_IDX + 1
COS_ALPHA_IDX = A_IDX + 2
SIN_BETA_IDX = A_IDX + 3
COS_BETA_IDX = A_IDX + 4
OMEGA_IDX = A_IDX + 5


def wrap_angle(x):
    """Reduce angles to ``[0, 2*pi)``."""
    y = np.mod(x, TWO_PI)
    # np.mod returns exactly 2*pi for tiny negative inputs
    if np.ndim(y):
        y[y >= TWO_PI] = 0.0
        return y
    return 0.0 if y >= TWO_PI else float(y)


def circular_distance(a, b):
    """Shortest arc length between two angles, in ``[0, pi]``."""
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi)
    return d if d.ndim else float(d)


@dataclass(frozen=True)
class FMMWave:
    A: float
    alpha: float
    beta: float
    omega: float

    def __post_init__(self):
        A, omega = float(self.A), float(self.omega)
        if not all(math.isfinite(v) for v in (A, self.alpha, self.beta, omega)):
            raise ValidationError(f"non-finite wave parameter in {self!r}")
        if A < 0:
            raise ValidationError(f"wave amplitude must be >= 0, got {A}")
        if not 0.0 < omega <= 1.0:
            raise ValidationError(f"wave omega must lie in (0, 1], got {omega}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "alpha", wrap_angle(float(self.alpha)))
        object.__setattr__(self, "beta", wrap_angle(float(self.beta)))


@dataclass(frozen=True)
class FMMBeatParams:
    """Offset plus five waves. Slot order is the wave label (P, Q, R, S, T)."""

    M: float
    waves: tuple = field(default_factory=tuple)

    def __post_init__(self):
        waves = tuple(self.waves)
        if len(waves) != N_WAVES:
            raise StructuralError(f"a beat needs exactly {N_WAVES} waves, got {len(waves)}")
        if not all(isinstance(w, FMMWave) for w in waves):
            raise StructuralError("waves must be FMMWave instances")
        if not math.isfinite(float(self.M)):
            raise ValidationError("M must be finite")
        object.__setattr__(self, "M", float(self.M))
        object.__setattr__(self, "waves", waves)

    def wave(self, name):
        return self.waves[WAVE_NAMES.index(name)]

    def replace_wave(self, name, **changes):
        slot = WAVE_NAMES.index(name)
        old = self.waves[slot]
        new = FMMWave(**{**old.__dict__, **changes})
        waves = self.waves[:slot] + (new,) + self.waves[slot + 1:]
        return FMMBeatParams(self.M, waves)

    def to_dict(self):
        return {
            "M": self.M,
            "waves": [
                {"name": n, "A": w.A, "alpha": w.alpha, "beta": w.beta, "omega": w.omega}
                for n, w in zip(WAVE_NAMES, self.waves)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            waves = d["waves"]
            by_name = {w["name"]: w for w in waves} if all("name" in w for w in waves) else None
            if by_name is not None and set(by_name) == set(WAVE_NAMES):
                waves = [by_name[n] for n in WAVE_NAMES]
            return cls(
                float(d["M"]),
                tuple(FMMWave(w["A"], w["alpha"], w["beta"], w["omega"]) for w in waves),
            )
        except (KeyError, TypeError) as exc:
            raise StructuralError(f"malformed beat parameters: {exc}") from exc

    def is_canonical(self):
        return canonical_order(self, r_index_hint=R_SLOT) == self


def phase_grid(n):
    """``n`` equally spaced phases ``2*pi*i/n`` on ``[0, 2*pi)``."""
    n = int(n)
    if n < 1:
        raise ValidationError(f"phase grid needs at least one sample, got {n}")
    return TWO_PI * np.arange(n) / n


def phase_offset(t, alpha, omega):
    """Möbius phase ``phi0(t; alpha, omega)`` without the ``beta`` shift."""
    half = 0.5 * (np.asarray(t) - alpha)
    return 2.0 * np.arctan2(np.sin(half), omega * np.cos(half))


def wave_values(A, alpha, beta, omega, t):
    """Vectorised wave evaluation; parameters broadcast against ``t``."""
    return A * np.cos(beta + phase_offset(t, alpha, omega))


def eval_wave(w, grid):
    """Samples of one wave on ``grid`` (an array of phases)."""
    return wave_values(w.A, w.alpha, w.beta, w.omega, np.asarray(grid, dtype=float))


def eval_beat(p, grid):
    grid = np.asarray(grid, dtype=float)
    out = np.full(grid.shape, p.M, dtype=float)
    for w in p.waves:
        out += eval_wave(w, grid)
    return out


def eval_beat_multilead(M, A, beta, alpha, omega, grid):
    """Evaluate several leads that share wave positions and widths.

    ``M`` has one entry per lead, ``A`` and ``beta`` are ``(n_leads, 5)`` and
    ``alpha``/``omega`` hold the five shared values. Returns a list with one
    signal per lead (empty when there are no leads).
    """
    M = np.atleast_1d(np.asarray(M, dtype=float))
    if M.size == 0:
        return []
    A = np.asarray(A, dtype=float).reshape(M.size, N_WAVES)
    beta = np.asarray(beta, dtype=float).reshape(M.size, N_WAVES)
    alpha = np.asarray(alpha, dtype=float).reshape(N_WAVES)
    omega = np.asarray(omega, dtype=float).reshape(N_WAVES)
    out = []
    for lead in range(M.size):
        p = FMMBeatParams(
            M[lead],
            tuple(FMMWave(A[lead, j], alpha[j], beta[lead, j], omega[j]) for j in range(N_WAVES)),
        )
        out.append(eval_beat(p, grid))
    return out


def encode(p):
    v = np.empty(N_COEFFS)
    v[M_INDEX] = p.M
    for j, w in enumerate(p.waves):
        b = 1 + j * N_WAVE_FIELDS
        v[b:b + N_WAVE_FIELDS] = (
            w.A, np.sin(w.alpha), np.cos(w.alpha), np.sin(w.beta), np.cos(w.beta), w.omega,
        )
    return v


def decode(v):
    """Inverse of :func:`encode`. Angles come from atan2, so the sin/cos
    pairs need not have unit length."""
    v = np.asarray(v, dtype=float)
    if v.shape != (N_COEFFS,):
        raise StructuralError(f"coefficient vector must have shape ({N_COEFFS},), got {v.shape}")
    for k in A_IDX:
        if not v[k] >= 0:
            raise ValidationError(f"coefficient {k} (amplitude) must be >= 0, got {v[k]}")
    for k in OMEGA_IDX:
        if not 0 < v[k] <= 1:
            raise ValidationError(f"coefficient {k} (omega) must lie in (0, 1], got {v[k]}")
    waves = []
    for j in range(N_WAVES):
        b = 1 + j * N_WAVE_FIELDS
        A, sa, ca, sb, cb, om = v[b:b + N_WAVE_FIELDS]
        waves.append(FMMWave(A, np.arctan2(sa, ca), np.arctan2(sb, cb), om))
    return FMMBeatParams(v[M_INDEX], tuple(waves))


def decode_angles(batch):
    """alpha and beta, each ``(n, 5)``, from a batch of coefficient vectors."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    alpha = wrap_angle(np.arctan2(batch[:, SIN_ALPHA_IDX], batch[:, COS_ALPHA_IDX]))
    beta = wrap_angle(np.arctan2(batch[:, SIN_BETA_IDX], batch[:, COS_BETA_IDX]))
    return alpha, beta


def canonical_order(p, r_index_hint=None):
    """Order waves by ascending alpha around the circle with R in the middle slot.

    R is ``waves[r_index_hint]`` when given, else the wave of largest
    amplitude (ties prefer the current middle slot, then the lower index).
    Waves sharing an alpha keep their input order, read round the circle
    starting at R.
    """
    waves = p.waves
    if r_index_hint is None:
        amps = [w.A for w in waves]
        top = max(amps)
        tied = [i for i, a in enumerate(amps) if a == top]
        r = R_SLOT if R_SLOT in tied else tied[0]
    else:
        r = int(r_index_hint)
        if not 0 <= r < len(waves):
            raise ValidationError(f"r_index_hint {r} out of range")
    alpha_r = waves[r].alpha
    n = len(waves)
    # R leads its ties; other ties keep their order going round from R
    keys = [(wrap_angle(w.alpha - alpha_r), (i - r) % n) for i, w in enumerate(waves)]
    order = sorted(range(n), key=keys.__getitem__)
    order = order[n - R_SLOT:] + order[:n - R_SLOT]
    return FMMBeatParams(p.M, tuple(waves[i] for i in order))
