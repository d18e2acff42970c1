"""Optimisation-based FMM parameter extraction for a single heartbeat.

Each wave is linear in ``(M, A*cos(beta), A*sin(beta))`` once ``alpha`` and
``omega`` are fixed:

    W(t) = M + c1 * cos(phi0(t)) + c2 * sin(phi0(t)),   c1 = A cos(beta), c2 = -A sin(beta)

so a single-wave fit is a grid search over ``(alpha, omega)`` with a closed
form least-squares solve per cell, followed by coordinate-descent
refinement. :func:`fit_beat` backfits several waves this way, picks P, Q,
R, S, T among them and finishes with a joint variable-projection polish of
the five selected waves.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares

from .errors import ValidationError
from .model import (
    N_WAVES, R_SLOT, TWO_PI, FMMBeatParams, FMMWave, canonical_order, circular_distance,
    eval_wave, phase_grid, phase_offset, wrap_angle,
)

logger = logging.getLogger(__name__)

OMEGA_MIN = 1e-3
# relative variance below which a residual counts as constant
_DEGENERATE_TOL = 1e-24


def omega_floor(n):
    """Narrowest admissible lobe for ``n`` samples: half-width of about one sample."""
    return max(OMEGA_MIN, np.pi / n)


def _default_omega_grid():
    return tuple(np.geomspace(0.01, 1.0, 16))


@dataclass(frozen=True)
class FitConfig:
    alpha_grid_size: int = 64
    omega_grid: tuple = field(default_factory=_default_omega_grid)
    max_waves: int = 7
    n_backfit_passes: int = 2
    refine_iters: int = 30
    polish: bool = True

    def __post_init__(self):
        object.__setattr__(self, "omega_grid", tuple(float(o) for o in self.omega_grid))
        if self.alpha_grid_size < 1 or not self.omega_grid:
            raise ValidationError("fit grids must be non-empty")
        if any(not 0 < o <= 1 for o in self.omega_grid):
            raise ValidationError("omega grid values must lie in (0, 1]")
        if self.max_waves < N_WAVES:
            raise ValidationError(f"max_waves must be >= {N_WAVES}")
        if self.n_backfit_passes < 0 or self.refine_iters < 0:
            raise ValidationError("pass and iteration counts must be >= 0")


@dataclass(frozen=True)
class FitResult:
    params: FMMBeatParams
    residual_rmse: float
    r2: float
    waves_considered: int
    pass_rmse: tuple = ()


@lru_cache(maxsize=32)
def _basis_bank(n, alpha_grid_size, omega_grid):
    """Centred cos/sin bases and their 2x2 Gram inverses for every grid cell."""
    t = phase_grid(n)
    alphas = TWO_PI * np.arange(alpha_grid_size) / alpha_grid_size
    omegas = np.asarray(omega_grid)
    phi = phase_offset(t[None, None, :], alphas[None, :, None], omegas[:, None, None])
    cos_b = np.cos(phi).reshape(-1, n)
    sin_b = np.sin(phi).reshape(-1, n)
    cos_b -= cos_b.mean(axis=1, keepdims=True)
    sin_b -= sin_b.mean(axis=1, keepdims=True)
    g11 = np.einsum("ij,ij->i", cos_b, cos_b)
    g12 = np.einsum("ij,ij->i", cos_b, sin_b)
    g22 = np.einsum("ij,ij->i", sin_b, sin_b)
    det = g11 * g22 - g12 * g12
    ok = det > 1e-12 * np.maximum(g11 * g22, 1e-300)
    ok &= np.repeat(omegas >= omega_floor(n), alpha_grid_size)
    cells = np.stack(np.meshgrid(omegas, alphas, indexing="ij"), axis=-1).reshape(-1, 2)
    for arr in (cos_b, sin_b):
        arr.setflags(write=False)
    return cos_b, sin_b, g11, g12, g22, np.where(ok, det, np.inf), cells


def _solve_wave(y, t, alpha, omega):
    """Least-squares ``(m, c1, c2)`` and SSE for one wave at fixed alpha, omega."""
    phi = phase_offset(t, alpha, omega)
    X = np.column_stack([np.ones_like(t), np.cos(phi), np.sin(phi)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    return coef, float(r @ r)


def _refine(y, t, alpha, omega, steps, iters):
    """Coordinate descent on (alpha, log omega) with step halving."""
    w_lo = omega_floor(t.size)
    omega = max(omega, w_lo)
    _, best = _solve_wave(y, t, alpha, omega)
    d_alpha, d_logw = steps
    for _ in range(iters):
        improved = False
        for sign in (1.0, -1.0):
            a = alpha + sign * d_alpha
            _, sse = _solve_wave(y, t, a, omega)
            if sse < best:
                alpha, best, improved = a, sse, True
                break
        for sign in (1.0, -1.0):
            w = float(np.clip(omega * np.exp(sign * d_logw), w_lo, 1.0))
            _, sse = _solve_wave(y, t, alpha, w)
            if sse < best:
                omega, best, improved = w, sse, True
                break
        if not improved:
            d_alpha *= 0.5
            d_logw *= 0.5
    return alpha, omega


def _wave_from_coef(coef, alpha, omega):
    m, c1, c2 = coef
    A = float(np.hypot(c1, c2))
    # negative amplitudes are folded into beta by atan2
    beta = float(np.arctan2(-c2, c1)) if A > 0 else 0.0
    return FMMWave(A, alpha, beta, omega), float(m)


def fit_single_wave(residual, grid=None, cfg=None):
    """Fit one FMM wave plus a constant to ``residual``.

    Returns ``(wave, m)`` where ``m`` is the fitted constant. A constant
    residual yields a zero-amplitude wave and ``m = mean(residual)``.
    """
    cfg = cfg or FitConfig()
    y = np.asarray(residual, dtype=float)
    n = y.size
    if n < 16:
        raise ValidationError(f"single-wave fit needs at least 16 samples, got {n}")
    t = phase_grid(n) if grid is None else np.asarray(grid, dtype=float)
    mean = float(y.mean())
    yc = y - mean
    sst = float(yc @ yc)
    if sst <= _DEGENERATE_TOL * max(1.0, mean * mean) * n:
        return FMMWave(0.0, 0.0, 0.0, 1.0), mean

    cos_b, sin_b, g11, g12, g22, det, cells = _basis_bank(n, cfg.alpha_grid_size, cfg.omega_grid)
    b1 = cos_b @ yc
    b2 = sin_b @ yc
    gain = (g22 * b1 * b1 - 2 * g12 * b1 * b2 + g11 * b2 * b2) / det
    if not np.any(np.isfinite(det)):
        raise ValidationError("omega grid has no cell wide enough for this many samples")
    k = int(np.argmax(gain))
    omega, alpha = cells[k]

    d_alpha = 0.5 * TWO_PI / cfg.alpha_grid_size
    grid_w = np.log(np.asarray(cfg.omega_grid))
    d_logw = 0.5 * (float(np.ptp(grid_w)) / max(len(grid_w) - 1, 1) or 0.5)
    alpha, omega = _refine(y, t, float(alpha), float(omega), (d_alpha, d_logw), cfg.refine_iters)
    coef, _ = _solve_wave(y, t, alpha, omega)
    return _wave_from_coef(coef, alpha, omega)


def assign_waves(candidates, r_peak_phase, qrs_halfwidth=np.pi / 4):
    """Label five of ``candidates`` as P, Q, R, S, T.

    R is the largest wave within ``qrs_halfwidth`` of the expected R phase
    (largest overall if none is that close). Q and S are the circular
    neighbours of R, provided they also lie within ``qrs_halfwidth`` of it.
    The arc from S round to Q is split at its midpoint: T is the largest
    wave in the first half, P the largest in the second. Empty slots get a
    zero-amplitude wave in the middle of their arc.
    """
    cands = list(candidates)
    if len(cands) < N_WAVES:
        raise ValidationError(f"wave assignation needs at least {N_WAVES} candidates")
    amps = np.array([w.A for w in cands])
    near = [i for i, w in enumerate(cands) if circular_distance(w.alpha, r_peak_phase) < np.pi / 4]
    pool = near if near else range(len(cands))
    r = max(pool, key=lambda i: (amps[i], -i))
    alpha_r = cands[r].alpha

    # offsets from R in (0, 2*pi), R itself at 0
    offs = {i: wrap_angle(w.alpha - alpha_r) for i, w in enumerate(cands) if i != r}
    after = sorted((d, i) for i, d in offs.items())
    s = after[0][1] if after and after[0][0] < qrs_halfwidth else None
    q = after[-1][1] if after and TWO_PI - after[-1][0] < qrs_halfwidth and after[-1][1] != s else None

    d_s = offs[s] if s is not None else qrs_halfwidth
    d_q = offs[q] if q is not None else TWO_PI - qrs_halfwidth
    mid = 0.5 * (d_s + d_q)
    rest = [i for i in offs if i not in (q, s)]
    t_pool = [i for i in rest if d_s < offs[i] <= mid]
    p_pool = [i for i in rest if mid < offs[i] < d_q]
    t_i = max(t_pool, key=lambda i: (amps[i], -i)) if t_pool else None
    p_i = max(p_pool, key=lambda i: (amps[i], -i)) if p_pool else None

    def pick(idx, lo, hi):
        if idx is not None:
            return cands[idx]
        return FMMWave(0.0, alpha_r + 0.5 * (lo + hi), 0.0, 0.1)

    waves = (
        pick(p_i, mid, d_q),
        pick(q, d_q, TWO_PI),
        cands[r],
        pick(s, 0.0, d_s),
        pick(t_i, d_s, mid),
    )
    return canonical_order(FMMBeatParams(0.0, waves), r_index_hint=R_SLOT).waves


def _linear_solve(y, t, alphas, omegas):
    cols = [np.ones_like(t)]
    for a, w in zip(alphas, omegas):
        phi = phase_offset(t, a, w)
        cols.extend((np.cos(phi), np.sin(phi)))
    X = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef, y - X @ coef


def _polish(y, t, waves):
    """Joint least squares over the nonlinear (alpha, omega) of the active waves,
    with M and every (c1, c2) projected out."""
    active = [j for j, w in enumerate(waves) if w.A > 0]
    if not active:
        return waves, None
    x0 = np.array([v for j in active for v in (waves[j].alpha, np.log(waves[j].omega))])

    def resid(x):
        _, r = _linear_solve(y, t, x[0::2], np.exp(x[1::2]))
        return r

    w_lo = omega_floor(t.size)
    lo = np.tile([-np.inf, np.log(w_lo)], len(active))
    hi = np.tile([np.inf, 0.0], len(active))
    x0 = np.clip(x0, lo, hi)
    sol = least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale=1.0,
                        xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=400)
    alphas, omegas = sol.x[0::2], np.exp(sol.x[1::2])
    coef, _ = _linear_solve(y, t, alphas, omegas)
    out = list(waves)
    for k, j in enumerate(active):
        c1, c2 = coef[1 + 2 * k], coef[2 + 2 * k]
        A = float(np.hypot(c1, c2))
        out[j] = FMMWave(A, alphas[k], float(np.arctan2(-c2, c1)) if A > 0 else 0.0,
                         float(np.clip(omegas[k], OMEGA_MIN, 1.0)))
    return out, float(coef[0])


def _summed(waves, t):
    return sum((eval_wave(w, t) for w in waves), np.zeros_like(t))


def fit_beat(beat, cfg=None):
    """Fit five FMM waves to the valid part of ``beat``.

    ``beat`` is a :class:`~fmmhead.preprocessing.Heartbeat` or anything with
    ``samples``, ``valid_len`` and ``r_peak_offset`` attributes.
    """
    cfg = cfg or FitConfig()
    n = int(beat.valid_len)
    if n < 32:
        raise ValidationError(f"fit_beat needs valid_len >= 32, got {n}")
    y = np.asarray(beat.samples, dtype=float)[:n]
    t = phase_grid(n)
    r_phase = TWO_PI * float(beat.r_peak_offset) / n
    sst = float(((y - y.mean()) ** 2).sum())

    if sst <= _DEGENERATE_TOL * max(1.0, float(y.mean()) ** 2) * n:
        flat = tuple(FMMWave(0.0, wrap_angle(r_phase + d), 0.0, 0.1)
                     for d in (-1.0, -0.2, 0.0, 0.2, 1.5))
        params = FMMBeatParams(float(y.mean()), flat)
        rmse = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
        return FitResult(params, rmse, 0.0, 0, ())

    # greedy stage: each new wave explains the current residual
    waves = []
    M = 0.0
    residual = y.copy()
    for _ in range(cfg.max_waves):
        w, m = fit_single_wave(residual, t, cfg)
        if w.A == 0.0:
            break
        waves.append(w)
        M += m
        residual = residual - eval_wave(w, t) - m
    sse = float(residual @ residual)
    pass_rmse = [np.sqrt(sse / n)]

    # backfitting: refit each wave against the residual of all others
    for _ in range(cfg.n_backfit_passes):
        for j in range(len(waves)):
            partial = residual + eval_wave(waves[j], t) + M
            w, m = fit_single_wave(partial, t, cfg)
            new_res = partial - eval_wave(w, t) - m
            new_sse = float(new_res @ new_res)
            if new_sse < sse:
                waves[j], M, residual, sse = w, m, new_res, new_sse
        pass_rmse.append(np.sqrt(sse / n))

    considered = len(waves)
    while len(waves) < N_WAVES:
        waves.append(FMMWave(0.0, 0.0, 0.0, 0.1))
    chosen = list(assign_waves(waves, r_phase))

    if cfg.polish:
        chosen, M_new = _polish(y, t, chosen)
        M = M_new if M_new is not None else float(y.mean())
        # the joint polish may trade identities between waves
        chosen = assign_waves(chosen, r_phase)
    else:
        M = float(np.mean(y - _summed(chosen, t)))
    params = FMMBeatParams(M, tuple(chosen))
    res = y - M - _summed(params.waves, t)
    sse_final = float(res @ res)
    return FitResult(
        params=params,
        residual_rmse=float(np.sqrt(sse_final / n)),
        r2=1.0 - sse_final / sst,
        waves_considered=considered,
        pass_rmse=tuple(float(v) for v in pass_rmse),
    )


def _timed_fit(args):
    beat, cfg = args
    start = time.perf_counter()
    try:
        res = fit_beat(beat, cfg)
    except ValidationError as exc:
        logger.warning("fit failed for beat %s: %s", getattr(beat, "beat_id", "?"), exc)
        res = None
    return res, 1000.0 * (time.perf_counter() - start)


def fit_many(beats, cfg=None, threads=1):
    """Fit every beat; results keep input order. Failed fits come back as None.

    Returns a list of ``(FitResult | None, wall_time_ms)``.
    """
    cfg = cfg or FitConfig()
    jobs = [(b, cfg) for b in beats]
    if threads <= 1:
        return [_timed_fit(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_timed_fit, jobs, chunksize=8))
