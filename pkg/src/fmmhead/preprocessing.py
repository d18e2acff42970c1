"""From raw single-lead recordings to zero-padded heartbeats.

Pipeline: baseline-wander removal (zero-phase Butterworth low-pass subtracted
from the signal), Pan-Tompkins R-peak detection, 40/60 segmentation between
neighbouring R peaks, and zero padding to a fixed length.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import butter, find_peaks, sosfiltfilt

from .errors import IngestionError, StructuralError, ValidationError

NORMAL = "normal"
UNKNOWN = "unknown"

# Pan-Tompkins constants (seconds / Hz)
QRS_BAND = (5.0, 15.0)
INTEGRATION_WINDOW = 0.150
REFRACTORY = 0.200
T_WAVE_WINDOW = 0.360
SEARCHBACK_FACTOR = 1.66
MIN_RECORD_SECONDS = 2.0

# default padded lengths by sampling rate
DEFAULT_L_PAD = {500: 1000, 100: 300}


class SegmentationWarning(UserWarning):
    """Too few R peaks to cut any beat out of a record."""


@dataclass(frozen=True)
class EcgRecord:
    samples: np.ndarray
    sample_rate: int
    lead_id: str = "lead"
    subject_id: str = "unknown"

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float).ravel()
        if x.size == 0:
            raise ValidationError("record has no samples")
        if not np.all(np.isfinite(x)):
            raise ValidationError("record contains non-finite samples")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValidationError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def with_samples(self, samples):
        return EcgRecord(samples, self.sample_rate, self.lead_id, self.subject_id)


@dataclass(eq=False)
class Heartbeat:
    """One zero-padded beat. Only ``samples[:valid_len]`` carries signal."""

    samples: np.ndarray
    valid_len: int
    r_peak_offset: int
    label: str = UNKNOWN
    sample_rate: int = 0
    beat_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.valid_len = int(self.valid_len)
        self.r_peak_offset = int(self.r_peak_offset)
        if self.samples.ndim != 1:
            raise StructuralError(f"beat samples must be 1D, got shape {self.samples.shape}")
        if not 1 <= self.valid_len <= self.samples.size:
            raise ValidationError(f"valid_len {self.valid_len} outside [1, {self.samples.size}]")
        if not 0 <= self.r_peak_offset < self.valid_len:
            raise ValidationError(f"r_peak_offset {self.r_peak_offset} outside [0, {self.valid_len})")
        if np.any(self.samples[self.valid_len:] != 0.0):
            raise ValidationError("padding beyond valid_len must be exactly zero")

    @property
    def l_pad(self):
        return self.samples.size

    @property
    def valid(self):
        return self.samples[:self.valid_len]

    @property
    def is_normal(self):
        return self.label == NORMAL

    @property
    def is_abnormal(self):
        return self.label not in (NORMAL, UNKNOWN)

    def __eq__(self, other):
        if not isinstance(other, Heartbeat):
            return NotImplemented
        return (np.array_equal(self.samples, other.samples) and self.valid_len == other.valid_len
                and self.r_peak_offset == other.r_peak_offset and self.label == other.label
                and self.sample_rate == other.sample_rate and self.beat_id == other.beat_id)


def pad_beat(x, l_pad):
    x = np.asarray(x, dtype=float)
    if x.size > l_pad:
        raise ValidationError(f"beat of length {x.size} does not fit l_pad={l_pad}")
    out = np.zeros(l_pad)
    out[:x.size] = x
    return out


def remove_baseline(rec, cutoff_hz=0.5, order=4):
    """Subtract a zero-phase low-pass estimate of the baseline."""
    fs = rec.sample_rate
    if not 0.0 < cutoff_hz < fs / 2.0:
        raise ValidationError(f"cutoff {cutoff_hz} Hz must lie in (0, {fs / 2}) for rate {fs}")
    x = rec.samples
    if x.size < 2:
        return rec.with_samples(x - x.mean())
    sos = butter(order, cutoff_hz, btype="low", fs=fs, output="sos")
    # pad by a few time constants of the filter so the ends settle; mirror
    # padding, since odd padding drags the baseline onto the end samples
    padlen = min(x.size - 1, int(3 * fs / cutoff_hz))
    baseline = sosfiltfilt(sos, x, padtype="even", padlen=padlen)
    return rec.with_samples(x - baseline)


def bandpass(x, fs, band=QRS_BAND, order=3):
    """Zero-phase Butterworth band-pass; the upper edge is clipped below Nyquist."""
    lo, hi = band
    hi = min(hi, 0.45 * fs)
    sos = butter(order, [lo, hi], btype="band", fs=fs, output="sos")
    x = np.asarray(x, dtype=float)
    return sosfiltfilt(sos, x, padlen=min(x.size - 1, 3 * int(fs)))


def _derivative(x, fs):
    # five-point derivative, centred so it adds no delay
    k = np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * fs / 8.0
    return np.convolve(x, k, mode="same")


def pan_tompkins_stages(x, fs):
    """Band-passed, differentiated and integrated signals of the detector."""
    bp = bandpass(x, fs)
    d = _derivative(bp, fs)
    width = max(1, int(round(INTEGRATION_WINDOW * fs)))
    mwi = uniform_filter1d(d * d, size=width, mode="constant")
    return bp, d, mwi


def detect_r_peaks(rec, refine_window=0.075):
    """Pan-Tompkins QRS detection.

    Candidate peaks of the moving-window integral are classified with the
    adaptive signal/noise thresholds of the original algorithm, including the
    search-back for missed beats and T-wave rejection. Each accepted QRS is
    moved to the largest deflection of the input within ``refine_window``
    seconds.
    """
    fs = rec.sample_rate
    x = rec.samples
    if rec.duration < MIN_RECORD_SECONDS:
        raise ValidationError(
            f"R-peak detection needs at least {MIN_RECORD_SECONDS} s of signal, got {rec.duration:.3f} s")
    if np.ptp(x) == 0.0:
        return []
    _, d, mwi = pan_tompkins_stages(x, fs)
    if mwi.max() <= 0.0:
        return []

    refractory = int(round(REFRACTORY * fs))
    cand, _ = find_peaks(mwi, distance=max(1, refractory))
    if cand.size == 0:
        return []

    learn = mwi[:int(MIN_RECORD_SECONDS * fs)]
    spki = 0.25 * learn.max()
    npki = 0.5 * learn.mean()
    slope = np.abs(d)
    half_w = max(1, int(round(INTEGRATION_WINDOW * fs / 2)))

    def local_slope(i):
        return slope[max(0, i - half_w):i + half_w + 1].max()

    qrs = []
    rr = []
    last_slope = None
    for k, i in enumerate(cand):
        thr1 = npki + 0.25 * (spki - npki)
        thr2 = 0.5 * thr1
        v = mwi[i]

        # search-back when the gap since the last QRS is too long
        if qrs and len(rr) >= 1:
            rr_avg = np.mean(rr[-8:])
            if i - qrs[-1] > SEARCHBACK_FACTOR * rr_avg:
                lo = qrs[-1] + refractory
                missed = [j for j in cand[:k] if lo <= j < i and mwi[j] > thr2]
                if missed:
                    j = max(missed, key=lambda j: mwi[j])
                    rr.append(j - qrs[-1])
                    qrs.append(j)
                    last_slope = local_slope(j)
                    spki = 0.25 * mwi[j] + 0.75 * spki

        if v > thr1:
            if qrs and i - qrs[-1] < T_WAVE_WINDOW * fs and last_slope is not None:
                if local_slope(i) < 0.5 * last_slope:
                    npki = 0.125 * v + 0.875 * npki
                    continue
            if qrs and i - qrs[-1] < refractory:
                continue
            if qrs:
                rr.append(i - qrs[-1])
            qrs.append(int(i))
            last_slope = local_slope(i)
            spki = 0.125 * v + 0.875 * spki
        else:
            npki = 0.125 * v + 0.875 * npki

    # refine onto the signal: largest deviation from the local median
    w = max(1, int(round(refine_window * fs)))
    peaks = []
    for i in qrs:
        lo, hi = max(0, i - w), min(x.size, i + w + 1)
        seg = x[lo:hi]
        j = lo + int(np.argmax(np.abs(seg - np.median(seg))))
        if not peaks or j > peaks[-1]:
            peaks.append(j)
    return peaks


def segment_beats(rec, peaks, l_pad, label=UNKNOWN):
    """Cut beats using the 40/60 rule between neighbouring R peaks.

    Beat ``k`` starts 40% of the way back to peak ``k-1`` and ends 60% of the
    way to peak ``k+1``; consecutive beats share their boundary. The first and
    last peaks only serve as neighbours. Beats longer than ``l_pad`` are
    dropped; the rest are zero-padded.
    """
    peaks = np.asarray(peaks, dtype=int)
    if peaks.size < 3:
        warnings.warn(f"{peaks.size} R peaks: need at least 3 to segment", SegmentationWarning, stacklevel=2)
        return []
    if np.any(np.diff(peaks) <= 0):
        raise ValidationError("peak indices must be strictly increasing")
    if peaks[0] < 0 or peaks[-1] >= rec.samples.size:
        raise ValidationError("peak indices fall outside the record")
    gaps = np.diff(peaks)
    # boundary after peak k sits round(0.6 * gap) samples later
    bounds = peaks[:-1] + (6 * gaps + 5) // 10
    beats = []
    for k in range(1, peaks.size - 1):
        start, end = int(bounds[k - 1]), int(bounds[k])
        n = end - start
        if n > l_pad:
            continue
        beats.append(Heartbeat(
            samples=pad_beat(rec.samples[start:end], l_pad),
            valid_len=n,
            r_peak_offset=int(peaks[k]) - start,
            label=label,
            sample_rate=rec.sample_rate,
            beat_id=f"{rec.subject_id}:{rec.lead_id}:{int(peaks[k])}",
            meta={"start": start, "end": end},
        ))
    return beats


def default_l_pad(sample_rate):
    try:
        return DEFAULT_L_PAD[int(sample_rate)]
    except KeyError:
        raise ValidationError(f"no default l_pad for rate {sample_rate}; pass one explicitly") from None


def preprocess_record(rec, l_pad=None, cutoff_hz=0.5, label=UNKNOWN):
    """Baseline removal, R-peak detection and segmentation in one call."""
    l_pad = default_l_pad(rec.sample_rate) if l_pad is None else int(l_pad)
    clean = remove_baseline(rec, cutoff_hz)
    peaks = detect_r_peaks(clean)
    return segment_beats(clean, peaks, l_pad, label)


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_record(csv_path, sidecar_path=None, lead=None):
    """Load a recording from CSV plus its JSON sidecar.

    The CSV holds one sample per line; a header line is optional. With several
    columns the header names the leads and ``lead`` picks one (default: the
    sidecar's ``lead_id`` or the first column). The sidecar defaults to the
    CSV path with a ``.json`` suffix and must provide ``sample_rate``.
    """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    try:
        meta = json.loads(sidecar_path.read_text())
    except FileNotFoundError:
        raise IngestionError("sidecar JSON not found", path=sidecar_path) from None
    except ValueError as exc:
        raise IngestionError(f"invalid sidecar JSON: {exc}", path=sidecar_path) from None
    if "sample_rate" not in meta:
        raise IngestionError("sidecar lacks sample_rate", path=sidecar_path)

    values = []
    col = 0
    header = None
    try:
        fh = open(csv_path, newline="")
    except OSError as exc:
        raise IngestionError(str(exc), path=csv_path) from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if header is None and not values and not all(_is_number(c) for c in row):
                header = row
                wanted = lead or meta.get("lead_id")
                if len(row) > 1 and wanted is not None:
                    if wanted not in row:
                        raise IngestionError(f"lead {wanted!r} not among columns {row}", line=lineno, path=csv_path)
                    col = row.index(wanted)
                continue
            if col >= len(row):
                raise IngestionError(f"expected at least {col + 1} columns", line=lineno, path=csv_path)
            try:
                values.append(float(row[col]))
            except ValueError:
                raise IngestionError(f"not a number: {row[col]!r}", line=lineno, path=csv_path) from None
    lead_id = header[col] if header and len(header) > 1 else meta.get("lead_id", "lead")
    return EcgRecord(np.array(values), meta["sample_rate"], str(lead_id), str(meta.get("subject_id", csv_path.stem)))
