"""Datasets on disk and in memory: the beats file format, the ECG5000 (UCR)
loader, coefficient JSON-lines files and the synthetic FMM beat generator."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IngestionError, StructuralError, ValidationError
from .model import (
    LAYOUT_VERSION, N_WAVES, TWO_PI, FMMBeatParams, FMMWave,
    encode, eval_beat, phase_grid, wrap_angle,
)
from .preprocessing import NORMAL, UNKNOWN, Heartbeat, bandpass, pad_beat

ECG5000_LENGTH = 140
# nominal rate of the ECG5000 beats (the archive resamples to 140 points per beat)
ECG5000_RATE = 250
BEATS_FORMAT = "fmmhead-beats"
COEFFS_FORMAT = "fmmhead-coefficients"


def config_hash(cfg):
    """Short stable digest of a JSON-serialisable configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance_header(cfg=None, **extra):
    out = {"tool_version": __version__, "layout_version": LAYOUT_VERSION,
           "config_hash": config_hash(cfg or {})}
    out.update(extra)
    return out


@dataclass(eq=False)
class BeatDataset:
    beats: list
    l_pad: int
    sample_rate: int
    provenance: dict = field(default_factory=dict)
    label_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beats = list(self.beats)
        self.l_pad = int(self.l_pad)
        self.sample_rate = int(self.sample_rate)
        for b in self.beats:
            if b.l_pad != self.l_pad:
                raise StructuralError(f"beat {b.beat_id!r} has l_pad {b.l_pad}, dataset uses {self.l_pad}")
            if b.sample_rate != self.sample_rate:
                raise StructuralError(
                    f"beat {b.beat_id!r} has rate {b.sample_rate}, dataset uses {self.sample_rate}")

    def __len__(self):
        return len(self.beats)

    def __iter__(self):
        return iter(self.beats)

    def __getitem__(self, i):
        return self.beats[i]

    def __eq__(self, other):
        if not isinstance(other, BeatDataset):
            return NotImplemented
        return (self.l_pad == other.l_pad and self.sample_rate == other.sample_rate
                and self.provenance == other.provenance and self.label_map == other.label_map
                and len(self.beats) == len(other.beats)
                and all(a == b for a, b in zip(self.beats, other.beats)))

    @property
    def labels(self):
        return [b.label for b in self.beats]

    def binary_labels(self):
        """1 for abnormal, 0 for normal; unknown labels are rejected."""
        if any(b.label == UNKNOWN for b in self.beats):
            raise ValidationError("dataset contains unlabelled beats")
        return np.array([int(b.is_abnormal) for b in self.beats])

    def subset(self, idx, split=None):
        prov = dict(self.provenance)
        if split is not None:
            prov["split"] = split
        return BeatDataset([self.beats[i] for i in idx], self.l_pad, self.sample_rate, prov, dict(self.label_map))

    def normal(self):
        return self.subset([i for i, b in enumerate(self.beats) if b.is_normal])

    def arrays(self):
        x = np.stack([b.samples for b in self.beats]) if self.beats else np.zeros((0, self.l_pad))
        v = np.array([b.valid_len for b in self.beats], dtype=int)
        return x, v


def save_beats(path, ds, cfg=None):
    """Header JSON line, CSV column line, one CSV row per beat."""
    header = {
        "format": BEATS_FORMAT,
        "l_pad": ds.l_pad,
        "sample_rate": ds.sample_rate,
        "label_map": ds.label_map,
        "provenance": ds.provenance,
        **provenance_header(cfg),
    }
    with open(path, "w", newline="") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beat_id", "label", "valid_len", "r_peak_offset"] + [f"s_{i}" for i in range(ds.l_pad)])
        for b in ds.beats:
            w.writerow([b.beat_id, b.label, b.valid_len, b.r_peak_offset] + [repr(float(s)) for s in b.samples])


def load_beats(path):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(str(exc), path=path) from None
    with fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except ValueError:
            raise IngestionError("first line is not a JSON header", line=1, path=path) from None
        if header.get("layout_version") != LAYOUT_VERSION:
            raise StructuralError(f"{path}: layout version {header.get('layout_version')} != {LAYOUT_VERSION}")
        l_pad, rate = int(header["l_pad"]), int(header["sample_rate"])
        reader = csv.reader(fh)
        cols = next(reader, None)
        if cols is None or len(cols) != 4 + l_pad:
            raise IngestionError(f"column line must have {4 + l_pad} fields", line=2, path=path)
        beats = []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != 4 + l_pad:
                raise IngestionError(f"expected {4 + l_pad} fields, got {len(row)}", line=lineno, path=path)
            try:
                samples = np.array([float(s) for s in row[4:]])
                beats.append(Heartbeat(samples, int(row[2]), int(row[3]), row[1], rate, row[0]))
            except (ValueError, ValidationError) as exc:
                raise IngestionError(str(exc), line=lineno, path=path) from None
    return BeatDataset(beats, l_pad, rate, header.get("provenance", {}), header.get("label_map", {}))


_UCR_SPLIT = re.compile(r"[,\s]+")


def _read_ucr(path, label_map, split, sample_rate):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(str(exc), path=path) from None
    beats = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = [f for f in _UCR_SPLIT.split(line) if f]
        try:
            values = np.array([float(f) for f in fields])
        except ValueError as exc:
            raise IngestionError(f"malformed value: {exc}", line=lineno, path=path) from None
        if values.size != 1 + ECG5000_LENGTH:
            raise IngestionError(
                f"expected a class and {ECG5000_LENGTH} values, got {values.size - 1} values",
                line=lineno, path=path)
        cls = values[0]
        if cls != int(cls) or str(int(cls)) not in label_map:
            raise IngestionError(f"class must be an integer in 1..5, got {fields[0]}", line=lineno, path=path)
        x = values[1:]
        if not np.all(np.isfinite(x)):
            raise IngestionError("non-finite sample", line=lineno, path=path)
        r = int(np.argmax(np.abs(bandpass(x, sample_rate))))
        beats.append(Heartbeat(x, ECG5000_LENGTH, r, label_map[str(int(cls))], sample_rate,
                               f"{split}:{len(beats)}"))
    return beats


def ecg5000_label_map():
    return {"1": NORMAL, **{str(k): f"class{k}" for k in range(2, 6)}}


def load_ecg5000(train_path, test_path, sample_rate=ECG5000_RATE):
    """Load the ECG5000 UCR files. Class 1 is normal, classes 2-5 abnormal.

    The beats are pre-segmented (140 samples, no padding); the R peak is the
    largest magnitude of the band-passed beat.
    """
    label_map = ecg5000_label_map()
    out = []
    for path, split in ((train_path, "train"), (test_path, "test")):
        beats = _read_ucr(path, label_map, split, sample_rate)
        if not beats:
            raise IngestionError("no beats found", path=path)
        prov = {"source": "ECG5000", "file": Path(path).name, "split": split,
                "normal_class": "1", "n_beats": len(beats)}
        out.append(BeatDataset(beats, ECG5000_LENGTH, sample_rate, prov, label_map))
    return tuple(out)


def ecg5000_files(directory):
    """Paths ``(train, test)`` for a 4500/500 split from an ECG5000 directory.

    The archive's own TRAIN file has 500 beats and TEST has 4500; the larger
    file is used for training here.
    """
    d = Path(directory)
    for ext in (".txt", ".tsv", ".csv", ".ts"):
        train, test = d / f"ECG5000_TEST{ext}", d / f"ECG5000_TRAIN{ext}"
        if train.exists() and test.exists():
            return train, test
    raise IngestionError(f"no ECG5000_TRAIN/ECG5000_TEST files in {d}")


# ---------------------------------------------------------------- coefficients

def save_coefficients(path, records, cfg=None, source="fit"):
    """JSON lines: a header object, then one object per beat with ``params``
    (or ``null`` when the fit failed)."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": COEFFS_FORMAT, "source": source, **provenance_header(cfg)},
                            sort_keys=True) + "\n")
        for rec in records:
            rec = dict(rec)
            if isinstance(rec.get("params"), FMMBeatParams):
                rec["params"] = rec["params"].to_dict()
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_coefficients(path):
    """Returns ``(header, records)``; ``params`` become FMMBeatParams (or None)."""
    path = Path(path)
    records = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(str(exc), path=path) from None
    if not lines:
        raise IngestionError("empty coefficients file", path=path)
    try:
        header = json.loads(lines[0])
    except ValueError:
        raise IngestionError("bad header line", line=1, path=path) from None
    if header.get("layout_version") != LAYOUT_VERSION:
        raise StructuralError(f"{path}: layout version {header.get('layout_version')} != {LAYOUT_VERSION}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError:
            raise IngestionError("bad JSON", line=lineno, path=path) from None
        if rec.get("params") is not None:
            rec["params"] = FMMBeatParams.from_dict(rec["params"])
        records.append(rec)
    return header, records


# ------------------------------------------------------------------ synthetic

ANOMALY_PRESETS = ("missing-P", "wide-QRS", "st-shift")
WAVE_JITTER_KEYS = ("A", "alpha", "beta", "omega")
DEFAULT_JITTER = {
    "A": 0.2,
    "alpha": (0.2, 0.03, 0.03, 0.03, 0.25),
    "beta": 0.2,
    "omega": 0.15,
    "M": 0.05,
}


def _per_wave(value, key):
    v = np.broadcast_to(np.asarray(value, dtype=float), (N_WAVES,)) if np.ndim(value) == 0 \
        else np.asarray(value, dtype=float)
    if v.shape != (N_WAVES,):
        raise ValidationError(f"jitter {key!r} needs a scalar or {N_WAVES} values")
    return v


def base_beat():
    """The packaged textbook beat used as the default synthetic template."""
    text = resources.files("fmmhead").joinpath("data/base_beat.json").read_text()
    return FMMBeatParams.from_dict(json.loads(text))


@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic beats: jittered copies of ``base`` plus Gaussian noise.

    Jitter is uniform: ``A`` and ``omega`` are scaled by ``1 + U(-j, j)``,
    ``alpha``, ``beta`` and ``M`` are shifted by ``U(-j, j)``. Wave jitters
    are a scalar or five per-wave values (P, Q, R, S, T). The default lets
    P and T move more than the QRS complex, as they do between real beats.
    """

    n_beats: int = 500
    base: FMMBeatParams | None = None
    jitter: dict = field(default_factory=lambda: dict(DEFAULT_JITTER))
    noise_sigma: float = 0.0
    anomaly: str | None = None
    anomaly_fraction: float = 0.0
    n_samples: int = 200
    l_pad: int | None = None
    length_jitter: int = 0
    st_offset: float = 0.15
    sample_rate: int = 250
    seed: int = 0

    def resolved_base(self):
        return self.base if self.base is not None else base_beat()

    def validate(self):
        if self.n_beats < 0:
            raise ValidationError("n_beats must be >= 0")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValidationError("anomaly_fraction must lie in [0, 1]")
        if self.anomaly_fraction > 0 and self.anomaly not in ANOMALY_PRESETS:
            raise ValidationError(f"unknown anomaly preset {self.anomaly!r}; choose from {ANOMALY_PRESETS}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        unknown = set(self.jitter) - {*WAVE_JITTER_KEYS, "M"}
        if unknown:
            raise ValidationError(f"unknown jitter keys {sorted(unknown)}")
        jit = {k: _per_wave(self.jitter.get(k, 0.0), k) for k in WAVE_JITTER_KEYS}
        if any(np.any(v < 0) for v in jit.values()) or self.jitter.get("M", 0.0) < 0:
            raise ValidationError("jitter ranges must be >= 0")
        if np.any(jit["A"] >= 1.0):
            raise ValidationError("relative A jitter must be < 1 to keep amplitudes non-negative")
        base = self.resolved_base()
        omegas = np.array([w.omega for w in base.waves])
        if np.any(jit["omega"] >= 1.0) or np.any(omegas * (1.0 + jit["omega"]) > 1.0):
            raise ValidationError("omega jitter would leave (0, 1]")
        alphas = np.array([w.alpha for w in base.waves])
        gaps = wrap_angle(np.roll(alphas, -1) - alphas)
        if np.any(jit["alpha"] + np.roll(jit["alpha"], -1) >= gaps):
            raise ValidationError("alpha jitter could reorder neighbouring waves")
        n_max = self.n_samples + self.length_jitter
        if self.n_samples - self.length_jitter < 32 or self.length_jitter < 0:
            raise ValidationError("beats need at least 32 samples")
        if self.l_pad is not None and self.l_pad < n_max:
            raise ValidationError(f"l_pad {self.l_pad} is shorter than the longest beat {n_max}")

    def to_dict(self):
        d = asdict(self)
        d["jitter"] = {k: list(v) if np.ndim(v) else v for k, v in self.jitter.items()}
        d["base"] = self.resolved_base().to_dict()
        return d


def _jitter(p, jitter, rng):
    jit = {k: _per_wave(jitter.get(k, 0.0), k) for k in WAVE_JITTER_KEYS}
    waves = []
    for j, w in enumerate(p.waves):
        waves.append(FMMWave(
            w.A * (1.0 + rng.uniform(-1, 1) * jit["A"][j]),
            w.alpha + rng.uniform(-1, 1) * jit["alpha"][j],
            w.beta + rng.uniform(-1, 1) * jit["beta"][j],
            w.omega * (1.0 + rng.uniform(-1, 1) * jit["omega"][j]),
        ))
    return FMMBeatParams(p.M + rng.uniform(-1, 1) * jitter.get("M", 0.0), tuple(waves))


def apply_anomaly(p, preset):
    """Ground-truth parameters of the anomalous version of ``p``.

    ``st-shift`` leaves the parameters unchanged; its offset is added to the
    signal by :func:`generate_synthetic`.
    """
    if preset == "missing-P":
        return p.replace_wave("P", A=0.0)
    if preset == "wide-QRS":
        for name in ("Q", "R", "S"):
            p = p.replace_wave(name, omega=min(1.0, 2.0 * p.wave(name).omega))
        return p
    if preset == "st-shift":
        return p
    raise ValidationError(f"unknown anomaly preset {preset!r}")


def st_segment_mask(p, t):
    """Phases strictly between the S and T peaks."""
    a_s, a_t = p.wave("S").alpha, p.wave("T").alpha
    return wrap_angle(t - a_s) < wrap_angle(a_t - a_s)


def generate_synthetic(spec):
    """Returns ``(BeatDataset, ground_truth)`` with one FMMBeatParams per beat."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base = spec.resolved_base()
    n_anom = int(round(spec.anomaly_fraction * spec.n_beats))
    anomalous = np.zeros(spec.n_beats, dtype=bool)
    anomalous[rng.permutation(spec.n_beats)[:n_anom]] = True
    l_pad = spec.l_pad or spec.n_samples + spec.length_jitter

    beats, truth = [], []
    for i in range(spec.n_beats):
        p = _jitter(base, spec.jitter, rng)
        n = spec.n_samples
        if spec.length_jitter:
            n += int(rng.integers(-spec.length_jitter, spec.length_jitter + 1))
        t = phase_grid(n)
        label = NORMAL
        if anomalous[i]:
            p = apply_anomaly(p, spec.anomaly)
            label = spec.anomaly
        x = eval_beat(p, t)
        if anomalous[i] and spec.anomaly == "st-shift":
            x = x + spec.st_offset * st_segment_mask(p, t)
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, size=n)
        r = int(round(p.wave("R").alpha * n / TWO_PI)) % n
        beats.append(Heartbeat(pad_beat(x, l_pad), n, r, label, spec.sample_rate, f"syn:{i}"))
        truth.append(p)
    label_map = {NORMAL: NORMAL}
    if spec.anomaly:
        label_map[spec.anomaly] = spec.anomaly
    prov = {"source": "synthetic", "normal_class": NORMAL, "split": "all", "seed": spec.seed,
            "anomaly": spec.anomaly, "spec_hash": config_hash(spec.to_dict())}
    return BeatDataset(beats, l_pad, spec.sample_rate, prov, label_map), truth


def synthetic_record(params, n_beats, beat_len, sample_rate=500, noise_sigma=0.0, seed=0):
    """Concatenate identical beats into a continuous recording.

    Returns ``(samples, r_indices)`` where ``r_indices`` are the generated R
    peak positions.
    """
    t = phase_grid(beat_len)
    one = eval_beat(params, t)
    x = np.tile(one, n_beats)
    if noise_sigma > 0:
        x = x + np.random.default_rng(seed).normal(0.0, noise_sigma, size=x.size)
    r = int(round(params.wave("R").alpha * beat_len / TWO_PI))
    return x, [k * beat_len + r for k in range(n_beats)]


def truth_matrix(truth):
    return np.stack([encode(p) for p in truth]) if truth else np.zeros((0, 1 + 6 * N_WAVES))


def records_to_matrix(records):
    """Stack ``params`` of coefficient records; returns ``(matrix, kept_indices)``."""
    kept = [i for i, r in enumerate(records) if r.get("params") is not None]
    return truth_matrix([records[i]["params"] for i in kept]), kept


def write_csv_text(rows, header, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()

