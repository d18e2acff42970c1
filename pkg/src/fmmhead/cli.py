"""Command-line entry point: ``fmmhead <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 structural or I/O error.
Errors are written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import FMMDenseAE, build_model, load_checkpoint, save_checkpoint
from .dataio import (
    BeatDataset, SyntheticSpec, config_hash, generate_synthetic, load_beats, load_coefficients,
    provenance_header, save_beats, save_coefficients, truth_matrix, write_csv_text,
)
from .errors import FMMError, StructuralError, ValidationError
from .fit import FitConfig, fit_many
from .head import reconstruct
from .metrics import coefficient_correlations, roc_auroc
from .model import WAVE_NAMES, decode, encode, eval_wave, phase_grid
from .preprocessing import UNKNOWN, preprocess_record, read_record
from .training import TrainConfig, anomaly_scores, train_anomaly, warmup

logger = logging.getLogger("fmmhead")

CONFIG_SECTIONS = ("fit", "train", "synth", "model", "preprocess")


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StructuralError(f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}; allowed: {list(CONFIG_SECTIONS)}")
    return cfg


def _dataclass_from(cls, section, **overrides):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    kwargs = dict(section)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    if cls is FitConfig and "omega_grid" in kwargs:
        kwargs["omega_grid"] = tuple(kwargs["omega_grid"])
    return cls(**kwargs)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _csv_comment(cfg):
    return f"fmmhead {__version__} config_hash={config_hash(cfg)}"


def _fit_cfg_dict(cfg):
    d = asdict(cfg)
    d["omega_grid"] = list(d["omega_grid"])
    return d


# ------------------------------------------------------------------ commands

def cmd_synth(args, cfg):
    section = dict(cfg.get("synth", {}))
    overrides = {"n_beats": args.n_beats, "anomaly": args.preset, "anomaly_fraction": args.anomaly_fraction,
                 "noise_sigma": args.noise, "n_samples": args.length, "seed": args.seed}
    spec = _dataclass_from(SyntheticSpec, section, **overrides)
    ds, truth = generate_synthetic(spec)
    eff = {"synth": spec.to_dict()}
    save_beats(args.out, ds, eff)
    if args.truth:
        save_coefficients(args.truth, [{"beat_id": b.beat_id, "params": p} for b, p in zip(ds, truth)],
                          eff, source="generator")
    logger.info("wrote %d synthetic beats to %s", len(ds), args.out)


def cmd_preprocess(args, cfg):
    section = cfg.get("preprocess", {})
    cutoff = args.cutoff if args.cutoff is not None else section.get("cutoff_hz", 0.5)
    l_pad = args.l_pad if args.l_pad is not None else section.get("l_pad")
    lead = args.lead or section.get("lead")
    beats = []
    rate = None
    for path in args.records:
        rec = read_record(path, lead=lead)
        if rate is not None and rec.sample_rate != rate:
            raise StructuralError("all records must share one sample rate")
        rate = rec.sample_rate
        beats.extend(preprocess_record(rec, l_pad, cutoff, label=args.label))
    if not beats:
        raise ValidationError("no beats could be segmented from the given records")
    eff = {"preprocess": {"cutoff_hz": cutoff, "l_pad": beats[0].l_pad, "lead": lead}}
    prov = {"source": "records", "files": [Path(p).name for p in args.records], "normal_class": "normal",
            "split": "all"}
    ds = BeatDataset(beats, beats[0].l_pad, rate, prov, {args.label: args.label})
    save_beats(args.out, ds, eff)
    logger.info("wrote %d beats to %s", len(ds), args.out)


def cmd_fit(args, cfg):
    fit_cfg = _dataclass_from(FitConfig, cfg.get("fit", {}))
    ds = load_beats(args.beats)
    results = fit_many(ds.beats, fit_cfg, threads=args.threads)
    eff = {"fit": _fit_cfg_dict(fit_cfg)}
    records, rows = [], []
    for b, (res, ms) in zip(ds, results):
        if res is None:
            records.append({"beat_id": b.beat_id, "params": None, "error": "fit failed"})
            rows.append([b.beat_id, "nan", "nan", f"{ms:.3f}"])
            continue
        records.append({"beat_id": b.beat_id, "params": res.params, "r2": res.r2, "rmse": res.residual_rmse})
        rows.append([b.beat_id, repr(res.r2), repr(res.residual_rmse), f"{ms:.3f}"])
    save_coefficients(args.out, records, eff, source="fit")
    if args.summary:
        Path(args.summary).write_text(write_csv_text(rows, ["beat_id", "r2", "rmse", "wall_time_ms"],
                                                     _csv_comment(eff)))
    failed = sum(r["params"] is None for r in records)
    logger.info("fitted %d beats (%d failed)", len(records) - failed, failed)


def _train_cfg(args, cfg):
    return _dataclass_from(TrainConfig, cfg.get("train", {}), learning_rate=args.lr,
                           warmup_epochs=getattr(args, "epochs", None) if args.command == "warmup" else None,
                           train_epochs=getattr(args, "epochs", None) if args.command == "train" else None,
                           seed=args.seed)


def _model_for(args, cfg, l_pad, default_kind):
    if args.init:
        model, header = load_checkpoint(args.init)
        if model.l_pad != l_pad:
            raise StructuralError(f"checkpoint expects l_pad {model.l_pad}, beats have {l_pad}")
        return model
    section = dict(cfg.get("model", {}))
    kind = args.kind or section.pop("kind", default_kind)
    section.pop("kind", None)
    if args.seed is not None:
        section["seed"] = args.seed
    if "hidden" in section:
        section["hidden"] = tuple(section["hidden"])
    return build_model(kind, l_pad, **section)


def _match_targets(ds, records):
    by_id = {r["beat_id"]: r for r in records}
    beats, targets = [], []
    for b in ds:
        r = by_id.get(b.beat_id)
        if r is not None and r.get("params") is not None:
            beats.append(b)
            targets.append(encode(r["params"]))
    return beats, np.array(targets)


def _report_json(path, report, model, train_cfg, ckpt):
    report.checkpoint = str(ckpt)
    obj = {"report": report.to_dict(), "train_config": asdict(train_cfg), "model": model.config(),
           **provenance_header({"train": asdict(train_cfg), "model": model.config()})}
    _write_json(path, obj)


def cmd_warmup(args, cfg):
    train_cfg = _train_cfg(args, cfg)
    ds = load_beats(args.beats)
    _, records = load_coefficients(args.coeffs)
    beats, targets = _match_targets(ds, records)
    if not beats:
        raise ValidationError("no beat has an oracle target; nothing to warm up on")
    model = _model_for(args, cfg, ds.l_pad, "fmm_dense_ae")
    report = warmup(model, beats, targets, train_cfg)
    save_checkpoint(args.out, model, {"phase": "warmup", "config_hash": config_hash(asdict(train_cfg))})
    if args.report:
        _report_json(args.report, report, model, train_cfg, args.out)


def cmd_train(args, cfg):
    train_cfg = _train_cfg(args, cfg)
    ds = load_beats(args.beats)
    beats = [b for b in ds if b.is_normal or (args.allow_unlabelled and b.label == UNKNOWN)]
    if args.strict:
        beats = list(ds)
    model = _model_for(args, cfg, ds.l_pad, "fmm_dense_ae")
    report = train_anomaly(model, beats, train_cfg)
    save_checkpoint(args.out, model, {"phase": "anomaly", "config_hash": config_hash(asdict(train_cfg))})
    if args.report:
        _report_json(args.report, report, model, train_cfg, args.out)


def cmd_score(args, cfg):
    model, header = load_checkpoint(args.model)
    ds = load_beats(args.beats)
    if ds.l_pad != model.l_pad:
        raise StructuralError(f"model expects l_pad {model.l_pad}, beats have {ds.l_pad}")
    scores = anomaly_scores(model, ds.beats, batch_size=args.batch_size)
    rows = [[b.beat_id, b.label, repr(float(s))] for b, s in zip(ds, scores)]
    eff = {"model": header["architecture"]}
    Path(args.out).write_text(write_csv_text(rows, ["beat_id", "label", "score"], _csv_comment(eff)))


def _read_scores(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines or lines[0].split(",")[:3] != ["beat_id", "label", "score"]:
        raise StructuralError(f"{path}: expected a scores CSV with beat_id,label,score")
    ids, labels, scores = [], [], []
    for row in lines[1:]:
        parts = row.rsplit(",", 2)
        ids.append(parts[0])
        labels.append(parts[1])
        scores.append(float(parts[2]))
    return ids, labels, np.array(scores)


def cmd_eval(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    eff = {"scores": Path(args.scores).name if args.scores else None}
    if args.scores:
        _, labels, scores = _read_scores(args.scores)
        y = np.array([lab not in ("normal", UNKNOWN) for lab in labels])
        known = np.array([lab != UNKNOWN for lab in labels])
        roc = roc_auroc(scores[known], y[known])
        rows = [[repr(float(t)), repr(float(f)), repr(float(p))] for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)]
        (out / "roc.csv").write_text(write_csv_text(rows, ["threshold", "fpr", "tpr"], _csv_comment(eff)))
        summary.update(auroc=roc.auroc, n_normal=int((~y[known]).sum()), n_abnormal=int(y[known].sum()))
    if args.predicted and args.oracle:
        _, pred = load_coefficients(args.predicted)
        _, orac = load_coefficients(args.oracle)
        by_id = {r["beat_id"]: r for r in orac}
        pairs = [(r["params"], by_id[r["beat_id"]]["params"]) for r in pred
                 if r.get("params") is not None and by_id.get(r["beat_id"], {}).get("params") is not None]
        if len(pairs) < 3:
            raise ValidationError("need at least 3 beats with both predicted and oracle coefficients")
        p = truth_matrix([a for a, _ in pairs])
        o = truth_matrix([b for _, b in pairs])
        table = coefficient_correlations(p, o, strict=False)
        rows = [[w, par, kind, repr(float(v))] for w, par, kind, v in table]
        (out / "correlations.csv").write_text(
            write_csv_text(rows, ["wave", "parameter", "kind", "value"], _csv_comment(eff)))
        summary["n_correlated"] = len(pairs)
    if not summary:
        raise ValidationError("eval needs --scores and/or --predicted with --oracle")
    summary.update(provenance_header(eff))
    _write_json(out / "summary.json", summary)


def cmd_extract(args, cfg):
    model, header = load_checkpoint(args.model)
    if not isinstance(model, FMMDenseAE):
        raise ValidationError("extract needs a model with an FMM head")
    ds = load_beats(args.beats)
    x, _ = ds.arrays()
    records = []
    for lo in range(0, len(ds), args.batch_size):
        start = time.perf_counter()
        coeffs = model.coefficients(x[lo:lo + args.batch_size])
        ms = 1000.0 * (time.perf_counter() - start) / coeffs.shape[0]
        for b, c in zip(ds.beats[lo:lo + args.batch_size], coeffs):
            records.append({"beat_id": b.beat_id, "params": decode(c), "wall_time_ms": ms})
    save_coefficients(args.out, records, {"model": header["architecture"]}, source="head")


def cmd_plot(args, cfg):
    if args.beats is None and args.scores is None:
        raise ValidationError("plot needs --beats (overlay) and/or --scores (ROC)")
    if args.beats is not None:
        if args.out is None:
            raise ValidationError("overlay output needs --out")
        ds = load_beats(args.beats)
        ids = [b.beat_id for b in ds]
        beat = ds[ids.index(args.beat_id)] if args.beat_id else ds[0]
        if args.model:
            model, _ = load_checkpoint(args.model)
            if not isinstance(model, FMMDenseAE):
                raise ValidationError("overlay decomposition needs an FMM-head model")
            params = decode(model.coefficients(beat.samples[None, :])[0])
        elif args.coeffs:
            _, recs = load_coefficients(args.coeffs)
            match = [r for r in recs if r["beat_id"] == beat.beat_id and r.get("params") is not None]
            if not match:
                raise ValidationError(f"no coefficients for beat {beat.beat_id!r}")
            params = match[0]["params"]
        else:
            raise ValidationError("overlay needs --model or --coeffs")
        n = beat.valid_len
        t = phase_grid(n)
        recon = reconstruct(encode(params), n)[0]
        cols = [t, beat.valid, recon] + [eval_wave(w, t) for w in params.waves]
        rows = [[repr(float(v)) for v in r] for r in zip(*cols)]
        header = ["t", "input", "reconstruction"] + [f"wave_{w}" for w in WAVE_NAMES]
        Path(args.out).write_text(write_csv_text(rows, header, _csv_comment({"beat": beat.beat_id})))
    if args.scores is not None:
        _, labels, scores = _read_scores(args.scores)
        y = np.array([lab != "normal" for lab in labels])
        roc = roc_auroc(scores, y)
        rows = [[repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(roc.thresholds, roc.fpr, roc.tpr)]
        Path(args.roc_out or "roc.csv").write_text(
            write_csv_text(rows, ["threshold", "fpr", "tpr"], _csv_comment({"scores": Path(args.scores).name})))


# -------------------------------------------------------------------- parser

def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default,
                   help="seed for every random choice (overrides config seeds; default 0)")
    p.add_argument("--config", default=default, help="JSON file with fit/train/synth/model/preprocess sections")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker processes for fitting (1 = fully deterministic)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="fmmhead", description="FMM heartbeat modelling and FMM-Head anomaly detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("synth", "generate a synthetic beats file (and its ground truth)")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="write ground-truth coefficients (JSON lines)")
    p.add_argument("--n-beats", type=int)
    p.add_argument("--preset", choices=("missing-P", "wide-QRS", "st-shift"))
    p.add_argument("--anomaly-fraction", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--length", type=int, help="samples per beat")
    p.set_defaults(func=cmd_synth)

    p = add("preprocess", "segment raw CSV recordings into a beats file")
    p.add_argument("records", nargs="+", help="CSV recordings, each with a .json sidecar")
    p.add_argument("--out", required=True)
    p.add_argument("--l-pad", type=int)
    p.add_argument("--cutoff", type=float, help="baseline low-pass cutoff in Hz")
    p.add_argument("--lead", help="column to use when a recording has several leads")
    p.add_argument("--label", default=UNKNOWN)
    p.set_defaults(func=cmd_preprocess)

    p = add("fit", "fit FMM waves to every beat (slow oracle)")
    p.add_argument("--beats", required=True)
    p.add_argument("--out", required=True, help="coefficients JSON lines")
    p.add_argument("--summary", help="CSV of beat_id, r2, rmse, wall_time_ms")
    p.set_defaults(func=cmd_fit)

    for name, help_text, fn in (("warmup", "warm-up regression onto oracle coefficients", cmd_warmup),
                                ("train", "train the autoencoder on normal beats", cmd_train)):
        p = add(name, help_text)
        p.add_argument("--beats", required=True)
        if name == "warmup":
            p.add_argument("--coeffs", required=True, help="oracle coefficients JSON lines")
        else:
            p.add_argument("--allow-unlabelled", action="store_true",
                           help="also train on beats labelled unknown")
            p.add_argument("--strict", action="store_true",
                           help="train on every beat and fail if any is labelled abnormal")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--init", help="start from this checkpoint")
        p.add_argument("--kind", choices=("dense_ae", "fmm_dense_ae"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--report", help="TrainReport JSON")
        p.set_defaults(func=fn)

    p = add("score", "anomaly score (reconstruction MSE) per beat")
    p.add_argument("--model", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_score)

    p = add("eval", "ROC/AUROC and coefficient correlations")
    p.add_argument("--scores")
    p.add_argument("--predicted", help="predicted coefficients JSON lines")
    p.add_argument("--oracle", help="oracle coefficients JSON lines")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = add("extract", "predict FMM coefficients with the trained head")
    p.add_argument("--model", required=True)
    p.add_argument("--beats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_extract)

    p = add("plot", "emit reconstruction-overlay and ROC data as CSV")
    p.add_argument("--beats")
    p.add_argument("--beat-id")
    p.add_argument("--model")
    p.add_argument("--coeffs")
    p.add_argument("--out", help="overlay CSV")
    p.add_argument("--scores")
    p.add_argument("--roc-out")
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args.config)
        args.func(args, cfg)
    except FMMError as exc:
        return _fail(exc, exc.exit_code)
    except (OSError, KeyError) as exc:
        return _fail(exc, 2)
    except ValueError as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
