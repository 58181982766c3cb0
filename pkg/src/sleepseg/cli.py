"""Command-line front end: prepare, train, cv, eval, predict, synth, inspect.

Diagnostics go to stderr, data to files or stdout; exit code 0 means no
errors. Every run directory receives a manifest.json recording the command,
inputs, seed, and artifact checksums so runs can be re-executed exactly.
The seed is resolved as --seed flag, then the UTIME_SEED environment
variable, then the [train] section of the config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .config_io import load_config, save_config
from .metrics import STAGE_NAMES, metrics_document, write_confusion_csv
from .model import UTimeConfig, build_model, receptive_field, receptive_field_full
from .signal_io import (
    EPOCH_SECONDS,
    PreprocessOptions,
    PsgRecord,
    load_record_cache,
    preprocess_record,
    read_edf,
    read_manifest,
    resample,
    robust_scale,
    save_record_cache,
    write_manifest,
    zero_extreme_segments,
)
from .synthetic import generate_dataset
from .training import TrainConfig, evaluate, make_cv_plan, train


def _err(message: str) -> None:
    print(message, file=sys.stderr)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _resolve_seed(args, train_cfg: TrainConfig | None = None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("UTIME_SEED")
    if env is not None:
        return int(env)
    return train_cfg.seed if train_cfg is not None else 0


def _write_run_manifest(out_dir: Path, command: str, args, seed: int, artifacts) -> None:
    doc = {
        "command": command,
        "argv": [a for a in sys.argv[1:]],
        "config": str(getattr(args, "config", "") or ""),
        "input_manifest": str(getattr(args, "manifest", "") or ""),
        "seed": seed,
        "out_dir": str(out_dir),
        "started": getattr(args, "_started", None),
        "finished": time.time(),
        "artifact_checksums": {name: _sha256(out_dir / name)
                               for name in artifacts if (out_dir / name).exists()},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dump_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_records(rows):
    return [load_record_cache(r["record_path"], subject_id=r["subject_id"]) for r in rows]


def _stage_names(k: int):
    return STAGE_NAMES if k == len(STAGE_NAMES) else tuple(str(i) for i in range(k))


# ---------------------------------------------------------------------------
# prepare / synth


def cmd_prepare(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    opts = PreprocessOptions(
        target_rate=args.rate,
        channels=args.channels.split(",") if args.channels else None,
        trim_wake=args.trim_wake_margins)

    rows, reports, failures = [], [], []
    for row in read_manifest(args.manifest):
        try:
            record, report = preprocess_record(row["record_path"], row["label_path"],
                                               row["subject_id"], opts)
            cache = out_dir / f"{record.record_id}.cache"
            save_record_cache(cache, record)
            rows.append({"record_path": cache.name,
                         "label_path": cache.name + ".labels.csv",
                         "subject_id": row["subject_id"]})
            reports.append(report)
        except Exception as exc:  # recorded; fatal only under --strict
            failures.append({"record": row["record_path"], "error": str(exc)})
            _err(f"prepare: {row['record_path']}: {exc}")

    write_manifest(out_dir / "manifest.csv", rows)
    _dump_json(out_dir / "prepare_report.json",
               {"records": reports, "failures": failures})
    _err(f"prepare: {len(rows)} records cached, {len(failures)} failed")
    return 1 if (failures and args.strict) else 0


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    manifest = generate_dataset(seed=seed, n_subjects=args.subjects,
                                segments_per_record=args.segments,
                                out_dir=args.out, sample_rate=args.rate,
                                channels=args.channels)
    print(str(manifest))
    return 0


# ---------------------------------------------------------------------------
# train / cv


def _split_validation(rows, fraction: float, seed: int):
    """Move whole subjects into validation until ceil(fraction * records)."""
    if fraction <= 0:
        return rows, []
    subjects = []
    per_subject = {}
    for row in rows:
        sid = row["subject_id"]
        if sid not in per_subject:
            per_subject[sid] = []
            subjects.append(sid)
        per_subject[sid].append(row)
    target = max(1, math.ceil(fraction * len(rows)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    val_subjects, got = [], 0
    for sid in order:
        if got >= target or len(val_subjects) >= len(subjects) - 1:
            break
        val_subjects.append(sid)
        got += len(per_subject[sid])
    val = [r for s in val_subjects for r in per_subject[s]]
    tr = [r for s in order if s not in val_subjects for r in per_subject[s]]
    return tr, val


def _train_and_report(model_cfg, train_cfg, train_rows, val_rows, eval_rows, out_dir,
                      quiet=False):
    """Shared train/evaluate/write-layout path for `train` and each cv split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir / "config.txt", model_cfg, train_cfg)

    model = build_model(model_cfg, seed=train_cfg.seed)
    train_records = _load_records(train_rows)
    val_records = _load_records(val_rows)
    log = None if quiet else _err
    run = train(model, train_records, val_records, train_cfg, out_dir=out_dir, log=log)
    if run.best_path is None:
        save_checkpoint(out_dir / "best.ckpt", model.state_entries())

    eval_records = _load_records(eval_rows) if eval_rows else (val_records or train_records)
    total, per_record = evaluate(model, eval_records, window=train_cfg.window)
    names = _stage_names(model_cfg.classes)
    _dump_json(out_dir / "metrics.json",
               metrics_document(total, list(per_record.values()), names))
    write_confusion_csv(out_dir / "confusion_global.csv", total, names)
    for rec_id, cm in per_record.items():
        write_confusion_csv(out_dir / f"confusion_{rec_id}.csv", cm, names)
    return run, total, per_record


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    train_cfg.seed = _resolve_seed(args, train_cfg)
    rows = read_manifest(args.manifest)
    if not rows:
        _err("train: empty manifest")
        return 1
    train_rows, val_rows = _split_validation(rows, args.val_fraction, train_cfg.seed)
    run, total, _ = _train_and_report(model_cfg, train_cfg, train_rows, val_rows,
                                      None, args.out)
    _write_run_manifest(Path(args.out), "train", args, train_cfg.seed,
                        ["metrics.json", "best.ckpt", "latest.ckpt", "history.csv",
                         "config.txt"])
    _err(f"train: stopped by {run.stopped_reason} at epoch {len(run.history)}, "
         f"best epoch {run.best_epoch}")
    return 0


def _run_split(payload):
    """One cv split; module-level so worker processes can import it."""
    model_cfg, train_cfg, fold, split_dir = payload
    run, total, per_record = _train_and_report(
        model_cfg, train_cfg, fold["train"], fold["val"], fold["test"], split_dir,
        quiet=True)
    return total.counts, {k: cm.counts for k, cm in per_record.items()}


def cmd_cv(args) -> int:
    from .metrics import ConfusionMatrix

    model_cfg, train_cfg = load_config(args.config)
    base_seed = _resolve_seed(args, train_cfg)
    rows = read_manifest(args.manifest)
    plan = make_cv_plan(rows, args.splits, seed=base_seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    payloads = []
    for i, fold in enumerate(plan.folds):
        split_cfg = TrainConfig(**{**train_cfg.__dict__, "seed": base_seed + i})
        payloads.append((model_cfg, split_cfg, fold, out_dir / f"split_{i}"))

    if args.jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(args.jobs) as pool:
            results = pool.map(_run_split, payloads)
    else:
        results = [_run_split(p) for p in payloads]

    names = _stage_names(model_cfg.classes)
    total = ConfusionMatrix.zeros(model_cfg.classes)
    per_record = {}
    for counts, record_counts in results:
        total = total + ConfusionMatrix(counts)
        for rec_id, c in record_counts.items():
            per_record[rec_id] = ConfusionMatrix(c)

    _dump_json(out_dir / "metrics.json",
               metrics_document(total, list(per_record.values()), names))
    write_confusion_csv(out_dir / "confusion_global.csv", total, names)
    _dump_json(out_dir / "cv_plan.json",
               {"n_splits": plan.n_splits, "assignment": plan.assignment})
    _write_run_manifest(out_dir, "cv", args, base_seed,
                        ["metrics.json", "confusion_global.csv", "cv_plan.json"])
    _err(f"cv: {args.splits} splits complete, {total.total} segments scored")
    return 0


# ---------------------------------------------------------------------------
# eval / predict / inspect


def _load_model(args):
    model_cfg, train_cfg = load_config(args.config)
    model = build_model(model_cfg, seed=train_cfg.seed)
    model.load_state(load_checkpoint(args.ckpt))
    return model, model_cfg, train_cfg


def cmd_eval(args) -> int:
    model, model_cfg, train_cfg = _load_model(args)
    rows = read_manifest(args.manifest)
    if not rows:
        _err("eval: empty manifest")
        return 1
    records = _load_records(rows)
    total, per_record = evaluate(model, records, window=train_cfg.window)
    names = _stage_names(model_cfg.classes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(out_dir / "metrics.json",
               metrics_document(total, list(per_record.values()), names))
    write_confusion_csv(out_dir / "confusion_global.csv", total, names)
    for rec_id, cm in per_record.items():
        write_confusion_csv(out_dir / f"confusion_{rec_id}.csv", cm, names)
    _write_run_manifest(out_dir, "eval", args, _resolve_seed(args, train_cfg),
                        ["metrics.json", "confusion_global.csv"])
    from .metrics import f1_from_confusion

    print(f"mean_f1: {f1_from_confusion(total).mean:.4f}")
    return 0


def _load_prediction_record(path, model_cfg, channels) -> PsgRecord:
    """Accept a preprocessed cache or a raw EDF (preprocessed label-free)."""
    blob_head = Path(path).read_bytes()[:4]
    if blob_head == MAGIC:
        return load_record_cache(path)
    rate = model_cfg.segment_samples // EPOCH_SECONDS
    signals, rates, _ = read_edf(path, channels=channels)
    resampled = [resample(sig, r, rate) for sig, r in zip(signals, rates)]
    t = min(len(s) for s in resampled)
    signal = np.stack([s[:t] for s in resampled], axis=1)
    n_seg = t // (rate * EPOCH_SECONDS)
    signal = signal[:n_seg * rate * EPOCH_SECONDS]
    scaled, _ = robust_scale(signal)
    record = PsgRecord("", Path(path).stem, scaled, rate, [f"ch{i}" for i in
                       range(signal.shape[1])],
                       np.zeros(n_seg, np.int8), np.ones(n_seg, bool))
    return zero_extreme_segments(record)


def cmd_predict(args) -> int:
    model, model_cfg, _ = _load_model(args)
    record = _load_prediction_record(
        args.record, model_cfg, args.channels.split(",") if args.channels else None)
    names = _stage_names(model_cfg.classes)
    rate = record.sample_rate

    if args.freq is not None:
        width = int(round(rate / args.freq))
        if width < 1:
            _err(f"predict: frequency {args.freq} Hz exceeds the sample rate")
            return 1
    else:
        width = model_cfg.segment_samples

    t_min = model_cfg.min_input_length
    t = (len(record.signal) // width) * width
    if t < len(record.signal):
        _err(f"predict: truncating {len(record.signal) - t} trailing samples "
             f"to align with width {width}")
    if t < t_min:
        _err(f"predict: record has {len(record.signal)} samples, "
             f"below the minimum input length {t_min}")
        return 1
    from .tensor import Tensor

    x = Tensor(record.signal[np.newaxis, :t, :])

    out = sys.stdout if args.out is None else open(args.out, "w", encoding="utf-8")
    try:
        if args.dense:
            probs = model.forward_dense(x).data[0]
            if args.binary:
                if args.out is None:
                    _err("predict: --binary needs --out")
                    return 1
                out.close()
                save_checkpoint(args.out, [("dense_scores", probs)])
                return 0
            out.write(",".join(names) + "\n")
            for row in probs:
                out.write(",".join(f"{v:.6f}" for v in row) + "\n")
        else:
            probs = model.forward(x, segment_samples=width).data[0]
            pred = probs.argmax(axis=-1)
            out.write("segment_index\tonset_s\tstage\tconfidence\n")
            for idx, (k, p) in enumerate(zip(pred, probs)):
                onset = idx * width / rate
                out.write(f"{idx}\t{onset:g}\t{names[k]}\t{p[k]:.4f}\n")
    finally:
        if args.out is not None and not out.closed:
            out.close()
    return 0


def cmd_inspect(args) -> int:
    if args.config:
        model_cfg, _ = load_config(args.config)
    else:
        model_cfg = UTimeConfig()
    model = build_model(model_cfg, seed=0)
    rows = [(name, "x".join(str(d) for d in t.shape), t.size)
            for name, t in model.named_parameters()]
    width = max(len(r[0]) for r in rows)
    for name, shape, size in rows:
        print(f"{name:<{width}}  {shape:>12}  {size}")
    print(f"trainable_parameters: {model.count_parameters()}")
    print(f"min_input_length: {model_cfg.min_input_length}")
    print(f"receptive_field: {receptive_field(model_cfg)}")
    print(f"receptive_field_full_stack: {receptive_field_full(model_cfg)}")

    if args.ckpt:
        arrays = load_checkpoint(args.ckpt)
        values = sum(int(np.prod(a.shape)) for a in arrays.values())
        print(f"checkpoint_entries: {len(arrays)}")
        print(f"checkpoint_values: {values}")
        model.load_state(arrays)
        print("checkpoint_compatible: true")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sleepseg",
        description="Train and run the feed-forward sleep segmentation engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="preprocess a dataset manifest into caches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=100)
    p.add_argument("--channels", default=None, help="comma-separated label substrings")
    p.add_argument("--trim-wake-margins", action="store_true")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic EDF dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--segments", type=int, required=True)
    p.add_argument("--rate", type=int, default=100)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a prepared manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="per-subject cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a prepared manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="hypnogram or dense scores for one record")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--record", required=True, help="EDF file or prepared cache")
    p.add_argument("--channels", default=None)
    p.add_argument("--freq", type=float, default=None,
                   help="segmentation frequency in Hz (default 1/30)")
    p.add_argument("--dense", action="store_true", help="per-sample scores")
    p.add_argument("--binary", action="store_true",
                   help="write dense scores as a binary container")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="parameter count and layer table")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", default=None)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._started = time.time()
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:
        _err(f"sleepseg {args.command}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
