"""Adam optimization loop, early stopping, checkpointing, and per-subject CV.

One epoch is ceil(L / T / B) gradient steps over balanced batches, followed
by an inference-mode evaluation of the validation records. The stopping and
model-selection metric is the validation mean per-class F1 (a validation-loss
variant exists behind `stop_metric`); training halts after `patience`
epochs without improvement, or after `max_epochs` when no validation set is
available (fixed-epoch mode for tiny datasets).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, confusion, cross_entropy, dice_loss, f1_from_confusion
from .model import UTimeModel
from .sampling import BalancedSampler, sequential_windows, steps_per_epoch, total_scored_segments
from .tensor import Tensor

IMPROVEMENT_EPS = 1e-6


class OptimizationError(RuntimeError):
    """A gradient went non-finite; training cannot continue."""


@dataclass
class TrainConfig:
    lr: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 12
    window: int = 35
    patience: int = 150
    max_epochs: int | None = None
    loss: str = "dice"
    stop_metric: str = "f1"
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.loss not in ("dice", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.stop_metric not in ("f1", "loss"):
            raise ValueError(f"unknown stopping metric {self.stop_metric!r}")


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]
        self.t = 0

    def step(self):
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g.sum()):
                raise OptimizationError(
                    f"non-finite gradient in {name} (|g| = {np.linalg.norm(g)})")
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g
            mhat = self.m[i] / b1c
            vhat = self.v[i] / b2c
            p.data -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


class EarlyStopper:
    """Tracks the best metric; strict improvement must beat it by > 1e-6."""

    def __init__(self, patience: int, maximize: bool = True):
        self.patience = patience
        self.maximize = maximize
        self.best = -math.inf if maximize else math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch result; returns True when training should stop."""
        improved = (value > self.best + IMPROVEMENT_EPS if self.maximize
                    else value < self.best - IMPROVEMENT_EPS)
        if improved:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainRun:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = 0.0
    best_path: str | None = None
    stopped_reason: str = "max_epochs"


def evaluate(model: UTimeModel, records, window: int = 35, eval_batch: int = 8):
    """Inference-mode pass over whole records via sequential windows.

    Returns (global confusion, {record_id: confusion}); masked epochs and
    window padding never enter the counts.
    """
    k = model.config.classes
    per_record = {}
    for rec in records:
        true_all, pred_all = [], []
        stack, meta = [], []

        def flush():
            if not stack:
                return
            x = Tensor(np.stack(stack))
            probs = model.forward(x, mode="infer").data
            pred = probs.argmax(axis=-1)
            for b, (labels, scored) in enumerate(meta):
                true_all.append(labels[scored])
                pred_all.append(pred[b][scored])
            stack.clear()
            meta.clear()

        for x, labels, scored in sequential_windows(rec, window):
            stack.append(x)
            meta.append((labels, scored))
            if len(stack) == eval_batch:
                flush()
        flush()
        true = np.concatenate(true_all) if true_all else np.empty(0, np.int64)
        pred = np.concatenate(pred_all) if pred_all else np.empty(0, np.int64)
        per_record[rec.record_id] = confusion(true, pred, k)

    total = ConfusionMatrix.zeros(k)
    for cm in per_record.values():
        total = total + cm
    return total, per_record


def validation_f1(model: UTimeModel, records, window: int) -> float:
    total, _ = evaluate(model, records, window)
    return f1_from_confusion(total).mean


def train(model: UTimeModel, train_records, val_records, cfg: TrainConfig,
          out_dir=None, log=None) -> TrainRun:
    """Optimize the model; returns the run summary with the model restored
    to its best-validation state (last state in fixed-epoch mode)."""
    cfg.validate()
    if not train_records:
        raise ValueError("training requires at least one record")
    fixed_mode = not val_records
    if fixed_mode and cfg.max_epochs is None:
        raise ValueError("without validation records, max_epochs must be set")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    sampler = BalancedSampler(train_records, window=cfg.window,
                              batch_size=cfg.batch_size,
                              classes=model.config.classes, seed=cfg.seed)
    steps = steps_per_epoch(total_scored_segments(train_records),
                            cfg.window, cfg.batch_size)
    optimizer = Adam(model.named_parameters(), cfg)
    loss_fn = dice_loss if cfg.loss == "dice" else cross_entropy

    stopper = EarlyStopper(cfg.patience, maximize=cfg.stop_metric == "f1")
    run = TrainRun()
    best_state = None
    history_rows = []

    epoch = 0
    while True:
        epoch += 1
        started = time.time()
        epoch_loss = 0.0
        for _ in range(steps):
            batch = sampler.sample_batch()
            probs = model.forward(batch.x, mode="train")
            loss = loss_fn(batch.y, probs)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.data)
        epoch_loss /= steps

        if fixed_mode:
            metric = float("nan")
            stop = epoch >= cfg.max_epochs
            improved = False
            reason = "max_epochs"
        else:
            metric = (validation_f1(model, val_records, cfg.window)
                      if cfg.stop_metric == "f1" else epoch_loss)
            stop = stopper.update(epoch, metric)
            improved = stopper.best_epoch == epoch
            reason = "patience" if stop else "max_epochs"
            if not stop and cfg.max_epochs is not None and epoch >= cfg.max_epochs:
                stop = True
                reason = "max_epochs"

        seconds = time.time() - started
        history_rows.append((epoch, epoch_loss, metric, seconds))
        run.history.append({"epoch": epoch, "train_loss": epoch_loss,
                            "val_f1": metric, "seconds": seconds})
        if log:
            log(f"epoch {epoch}: loss {epoch_loss:.4f} val {metric:.4f} ({seconds:.1f}s)")

        if improved or (fixed_mode and stop):
            run.best_epoch = epoch
            run.best_metric = metric
            best_state = [(n, a.copy()) for n, a in model.state_entries()]
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ckpt", best_state)
                run.best_path = str(out_dir / "best.ckpt")
        if out_dir is not None:
            save_checkpoint(out_dir / "latest.ckpt", model.state_entries())

        if stop:
            run.stopped_reason = reason
            break

    if best_state is not None:
        model.load_state(dict(best_state))
    if out_dir is not None:
        with open(out_dir / "history.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_f1,seconds\n")
            for row in history_rows:
                fh.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.3f}\n")
    return run


# ---------------------------------------------------------------------------
# cross-validation planning


@dataclass
class CvPlan:
    n_splits: int
    assignment: dict                 # subject_id -> test fold index
    folds: list                      # per fold: {train, val, test} manifest rows


def make_cv_plan(manifest_rows, n_splits: int, seed: int = 0) -> CvPlan:
    """Per-subject splits: every record of a subject shares one test fold;
    whole subjects are moved into validation until it reaches ceil(5%) of
    the training records (at least one)."""
    subjects = []
    per_subject = {}
    for row in manifest_rows:
        sid = row["subject_id"]
        if sid not in per_subject:
            per_subject[sid] = []
            subjects.append(sid)
        per_subject[sid].append(row)

    if len(subjects) < n_splits:
        raise ValueError(f"{len(subjects)} subjects cannot fill {n_splits} splits")

    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    assignment = {sid: i % n_splits for i, sid in enumerate(order)}

    folds = []
    for fold in range(n_splits):
        test_subjects = [s for s in order if assignment[s] == fold]
        pool = [s for s in order if assignment[s] != fold]
        pool_records = sum(len(per_subject[s]) for s in pool)
        target = max(1, math.ceil(0.05 * pool_records))

        fold_rng = np.random.default_rng(np.random.SeedSequence([seed, fold]))
        shuffled = [pool[i] for i in fold_rng.permutation(len(pool))]
        val_subjects, got = [], 0
        for sid in shuffled:
            if got >= target:
                break
            val_subjects.append(sid)
            got += len(per_subject[sid])
        train_subjects = [s for s in shuffled if s not in val_subjects]

        folds.append({
            "test": [r for s in test_subjects for r in per_subject[s]],
            "val": [r for s in val_subjects for r in per_subject[s]],
            "train": [r for s in train_subjects for r in per_subject[s]],
        })
    return CvPlan(n_splits=n_splits, assignment=assignment, folds=folds)


def state_checksum(model: UTimeModel) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, arr in model.state_entries():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()
