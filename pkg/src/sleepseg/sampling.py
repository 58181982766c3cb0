"""Class-balanced training batches and sequential evaluation windows.

Each batch item forces one uniformly drawn class into a uniformly drawn
position of its window; the remaining segments keep the data distribution.
Windows never cross discarded (masked) epochs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .signal_io import STAGE_NAMES, PsgRecord
from .tensor import Tensor


class SamplingError(ValueError):
    """The balanced scheme cannot be satisfied (e.g. a class is absent)."""


@dataclass
class Batch:
    x: Tensor          # (B, T * segment_samples, C)
    y: Tensor          # one-hot (B, T, K)
    provenance: list   # per item: record id, window start, forced class/position

    @property
    def size(self) -> int:
        return self.x.shape[0]


def steps_per_epoch(total_segments: int, window: int = 35, batch_size: int = 12) -> int:
    """ceil(L / T / B) gradient steps define one epoch."""
    if total_segments < 1:
        raise ValueError("epoch needs at least one segment")
    return math.ceil(total_segments / window / batch_size)


def total_scored_segments(records) -> int:
    return int(sum(r.mask.sum() for r in records))


def scored_runs(record: PsgRecord):
    """Contiguous spans of scored epochs as (start, end) with end exclusive."""
    runs = []
    start = None
    for i, ok in enumerate(record.mask):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, record.n_segments))
    return runs


class BalancedSampler:
    """Deterministic class-balanced window sampler over prepared records.

    Records without any scored run of at least `window` segments are
    excluded (with a warning); a class absent from every eligible record is
    an error because the scheme could never draw it.
    """

    def __init__(self, records, window: int = 35, batch_size: int = 12,
                 classes: int = 5, seed: int = 0):
        self.window = window
        self.batch_size = batch_size
        self.classes = classes
        self.rng = np.random.default_rng(seed)
        self.records = list(records)

        # per class: list of (record index, segment index, run bounds)
        self._eligible = [[] for _ in range(classes)]
        self._records_for_class = [[] for _ in range(classes)]
        for ri, rec in enumerate(self.records):
            runs = [(a, b) for a, b in scored_runs(rec) if b - a >= window]
            if not runs:
                warnings.warn(
                    f"record {rec.record_id!r} has no scored run of {window} segments; "
                    "excluded from balanced sampling")
                continue
            seen = set()
            for a, b in runs:
                for seg in range(a, b):
                    k = int(rec.labels[seg])
                    self._eligible[k].append((ri, seg, a, b))
                    seen.add(k)
            for k in seen:
                self._records_for_class[k].append(ri)

        for k in range(classes):
            if not self._eligible[k]:
                raise SamplingError(
                    f"class {STAGE_NAMES[k] if k < len(STAGE_NAMES) else k} "
                    "is absent from every sampleable record")

        self._by_record_class = {}
        for k in range(classes):
            for ri, seg, a, b in self._eligible[k]:
                self._by_record_class.setdefault((ri, k), []).append((seg, a, b))

    def sample_item(self):
        k = int(self.rng.integers(0, self.classes))
        recs = self._records_for_class[k]
        ri = recs[int(self.rng.integers(0, len(recs)))]
        options = self._by_record_class[(ri, k)]
        seg, run_lo, run_hi = options[int(self.rng.integers(0, len(options)))]
        p = int(self.rng.integers(0, self.window))
        start = seg - p
        start = max(run_lo, min(start, run_hi - self.window))
        return ri, start, k, seg - start

    def sample_batch(self) -> Batch:
        T, K = self.window, self.classes
        items = [self.sample_item() for _ in range(self.batch_size)]
        first = self.records[items[0][0]]
        i = first.segment_samples
        C = first.signal.shape[1]
        x = np.empty((self.batch_size, T * i, C), dtype=np.float32)
        y = np.zeros((self.batch_size, T, K), dtype=np.float32)
        provenance = []
        for b, (ri, start, k, pos) in enumerate(items):
            rec = self.records[ri]
            x[b] = rec.signal[start * i:(start + T) * i]
            y[b, np.arange(T), rec.labels[start:start + T]] = 1.0
            provenance.append({
                "record": rec.record_id,
                "window_start": start,
                "forced_class": k,
                "forced_position": pos,
            })
        return Batch(x=Tensor(x), y=Tensor(y), provenance=provenance)


def sequential_windows(record: PsgRecord, window: int):
    """Non-overlapping windows covering every epoch exactly once.

    Yields (x, labels, scored) per window. A final partial window is padded
    by repeating the last epoch's samples; padded positions carry
    scored=False so they never enter the confusion matrix.
    """
    i = record.segment_samples
    n = record.n_segments
    for start in range(0, n, window):
        end = min(start + window, n)
        real = end - start
        x = np.empty((window * i, record.signal.shape[1]), dtype=np.float32)
        x[:real * i] = record.signal[start * i:end * i]
        labels = np.zeros(window, dtype=np.int64)
        labels[:real] = np.maximum(record.labels[start:end], 0)
        scored = np.zeros(window, dtype=bool)
        scored[:real] = record.mask[start:end]
        if real < window:
            pad_src = record.signal[(end - 1) * i:end * i]
            for j in range(real, window):
                x[j * i:(j + 1) * i] = pad_src
        yield x, labels, scored
