"""Labeled synthetic PSG-like records with stage-dependent spectral content.

Each stage owns a dominant frequency band (slow high-amplitude activity for
deep sleep, alpha-range for wake, a spindle band with 14 Hz bursts for N2);
rapid-eye-movement sleep deliberately overlaps the wake band at reduced
amplitude so it stays the hardest pair to separate. Deliberately far easier
than clinical EEG: the point is a fast, fully deterministic end-to-end
training oracle, not physiological realism.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_io import EPOCH_SECONDS, STAGE_NAMES, PsgRecord, write_edf, write_manifest


@dataclass
class StageSpec:
    stage: str
    band: tuple
    amplitude: float
    transient: tuple | None = None  # (burst_hz, bursts_per_minute)


STAGE_SPECS = (
    StageSpec("W", (8.0, 13.0), 1.0),
    StageSpec("N1", (4.0, 7.0), 1.0),
    StageSpec("N2", (13.0, 16.0), 1.0, transient=(14.0, 3.0)),
    StageSpec("N3", (0.3, 3.0), 3.0),
    StageSpec("REM", (6.0, 11.0), 0.5),
)

BASE_AMPLITUDE_UV = 40.0
NOISE_SNR_DB = 6.0
STAY_PROBABILITY = 0.85
_OSCILLATORS = 8


def stage_sequence(rng, n_segments: int, stay_prob: float = STAY_PROBABILITY) -> np.ndarray:
    """5-state Markov chain with strong self-transition, starting and ending in W."""
    k = len(STAGE_SPECS)
    move = (1.0 - stay_prob) / (k - 1)
    seq = np.empty(n_segments, dtype=np.int8)
    state = 0
    for i in range(n_segments):
        seq[i] = state
        if rng.random() >= stay_prob:
            others = [s for s in range(k) if s != state]
            state = others[rng.integers(0, k - 1)]
    if n_segments:
        seq[-1] = 0
    return seq


def _segment_wave(rng, spec: StageSpec, n: int, rate: int) -> np.ndarray:
    t = np.arange(n) / rate
    freqs = rng.uniform(spec.band[0], spec.band[1], _OSCILLATORS)
    phases = rng.uniform(0, 2 * np.pi, _OSCILLATORS)
    weights = rng.uniform(0.5, 1.0, _OSCILLATORS)
    wave = (weights[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
    wave *= spec.amplitude / max(np.sqrt(np.mean(wave ** 2)), 1e-9)

    noise_rms = spec.amplitude / (10 ** (NOISE_SNR_DB / 20.0))
    wave = wave + rng.standard_normal(n) * noise_rms

    if spec.transient is not None:
        burst_hz, per_minute = spec.transient
        for _ in range(rng.poisson(per_minute * (n / rate) / 60.0)):
            dur = rate  # 1 s bursts
            start = rng.integers(0, max(n - dur, 1))
            window = np.hanning(dur)
            tt = np.arange(dur) / rate
            wave[start:start + dur] += 2.0 * spec.amplitude * window * np.sin(
                2 * np.pi * burst_hz * tt + rng.uniform(0, 2 * np.pi))
    return wave


def generate_record(seed: int, n_segments: int, sample_rate: int = 100,
                    channels: int = 1, subject_id: str = "synthetic",
                    record_id: str | None = None) -> PsgRecord:
    """One record: a stage chain plus per-segment band-limited activity.

    Deterministic in (seed, n_segments, sample_rate, channels); all epochs
    are scored. The signal is in microvolt-like physical units (unscaled).
    """
    rng = np.random.default_rng(seed)
    labels = stage_sequence(rng, n_segments)
    w = sample_rate * EPOCH_SECONDS
    signal = np.empty((n_segments * w, channels), dtype=np.float32)
    for c in range(channels):
        ch_rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        for i, code in enumerate(labels):
            wave = _segment_wave(ch_rng, STAGE_SPECS[code], w, sample_rate)
            signal[i * w:(i + 1) * w, c] = BASE_AMPLITUDE_UV * wave
    return PsgRecord(
        subject_id=subject_id,
        record_id=record_id or f"{subject_id}-rec",
        signal=signal,
        sample_rate=sample_rate,
        channel_names=[f"EEG synth{c}" for c in range(channels)],
        labels=labels,
        mask=np.ones(n_segments, dtype=bool))


def generate_dataset(seed: int, n_subjects: int, segments_per_record: int,
                     out_dir, sample_rate: int = 100, channels: int = 1) -> Path:
    """Write a dataset of genuine EDF files, per-epoch label CSVs, and a
    manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(n_subjects):
        subject = f"s{s:03d}"
        record = generate_record(seed + 1000 * s, segments_per_record,
                                 sample_rate=sample_rate, channels=channels,
                                 subject_id=subject, record_id=f"{subject}-r0")
        edf_path = out_dir / f"{record.record_id}.edf"
        label_path = out_dir / f"{record.record_id}.labels.csv"
        write_edf(edf_path, [(name, sample_rate, record.signal[:, c])
                             for c, name in enumerate(record.channel_names)],
                  patient_id=subject, recording_id=record.record_id)
        with open(label_path, "w", encoding="utf-8") as fh:
            fh.write("epoch_index,stage\n")
            for i, code in enumerate(record.labels):
                fh.write(f"{i},{STAGE_NAMES[code]}\n")
        rows.append({"record_path": edf_path.name, "label_path": label_path.name,
                     "subject_id": subject})
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
