"""PSG ingestion and preprocessing.

EDF files are parsed at the byte level: a 256-byte fixed header, 256 bytes
of header per signal (grouped by field), then data records of 16-bit
little-endian two's-complement samples calibrated through the physical /
digital ranges. The preprocessing pipeline is fixed:

    read -> resample -> map/align labels -> robust scale
         -> zero extreme segments -> (optional) trim wake margins
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .checkpoint import load_checkpoint, save_checkpoint

EPOCH_SECONDS = 30
STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")
STAGE_CODES = {name: i for i, name in enumerate(STAGE_NAMES)}
DISCARD = "DISCARD"

# source vocabularies mapped onto {W, N1, N2, N3, REM}; S3/S4 merge into N3,
# movement / non-scored epochs are dropped from the scored stream
DEFAULT_STAGE_MAP = {
    "W": "W", "WAKE": "W",
    "S1": "N1", "N1": "N1",
    "S2": "N2", "N2": "N2",
    "S3": "N3", "S4": "N3", "N3": "N3",
    "R": "REM", "REM": "REM",
    "MOVEMENT": DISCARD, "UNSCORED": DISCARD, "NON-SCORED": DISCARD, "?": DISCARD,
}


class EdfError(ValueError):
    """Malformed EDF content; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(ValueError):
    """Signal values unusable for processing (NaN / Inf)."""


class VocabularyError(ValueError):
    """A stage token has no entry in the stage map."""


class TrimError(ValueError):
    """Record cannot be trimmed (contains no non-wake sleep)."""


@dataclass
class PsgRecord:
    """A preprocessed record: signal, aligned per-epoch labels, identity.

    labels hold codes 0..4; discarded epochs keep -1 with mask False. The
    signal always spans exactly n_segments * 30 s * sample_rate samples.
    """

    subject_id: str
    record_id: str
    signal: np.ndarray
    sample_rate: int
    channel_names: list
    labels: np.ndarray
    mask: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.labels)

    @property
    def segment_samples(self) -> int:
        return self.sample_rate * EPOCH_SECONDS

    def segment_signal(self, index: int) -> np.ndarray:
        w = self.segment_samples
        return self.signal[index * w:(index + 1) * w]


# ---------------------------------------------------------------------------
# EDF parsing


@dataclass
class EdfChannelHeader:
    label: str
    transducer: str
    physical_dim: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefilter: str
    samples_per_record: int


@dataclass
class EdfHeader:
    version: str
    patient_id: str
    recording_id: str
    start_date: str
    start_time: str
    header_bytes: int
    n_records: int
    record_duration: float
    channels: list

    def sample_rate(self, idx: int) -> float:
        return self.channels[idx].samples_per_record / self.record_duration


def _ascii_field(blob: bytes, offset: int, width: int, what: str) -> str:
    if offset + width > len(blob):
        raise EdfError(f"file too short for {what}", offset)
    return blob[offset:offset + width].decode("latin-1")


def _int_field(blob, offset, width, what) -> int:
    raw = _ascii_field(blob, offset, width, what).strip()
    try:
        return int(raw)
    except ValueError:
        raise EdfError(f"{what} is not an integer: {raw!r}", offset) from None


def _float_field(blob, offset, width, what) -> float:
    raw = _ascii_field(blob, offset, width, what).strip()
    try:
        return float(raw)
    except ValueError:
        raise EdfError(f"{what} is not numeric: {raw!r}", offset) from None


def read_edf_header(blob: bytes) -> EdfHeader:
    version = _ascii_field(blob, 0, 8, "version").strip()
    if version != "0":
        raise EdfError(f"unsupported EDF version {version!r}", 0)
    header_bytes = _int_field(blob, 184, 8, "header byte count")
    n_records = _int_field(blob, 236, 8, "data record count")
    if n_records < 0:
        raise EdfError(f"data record count must be nonnegative, got {n_records}", 236)
    duration = _float_field(blob, 244, 8, "record duration")
    if duration <= 0:
        raise EdfError(f"record duration must be positive, got {duration}", 244)
    ns = _int_field(blob, 252, 4, "signal count")
    if ns < 1:
        raise EdfError(f"signal count must be >= 1, got {ns}", 252)
    if header_bytes != 256 + 256 * ns:
        raise EdfError(
            f"header byte count {header_bytes} != 256 + 256 * {ns} signals", 184)
    if len(blob) < header_bytes:
        raise EdfError(f"file shorter than declared header ({len(blob)} < {header_bytes})", 256)

    def block(start, width, parse, what):
        out = []
        for i in range(ns):
            off = start + i * width
            out.append(parse(blob, off, width, f"{what} of signal {i}"))
        return out, start + ns * width

    pos = 256
    labels, pos = block(pos, 16, _ascii_field, "label")
    transducers, pos = block(pos, 80, _ascii_field, "transducer")
    dims, pos = block(pos, 8, _ascii_field, "physical dimension")
    pmin_off = pos
    pmins, pos = block(pos, 8, _float_field, "physical minimum")
    pmaxs, pos = block(pos, 8, _float_field, "physical maximum")
    dmin_off = pos
    dmins, pos = block(pos, 8, _int_field, "digital minimum")
    dmaxs, pos = block(pos, 8, _int_field, "digital maximum")
    prefilters, pos = block(pos, 80, _ascii_field, "prefilter")
    samp_off = pos
    samples, pos = block(pos, 8, _int_field, "samples per record")

    channels = []
    for i in range(ns):
        if dmaxs[i] == dmins[i]:
            raise EdfError(f"zero digital range on signal {i} ({labels[i].strip()!r})",
                           dmin_off + 8 * i)
        if samples[i] < 1:
            raise EdfError(f"samples per record must be >= 1 on signal {i}", samp_off + 8 * i)
        if pmaxs[i] == pmins[i]:
            raise EdfError(f"zero physical range on signal {i}", pmin_off + 8 * i)
        channels.append(EdfChannelHeader(
            label=labels[i].strip(), transducer=transducers[i].strip(),
            physical_dim=dims[i].strip(), physical_min=pmins[i], physical_max=pmaxs[i],
            digital_min=dmins[i], digital_max=dmaxs[i], prefilter=prefilters[i].strip(),
            samples_per_record=samples[i]))

    return EdfHeader(
        version=version,
        patient_id=_ascii_field(blob, 8, 80, "patient id").strip(),
        recording_id=_ascii_field(blob, 88, 80, "recording id").strip(),
        start_date=_ascii_field(blob, 168, 8, "start date").strip(),
        start_time=_ascii_field(blob, 176, 8, "start time").strip(),
        header_bytes=header_bytes,
        n_records=n_records,
        record_duration=duration,
        channels=channels)


def read_edf(path, channels=None):
    """Read calibrated physical signals.

    `channels` filters by case-insensitive label substring (e.g. "C3-A2");
    None selects every signal except annotation tracks. Returns
    (list of float32 arrays, list of sample rates, header).
    """
    blob = Path(path).read_bytes()
    header = read_edf_header(blob)
    ns = len(header.channels)
    per_record = [ch.samples_per_record for ch in header.channels]
    total = sum(per_record)
    expected = header.header_bytes + 2 * total * header.n_records
    if len(blob) < expected:
        raise EdfError(
            f"truncated data records: expected {expected} bytes, file has {len(blob)}",
            len(blob))

    if channels is None:
        selected = [i for i, ch in enumerate(header.channels)
                    if "annotation" not in ch.label.lower()]
    else:
        selected = []
        for wanted in channels:
            needle = wanted.lower()
            matches = [i for i, ch in enumerate(header.channels) if needle in ch.label.lower()]
            if not matches:
                raise EdfError(f"no channel label contains {wanted!r}; "
                               f"available: {[c.label for c in header.channels]}")
            selected.append(matches[0])
    if not selected:
        raise EdfError("no data channels to read")

    raw = np.frombuffer(blob, dtype="<i2", offset=header.header_bytes,
                        count=total * header.n_records)
    raw = raw.reshape(header.n_records, total)
    starts = np.concatenate([[0], np.cumsum(per_record)])

    signals, rates = [], []
    for i in selected:
        ch = header.channels[i]
        digital = raw[:, starts[i]:starts[i + 1]].reshape(-1).astype(np.float64)
        gain = (ch.physical_max - ch.physical_min) / (ch.digital_max - ch.digital_min)
        physical = (digital - ch.digital_min) * gain + ch.physical_min
        signals.append(physical.astype(np.float32))
        rates.append(header.sample_rate(i))
    return signals, rates, header


def write_edf(path, channels, patient_id="X", recording_id="X",
              start_date="01.01.01", start_time="00.00.00", physical_dim="uV"):
    """Write (label, rate_hz, samples) triples as a plain EDF file.

    Uses one-second data records, so each channel length must be a multiple
    of its rate. Values are quantized into the full int16 range over the
    observed amplitude span.
    """
    n_records = None
    for label, rate, data in channels:
        rate = int(rate)
        if len(data) % rate:
            raise ValueError(f"channel {label!r}: length {len(data)} not a multiple of rate {rate}")
        records = len(data) // rate
        if n_records is None:
            n_records = records
        elif records != n_records:
            raise ValueError("all channels must span the same duration")

    def pad(text, width):
        raw = str(text).encode("latin-1")
        if len(raw) > width:
            raise ValueError(f"field {text!r} longer than {width} bytes")
        return raw.ljust(width)

    ns = len(channels)
    header_bytes = 256 + 256 * ns
    head = b"".join([
        pad("0", 8), pad(patient_id, 80), pad(recording_id, 80),
        pad(start_date, 8), pad(start_time, 8), pad(header_bytes, 8),
        pad("", 44), pad(n_records, 8), pad(1, 8), pad(ns, 4),
    ])

    dig_min, dig_max = -32768, 32767
    calib = []
    for label, rate, data in channels:
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise DataError(f"channel {label!r} contains non-finite samples")
        pmin, pmax = float(data.min()), float(data.max())
        if pmax == pmin:
            pmax = pmin + 1.0
        calib.append((pmin, pmax))

    def fmt8(x):
        text = f"{x:.8g}"[:8]
        return pad(text, 8)

    blocks = [
        b"".join(pad(label, 16) for label, _, _ in channels),
        b"".join(pad("", 80) for _ in channels),
        b"".join(pad(physical_dim, 8) for _ in channels),
        b"".join(fmt8(c[0]) for c in calib),
        b"".join(fmt8(c[1]) for c in calib),
        b"".join(pad(dig_min, 8) for _ in channels),
        b"".join(pad(dig_max, 8) for _ in channels),
        b"".join(pad("", 80) for _ in channels),
        b"".join(pad(int(rate), 8) for _, rate, _ in channels),
        b"".join(pad("", 32) for _ in channels),
    ]

    digital = []
    for (label, rate, data), (pmin, pmax) in zip(channels, calib):
        gain = (pmax - pmin) / (dig_max - dig_min)
        codes = np.rint((np.asarray(data, np.float64) - pmin) / gain + dig_min)
        digital.append(np.clip(codes, dig_min, dig_max).astype("<i2").reshape(n_records, -1))

    body = np.concatenate(digital, axis=1).tobytes()
    Path(path).write_bytes(head + b"".join(blocks) + body)


# ---------------------------------------------------------------------------
# resampling


def rational_ratio(s_in, s_out) -> tuple:
    """(p, q) with s_out / s_in = p / q in lowest terms."""
    frac = Fraction(s_out).limit_denominator(10 ** 6) / Fraction(s_in).limit_denominator(10 ** 6)
    return frac.numerator, frac.denominator


def resample(signal: np.ndarray, s_in, s_out) -> np.ndarray:
    """Polyphase rational resampling with a Kaiser (beta 5.0) windowed-sinc
    low-pass at min(s_in, s_out) / 2; equal rates return the input unchanged."""
    if s_in <= 0 or s_out <= 0:
        raise ValueError("sample rates must be positive")
    signal = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(signal)):
        raise DataError("cannot resample non-finite samples")
    if s_in == s_out:
        return signal.astype(np.float32)
    p, q = rational_ratio(s_in, s_out)
    out = resample_poly(signal, p, q, window=("kaiser", 5.0))
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# scaling and outlier handling


def robust_scale(signal: np.ndarray):
    """Per channel over the whole record: (x - median) / IQR.

    Channels with IQR below 1e-8 are only median-shifted and their indices
    are returned as flags.
    """
    signal = np.asarray(signal, dtype=np.float32)
    flat = signal.ndim == 1
    if flat:
        signal = signal[:, None]
    med = np.median(signal, axis=0)
    q1, q3 = np.percentile(signal, [25, 75], axis=0)
    iqr = q3 - q1
    flagged = [int(i) for i in np.where(iqr < 1e-8)[0]]
    divisor = np.where(iqr < 1e-8, 1.0, iqr)
    out = ((signal - med) / divisor).astype(np.float32)
    return (out[:, 0] if flat else out), flagged


def extreme_segment_map(record: PsgRecord, factor: float = 20.0) -> np.ndarray:
    """(n_segments, C) flags: scored segments holding |value| beyond
    factor x the channel's IQR (unity after scaling; degenerate channels
    fall back to 1)."""
    sig = record.signal
    q1, q3 = np.percentile(sig, [25, 75], axis=0)
    iqr = q3 - q1
    thresholds = factor * np.where(iqr < 1e-8, 1.0, iqr)
    w = record.segment_samples
    n = record.n_segments
    peaks = np.abs(sig[:n * w]).reshape(n, w, -1).max(axis=1)
    return (peaks > thresholds) & record.mask[:, None]


def zero_extreme_segments(record: PsgRecord, factor: float = 20.0) -> PsgRecord:
    """Zero each scored 30 s segment (per channel) that contains a value
    beyond the factor x IQR threshold; segment count never changes."""
    hits = extreme_segment_map(record, factor)
    if not hits.any():
        return record
    sig = record.signal.copy()
    w = record.segment_samples
    for seg, ch in zip(*np.where(hits)):
        sig[seg * w:(seg + 1) * w, ch] = 0.0
    return PsgRecord(record.subject_id, record.record_id, sig, record.sample_rate,
                     record.channel_names, record.labels, record.mask)


# ---------------------------------------------------------------------------
# stage mapping and trimming


@dataclass
class StageMap:
    mapping: dict = field(default_factory=lambda: dict(DEFAULT_STAGE_MAP))

    def resolve(self, token: str) -> str:
        key = token.strip().upper()
        if key not in self.mapping:
            raise VocabularyError(f"unknown stage token {token!r}")
        return self.mapping[key]


def map_stages(raw_labels, stage_map: StageMap | None = None):
    """Map source stage tokens to codes 0..4 plus a scored mask; tokens that
    resolve to DISCARD get code -1 and mask False."""
    stage_map = stage_map or StageMap()
    codes = np.full(len(raw_labels), -1, dtype=np.int8)
    mask = np.zeros(len(raw_labels), dtype=bool)
    for i, token in enumerate(raw_labels):
        target = stage_map.resolve(token)
        if target != DISCARD:
            codes[i] = STAGE_CODES[target]
            mask[i] = True
    return codes, mask


def trim_wake_margins(record: PsgRecord, margin_s: int = 1800) -> PsgRecord:
    """Keep the span from margin_s before the first non-wake epoch to
    margin_s after the last one, clamped to the record."""
    margin = margin_s // EPOCH_SECONDS
    non_wake = np.where(record.mask & (record.labels > 0))[0]
    if non_wake.size == 0:
        raise TrimError(f"record {record.record_id!r} has no non-wake sleep to anchor trimming")
    lo = max(0, int(non_wake[0]) - margin)
    hi = min(record.n_segments - 1, int(non_wake[-1]) + margin)
    w = record.segment_samples
    return PsgRecord(record.subject_id, record.record_id,
                     record.signal[lo * w:(hi + 1) * w].copy(), record.sample_rate,
                     record.channel_names, record.labels[lo:hi + 1].copy(),
                     record.mask[lo:hi + 1].copy())


# ---------------------------------------------------------------------------
# label files


def load_labels(path) -> list:
    """Read stage tokens, one per 30 s epoch.

    Two schemas are accepted: per-epoch rows `epoch_index,stage` and
    interval rows `onset_s,duration_s,stage` (expanded to 30 s epochs).
    A header row is detected and skipped.
    """
    with open(path, encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    if not rows:
        return []

    def numeric(cell):
        try:
            float(cell)
            return True
        except ValueError:
            return False

    if not numeric(rows[0][0]):
        rows = rows[1:]
    if not rows:
        return []

    width = len(rows[0])
    if width == 2:
        indexed = sorted((int(float(r[0])), r[1].strip()) for r in rows)
        return [stage for _, stage in indexed]
    if width == 3:
        epochs = []
        for onset, duration, stage in rows:
            onset, duration = float(onset), float(duration)
            count = int(round(duration / EPOCH_SECONDS))
            start = int(round(onset / EPOCH_SECONDS))
            for k in range(count):
                epochs.append((start + k, stage.strip()))
        epochs.sort()
        return [stage for _, stage in epochs]
    raise ValueError(f"label file {path}: expected 2 or 3 columns, got {width}")


# ---------------------------------------------------------------------------
# pipeline and cache


@dataclass
class PreprocessOptions:
    target_rate: int = 100
    channels: list | None = None
    trim_wake: bool = False
    outlier_factor: float = 20.0
    stage_map: StageMap | None = None


def preprocess_record(record_path, label_path, subject_id,
                      opts: PreprocessOptions | None = None):
    """Run the full pipeline on one EDF + label file; returns the prepared
    record and a per-record report dict."""
    opts = opts or PreprocessOptions()
    signals, rates, _ = read_edf(record_path, channels=opts.channels)
    resampled = [resample(sig, rate, opts.target_rate) for sig, rate in zip(signals, rates)]
    t = min(len(s) for s in resampled)
    signal = np.stack([s[:t] for s in resampled], axis=1)

    raw_labels = load_labels(label_path)
    codes, mask = map_stages(raw_labels, opts.stage_map)

    w = opts.target_rate * EPOCH_SECONDS
    n_seg = min(len(codes), t // w)
    truncated = len(codes) - n_seg
    codes, mask = codes[:n_seg], mask[:n_seg]
    signal = signal[:n_seg * w]

    q1, q3 = np.percentile(signal, [25, 75], axis=0)
    raw_iqr = [float(v) for v in (q3 - q1)]
    scaled, flagged = robust_scale(signal)
    record = PsgRecord(
        subject_id=subject_id,
        record_id=Path(record_path).stem,
        signal=scaled,
        sample_rate=opts.target_rate,
        channel_names=[f"ch{i}" for i in range(signal.shape[1])] if opts.channels is None
        else list(opts.channels),
        labels=codes,
        mask=mask)
    hits = extreme_segment_map(record, opts.outlier_factor)
    record = zero_extreme_segments(record, opts.outlier_factor)
    if opts.trim_wake:
        record = trim_wake_margins(record)

    report = {
        "record": record.record_id,
        "subject": subject_id,
        "segments": int(record.n_segments),
        "discarded_labels": int((~mask).sum()),
        "zeroed_segments": int(hits.sum()),
        "degenerate_channels": flagged,
        "label_epochs_truncated": int(max(truncated, 0)),
        "channel_iqr": raw_iqr,
    }
    return record, report


def save_record_cache(path, record: PsgRecord) -> None:
    """Cache = container with one entry per channel plus a labels sidecar CSV."""
    entries = [("sample_rate", np.asarray([record.sample_rate], np.float32))]
    for c, name in enumerate(record.channel_names):
        entries.append((f"channel:{name}", record.signal[:, c]))
    save_checkpoint(path, entries)

    sidecar = Path(str(path) + ".labels.csv")
    with open(sidecar, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch_index", "stage", "mask"])
        for i, (code, ok) in enumerate(zip(record.labels, record.mask)):
            writer.writerow([i, STAGE_NAMES[code] if ok else DISCARD, int(ok)])


def load_record_cache(path, subject_id="") -> PsgRecord:
    arrays = load_checkpoint(path)
    rate = int(arrays.pop("sample_rate")[0])
    names = [k.split(":", 1)[1] for k in arrays if k.startswith("channel:")]
    signal = np.stack([arrays[f"channel:{n}"] for n in names], axis=1)

    labels, mask = [], []
    with open(str(path) + ".labels.csv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ok = bool(int(row["mask"]))
            mask.append(ok)
            labels.append(STAGE_CODES[row["stage"]] if ok else -1)
    return PsgRecord(subject_id=subject_id, record_id=Path(path).stem,
                     signal=signal, sample_rate=rate, channel_names=names,
                     labels=np.asarray(labels, np.int8), mask=np.asarray(mask, bool))


def read_manifest(path) -> list:
    """Rows of the dataset manifest CSV: record_path, label_path, subject_id."""
    rows = []
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "record_path": str((base / row["record_path"])),
                "label_path": str((base / row["label_path"])),
                "subject_id": row["subject_id"],
            })
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_path", "label_path", "subject_id"])
        for row in rows:
            writer.writerow([row["record_path"], row["label_path"], row["subject_id"]])
