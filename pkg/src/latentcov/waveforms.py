"""Waveform records, the RCVR container, and preprocessing."""
from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

CONTAINER_MAGIC = b"RCVR"
CONTAINER_VERSION = 1
LABEL_CODES = {"noise": 0, "event": 1, None: 255}
LABEL_NAMES = {v: k for k, v in LABEL_CODES.items()}


class WaveformError(ValueError):
    """A record failed validation; ``record_id`` says which one."""

    def __init__(self, message: str, record_id: str | None = None, kind: str = "invalid"):
        super().__init__(f"{record_id}: {message}" if record_id is not None else message)
        self.record_id = record_id
        self.kind = kind


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: float = 100.0
    id: str = ""
    label: str | None = None
    onset_index: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[0] != 3:
            raise WaveformError(f"samples must be (3, N), got {self.samples.shape}", self.id, "shape")
        if not np.all(np.isfinite(self.samples)):
            raise WaveformError("non-finite samples", self.id, "nonfinite")
        if self.sample_rate_hz <= 0:
            raise WaveformError("sample rate must be positive", self.id)
        if self.label not in ("event", "noise", None):
            raise WaveformError(f"unknown label {self.label!r}", self.id)
        if self.onset_index is not None:
            self.onset_index = int(self.onset_index)
            if self.label != "event":
                raise WaveformError("onset given for a non-event record", self.id)
            if not 0 <= self.onset_index < self.n_samples:
                raise WaveformError(f"onset {self.onset_index} outside [0, {self.n_samples})",
                                    self.id)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def unlabeled(self) -> "Waveform":
        return replace(self, label=None, onset_index=None)


@dataclass
class PreprocessConfig:
    window_seconds: float = 30.0
    band_lo_hz: float = 1.0
    band_hi_hz: float = 20.0
    jitter_sigma: float = 1e-6
    normalize: bool = True
    filter_order: int = 4
    filter_padlen: int = 300

    def window_samples(self, fs: float) -> int:
        return int(round(self.window_seconds * fs))

    def validate(self, fs: float) -> None:
        if not 0 < self.band_lo_hz < self.band_hi_hz < fs / 2:
            raise ValueError(f"band {self.band_lo_hz}-{self.band_hi_hz} Hz invalid at {fs} Hz")


@dataclass
class DatasetManifest:
    """Entries are ``(container path, id, label, onset_index)``."""

    entries: list[tuple[str, str, str | None, int | None]] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        out = {"event": 0, "noise": 0, "unlabeled": 0}
        for _, _, label, _ in self.entries:
            out[label or "unlabeled"] += 1
        return out

    def __post_init__(self):
        ids = [e[1] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")


class LoadedDataset(list):
    """A list of :class:`Waveform` that also carries the per-record load errors."""

    def __init__(self, records: Iterable[Waveform] = (), errors: Iterable[WaveformError] = ()):
        super().__init__(records)
        self.errors = list(errors)


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def encode_record(w: Waveform) -> bytes:
    raw_id = w.id.encode("utf-8")
    onset = -1 if w.onset_index is None else w.onset_index
    head = struct.pack("<I", len(raw_id)) + raw_id + struct.pack(
        "<BqdI", LABEL_CODES[w.label], onset, float(w.sample_rate_hz), w.n_samples)
    return head + np.ascontiguousarray(w.samples, dtype="<f4").tobytes()


def write_container(path, records: Sequence[Waveform]) -> None:
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(records)))
        for w in records:
            fh.write(encode_record(w))


def read_container(path, expected_length: int | None = None) -> LoadedDataset:
    """Parse an RCVR file; bad records are skipped and reported in ``.errors``.

    A truncated file ends the scan at the damaged record.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != CONTAINER_MAGIC:
        raise WaveformError(f"{path}: bad container header", kind="header")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != CONTAINER_VERSION:
        raise WaveformError(f"{path}: unsupported container version {version}", kind="header")
    out = LoadedDataset()
    pos = 16
    for index in range(count):
        rid = f"{Path(path).name}#{index}"
        try:
            (id_len,) = struct.unpack_from("<I", buf, pos)
            rid = buf[pos + 4:pos + 4 + id_len].decode("utf-8")
            pos += 4 + id_len
            label_code, onset, fs, n = struct.unpack_from("<BqdI", buf, pos)
            pos += struct.calcsize("<BqdI")
        except struct.error:
            out.errors.append(WaveformError("truncated record header", rid, "truncated"))
            break
        nbytes = 12 * n
        if pos + nbytes > len(buf):
            out.errors.append(WaveformError(
                f"payload truncated ({(len(buf) - pos) // 4} of {3 * n} values)", rid, "truncated"))
            break
        samples = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=pos).reshape(3, n)
        pos += nbytes
        try:
            if label_code not in LABEL_NAMES:
                raise WaveformError(f"bad label code {label_code}", rid)
            if expected_length is not None and n != expected_length:
                raise WaveformError(f"shape mismatch: {n} samples, expected {expected_length}",
                                    rid, "shape")
            out.append(Waveform(samples.astype(np.float32), fs, rid, LABEL_NAMES[label_code],
                                None if onset < 0 else onset))
        except WaveformError as err:
            out.errors.append(err)
    return out


def _parse_label(text: str) -> str | None:
    text = text.strip().lower()
    if text in ("", "none", "255", "unlabeled"):
        return None
    if text in ("1", "event"):
        return "event"
    if text in ("0", "noise"):
        return "noise"
    raise WaveformError(f"unknown label {text!r}")


def read_csv_records(path, sample_rate_hz: float = 100.0,
                     expected_length: int | None = None) -> LoadedDataset:
    """Read ``id,label,onset,ch,t0,...`` rows, three rows (ch 0..2) per record."""
    rows: dict[str, dict] = {}
    order: list[str] = []
    out = LoadedDataset()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["id", "label", "onset", "ch"]:
            raise WaveformError(f"{path}: CSV header must start with id,label,onset,ch",
                                kind="header")
        for line in reader:
            if not line:
                continue
            rid = line[0]
            if rid not in rows:
                rows[rid] = {"label": line[1], "onset": line[2], "ch": {}}
                order.append(rid)
            try:
                rows[rid]["ch"][int(line[3])] = np.array([float(v) for v in line[4:]])
            except ValueError:
                rows[rid]["bad"] = "unparseable sample value"
    for rid in order:
        rec = rows[rid]
        try:
            if "bad" in rec:
                raise WaveformError(rec["bad"], rid)
            if sorted(rec["ch"]) != [0, 1, 2]:
                raise WaveformError(f"channels {sorted(rec['ch'])}, expected [0, 1, 2]", rid, "shape")
            lengths = {len(v) for v in rec["ch"].values()}
            if len(lengths) != 1:
                raise WaveformError(f"channel lengths differ: {sorted(lengths)}", rid, "shape")
            n = lengths.pop()
            if expected_length is not None and n != expected_length:
                raise WaveformError(f"shape mismatch: {n} samples, expected {expected_length}",
                                    rid, "shape")
            onset = rec["onset"].strip()
            onset_index = None if onset in ("", "-1") else int(onset)
            label = _parse_label(rec["label"])
            samples = np.stack([rec["ch"][c] for c in range(3)])
            out.append(Waveform(samples, sample_rate_hz, rid, label, onset_index))
        except WaveformError as err:
            if err.record_id is None:
                err = WaveformError(str(err), rid, err.kind)
            out.errors.append(err)
    return out


def read_manifest(manifest_path) -> list[Path]:
    base = Path(manifest_path).parent
    paths = []
    for line in Path(manifest_path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            paths.append(p if p.is_absolute() else base / p)
    return paths


def write_manifest(manifest_path, container_paths: Sequence, comment: str = "") -> None:
    lines = [f"# {c}" for c in comment.splitlines()] if comment else []
    lines += [str(p) for p in container_paths]
    Path(manifest_path).write_text("\n".join(lines) + "\n")


def load_dataset(manifest_path, expected_length: int | None = None,
                 sample_rate_hz: float = 100.0) -> LoadedDataset:
    """Load every container listed in a manifest (``.csv`` files via the CSV path).

    Records that fail validation are skipped; their errors land in ``.errors``.
    Duplicate ids across files are reported and the later copy dropped.
    """
    out = LoadedDataset()
    seen: set[str] = set()
    for path in read_manifest(manifest_path):
        try:
            if path.suffix.lower() == ".csv":
                part = read_csv_records(path, sample_rate_hz, expected_length)
            else:
                part = read_container(path, expected_length)
        except (OSError, WaveformError) as err:
            out.errors.append(err if isinstance(err, WaveformError)
                              else WaveformError(f"{path}: {err}", kind="io"))
            continue
        out.errors.extend(part.errors)
        for w in part:
            if w.id in seen:
                out.errors.append(WaveformError("duplicate id", w.id, "duplicate"))
                continue
            seen.add(w.id)
            out.append(w)
    return out


def manifest_of(manifest_path) -> DatasetManifest:
    """Index a manifest's records without keeping the samples."""
    entries = []
    for path in read_manifest(manifest_path):
        for w in (read_csv_records(path) if path.suffix.lower() == ".csv" else read_container(path)):
            entries.append((str(path), w.id, w.label, w.onset_index))
    return DatasetManifest(entries)


# ---------------------------------------------------------------------------
# signal processing
# ---------------------------------------------------------------------------

def bandpass(x: np.ndarray, fs: float, lo: float, hi: float, order: int = 4,
             padlen: int = 300) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    if not 0 < lo < hi < fs / 2:
        raise ValueError(f"invalid band {lo}-{hi} Hz for fs={fs}")
    x = np.asarray(x, dtype=np.float64)
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    padlen = min(padlen, x.shape[-1] - 1)
    return signal.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen)


def record_seed(seed: int, record_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(record_id.encode("utf-8"))])


def crop_start(w: Waveform, window: int, mode: str, rng: np.random.Generator) -> int:
    """Window start: random in ``train`` mode, onset-centred (or centred) in ``test`` mode."""
    n = w.n_samples
    if n == window:
        return 0
    last = n - window
    if mode == "test":
        centre = w.onset_index if w.onset_index is not None else n // 2
        return int(np.clip(centre - window // 2, 0, last))
    if w.onset_index is not None:
        lo = max(0, w.onset_index - window + 1)
        hi = min(last, w.onset_index)
        return int(rng.integers(lo, hi + 1))
    return int(rng.integers(0, last + 1))


def preprocess(w: Waveform, cfg: PreprocessConfig = PreprocessConfig(), rng_seed: int = 0,
               mode: str = "test") -> Waveform:
    """Crop, band-pass, demean, scale each channel to unit std, then add jitter."""
    fs = w.sample_rate_hz
    cfg.validate(fs)
    window = cfg.window_samples(fs)
    if w.n_samples < window:
        raise WaveformError(f"{w.n_samples} samples is shorter than the {window}-sample window",
                            w.id, "shape")
    rng = np.random.default_rng(record_seed(rng_seed, w.id))
    start = crop_start(w, window, mode, rng)
    x = w.samples[:, start:start + window].astype(np.float64)

    flat = np.ptp(x, axis=1) == 0
    y = bandpass(x, fs, cfg.band_lo_hz, cfg.band_hi_hz, cfg.filter_order, cfg.filter_padlen)
    y -= y.mean(axis=1, keepdims=True)
    if cfg.normalize:
        std = y.std(axis=1)
        flat |= std < 1e-12
        y /= np.where(flat, 1.0, std)[:, None]
    y[flat] = 0.0
    if cfg.jitter_sigma > 0:
        y += rng.normal(0.0, cfg.jitter_sigma, size=y.shape)

    onset = w.onset_index
    if onset is not None:
        onset -= start
        if not 0 <= onset < window:
            onset = None
    label = w.label
    return Waveform(y.astype(np.float32), fs, w.id, label, onset)


def preprocess_many(records: Sequence[Waveform], cfg: PreprocessConfig = PreprocessConfig(),
                    rng_seed: int = 0, mode: str = "test") -> list[Waveform]:
    return [preprocess(w, cfg, rng_seed, mode) for w in records]


def onset_margin_filter(records: Iterable[Waveform], margin_seconds: float = 3.0) -> list[Waveform]:
    """Drop event records whose onset sits within ``margin_seconds`` of either edge.

    Events that lost their onset in cropping are dropped too; noise always passes.
    """
    kept = []
    for w in records:
        if w.label == "event":
            margin = margin_seconds * w.sample_rate_hz
            if w.onset_index is None:
                continue
            if w.onset_index < margin or (w.n_samples - w.onset_index) < margin:
                continue
        kept.append(w)
    return kept


def stack_samples(records: Sequence[Waveform]) -> np.ndarray:
    """(B, 3, N) float32 array of the samples only; labels stay behind."""
    return np.stack([w.samples for w in records]).astype(np.float32)
