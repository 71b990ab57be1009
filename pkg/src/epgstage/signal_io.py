"""Recording / segment containers and their on-disk formats.

A recording is a single-channel EEG trace sampled at 512 Hz, with NaN marking
telemetry drop-outs and a sparse list of phase marks partitioning time into
staging phases.  Cleaned five-second windows travel as `Segment` values and are
persisted in a little-endian binary segment store (magic ``EPGS``).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

SAMPLE_RATE_HZ = 512
SEGMENT_SECONDS = 5
SEGMENT_SAMPLES = SAMPLE_RATE_HZ * SEGMENT_SECONDS  # 2560

GROUPS = ("PPS", "Control")


class Phase(IntEnum):
    """Staging phase of a time span within a recording."""

    BASELINE = 0
    EARLY_EPG = 1
    LATE_EPG = 2
    UNLABELED = 3

    @property
    def short_name(self) -> str:
        return _PHASE_NAMES[self]


_PHASE_NAMES = {
    Phase.BASELINE: "Baseline",
    Phase.EARLY_EPG: "EarlyEPG",
    Phase.LATE_EPG: "LateEPG",
    Phase.UNLABELED: "Unlabeled",
}
_PHASE_BY_NAME = {name: phase for phase, name in _PHASE_NAMES.items()}

#: Phases that may carry a class label in stores and traces.
CLASS_PHASES = (Phase.BASELINE, Phase.EARLY_EPG, Phase.LATE_EPG)
CLASS_NAMES = tuple(_PHASE_NAMES[p] for p in CLASS_PHASES)
N_CLASSES = len(CLASS_PHASES)


def phase_from_name(name: str) -> Phase:
    try:
        return _PHASE_BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown phase name {name!r}") from None


class StoreFormatError(ValueError):
    """The file is not a segment store (wrong magic, version or header)."""


class StoreCorruptionError(ValueError):
    """The file looks like a store but its payload is damaged."""


@dataclass
class PhaseMark:
    timestamp_s: float
    phase: Phase


@dataclass
class Recording:
    """One continuous single-channel trace plus its phase partition.

    `samples` is float32; NaN encodes lost data.  Phase marks must be sorted,
    start at or after time zero and carry strictly increasing timestamps; each
    mark labels the span up to the next mark (the last one extends to the end
    of the recording).
    """

    subject_id: str
    group: str
    sample_rate_hz: int
    samples: np.ndarray
    phase_marks: list[PhaseMark] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        finite = self.samples[~np.isnan(self.samples)]
        if finite.size and not np.isfinite(finite).all():
            raise ValueError("samples may contain NaN but not +/-inf")
        times = [m.timestamp_s for m in self.phase_marks]
        if any(t < 0 for t in times):
            raise ValueError("phase marks must not precede time zero")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("phase mark timestamps must strictly increase")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def phase_at(self, t_s: float) -> Phase:
        """Phase in effect at time `t_s`; UNLABELED before the first mark."""
        current = Phase.UNLABELED
        for mark in self.phase_marks:
            if mark.timestamp_s <= t_s:
                current = mark.phase
            else:
                break
        return current


@dataclass
class Segment:
    """A cleaned, fixed-length window cut from one recording."""

    subject_id: str
    start_time_s: float
    label: Phase
    values: np.ndarray  # float32, SEGMENT_SAMPLES long

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ValueError("segment values must be one-dimensional")


# --------------------------------------------------------------------------
# Segment store (*.epgs)
#
# layout, all little-endian:
#   header   4s magic "EPGS" | u16 version | u16 sample_rate_hz
#            | u32 segment_length | u64 segment_count | u32 reserved
#   records  u8 subject_id_len | subject_id utf-8 | u8 label
#            | f64 start_time_s | f32 * segment_length
#   footer   u32 crc32 of the records region | 4s end magic "EPGE"
#
# An empty store is exactly header + footer = 32 bytes.
# --------------------------------------------------------------------------

STORE_MAGIC = b"EPGS"
STORE_END_MAGIC = b"EPGE"
STORE_VERSION = 1

_HEADER = struct.Struct("<4sHHIQI")
_FOOTER = struct.Struct("<I4s")
_REC_HEAD = struct.Struct("<B")
_REC_META = struct.Struct("<Bd")


def write_store(
    path: str | Path,
    segments: list[Segment],
    sample_rate_hz: int = SAMPLE_RATE_HZ,
) -> None:
    """Write segments to a store file; bit-exact round trip with `read_store`."""
    path = Path(path)
    if segments:
        lengths = {seg.values.size for seg in segments}
        if len(lengths) > 1:
            raise ValueError(
                f"segments must share one length, got lengths {sorted(lengths)}"
            )
        seg_len = segments[0].values.size
    else:
        seg_len = SEGMENT_SAMPLES

    chunks = []
    for seg in segments:
        sid = seg.subject_id.encode("utf-8")
        if not 0 < len(sid) < 256:
            raise ValueError(f"subject id {seg.subject_id!r} must encode to 1..255 bytes")
        if seg.label not in CLASS_PHASES:
            raise ValueError(f"segment label must be a class phase, got {seg.label!r}")
        chunks.append(_REC_HEAD.pack(len(sid)))
        chunks.append(sid)
        chunks.append(_REC_META.pack(int(seg.label), float(seg.start_time_s)))
        chunks.append(np.ascontiguousarray(seg.values, dtype="<f4").tobytes())
    body = b"".join(chunks)

    header = _HEADER.pack(
        STORE_MAGIC, STORE_VERSION, sample_rate_hz, seg_len, len(segments), 0
    )
    footer = _FOOTER.pack(zlib.crc32(body) & 0xFFFFFFFF, STORE_END_MAGIC)
    path.write_bytes(header + body + footer)


def read_store(path: str | Path) -> tuple[list[Segment], int]:
    """Read a segment store, returning (segments, sample_rate_hz).

    Raises StoreFormatError for files that are not stores and
    StoreCorruptionError (naming the record index) for damaged payloads.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + _FOOTER.size:
        raise StoreFormatError(f"{path}: too short to hold a store header")
    magic, version, rate, seg_len, count, _reserved = _HEADER.unpack_from(raw, 0)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported store version {version}")

    body = raw[_HEADER.size : -_FOOTER.size]
    crc_stored, end_magic = _FOOTER.unpack_from(raw, len(raw) - _FOOTER.size)
    if end_magic != STORE_END_MAGIC:
        raise StoreCorruptionError(f"{path}: end marker missing or overwritten")

    segments: list[Segment] = []
    offset = 0
    values_bytes = 4 * seg_len
    for index in range(count):
        try:
            (sid_len,) = _REC_HEAD.unpack_from(body, offset)
            offset += _REC_HEAD.size
            sid = body[offset : offset + sid_len]
            if len(sid) != sid_len:
                raise struct.error("short subject id")
            offset += sid_len
            label_code, start_s = _REC_META.unpack_from(body, offset)
            offset += _REC_META.size
            values = body[offset : offset + values_bytes]
            if len(values) != values_bytes:
                raise struct.error("short values block")
            offset += values_bytes
        except struct.error:
            raise StoreCorruptionError(
                f"{path}: record {index} of {count} is truncated"
            ) from None
        if label_code not in (int(p) for p in CLASS_PHASES):
            raise StoreCorruptionError(
                f"{path}: record {index} has invalid label code {label_code}"
            )
        segments.append(
            Segment(
                subject_id=sid.decode("utf-8"),
                start_time_s=start_s,
                label=Phase(label_code),
                values=np.frombuffer(values, dtype="<f4").copy(),
            )
        )
    if offset != len(body):
        raise StoreCorruptionError(
            f"{path}: {len(body) - offset} trailing bytes after record {count - 1}"
            if count
            else f"{path}: {len(body)} unexpected bytes in an empty store"
        )
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise StoreCorruptionError(f"{path}: checksum mismatch over {count} records")
    return segments, rate


# --------------------------------------------------------------------------
# Recording files: <subject>.npy (trace) + <subject>.meta.json (everything else)
# --------------------------------------------------------------------------


def save_recording(out_dir: str | Path, rec: Recording) -> Path:
    """Persist a recording as an .npy trace plus a .meta.json sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    npy_path = out_dir / f"{rec.subject_id}.npy"
    np.save(npy_path, rec.samples.astype("<f4"))
    meta = {
        "subject_id": rec.subject_id,
        "group": rec.group,
        "sample_rate_hz": rec.sample_rate_hz,
        "n_samples": int(rec.samples.size),
        "phase_marks": [
            [float(m.timestamp_s), m.phase.short_name] for m in rec.phase_marks
        ],
    }
    meta_path = out_dir / f"{rec.subject_id}.meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return npy_path


def load_recording(rec_dir: str | Path, subject_id: str) -> Recording:
    rec_dir = Path(rec_dir)
    meta = json.loads((rec_dir / f"{subject_id}.meta.json").read_text())
    samples = np.load(rec_dir / f"{subject_id}.npy")
    return Recording(
        subject_id=meta["subject_id"],
        group=meta["group"],
        sample_rate_hz=meta["sample_rate_hz"],
        samples=samples,
        phase_marks=[
            PhaseMark(float(t), phase_from_name(name)) for t, name in meta["phase_marks"]
        ],
    )


def list_recordings(rec_dir: str | Path) -> list[str]:
    """Subject ids of all recordings found in a directory, sorted."""
    rec_dir = Path(rec_dir)
    return sorted(p.name[: -len(".meta.json")] for p in rec_dir.glob("*.meta.json"))
