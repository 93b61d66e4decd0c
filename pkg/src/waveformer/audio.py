"""Waveform I/O, resampling, chunking/framing, manifests and synthetic data."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal

from .errors import ContractError, FormatError, ManifestError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CHUNK_SAMPLES = SAMPLE_RATE
FRAME_LEN = 400
NUM_FRAMES = CHUNK_SAMPLES // FRAME_LEN

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    """Mono 16 kHz waveform with a multi-hot label vector."""

    samples: np.ndarray
    labels: np.ndarray
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ContractError(f"clip {self.source_id!r}: need a non-empty mono sample vector")
        if not np.isfinite(self.samples).all():
            raise ContractError(f"clip {self.source_id!r}: non-finite samples")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise ContractError(f"clip {self.source_id!r}: labels must be 0/1")

    @property
    def duration(self) -> float:
        return self.samples.size / SAMPLE_RATE


@dataclass
class Example:
    frames: np.ndarray  # [NUM_FRAMES, FRAME_LEN]
    target: np.ndarray  # [n_labels]
    source_id: str = ""


class RawAudio(NamedTuple):
    samples: np.ndarray
    rate: int


# -- WAV ---------------------------------------------------------------------------------


def decode_wav(path) -> RawAudio:
    """Read PCM16 or float32 RIFF/WAVE (1 or 2 channels).

    Samples come back as float32 in [-1, 1]; stereo is averaged to mono.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read: {exc}") from exc
    return decode_wav_bytes(buf, str(path))


def decode_wav_bytes(buf: bytes, name: str = "<bytes>") -> RawAudio:
    if len(buf) < 12 or buf[0:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError(f"{name}: offset 0: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        chunk_id = buf[pos:pos + 4]
        (size,) = struct.unpack("<I", buf[pos + 4:pos + 8])
        body_start = pos + 8
        if body_start + size > len(buf):
            if chunk_id == b"data":
                # tolerate a data chunk that overstates its size
                size = len(buf) - body_start
            else:
                raise FormatError(f"{name}: offset {pos}: chunk {chunk_id!r} runs past end of file")
        body = buf[body_start:body_start + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{name}: offset {pos}: fmt chunk too short ({size} bytes)")
            tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _FMT_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"{name}: offset {pos}: truncated WAVE_FORMAT_EXTENSIBLE header")
                (tag,) = struct.unpack("<H", body[24:26])
            fmt = (tag, channels, rate, block_align, bits, pos)
        elif chunk_id == b"data":
            data = (body, pos)
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{name}: offset {pos}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{name}: offset {pos}: missing data chunk")
    tag, channels, rate, block_align, bits, fmt_pos = fmt
    if channels not in (1, 2):
        raise FormatError(f"{name}: offset {fmt_pos}: unsupported channel count {channels}")
    if rate <= 0:
        raise FormatError(f"{name}: offset {fmt_pos}: invalid sample rate {rate}")
    body, data_pos = data
    if tag == _FMT_PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise FormatError(f"{name}: offset {fmt_pos}: unsupported codec (format {tag}, {bits} bits)")
    width = np.dtype(dtype).itemsize * channels
    n_frames = len(body) // width
    raw = np.frombuffer(body[:n_frames * width], dtype=dtype).reshape(n_frames, channels)
    samples = raw.astype(np.float32)
    if scale != 1.0:
        samples *= np.float32(scale)
    if channels == 2:
        samples = samples.mean(axis=1, dtype=np.float32)
    else:
        samples = samples[:, 0].copy()
    if not np.isfinite(samples).all():
        raise FormatError(f"{name}: offset {data_pos}: non-finite float samples")
    return RawAudio(samples, rate)


def encode_wav(samples: np.ndarray, rate: int = SAMPLE_RATE, sample_format: str = "float32") -> bytes:
    """Serialize samples as a RIFF/WAVE byte string (mono or ``[n, 2]`` stereo)."""
    arr = np.asarray(samples)
    channels = 1 if arr.ndim == 1 else arr.shape[1]
    if sample_format == "float32":
        tag, bits = _FMT_FLOAT, 32
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif sample_format == "pcm16":
        tag, bits = _FMT_PCM, 16
        ints = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 32768.0), -32768, 32767)
        payload = ints.astype("<i2").tobytes()
    else:
        raise ContractError(f"unknown sample format {sample_format!r}")
    block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block_align, block_align, bits)
    out = io.BytesIO()
    out.write(b"RIFF")
    out.write(struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload) + (len(payload) & 1)))
    out.write(b"WAVE")
    out.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
    out.write(b"data" + struct.pack("<I", len(payload)) + payload)
    if len(payload) & 1:
        out.write(b"\x00")
    return out.getvalue()


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE, sample_format: str = "float32") -> None:
    Path(path).write_bytes(encode_wav(samples, rate, sample_format))


# -- resampling ----------------------------------------------------------------------------

TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


def resample(samples: np.ndarray, from_rate: int, to_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling with a Kaiser-windowed lowpass.

    Output length is ``round(len * to_rate / from_rate)``.
    """
    if from_rate <= 0 or to_rate <= 0:
        raise ContractError(f"sample rates must be positive, got {from_rate} -> {to_rate}")
    x = np.asarray(samples, dtype=np.float64)
    if from_rate == to_rate:
        return x.astype(np.float32)
    g = math.gcd(from_rate, to_rate)
    up, down = to_rate // g, from_rate // g
    n_taps = TAPS_PER_PHASE * up
    n_taps += 1 - n_taps % 2  # odd length keeps the filter delay integral
    cutoff = 1.0 / max(up, down)
    taps = signal.firwin(n_taps, cutoff, window=("kaiser", KAISER_BETA))
    y = signal.resample_poly(x, up, down, window=taps, padtype="line")
    n_out = int(round(x.size * to_rate / from_rate))
    if y.size < n_out:
        y = np.concatenate([y, np.full(n_out - y.size, y[-1] if y.size else 0.0)])
    return y[:n_out].astype(np.float32)


# -- chunking and framing ------------------------------------------------------------------


def chunk_clip(clip: AudioClip) -> list[Example]:
    """Split a clip into 1 s examples that inherit the clip's labels.

    Clips shorter than 1 s are tiled up to exactly one second; a trailing
    partial chunk of a longer clip is dropped.
    """
    x = clip.samples
    if x.size == 0:
        raise ContractError("cannot chunk an empty clip")
    if x.size < CHUNK_SAMPLES:
        reps = -(-CHUNK_SAMPLES // x.size)
        chunks = [np.tile(x, reps)[:CHUNK_SAMPLES]]
    else:
        n = x.size // CHUNK_SAMPLES
        chunks = [x[i * CHUNK_SAMPLES:(i + 1) * CHUNK_SAMPLES] for i in range(n)]
    return [Example(frame(c), clip.labels.copy(), clip.source_id) for c in chunks]


def frame(samples: np.ndarray) -> np.ndarray:
    """Cut 16000 samples into 40 non-overlapping rectangular 25 ms frames."""
    x = np.asarray(samples)
    if x.shape != (CHUNK_SAMPLES,):
        raise ContractError(f"frame needs exactly {CHUNK_SAMPLES} samples, got shape {x.shape}")
    return x.reshape(NUM_FRAMES, FRAME_LEN).copy()


def stack_examples(clips: Sequence[AudioClip]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frames ``[N, 40, 400]``, targets ``[N, L]`` and owning clip index per chunk."""
    frames, targets, owner = [], [], []
    for i, clip in enumerate(clips):
        for ex in chunk_clip(clip):
            frames.append(ex.frames)
            targets.append(ex.target)
            owner.append(i)
    if not frames:
        raise ContractError("no examples to stack")
    return np.stack(frames), np.stack(targets), np.asarray(owner)


# -- manifests ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    path: str
    labels: tuple[str, ...]
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    vocabulary: list[str]
    root: Path = Path(".")

    @property
    def label_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.vocabulary)}

    def select(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def multi_hot(self, row: ManifestRow) -> np.ndarray:
        vec = np.zeros(len(self.vocabulary), dtype=np.float32)
        index = self.label_index
        for name in row.labels:
            vec[index[name]] = 1.0
        return vec

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p


SPLITS = ("train", "val", "eval")
SIMPLE_HEADER = ["path", "labels", "split"]
FSD50K_HEADER = ["fname", "labels", "mids", "split"]


def load_manifest(path, format: str = "simple") -> Manifest:
    """Parse a manifest CSV; the vocabulary is the sorted union of labels."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}: line 1: empty manifest") from None
    header = [h.strip() for h in header]
    if format == "simple":
        if header != SIMPLE_HEADER:
            raise ManifestError(f"{path}: line 1: expected header {','.join(SIMPLE_HEADER)}, got {header}")
        label_sep = ";"
    elif format == "fsd50k":
        # the FSD50K eval.csv has no split column
        if header not in (FSD50K_HEADER, FSD50K_HEADER[:3]):
            raise ManifestError(f"{path}: line 1: expected header {','.join(FSD50K_HEADER)}, got {header}")
        label_sep = ","
    else:
        raise ManifestError(f"unknown manifest format {format!r}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise ManifestError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
        cells = dict(zip(header, rec))
        labels = tuple(s.strip() for s in cells["labels"].split(label_sep) if s.strip())
        if not labels:
            raise ManifestError(f"{path}: line {lineno}: empty label field")
        if format == "simple":
            file_path, split = cells["path"].strip(), cells["split"].strip()
        else:
            fname = cells["fname"].strip()
            file_path = fname if fname.lower().endswith(".wav") else fname + ".wav"
            split = cells.get("split", "eval").strip() or "eval"
        if split not in SPLITS:
            raise ManifestError(f"{path}: line {lineno}: unknown split {split!r}")
        rows.append(ManifestRow(file_path, labels, split))
    vocabulary = sorted({name for r in rows for name in r.labels})
    return Manifest(rows, vocabulary, path.parent)


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    """Write the simple manifest layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIMPLE_HEADER)
        for r in rows:
            w.writerow([r.path, ";".join(r.labels), r.split])


def load_clips(manifest: Manifest, split: str, vocabulary: Sequence[str] | None = None) -> list[AudioClip]:
    """Decode and resample every row of ``split`` into 16 kHz clips.

    ``vocabulary`` fixes label indices (e.g. to match a trained model);
    it defaults to the manifest's own vocabulary.
    """
    vocab = list(vocabulary) if vocabulary is not None else manifest.vocabulary
    index = {name: i for i, name in enumerate(vocab)}
    clips = []
    for row in manifest.select(split):
        raw = decode_wav(manifest.resolve(row))
        labels = np.zeros(len(vocab), dtype=np.float32)
        for name in row.labels:
            if name not in index:
                raise ManifestError(f"label {name!r} of {row.path} not in vocabulary")
            labels[index[name]] = 1.0
        clips.append(AudioClip(resample(raw.samples, raw.rate), labels, row.path))
    logger.info("loaded %d clips for split %s", len(clips), split)
    return clips


# -- synthetic task ------------------------------------------------------------------------

SYNTH_CLASSES = ("0_tone", "1_chirp", "2_noise", "3_am_tone")


def _synth_one(cls: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    if cls == 0:
        f = rng.uniform(200.0, 2000.0)
        x = 0.5 * np.sin(2 * np.pi * f * t + phase)
        meta = {"frequency": f}
    elif cls == 1:
        f0, f1 = 200.0, 4000.0
        x = 0.5 * np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t) + phase)
        meta = {}
    elif cls == 2:
        x = np.clip(rng.normal(0.0, 0.25, size=t.size), -1.0, 1.0)
        meta = {}
    else:
        f = rng.uniform(200.0, 2000.0)
        fm = rng.uniform(4.0, 8.0)
        envelope = 0.5 + 0.5 * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
        x = 0.5 * envelope * np.sin(2 * np.pi * f * t + phase)
        meta = {"frequency": f, "modulation": fm}
    return x.astype(np.float32), {"class": cls, **meta}


def synth_dataset(n_per_class: int, seed: int, prefix: str = "synth") -> list[AudioClip]:
    """Four-class 1 s clips: tone, linear chirp, white noise, AM tone."""
    if n_per_class < 1:
        raise ContractError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    clips = []
    for cls, name in enumerate(SYNTH_CLASSES):
        for i in range(n_per_class):
            samples, meta = _synth_one(cls, rng)
            labels = np.zeros(len(SYNTH_CLASSES), dtype=np.float32)
            labels[cls] = 1.0
            clips.append(AudioClip(samples, labels, f"{prefix}_{name}_{i:04d}", meta))
    return clips
