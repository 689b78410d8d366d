"""Speech corpus ingestion: WAV I/O, manifests, speaker registry, splits and chunking.

A manifest is a UTF-8 JSON-lines file, one utterance per line::

    {"path": "spk1/001.wav", "speaker": "spk1", "alignment": "spk1/001.phn"}

Relative paths are resolved against the manifest's directory. The train/test
split is computed from a seed, never stored (an optional ``"split"`` key may
pin a row to ``train`` or ``test``).

Alignment files follow the TIMIT ``.phn`` convention: ``start end label`` per
line, in samples of the audio file's own clock, half-open ``[start, end)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 22050
PEAK_LEVEL = 0.95
SPLITS = ("train", "test")


class CorpusError(ValueError):
    """Malformed manifest, audio or alignment input."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise CorpusError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if len(self.samples) < 1:
            raise CorpusError("waveform must contain at least one sample")
        if int(self.sample_rate) <= 0:
            raise CorpusError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


class SpeakerRegistry:
    """Ordered, immutable list of speaker ids; position defines the one-hot index."""

    def __init__(self, speakers: Iterable[str]):
        speakers = tuple(str(s) for s in speakers)
        if len(set(speakers)) != len(speakers):
            raise CorpusError("speaker ids must be unique")
        self._speakers = speakers
        self._index = {s: i for i, s in enumerate(speakers)}

    @classmethod
    def from_ids(cls, ids: Iterable[str]) -> "SpeakerRegistry":
        return cls(sorted(set(ids)))

    @property
    def speakers(self) -> tuple[str, ...]:
        return self._speakers

    def index(self, speaker: str) -> int:
        try:
            return self._index[speaker]
        except KeyError:
            raise KeyError(
                f"unknown speaker {speaker!r}; known speakers: {', '.join(self._speakers)}"
            ) from None

    def __contains__(self, speaker):
        return speaker in self._index

    def __len__(self):
        return len(self._speakers)

    def __iter__(self):
        return iter(self._speakers)

    def __eq__(self, other):
        return isinstance(other, SpeakerRegistry) and self._speakers == other._speakers

    def __repr__(self):
        return f"SpeakerRegistry({list(self._speakers)!r})"

    def to_json(self) -> list[str]:
        return list(self._speakers)

    def save(self, path):
        Path(path).write_text(json.dumps({"speakers": self.to_json()}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SpeakerRegistry":
        return cls(json.loads(Path(path).read_text())["speakers"])


@dataclass
class PhonemeAlignment:
    """Half-open phoneme intervals ``(start, end, label)`` in samples at ``sample_rate``."""

    intervals: list[tuple[int, int, str]]
    sample_rate: int

    def __post_init__(self):
        prev_end = None
        for start, end, label in self.intervals:
            if end <= start:
                raise CorpusError(f"interval {start}-{end} {label!r} has end <= start")
            if prev_end is not None and start < prev_end:
                raise CorpusError(f"interval {start}-{end} {label!r} overlaps its predecessor")
            prev_end = end

    @property
    def labels(self) -> list[str]:
        return [lab for _, _, lab in self.intervals]

    def rescale(self, target_rate: int) -> "PhonemeAlignment":
        if target_rate == self.sample_rate:
            return PhonemeAlignment(list(self.intervals), self.sample_rate)
        ratio = target_rate / self.sample_rate
        out = []
        for start, end, label in self.intervals:
            s, e = int(round(start * ratio)), int(round(end * ratio))
            if e > s:
                out.append((s, e, label))
        return PhonemeAlignment(out, target_rate)


def read_alignment(path, sample_rate: int) -> PhonemeAlignment:
    intervals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 'start end label', got {line!r}")
        intervals.append((int(parts[0]), int(parts[1]), parts[2]))
    intervals.sort(key=lambda iv: iv[0])
    return PhonemeAlignment(intervals, sample_rate)


def write_alignment(path, alignment: PhonemeAlignment):
    lines = [f"{s} {e} {lab}" for s, e, lab in alignment.intervals]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class UtteranceRecord:
    audio_path: Path
    speaker: str
    split: str
    alignment_path: Optional[Path] = None
    meta: dict = field(default_factory=dict)

    @property
    def utt_id(self) -> str:
        return f"{self.speaker}/{self.audio_path.stem}"


def read_wav(path, mono: bool = True) -> Waveform:
    """Read a PCM16/PCM32/float WAV as float32 in [-1, 1]; stereo is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    if data.ndim == 2 and mono:
        data = data.mean(axis=1)
    return Waveform(data, rate)


def write_wav(path, w: Waveform, pcm16: bool = True):
    x = np.clip(np.nan_to_num(w.samples), -1.0, 1.0)
    if pcm16:
        data = np.round(x * 32767.0).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(path), w.sample_rate, data)


def peak_normalize(w: Waveform, level: float = PEAK_LEVEL) -> Waveform:
    peak = float(np.max(np.abs(w.samples)))
    if peak == 0.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples * (level / peak), w.sample_rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling (Kaiser-windowed sinc) to ``target_rate``."""
    if target_rate is None or int(target_rate) <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    y = signal.resample_poly(w.samples.astype(np.float64), up, down)
    return Waveform(y.astype(np.float32), target_rate)


def chunk(w: Waveform, chunk_len: int, rng: np.random.Generator):
    """Uniformly positioned slice of exactly ``chunk_len`` samples.

    Returns ``(waveform, padded, start)``. Inputs shorter than ``chunk_len`` are
    right-padded with zeros and flagged.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    n = len(w)
    if n < chunk_len:
        out = np.zeros(chunk_len, dtype=np.float32)
        out[:n] = w.samples
        return Waveform(out, w.sample_rate), True, 0
    start = int(rng.integers(0, n - chunk_len + 1))
    return Waveform(w.samples[start:start + chunk_len].copy(), w.sample_rate), False, start


def split_indices(n: int, seed: int, train_frac: float = 0.9) -> np.ndarray:
    """Boolean train mask for ``n`` items: seeded permutation, first round(n*frac) are train."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_frac))
    mask = np.zeros(n, dtype=bool)
    mask[perm[:n_train]] = True
    return mask


def load_manifest(path, seed: int = 0, train_frac: float = 0.9):
    """Parse a JSON-lines manifest into ``(records, registry)``.

    Records are sorted by resolved audio path before the seeded split, so the
    split does not depend on row order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.resolve().parent
    rows = []
    seen = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}:{lineno}: invalid JSON ({e})") from None
        if not isinstance(row, dict) or "path" not in row or "speaker" not in row:
            raise CorpusError(f"{path}:{lineno}: row needs 'path' and 'speaker'")
        audio = (root / row["path"]).resolve()
        if not audio.is_file():
            raise CorpusError(f"{path}:{lineno}: audio file does not exist: {row['path']}")
        if audio in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate path {row['path']} (first at line {seen[audio]})")
        seen[audio] = lineno
        split = row.get("split")
        if split is not None and split not in SPLITS:
            raise CorpusError(f"{path}:{lineno}: unknown split token {split!r}")
        align = row.get("alignment")
        if align is not None:
            align = (root / align).resolve()
            if not align.is_file():
                raise CorpusError(f"{path}:{lineno}: alignment file does not exist: {row['alignment']}")
        rows.append((audio, str(row["speaker"]), split, align))

    rows.sort(key=lambda r: str(r[0]))
    mask = split_indices(len(rows), seed, train_frac)
    records = []
    for (audio, spk, split, align), is_train in zip(rows, mask):
        if split is None:
            split = "train" if is_train else "test"
        records.append(UtteranceRecord(audio, spk, split, align))
    registry = SpeakerRegistry.from_ids(r.speaker for r in records)
    return records, registry


def write_manifest(path, records: Sequence[UtteranceRecord], relative_to=None):
    root = Path(relative_to or Path(path).parent).resolve()
    lines = []
    for r in records:
        row = {
            "path": os.path.relpath(r.audio_path, root),
            "speaker": r.speaker,
            "split": r.split,
            "alignment": os.path.relpath(r.alignment_path, root) if r.alignment_path else None,
        }
        lines.append(json.dumps(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_utterance(record: UtteranceRecord, sample_rate: int = SAMPLE_RATE):
    """Read, resample and peak-normalize one utterance.

    Returns ``(waveform, alignment_or_None)``; the alignment is moved onto the
    model's sample clock.
    """
    w = read_wav(record.audio_path)
    native = w.sample_rate
    w = peak_normalize(resample(w, sample_rate))
    align = None
    if record.alignment_path is not None:
        align = read_alignment(record.alignment_path, native).rescale(sample_rate)
    return w, align
