"""WAV reading/writing, manifests and framing of 16 kHz mono audio."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import CorruptHeader, DataError, EmptySignal, UnsupportedFormat

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedFormat("audio must be mono (1-d samples)")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    window_length: float = 0.025
    hop_length: float = 0.010

    def __post_init__(self):
        if not self.window_length > self.hop_length > 0:
            raise ValueError("need window_length > hop_length > 0")

    def window_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.window_length * sample_rate))

    def hop_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.hop_length * sample_rate))

    def frame_count(self, n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
        win = self.window_samples(sample_rate)
        if n_samples < win:
            return 0
        return 1 + (n_samples - win) // self.hop_samples(sample_rate)


def read_wav(path: str | os.PathLike) -> AudioBuffer:
    """Read a 16-bit mono PCM WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        msg = str(e)
        if "unknown format" in msg:
            raise UnsupportedFormat(f"{path}: {msg}") from e
        raise CorruptHeader(f"{path}: {msg}") from e
    except EOFError as e:
        raise CorruptHeader(f"{path}: truncated header") from e

    if channels != 1:
        raise UnsupportedFormat(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, expected 16-bit")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if len(raw) % 2:
        raise CorruptHeader(f"{path}: odd payload length")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / PCM_SCALE, rate)


def write_wav(path: str | os.PathLike, buf: AudioBuffer) -> None:
    pcm = np.clip(np.round(buf.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(buf.sample_rate)
        f.writeframes(pcm.tobytes())


def frame_signal(buf: AudioBuffer, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Slice ``buf`` into overlapping analysis windows.

    Returns an array of shape (n_frames, window_samples). Frame ``i`` covers
    samples ``[i*hop, i*hop + window)``; a trailing partial window is dropped.
    """
    win = spec.window_samples(buf.sample_rate)
    hop = spec.hop_samples(buf.sample_rate)
    n = spec.frame_count(len(buf.samples), buf.sample_rate)
    if n == 0:
        raise EmptySignal(f"{len(buf.samples)} samples do not fill one {win}-sample window")
    view = np.lib.stride_tricks.sliding_window_view(buf.samples, win)[::hop]
    return np.ascontiguousarray(view[:n])


class ManifestEntry(NamedTuple):
    id: str
    audio_path: str
    transcript: str


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Read a headerless ``id<TAB>audio_path<TAB>transcript`` TSV.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns")
            uid, audio, text = parts
            if not os.path.isabs(audio):
                audio = str(path.parent / audio)
            entries.append(ManifestEntry(uid, audio, text))
    return entries


def write_manifest(path: str | os.PathLike, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.id}\t{e.audio_path}\t{e.transcript}\n")
