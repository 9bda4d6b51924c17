"""Log mel filterbank features."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .audio_io import AudioBuffer, FrameSpec, frame_signal
from .errors import DegenerateFilter
from .features import FeatureMatrix

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 40
    n_fft: int = 512
    f_min: float = 20.0
    f_max: float = 7600.0
    window: str = "hann"

    def validate(self, sample_rate: int) -> None:
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")
        if not 0 <= self.f_min < self.f_max <= sample_rate / 2:
            raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=16)
def _filterbank(cfg: MelConfig, sample_rate: int) -> np.ndarray:
    cfg.validate(sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    bins = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) == 0)
    if empty.size:
        raise DegenerateFilter(
            f"{empty.size} of {cfg.n_mels} mel filters cover no FFT bin "
            f"(n_fft={cfg.n_fft}); lower n_mels or raise n_fft")
    weights.setflags(write=False)
    return weights


def mel_filterbank_matrix(cfg: MelConfig = MelConfig(), sample_rate: int = 16000) -> np.ndarray:
    """Triangular HTK-style mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    return _filterbank(cfg, sample_rate)


def power_spectrum(frames: np.ndarray, cfg: MelConfig) -> np.ndarray:
    win = get_window(cfg.window, frames.shape[1])
    spec = np.fft.rfft(frames * win, n=cfg.n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_spectrogram(buf: AudioBuffer, frame: FrameSpec = FrameSpec(),
                    cfg: MelConfig = MelConfig()) -> FeatureMatrix:
    frames = frame_signal(buf, frame)
    fb = mel_filterbank_matrix(cfg, buf.sample_rate)
    energies = power_spectrum(frames, cfg) @ fb.T
    return FeatureMatrix(np.log(LOG_FLOOR + energies),
                         tuple(f"fb{i}" for i in range(cfg.n_mels)))
