"""Pitch and voice-quality features: F0, POV, delta F0, local jitter and shimmer.

Per-frame values are computed on the same 25 ms / 10 ms grid as the filterbank
features. Frames without a measurement (unvoiced, or too few glottal cycles for
jitter/shimmer) are filled by interpolation from their voiced neighbours, the
pitch track is log-compressed, and F0/jitter/shimmer are smoothed with a
151-frame centred running mean before the delta is taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer, FrameSpec, frame_signal
from .errors import TooFewCycles, TooShort, ZeroAmplitude
from .features import FeatureMatrix

PROSODY_CHANNELS = ("f0", "pov", "delta_f0", "jitter", "shimmer")
PITCH_SELECTION = frozenset({"f0", "pov", "delta_f0"})
VOICE_QUALITY_SELECTION = frozenset({"jitter", "shimmer"})

FALLBACK_F0 = 100.0
FALLBACK_VOICE_QUALITY = 0.0
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class PitchConfig:
    floor: float = 75.0
    ceiling: float = 600.0
    voicing_threshold: float = 0.45
    smoothing_window: int = 151
    # Penalty per octave of lag, favours the shortest period among near-equal peaks.
    octave_cost: float = 0.1

    def __post_init__(self):
        if not 0 < self.floor < self.ceiling:
            raise ValueError("need 0 < floor < ceiling")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be a positive odd number")


@dataclass
class CycleMarks:
    period_starts: np.ndarray
    peak_amplitudes: np.ndarray

    def __post_init__(self):
        self.period_starts = np.asarray(self.period_starts, dtype=np.float64)
        self.peak_amplitudes = np.asarray(self.peak_amplitudes, dtype=np.float64)
        if np.any(np.diff(self.period_starts) <= 0):
            raise ValueError("period_starts must be strictly increasing")
        if len(self.peak_amplitudes) != len(self.period_starts):
            raise ValueError("one peak amplitude per cycle mark required")

    @property
    def periods(self) -> np.ndarray:
        return np.diff(self.period_starts)


@dataclass
class ProsodyTrack:
    f0: np.ndarray
    pov: np.ndarray
    delta_f0: np.ndarray
    jitter: np.ndarray
    shimmer: np.ndarray
    voiced_mask: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)


def normalized_autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """r[f, lag] = sum x[n]x[n+lag] / sqrt(sum x[n]^2 * sum x[n+lag]^2) over the overlap."""
    frames = np.atleast_2d(frames)
    n = frames.shape[1]
    x = frames - frames.mean(axis=1, keepdims=True)
    spec = np.fft.rfft(x, n=2 * n, axis=1)
    ac = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, n=2 * n, axis=1)[:, :max_lag + 1]
    csum = np.cumsum(x ** 2, axis=1)
    lags = np.arange(max_lag + 1)
    head = csum[:, n - 1 - lags]  # energy of x[0 : n-lag]
    tail = csum[:, -1:] - np.where(lags > 0, csum[:, np.maximum(lags - 1, 0)], 0.0)
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-20, ac / denom, 0.0)
    return r


def _parabolic(y_prev, y0, y_next):
    """Vertex offset and height of the parabola through three equally spaced points."""
    curvature = y_prev - 2.0 * y0 + y_next
    if curvature >= 0:
        return 0.0, y0
    offset = 0.5 * (y_prev - y_next) / curvature
    return offset, y0 - 0.25 * (y_prev - y_next) * offset


def estimate_f0(frames: np.ndarray, cfg: PitchConfig = PitchConfig(),
                sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray]:
    """Autocorrelation pitch estimate per frame.

    Returns ``(raw_f0, voiced_mask)``; unvoiced frames carry NaN in ``raw_f0``.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n = frames.shape[1]
    min_lag = max(2, int(np.floor(sample_rate / cfg.ceiling)))
    max_lag = min(int(np.ceil(sample_rate / cfg.floor)), n - 3)
    r = normalized_autocorrelation(frames, max_lag + 1)

    f0 = np.full(len(frames), np.nan)
    voiced = np.zeros(len(frames), dtype=bool)
    lags = np.arange(min_lag, max_lag + 1)
    for i, ri in enumerate(r):
        seg = ri[min_lag:max_lag + 1]
        is_peak = (seg > ri[min_lag - 1:max_lag]) & (seg >= ri[min_lag + 1:max_lag + 2])
        if not is_peak.any():
            continue
        cand = lags[is_peak]
        strength = ri[cand] - cfg.octave_cost * np.log2(cand / min_lag)
        best = cand[np.argmax(strength)]
        if ri[best] < cfg.voicing_threshold:
            continue
        offset, _ = _parabolic(ri[best - 1], ri[best], ri[best + 1])
        f0[i] = np.clip(sample_rate / (best + offset), 0.9 * cfg.floor, 1.1 * cfg.ceiling)
        voiced[i] = True
    return f0, voiced


def mark_cycles(window: np.ndarray, f0: float, sample_rate: int = 16000) -> CycleMarks:
    """Locate successive waveform maxima spaced about one period apart.

    Marking starts at the largest interior maximum of the window and proceeds
    in both directions; each further mark is searched within +-25% of the
    nominal period from its neighbour. Positions and heights are refined by
    parabolic interpolation, so marks are fractional sample indices.
    """
    x = np.asarray(window, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise TooFewCycles("window too short")
    period = sample_rate / f0

    def is_peak(i):
        return x[i] >= x[i - 1] and x[i] >= x[i + 1]

    def refine(i):
        offset, height = _parabolic(x[i - 1], x[i], x[i + 1])
        return i + offset, abs(height)

    anchor = 1 + int(np.argmax(x[1:n - 1]))
    if not is_peak(anchor):
        raise TooFewCycles("no interior waveform maximum")
    marks = [refine(anchor)]
    for direction in (1, -1):
        pos = marks[0][0]
        found = []
        while True:
            a = pos + direction * 0.75 * period
            b = pos + direction * 1.25 * period
            lo, hi = int(np.ceil(min(a, b))), int(np.floor(max(a, b)))
            lo, hi = max(lo, 1), min(hi, n - 2)
            if hi < lo:
                break
            i = lo + int(np.argmax(x[lo:hi + 1]))
            if not is_peak(i):
                # Maximum sits on a clipped search edge, not a real peak.
                break
            pos, height = refine(i)
            found.append((pos, height))
        marks = marks + found if direction == 1 else found[::-1] + marks

    if len(marks) < 3:
        raise TooFewCycles(f"only {len(marks)} cycle marks fit in {n} samples at {f0:.1f} Hz")
    positions, heights = zip(*marks)
    return CycleMarks(np.array(positions), np.array(heights))


def local_jitter(marks: CycleMarks) -> float:
    periods = marks.periods
    if len(periods) < 2:
        raise TooFewCycles("local jitter needs at least two periods")
    return float(np.mean(np.abs(np.diff(periods))) / np.mean(periods))


def local_shimmer(marks: CycleMarks) -> float:
    amps = marks.peak_amplitudes
    if len(amps) < 2:
        raise TooFewCycles("local shimmer needs at least two cycles")
    mean = np.mean(amps)
    if mean == 0:
        raise ZeroAmplitude("mean peak amplitude is zero")
    return float(np.mean(np.abs(np.diff(amps))) / mean)


def frame_voice_quality(frames: np.ndarray, raw_f0: np.ndarray, voiced_mask: np.ndarray,
                        sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame local jitter and shimmer; NaN where no measurement exists."""
    jitter = np.full(len(frames), np.nan)
    shimmer = np.full(len(frames), np.nan)
    for t in np.flatnonzero(voiced_mask):
        try:
            marks = mark_cycles(frames[t], raw_f0[t], sample_rate)
            jitter[t] = local_jitter(marks)
            shimmer[t] = local_shimmer(marks)
        except (TooFewCycles, ZeroAmplitude):
            pass
    return jitter, shimmer


def interpolate_unvoiced(track: np.ndarray, mask: np.ndarray | None = None,
                         fallback: float = FALLBACK_F0) -> np.ndarray:
    """Fill frames where ``mask`` is False from the adjacent valid values.

    Interior gaps are linearly interpolated, leading/trailing gaps copy the
    nearest valid value, and a track with no valid frame becomes ``fallback``.
    """
    track = np.asarray(track, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(track)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != track.shape:
        raise ValueError("track and mask must have the same length")
    if not mask.any():
        return np.full(track.shape, float(fallback))
    t = np.arange(len(track))
    return np.interp(t, t[mask], track[mask])


def smooth_track(track: np.ndarray, window: int = 151) -> np.ndarray:
    """Centred running mean, truncating the window at the track edges."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd number")
    x = np.asarray(track, dtype=np.float64)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    t = np.arange(len(x))
    lo = np.maximum(t - half, 0)
    hi = np.minimum(t + half + 1, len(x))
    return (csum[hi] - csum[lo]) / (hi - lo)


def delta(track: np.ndarray) -> np.ndarray:
    x = np.asarray(track, dtype=np.float64)
    if len(x) < 2:
        return np.zeros_like(x)
    return np.gradient(x)


def cmvn(features: FeatureMatrix) -> FeatureMatrix:
    """Per-channel mean and variance normalisation over the utterance."""
    if features.n_frames < 2:
        raise TooShort(f"CMVN needs at least 2 frames, got {features.n_frames}")
    x = features.data
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return FeatureMatrix((x - x.mean(axis=0)) / std, features.labels)


def random_features(n_frames: int, n_feats: int = 3, seed: int = 0) -> FeatureMatrix:
    """Control features drawn i.i.d. from Uniform[0, 10)."""
    rng = np.random.default_rng(seed)
    return FeatureMatrix(rng.uniform(0.0, 10.0, size=(n_frames, n_feats)),
                         tuple(f"rand{i}" for i in range(n_feats)))


def compute_prosody_track(buf: AudioBuffer, frame: FrameSpec = FrameSpec(),
                          cfg: PitchConfig = PitchConfig()) -> ProsodyTrack:
    frames = frame_signal(buf, frame)
    raw_f0, voiced = estimate_f0(frames, cfg, buf.sample_rate)
    raw_jitter, raw_shimmer = frame_voice_quality(frames, raw_f0, voiced, buf.sample_rate)

    f0 = np.log(interpolate_unvoiced(raw_f0, voiced, FALLBACK_F0))
    jitter = interpolate_unvoiced(raw_jitter, np.isfinite(raw_jitter), FALLBACK_VOICE_QUALITY)
    shimmer = interpolate_unvoiced(raw_shimmer, np.isfinite(raw_shimmer), FALLBACK_VOICE_QUALITY)

    f0 = smooth_track(f0, cfg.smoothing_window)
    jitter = smooth_track(jitter, cfg.smoothing_window)
    shimmer = smooth_track(shimmer, cfg.smoothing_window)
    return ProsodyTrack(
        f0=f0,
        pov=np.where(voiced, 1.0, -1.0),
        delta_f0=delta(f0),
        jitter=jitter,
        shimmer=shimmer,
        voiced_mask=voiced,
    )


def canonical_selection(selection) -> tuple[str, ...]:
    selection = set(selection)
    unknown = selection - set(PROSODY_CHANNELS)
    if unknown:
        raise ValueError(f"unknown prosodic features: {sorted(unknown)}")
    if not selection:
        raise ValueError("selection must name at least one prosodic feature")
    return tuple(name for name in PROSODY_CHANNELS if name in selection)


def extract_prosody(buf: AudioBuffer, frame: FrameSpec = FrameSpec(),
                    cfg: PitchConfig = PitchConfig(), selection=PROSODY_CHANNELS) -> FeatureMatrix:
    """Selected prosodic columns (frames x M) in canonical order, without CMVN."""
    names = canonical_selection(selection)
    track = compute_prosody_track(buf, frame, cfg)
    return FeatureMatrix(np.column_stack([track.column(n) for n in names]), names)
