"""Synthetic test signals and a small toy corpus for desk-scale experiments."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, ManifestEntry, write_manifest, write_wav

SAMPLE_RATE = 16000


def sine(freq: float, duration: float = 1.0, amplitude: float = 0.5,
         sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq * t), sample_rate)


def pulse_train(periods, amplitudes=None, width: float = 8.0, start: float = 20.0,
                sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Gaussian pulses placed at fractional sample positions.

    ``periods`` gives the spacing (in samples) between consecutive pulses and
    ``amplitudes`` the peak height of each pulse (one more than ``periods``).
    """
    periods = np.asarray(periods, dtype=np.float64)
    centers = start + np.concatenate([[0.0], np.cumsum(periods)])
    if amplitudes is None:
        amplitudes = np.full(len(centers), 0.5)
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    n = int(np.ceil(centers[-1] + start))
    t = np.arange(n)
    out = np.zeros(n)
    reach = int(6 * width)
    for c, a in zip(centers, amplitudes):
        lo, hi = max(0, int(c) - reach), min(n, int(c) + reach + 1)
        out[lo:hi] += a * np.exp(-0.5 * ((t[lo:hi] - c) / width) ** 2)
    return AudioBuffer(out, sample_rate)


def _scaled_perturbation(n: int, target: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean perturbations e with mean|diff(1 + e)| / mean(1 + e) == target."""
    e = rng.standard_normal(n)
    e -= e.mean()
    return e * target / np.mean(np.abs(np.diff(e)))


def jittered_pulse_train(f0: float, jitter: float, duration: float = 1.0, seed: int = 0,
                         sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Pulse train whose period sequence has local jitter exactly ``jitter``."""
    period = sample_rate / f0
    n = int(duration * f0)
    rng = np.random.default_rng(seed)
    return pulse_train(period * (1 + _scaled_perturbation(n, jitter, rng)),
                       sample_rate=sample_rate)


def shimmered_pulse_train(f0: float, shimmer: float, duration: float = 1.0, seed: int = 0,
                          amplitude: float = 0.5, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Pulse train whose peak heights have local shimmer exactly ``shimmer``."""
    period = sample_rate / f0
    n = int(duration * f0)
    rng = np.random.default_rng(seed)
    amps = amplitude * (1 + _scaled_perturbation(n + 1, shimmer, rng))
    return pulse_train(np.full(n, period), amps, sample_rate=sample_rate)


# Each letter gets a pitch and a two-formant timbre; words are separated by
# short pauses, so transcripts are recoverable from the audio.
_LETTERS = "abcdefghijklmnopqrstuvwxyz'"


def _letter_segment(ch: str, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    k = _LETTERS.index(ch)
    f0 = 90.0 + 9.0 * k
    f1 = 300.0 + 110.0 * (k % 9)
    f2 = 1200.0 + 350.0 * (k // 3)
    dur = 0.09
    n = int(dur * sample_rate)
    t = np.arange(n) / sample_rate
    phase = 2 * np.pi * np.cumsum(np.full(n, f0 * (1 + 0.01 * rng.standard_normal()))) / sample_rate
    src = np.zeros(n)
    for h in range(1, int(4000 / f0)):
        f = h * f0
        gain = 1.0 / (1 + ((f - f1) / 150.0) ** 2) + 0.6 / (1 + ((f - f2) / 200.0) ** 2)
        src += gain * np.sin(h * phase)
    env = np.minimum(1.0, np.minimum(t, dur - t) / 0.01)
    return env * src


def synthesize_utterance(text: str, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    pieces = [np.zeros(int(0.05 * sample_rate))]
    for ch in text.lower():
        if ch == " ":
            pieces.append(np.zeros(int(0.06 * sample_rate)))
        elif ch in _LETTERS:
            pieces.append(_letter_segment(ch, rng, sample_rate))
    pieces.append(np.zeros(int(0.05 * sample_rate)))
    x = np.concatenate(pieces)
    x += 1e-3 * rng.standard_normal(len(x))
    x *= 0.5 / max(1e-9, np.max(np.abs(x)))
    return AudioBuffer(x, sample_rate)


TOY_WORDS = ("cat", "dog", "sun", "red", "big", "run", "hat", "sky", "one", "two",
             "fox", "owl", "bee", "sea", "map", "pen", "cup", "egg", "jam", "kit")


def toy_transcripts(n: int = 20, seed: int = 0, words_per_utt: int = 2) -> list[str]:
    rng = np.random.default_rng(seed)
    return [" ".join(rng.choice(TOY_WORDS, size=words_per_utt, replace=False)) for _ in range(n)]


def make_toy_corpus(out_dir: str | os.PathLike, n: int = 20, seed: int = 0,
                    words_per_utt: int = 2) -> Path:
    """Write ``n`` synthetic utterances plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, text in enumerate(toy_transcripts(n, seed, words_per_utt)):
        uid = f"toy{i:03d}"
        path = out / "wav" / f"{uid}.wav"
        write_wav(path, synthesize_utterance(text, seed=seed * 1000 + i))
        entries.append(ManifestEntry(uid, f"wav/{uid}.wav", text))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def main(argv=None) -> int:
    import argparse

    p = argparse.ArgumentParser(prog="python -m vqasr.synth",
                                description="Write a synthetic toy corpus with a manifest.")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--words", type=int, default=2, help="words per utterance")
    args = p.parse_args(argv)
    print(make_toy_corpus(args.out_dir, args.n, args.seed, args.words))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
