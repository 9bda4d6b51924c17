"""Feature selections and per-utterance feature extraction."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

from .audio_io import AudioBuffer, FrameSpec
from .features import FeatureMatrix
from .prosody import (PITCH_SELECTION, VOICE_QUALITY_SELECTION, PitchConfig, canonical_selection, cmvn,
                      extract_prosody, random_features)
from .spectral import MelConfig, mel_spectrogram



@dataclass(frozen=True)
class FeatureSelection:
    """Spectral channel count plus the prosodic (or random control) channels."""

    n_mels: int = 40
    prosody: tuple[str, ...] = ()
    random: int = 0

    @classmethod
    def parse(cls, text: str) -> "FeatureSelection":
        """Parse names like ``FB40``, ``FB+Rand``, ``FB80+Pitch+J+S``."""
        m = re.fullmatch(r"FB(\d*)((?:\+.*)?)", text.strip(), flags=re.IGNORECASE)
        if not m:
            raise ValueError(f"feature selection must start with FB: {text!r}")
        n_mels = int(m.group(1) or 40)
        rest = m.group(2).lower().lstrip("+")
        names: set[str] = set()
        n_random = 0
        # "J+S" contains the separator, so match it before splitting.
        rest = rest.replace("j+s", "js")
        for part in filter(None, rest.split("+")):
            if part == "rand":
                n_random = 3
            elif part == "pitch":
                names |= PITCH_SELECTION
            elif part == "js":
                names |= VOICE_QUALITY_SELECTION
            elif part in ("f0", "pov", "delta_f0", "jitter", "shimmer"):
                names.add(part)
            else:
                raise ValueError(f"unknown feature group {part!r} in {text!r}")
        if n_random and names:
            raise ValueError("Rand is a control condition and excludes prosodic features")
        return cls(n_mels, canonical_selection(names) if names else (), n_random)

    @property
    def M(self) -> int:
        return len(self.prosody) + self.random

    @property
    def n_channels(self) -> int:
        return self.n_mels + self.M

    @property
    def needs_precompute(self) -> bool:
        return bool(self.prosody)

    def __str__(self) -> str:
        parts = [f"FB{self.n_mels}"]
        if self.random:
            parts.append("Rand")
        names = set(self.prosody)
        if PITCH_SELECTION <= names:
            parts.append("Pitch")
            names -= PITCH_SELECTION
        if VOICE_QUALITY_SELECTION <= names:
            parts.append("J+S")
            names -= VOICE_QUALITY_SELECTION
        parts.extend(n for n in self.prosody if n in names)
        return "+".join(parts)


def utterance_seed(uid: str, seed: int = 0) -> int:
    return zlib.crc32(uid.encode("utf-8")) ^ (seed & 0xFFFFFFFF)


def extract_features(buf: AudioBuffer, selection: FeatureSelection, uid: str = "",
                     frame: FrameSpec = FrameSpec(), pitch: PitchConfig = PitchConfig(),
                     seed: int = 0) -> FeatureMatrix:
    """Spectral plus selected extra channels, CMVN-normalised jointly."""
    feats = mel_spectrogram(buf, frame, MelConfig(n_mels=selection.n_mels))
    if selection.prosody:
        feats = feats.hstack(extract_prosody(buf, frame, pitch, selection.prosody))
    if selection.random:
        feats = feats.hstack(random_features(feats.n_frames, selection.random,
                                             utterance_seed(uid, seed)))
    return cmvn(feats)
