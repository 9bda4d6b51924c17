"""Feature matrices and the on-disk ``VQFB`` feature file format.

File layout (all little-endian)::

    magic      4 bytes  b"VQFB"
    version    u16
    n_frames   u32
    n_channels u16
    labels     n_channels x (u16 byte length + UTF-8 bytes)
    payload    n_frames * n_channels float32, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptHeader, DataError

MAGIC = b"VQFB"
VERSION = 1


@dataclass
class FeatureMatrix:
    data: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError("feature matrix must be 2-d (frames x channels)")
        if not self.labels:
            self.labels = tuple(f"c{i}" for i in range(self.data.shape[1]))
        self.labels = tuple(self.labels)
        if len(self.labels) != self.data.shape[1]:
            raise DataError("one label per channel required")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("channel labels must be unique")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        if self.n_frames != other.n_frames:
            raise DataError(f"frame counts differ: {self.n_frames} vs {other.n_frames}")
        return FeatureMatrix(np.hstack([self.data, other.data]), self.labels + other.labels)


def write_feature_file(path: str | os.PathLike, feats: FeatureMatrix) -> None:
    header = [MAGIC, struct.pack("<HIH", VERSION, feats.n_frames, feats.n_channels)]
    for label in feats.labels:
        raw = label.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
    payload = np.ascontiguousarray(feats.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"".join(header))
        f.write(payload)


def read_feature_file(path: str | os.PathLike) -> FeatureMatrix:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CorruptHeader(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, n_frames, n_channels = struct.unpack_from("<HIH", blob, 4)
        if version != VERSION:
            raise CorruptHeader(f"{path}: unsupported version {version}")
        pos = 12
        labels = []
        for _ in range(n_channels):
            (size,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            labels.append(blob[pos:pos + size].decode("utf-8"))
            pos += size
    except struct.error as e:
        raise CorruptHeader(f"{path}: truncated header") from e
    expected = n_frames * n_channels * 4
    if len(blob) - pos != expected:
        raise CorruptHeader(f"{path}: payload is {len(blob) - pos} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=pos).reshape(n_frames, n_channels)
    return FeatureMatrix(data.astype(np.float64), tuple(labels))
