import struct
import wave

import numpy as np
import pytest

from vqasr.audio_io import (AudioBuffer, FrameSpec, ManifestEntry, frame_signal, read_manifest,
                            read_wav, write_manifest, write_wav)
from vqasr.errors import CorruptHeader, EmptySignal, UnsupportedFormat


def _write_pcm(path, samples, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(np.asarray(samples, dtype="<i2").tobytes())


class TestReadWav:
    def test_half_scale_sample(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", [16384])
        buf = read_wav(tmp_path / "a.wav")
        assert buf.sample_rate == 16000
        assert buf.samples.tolist() == [0.5]

    def test_range_endpoints(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", [0, -32768])
        assert read_wav(tmp_path / "a.wav").samples.tolist() == [0.0, -1.0]

    def test_stereo_rejected(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", [1, 2, 3, 4], channels=2)
        with pytest.raises(UnsupportedFormat):
            read_wav(tmp_path / "a.wav")

    def test_8bit_rejected(self, tmp_path):
        with wave.open(str(tmp_path / "a.wav"), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(1)
            f.setframerate(16000)
            f.writeframes(bytes([128, 130]))
        with pytest.raises(UnsupportedFormat):
            read_wav(tmp_path / "a.wav")

    def test_float_wav_rejected(self, tmp_path):
        data = struct.pack("<f", 0.5)
        fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
        blob = (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)) + b"WAVE"
                + b"fmt " + struct.pack("<I", len(fmt)) + fmt
                + b"data" + struct.pack("<I", len(data)) + data)
        (tmp_path / "f.wav").write_bytes(blob)
        with pytest.raises(UnsupportedFormat):
            read_wav(tmp_path / "f.wav")

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(CorruptHeader):
            read_wav(tmp_path / "bad.wav")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "absent.wav")

    def test_round_trip_within_one_lsb(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.99, 0.99, 5000)
        write_wav(tmp_path / "r.wav", AudioBuffer(x))
        y = read_wav(tmp_path / "r.wav").samples
        assert np.max(np.abs(x - y)) <= 1 / 32768


class TestFrameSignal:
    def test_one_second(self):
        frames = frame_signal(AudioBuffer(np.zeros(16000)))
        assert frames.shape == (98, 400)

    def test_exact_window(self):
        assert frame_signal(AudioBuffer(np.zeros(400))).shape == (1, 400)

    def test_short_signal(self):
        with pytest.raises(EmptySignal):
            frame_signal(AudioBuffer(np.zeros(399)))

    def test_frames_are_exact_slices(self):
        x = np.random.default_rng(1).uniform(-1, 1, 3217)
        frames = frame_signal(AudioBuffer(x))
        for i, frame in enumerate(frames):
            assert np.array_equal(frame, x[i * 160:i * 160 + 400])

    def test_frame_count_formula_random_lengths(self):
        rng = np.random.default_rng(2)
        spec = FrameSpec()
        for n in rng.integers(400, 20000, size=1000):
            assert spec.frame_count(int(n)) == 1 + (int(n) - 400) // 160
        n = 5123
        assert len(frame_signal(AudioBuffer(np.zeros(n)), spec)) == 1 + (n - 400) // 160

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            FrameSpec(0.01, 0.025)


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("u1", "wav/u1.wav", "hello world"),
               ManifestEntry("u2", "/abs/u2.wav", "it's fine")]
    write_manifest(tmp_path / "m.tsv", entries)
    back = read_manifest(tmp_path / "m.tsv")
    assert back[0].audio_path == str(tmp_path / "wav/u1.wav")
    assert back[1] == entries[1]
