import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqasr.audio_io import AudioBuffer, frame_signal
from vqasr.errors import TooFewCycles, TooShort, ZeroAmplitude
from vqasr.features import FeatureMatrix
from vqasr.prosody import (CycleMarks, PitchConfig, cmvn, compute_prosody_track, delta,
                           estimate_f0, extract_prosody, frame_voice_quality,
                           interpolate_unvoiced, local_jitter, local_shimmer, mark_cycles,
                           random_features, smooth_track)
from vqasr.synth import jittered_pulse_train, pulse_train, shimmered_pulse_train, sine


class TestEstimateF0:
    @pytest.mark.parametrize("freq", [120.0, 200.0, 350.0])
    def test_sine(self, freq):
        f0, voiced = estimate_f0(frame_signal(sine(freq)))
        assert voiced.all()
        assert np.mean(np.abs(f0 / freq - 1) < 0.02) >= 0.95

    def test_white_noise_mostly_unvoiced(self):
        x = np.random.default_rng(0).normal(0, 0.3, 16000)
        _, voiced = estimate_f0(frame_signal(AudioBuffer(np.clip(x, -1, 1))))
        assert np.mean(~voiced) >= 0.9

    def test_silence_unvoiced(self):
        f0, voiced = estimate_f0(frame_signal(AudioBuffer(np.zeros(8000))))
        assert not voiced.any()
        assert np.isnan(f0).all()

    def test_estimates_within_search_range(self):
        cfg = PitchConfig()
        rng = np.random.default_rng(1)
        for freq in rng.uniform(80, 580, 10):
            f0, voiced = estimate_f0(frame_signal(sine(freq, 0.2)), cfg)
            assert np.all((f0[voiced] >= 0.9 * cfg.floor) & (f0[voiced] <= 1.1 * cfg.ceiling))


class TestMarkCycles:
    def test_pulse_train_spacing(self):
        window = pulse_train(np.full(3, 160.0), start=30.0).samples[:400]
        marks = mark_cycles(window, 100.0)
        assert len(marks.period_starts) == 3
        np.testing.assert_allclose(marks.periods, 160.0, atol=1.0)

    def test_sine_peaks_equal(self):
        window = frame_signal(sine(200.0))[10]
        marks = mark_cycles(window, 200.0)
        amps = marks.peak_amplitudes
        assert np.max(np.abs(amps / amps[0] - 1)) < 1e-3

    def test_too_few_cycles_at_50hz(self):
        window = frame_signal(sine(50.0, 0.1))[0]
        with pytest.raises(TooFewCycles):
            mark_cycles(window, 50.0)


class TestJitterShimmer:
    def test_equal_periods(self):
        assert local_jitter(CycleMarks([0, 160, 320, 480], [1, 1, 1, 1])) == 0.0

    def test_hand_example_jitter(self):
        marks = CycleMarks(np.cumsum([0, 160, 176, 160]), np.ones(4))
        assert local_jitter(marks) == pytest.approx(16 / (496 / 3), abs=1e-12)
        assert local_jitter(marks) == pytest.approx(0.09677, abs=1e-5)

    @pytest.mark.parametrize("scale", [0.5, 2.0, 7.3])
    def test_jitter_scale_invariant(self, scale):
        starts = np.cumsum([0, 160, 176, 151, 170])
        base = local_jitter(CycleMarks(starts, np.ones(5)))
        assert local_jitter(CycleMarks(starts * scale, np.ones(5))) == pytest.approx(base)

    def test_equal_amplitudes(self):
        assert local_shimmer(CycleMarks([0, 1, 2], [0.7, 0.7, 0.7])) == 0.0

    def test_hand_example_shimmer(self):
        value = local_shimmer(CycleMarks([0, 1, 2], [1.0, 0.8, 1.0]))
        assert value == pytest.approx(0.2 / (2.8 / 3), abs=1e-12)
        assert value == pytest.approx(0.2143, abs=1e-4)

    @pytest.mark.parametrize("gain", [0.1, 3.0])
    def test_shimmer_gain_invariant(self, gain):
        amps = np.array([1.0, 0.8, 1.1, 0.95])
        base = local_shimmer(CycleMarks(np.arange(4), amps))
        assert local_shimmer(CycleMarks(np.arange(4), gain * amps)) == pytest.approx(base)

    def test_errors(self):
        with pytest.raises(TooFewCycles):
            local_jitter(CycleMarks([0, 160], [1, 1]))
        with pytest.raises(ZeroAmplitude):
            local_shimmer(CycleMarks([0, 1, 2], [0, 0, 0]))

    @pytest.mark.parametrize("freq", [120.0, 200.0, 350.0])
    def test_sine_has_low_jitter_and_shimmer(self, freq):
        frames = frame_signal(sine(freq))
        f0, voiced = estimate_f0(frames)
        jitter, shimmer = frame_voice_quality(frames, f0, voiced)
        assert np.nanmax(jitter) < 0.01
        assert np.nanmax(shimmer) < 0.01

    @pytest.mark.parametrize("target", [0.01, 0.05])
    @pytest.mark.parametrize("freq", [100.0, 150.0, 200.0])
    def test_injected_jitter_recovered(self, target, freq):
        frames = frame_signal(jittered_pulse_train(freq, target, seed=0))
        f0, voiced = estimate_f0(frames)
        jitter, _ = frame_voice_quality(frames, f0, voiced)
        assert abs(np.nanmean(jitter) / target - 1) < 0.2

    @pytest.mark.parametrize("target", [0.01, 0.05])
    @pytest.mark.parametrize("freq", [100.0, 150.0, 200.0])
    def test_injected_shimmer_recovered(self, target, freq):
        frames = frame_signal(shimmered_pulse_train(freq, target, seed=0))
        f0, voiced = estimate_f0(frames)
        _, shimmer = frame_voice_quality(frames, f0, voiced)
        assert abs(np.nanmean(shimmer) / target - 1) < 0.2


class TestInterpolation:
    def test_linear_fill(self):
        out = interpolate_unvoiced(np.array([100, np.nan, np.nan, 130.0]))
        np.testing.assert_allclose(out, [100, 110, 120, 130])

    def test_edge_extension(self):
        out = interpolate_unvoiced(np.array([np.nan, 100, 100, np.nan]))
        np.testing.assert_allclose(out, [100, 100, 100, 100])

    def test_fallback(self):
        out = interpolate_unvoiced(np.full(5, np.nan), np.zeros(5, bool), fallback=100.0)
        np.testing.assert_array_equal(out, np.full(5, 100.0))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=60))
    def test_never_leaves_gaps(self, mask):
        mask = np.array(mask)
        track = np.where(mask, np.arange(len(mask), dtype=float) + 50, np.nan)
        out = interpolate_unvoiced(track, mask)
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out[mask], track[mask])


class TestSmoothing:
    def test_constant(self):
        np.testing.assert_allclose(smooth_track(np.full(300, 4.2)), 4.2)

    def test_impulse(self):
        x = np.zeros(151)
        x[75] = 1.0
        # Every window reaches the impulse; edge windows are truncated.
        t = np.arange(151)
        count = np.minimum(t + 75, 150) - np.maximum(t - 75, 0) + 1
        np.testing.assert_allclose(smooth_track(x), 1 / count)

    def test_impulse_in_long_track(self):
        x = np.zeros(400)
        x[200] = 1.0
        out = smooth_track(x)
        covered = np.abs(np.arange(400) - 200) <= 75
        np.testing.assert_allclose(out[covered], 1 / 151)
        assert np.all(out[~covered] == 0)

    def test_short_track_truncation(self):
        x = np.random.default_rng(0).normal(size=120)
        out = smooth_track(x)
        spans_all = (np.arange(120) - 75 <= 0) & (np.arange(120) + 75 >= 119)
        np.testing.assert_allclose(out[spans_all], x.mean())
        assert not np.any(np.isclose(out[~spans_all], x.mean(), rtol=0, atol=1e-12))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=300), st.floats(-1e3, 1e3))
    def test_commutes_with_offset(self, values, c):
        x = np.array(values)
        np.testing.assert_allclose(smooth_track(x + c), smooth_track(x) + c, atol=1e-9)


class TestDelta:
    def test_constant(self):
        np.testing.assert_array_equal(delta(np.full(10, 3.0)), 0.0)

    def test_linear(self):
        d = delta(2.5 * np.arange(20) + 1)
        np.testing.assert_allclose(d, 2.5)

    def test_hand_example(self):
        np.testing.assert_array_equal(delta(np.array([0.0, 1.0, 0.0])), [1.0, 0.0, -1.0])

    def test_single_frame(self):
        np.testing.assert_array_equal(delta(np.array([5.0])), [0.0])


class TestCMVN:
    def test_constant_channel(self):
        out = cmvn(FeatureMatrix(np.full((10, 1), 3.0)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_frames(self):
        np.testing.assert_allclose(cmvn(FeatureMatrix([[0.0], [2.0]])).data.ravel(), [-1, 1])

    def test_idempotent(self):
        x = FeatureMatrix(np.random.default_rng(0).normal(3, 5, (50, 4)))
        once = cmvn(x)
        np.testing.assert_allclose(cmvn(once).data, once.data, atol=1e-6)

    def test_moments(self):
        x = np.random.default_rng(1).normal(10, 3, (200, 6))
        out = cmvn(FeatureMatrix(x)).data
        assert np.max(np.abs(out.mean(axis=0))) < 1e-6
        assert np.max(np.abs(out.std(axis=0) - 1)) < 1e-6

    def test_too_short(self):
        with pytest.raises(TooShort):
            cmvn(FeatureMatrix(np.zeros((1, 3))))


class TestRandomFeatures:
    def test_range(self):
        r = random_features(1000, 3, seed=5)
        assert r.data.shape == (1000, 3)
        assert r.data.min() >= 0 and r.data.max() < 10

    def test_deterministic(self):
        np.testing.assert_array_equal(random_features(50, 3, 1).data, random_features(50, 3, 1).data)

    def test_mean(self):
        assert abs(random_features(100000 // 3 + 1, 3, 2).data.mean() - 5.0) < 0.1


class TestExtractProsody:
    @pytest.fixture(scope="class")
    @staticmethod
    def voiced_audio():
        # Voiced 200 Hz pulse train with a silent gap in the middle.
        x = jittered_pulse_train(200.0, 0.02, duration=1.0).samples
        x[6000:9000] = 0.0
        return AudioBuffer(x)

    @pytest.mark.parametrize("selection, names", [
        ({"f0", "pov", "delta_f0"}, ("f0", "pov", "delta_f0")),
        ({"shimmer", "jitter"}, ("jitter", "shimmer")),
        ({"shimmer", "f0", "jitter", "delta_f0", "pov"}, ("f0", "pov", "delta_f0", "jitter", "shimmer")),
    ])
    def test_column_selection(self, voiced_audio, selection, names):
        feats = extract_prosody(voiced_audio, selection=selection)
        assert feats.labels == names
        assert feats.n_frames == len(frame_signal(voiced_audio))
        assert np.all(np.isfinite(feats.data))

    def test_pov_matches_mask(self, voiced_audio):
        track = compute_prosody_track(voiced_audio)
        assert set(np.unique(track.pov)) == {-1.0, 1.0}
        np.testing.assert_array_equal(track.pov == 1.0, track.voiced_mask)
        assert np.all(track.jitter >= 0) and np.all(track.shimmer >= 0)

    def test_log_f0_level(self, voiced_audio):
        track = compute_prosody_track(voiced_audio)
        assert np.all(np.abs(track.f0 - np.log(200.0)) < 0.05)

    def test_all_unvoiced_uses_fallback(self):
        track = compute_prosody_track(AudioBuffer(np.zeros(4000)))
        np.testing.assert_allclose(track.f0, np.log(100.0))
        np.testing.assert_array_equal(track.pov, -1.0)
        np.testing.assert_array_equal(track.delta_f0, 0.0)

    def test_empty_selection_rejected(self, voiced_audio):
        with pytest.raises(ValueError):
            extract_prosody(voiced_audio, selection=set())
