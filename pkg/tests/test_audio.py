"""Tests for audio loading and baseline frame tracks."""

import numpy as np
import pytest
import soundfile as sf

from tone_probe.audio import (
    SAMPLE_RATE,
    WINDOW_FRAMES,
    center_frame,
    load_audio,
    mfcc_frames,
    track_f0,
    window_frames,
)


def sine(freq_hz: float, seconds: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(int(seconds * sr)) / sr
    return (0.5 * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32)


class TestLoadAudio:
    """Tests for load_audio."""

    def test_resamples_and_downmixes(self, tmp_path):
        path = tmp_path / "stereo.wav"
        stereo = np.stack([sine(200, 1.0, 8000), sine(200, 1.0, 8000)], axis=1)
        sf.write(path, stereo, 8000)

        audio = load_audio(path)
        assert audio.dtype == np.float32
        assert audio.ndim == 1
        assert abs(len(audio) - SAMPLE_RATE) <= 2


class TestTrackF0:
    """Tests for track_f0."""

    def test_pure_tone(self):
        f0 = track_f0(sine(200, 1.0))
        assert len(f0) == 1 + SAMPLE_RATE // 160
        voiced = f0[25:-25]
        assert np.all(voiced > 0)
        assert np.median(voiced) == pytest.approx(200, abs=1.0)

    def test_silence_is_unvoiced(self):
        f0 = track_f0(np.zeros(SAMPLE_RATE // 2, dtype=np.float32))
        assert np.all(f0 == 0)

    def test_noise_mostly_unvoiced(self):
        noise = np.random.default_rng(0).standard_normal(SAMPLE_RATE).astype(np.float32) * 0.1
        f0 = track_f0(noise)
        assert np.mean(f0 > 0) < 0.2

    def test_voicing_on_the_hop_clock(self):
        audio = np.concatenate([sine(200, 0.5), np.zeros(SAMPLE_RATE // 2, dtype=np.float32)])
        f0 = track_f0(audio)

        assert len(f0) == 101
        assert np.all(f0[10:40] > 0)
        assert np.all(f0[60:] == 0)

    def test_too_short_for_analysis(self):
        f0 = track_f0(sine(200, 0.02))
        assert len(f0) == 3
        assert np.all(f0 == 0)


class TestMfccFrames:
    """Tests for mfcc_frames."""

    def test_shape(self):
        mfcc = mfcc_frames(sine(300, 0.5))
        assert mfcc.shape == (1 + (SAMPLE_RATE // 2) // 160, 40)
        assert np.all(np.isfinite(mfcc))


class TestWindows:
    """Tests for window extraction around syllable centres."""

    def test_center_frame(self):
        assert center_frame(0.10, 0.30) == 20
        assert center_frame(0.0, 0.015) == 1

    def test_window_inside(self):
        track = np.arange(100, dtype=np.float32)
        window = window_frames(track, 50)
        assert window.shape == (WINDOW_FRAMES, 1)
        assert window[:, 0].tolist() == list(range(40, 61))

    def test_window_zero_padded_at_edges(self):
        track = np.ones((30, 2), dtype=np.float32)
        window = window_frames(track, 2)
        assert window.shape == (21, 2)
        assert np.all(window[:8] == 0)
        assert np.all(window[8:] == 1)

        window = window_frames(track, 28)
        assert np.all(window[:12] == 1)
        assert np.all(window[12:] == 0)
