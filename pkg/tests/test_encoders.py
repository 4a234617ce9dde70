"""Tests for encoder adapters."""

import numpy as np
import pytest

from tone_probe.encoders import (
    EncoderGeometry,
    StubSpeechEncoder,
    StubTextEncoder,
    load_speech_encoder,
    load_text_encoder,
    parse_locator,
)
from tone_probe.errors import FeatureError


def chirp(seconds: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * 16000)) / 16000
    return (0.3 * np.sin(2 * np.pi * (150 + 100 * t) * t)).astype(np.float32)


class TestGeometry:
    """Tests for EncoderGeometry."""

    def test_base_clock(self):
        geometry = EncoderGeometry()
        assert geometry.receptive_samples == 400
        assert geometry.stride_samples == 320
        assert geometry.n_hidden_states == 13

    def test_frame_count(self):
        geometry = EncoderGeometry()
        assert geometry.n_frames(399) == 0
        assert geometry.n_frames(400) == 1
        assert geometry.n_frames(16000) == 49


class TestParseLocator:
    """Tests for parse_locator."""

    def test_stub(self):
        locator = parse_locator("stub://tonal?seed=3&strength=0.5")
        assert locator.scheme == "stub"
        assert locator.target == "tonal"
        assert locator.params == {"seed": "3", "strength": "0.5"}
        assert not locator.downloads

    def test_hub(self):
        locator = parse_locator("hf://facebook/wav2vec2-base")
        assert locator.target == "facebook/wav2vec2-base"
        assert locator.downloads

    def test_path(self):
        locator = parse_locator("/models/ckpt-1000")
        assert locator.scheme == "path"
        assert locator.target == "/models/ckpt-1000"


class TestStubSpeechEncoder:
    """Tests for StubSpeechEncoder."""

    def test_shapes(self):
        encoder = StubSpeechEncoder(seed=1)
        audio = chirp()
        states = encoder.hidden_states(audio)

        assert len(states) == 13
        assert all(s.shape == (encoder.geometry.n_frames(len(audio)), 768) for s in states)
        assert all(s.dtype == np.float32 for s in states)

    def test_deterministic(self):
        audio = chirp()
        first = StubSpeechEncoder(seed=1).hidden_states(audio)
        second = StubSpeechEncoder(seed=1).hidden_states(audio)
        assert all(np.array_equal(a, b) for a, b in zip(first, second))

    def test_seed_matters(self):
        audio = chirp()
        first = StubSpeechEncoder(seed=1).hidden_states(audio)[5]
        second = StubSpeechEncoder(seed=2).hidden_states(audio)[5]
        assert not np.allclose(first, second)

    def test_custom_geometry(self):
        geometry = EncoderGeometry(n_layers=4, dim=32)
        states = StubSpeechEncoder(seed=0, geometry=geometry).hidden_states(chirp())
        assert len(states) == 5
        assert states[0].shape[1] == 32

    def test_strength_range(self):
        with pytest.raises(ValueError):
            StubSpeechEncoder(strength=1.5)

    def test_too_short(self):
        with pytest.raises(FeatureError):
            StubSpeechEncoder().hidden_states(np.zeros(100, dtype=np.float32))


class TestStubTextEncoder:
    """Tests for StubTextEncoder."""

    def test_units_independent_of_context(self):
        encoder = StubTextEncoder(seed=5)
        a = encoder.encode_units(["ni", "hao"])
        b = encoder.encode_units(["hao", "ma"])
        assert a.shape == (2, 768)
        assert np.array_equal(a[1], b[0])

    def test_empty(self):
        assert StubTextEncoder().encode_units([]).shape == (0, 768)


class TestLoaders:
    """Tests for locator-driven loading."""

    def test_stub_params(self):
        encoder = load_speech_encoder("stub://x?seed=4&strength=0.25", EncoderGeometry())
        assert isinstance(encoder, StubSpeechEncoder)
        assert encoder.seed == 4
        assert encoder.strength == 0.25

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FeatureError):
            load_speech_encoder(str(tmp_path / "nope"), EncoderGeometry())

    def test_text_stub(self):
        encoder = load_text_encoder("stub://text?seed=5", dim=16)
        assert encoder.encode_units(["a"]).shape == (1, 16)
