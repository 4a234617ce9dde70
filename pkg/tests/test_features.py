"""Tests for probe input features."""

from dataclasses import replace

import numpy as np
import pytest

from tone_probe.activations import FINAL_STEP, ActivationCache, LayerActivations
from tone_probe.audio import load_audio, mfcc_frames, window_frames
from tone_probe.corpus import AlignmentFormat, Language, TranscriptFormat, build_manifest, ingest_corpus
from tone_probe.encoders import EncoderGeometry, StubSpeechEncoder, StubTextEncoder, TextEncoder
from tone_probe.errors import FeatureError
from tone_probe.features import (
    BASELINE_DIMS,
    BaselineKind,
    build_baseline_matrix,
    build_pooled_matrix,
    extract_activations,
    extract_f0_window,
    extract_mfcc_window,
    extract_text_embedding,
    extract_to_cache,
    pool_syllable,
    time_to_frames,
)


def sine(freq_hz: float, seconds: float) -> np.ndarray:
    t = np.arange(int(seconds * 16000)) / 16000
    return (0.5 * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32)


class PositionTextEncoder(TextEncoder):
    """Row i of the output is filled with i; remembers every sequence it encoded."""

    def __init__(self):
        self.seen: list[list[str]] = []

    def encode_units(self, units: list[str]) -> np.ndarray:
        self.seen.append(list(units))
        return np.repeat(np.arange(len(units), dtype=np.float32)[:, None], 768, axis=1)


class TestTimeToFrames:
    """Tests for time_to_frames."""

    def test_simple(self):
        assert time_to_frames(0.0, 0.1, 100) == range(0, 5)

    def test_clipped_at_end(self):
        assert time_to_frames(0.99, 1.01, 50) == range(49, 50)

    def test_sub_frame_span(self):
        assert time_to_frames(0.013, 0.014, 100) == range(0, 1)

    def test_span_past_end(self):
        assert time_to_frames(2.0, 2.1, 50) == range(49, 50)

    def test_monotone_start(self):
        starts = np.linspace(0.0, 0.9, 200)
        firsts = [time_to_frames(s, s + 0.05, 50).start for s in starts]
        assert firsts == sorted(firsts)


class TestPoolSyllable:
    """Tests for pool_syllable."""

    def acts(self, layers):
        return LayerActivations("m", FINAL_STEP, "u1", layers)

    def test_constant(self, make_syllable):
        acts = self.acts(np.full((3, 10, 4), 2.5, dtype=np.float32))
        pooled = pool_syllable(acts, make_syllable("ma1", start_s=0.02, end_s=0.1))
        assert pooled.shape == (3, 4)
        assert np.allclose(pooled, 2.5)

    def test_two_frames(self, make_syllable):
        layers = np.array([[[1.0, 2.0], [3.0, 6.0]]], dtype=np.float32)
        pooled = pool_syllable(self.acts(layers), make_syllable("ma1", start_s=0.0, end_s=0.04))
        assert np.allclose(pooled, [[2.0, 4.0]])

    def test_brute_force_mean(self, make_syllable):
        layers = np.random.default_rng(0).standard_normal((2, 10, 6)).astype(np.float32)
        pooled = pool_syllable(self.acts(layers), make_syllable("ma1", start_s=0.04, end_s=0.1))

        expected = np.zeros((2, 6))
        for layer in range(2):
            for frame in (2, 3, 4):
                expected[layer] += layers[layer, frame]
        assert np.allclose(pooled, expected / 3, atol=1e-6)

    def test_linear_in_scale(self, make_syllable):
        layers = np.random.default_rng(1).standard_normal((2, 10, 6)).astype(np.float32)
        syllable = make_syllable("ma1", start_s=0.04, end_s=0.16)
        pooled = pool_syllable(self.acts(layers), syllable)
        scaled = pool_syllable(self.acts(3.0 * layers), syllable)
        assert np.allclose(scaled, 3.0 * pooled, atol=1e-5)


class TestExtractActivations:
    """Tests for extract_activations."""

    def test_one_second(self):
        acts = extract_activations(StubSpeechEncoder(seed=0), sine(200, 1.0), model_id="stub")
        assert acts.n_frames == 49
        assert acts.n_layers == 13
        assert acts.dim == 768

    def test_one_receptive_field(self):
        acts = extract_activations(StubSpeechEncoder(seed=0), sine(200, 0.025))
        assert acts.n_frames == 1

    def test_deterministic(self):
        audio = sine(220, 0.5)
        a = extract_activations(StubSpeechEncoder(seed=0), audio)
        b = extract_activations(StubSpeechEncoder(seed=0), audio)
        assert np.array_equal(a.layers, b.layers)

    def test_layer_subset(self):
        acts = extract_activations(StubSpeechEncoder(seed=0), sine(200, 0.5), layer_set=[0, 12])
        assert acts.n_layers == 2

    def test_too_short(self):
        with pytest.raises(FeatureError):
            extract_activations(StubSpeechEncoder(seed=0), np.zeros(399, dtype=np.float32))

    def test_too_few_layers(self):
        encoder = StubSpeechEncoder(seed=0, geometry=EncoderGeometry(n_layers=2, dim=8))
        with pytest.raises(FeatureError):
            extract_activations(encoder, sine(200, 0.5), layer_set=[5])


class TestBaselineWindows:
    """Tests for the F0 and MFCC window baselines."""

    def test_f0_of_sine(self, make_syllable):
        audio = sine(200, 1.0)
        vector = extract_f0_window(audio, make_syllable("ma1", start_s=0.4, end_s=0.6))
        assert vector.shape == (21,)
        assert np.allclose(vector, 200, atol=1.0)

    def test_f0_of_silence(self, make_syllable):
        vector = extract_f0_window(np.zeros(16000, dtype=np.float32), make_syllable("ma1", start_s=0.4, end_s=0.6))
        assert np.all(vector == 0)

    def test_edge_padding(self):
        track = np.arange(1, 101, dtype=np.float32)
        window = window_frames(track, 3).reshape(-1)
        assert np.all(window[:7] == 0)
        assert window[7:].tolist() == list(range(1, 15))

    def test_mfcc_dims(self, make_syllable):
        vector = extract_mfcc_window(sine(300, 0.3), make_syllable("ma1", start_s=0.0, end_s=0.3))
        assert vector.shape == (840,)

    def test_mfcc_silence_deterministic(self, make_syllable):
        silence = np.zeros(8000, dtype=np.float32)
        syllable = make_syllable("ma1", start_s=0.1, end_s=0.3)
        assert np.array_equal(extract_mfcc_window(silence, syllable), extract_mfcc_window(silence, syllable))

    def test_mfcc_shift_by_one_hop(self, make_syllable):
        rng = np.random.default_rng(0)
        audio = rng.standard_normal(16000).astype(np.float32) * 0.1
        track = mfcc_frames(audio)
        a = extract_mfcc_window(audio, make_syllable("ma1", start_s=0.4, end_s=0.6), track).reshape(21, 40)
        b = extract_mfcc_window(audio, make_syllable("ma1", start_s=0.41, end_s=0.61), track).reshape(21, 40)
        assert np.array_equal(a[1:], b[:-1])

    def test_text_embedding(self):
        vector = extract_text_embedding(StubTextEncoder(seed=1), ["ni"], 0)
        assert vector.shape == (768,)

    def test_text_position_checked(self):
        with pytest.raises(FeatureError):
            extract_text_embedding(StubTextEncoder(seed=1), ["ni"], 1)

    def test_text_dim_checked(self):
        with pytest.raises(FeatureError):
            extract_text_embedding(StubTextEncoder(seed=1, dim=16), ["ni"], 0)


class TestCacheFill:
    """Tests for extract_to_cache and the pooled matrices built from it."""

    def audio_index(self, mini_corpus, n=3):
        return {f"mini-{u:03d}": mini_corpus.audio_root / f"mini-{u:03d}.wav" for u in range(n)}

    def test_fill_then_skip(self, mini_corpus, tmp_path):
        cache = ActivationCache(tmp_path)
        encoder = StubSpeechEncoder(seed=1)
        index = self.audio_index(mini_corpus)

        assert extract_to_cache(encoder, cache, "stub", FINAL_STEP, index, workers=2, source="a") == (3, 0)
        assert extract_to_cache(encoder, cache, "stub", FINAL_STEP, index, workers=2, source="a") == (0, 0)
        assert extract_to_cache(encoder, cache, "stub", FINAL_STEP, index, source="b") == (3, 0)

    def test_stale_entry_recomputed(self, mini_corpus, tmp_path):
        cache = ActivationCache(tmp_path)
        encoder = StubSpeechEncoder(seed=1)
        index = self.audio_index(mini_corpus)
        extract_to_cache(encoder, cache, "stub", FINAL_STEP, index)
        path = cache.path("stub", FINAL_STEP, "mini-001")
        path.write_bytes(path.read_bytes()[:-4])

        assert extract_to_cache(encoder, cache, "stub", FINAL_STEP, index) == (1, 0)
        assert cache.get("stub", FINAL_STEP, "mini-001") is not None

    def test_unreadable_audio_counted(self, mini_corpus, tmp_path):
        index = self.audio_index(mini_corpus, 2)
        index["broken"] = tmp_path / "missing.wav"
        cache = ActivationCache(tmp_path / "cache")

        assert extract_to_cache(StubSpeechEncoder(seed=1), cache, "stub", FINAL_STEP, index) == (2, 1)
        assert "broken" not in cache.completed("stub", FINAL_STEP)

    def test_pooled_matrix(self, mini_corpus, tmp_path, make_syllable):
        cache = ActivationCache(tmp_path)
        encoder = StubSpeechEncoder(seed=1)
        extract_to_cache(encoder, cache, "stub", FINAL_STEP, self.audio_index(mini_corpus, 1))
        syllables = [
            make_syllable("sha1", "mini-000", 0.15, 0.4),
            make_syllable("xa2", "mini-000", 0.45, 0.7),
        ]

        matrix = build_pooled_matrix(
            syllables, lambda u: cache.get("stub", FINAL_STEP, u), tmp_path / "pooled.npy", 13, 768
        )
        assert matrix.shape == (13, 2, 768)

        acts = cache.get("stub", FINAL_STEP, "mini-000")
        assert np.allclose(matrix[:, 1], pool_syllable(acts, syllables[1]), atol=1e-6)

    def test_pooled_matrix_missing_utterance(self, tmp_path, make_syllable):
        out = tmp_path / "pooled.npy"
        with pytest.raises(FeatureError):
            build_pooled_matrix([make_syllable("ma1", "gone")], lambda u: None, out, 13, 768)
        assert not out.exists()
        assert list(tmp_path.iterdir()) == []

    def test_baseline_dims(self, mini_corpus):
        syllables_by_kind = {}
        index = self.audio_index(mini_corpus, 1)
        manifest = build_manifest(
            "mini", Language.MANDARIN, mini_corpus.audio_root, mini_corpus.transcripts,
            TranscriptFormat.TSV, mini_corpus.alignments, AlignmentFormat.TSV,
        )
        result = ingest_corpus(manifest)
        syllables = [s for s in result.syllables if s.utterance_id == "mini-000"]
        for kind in BaselineKind:
            matrix = build_baseline_matrix(kind, syllables, index, StubTextEncoder(seed=5), result.units)
            syllables_by_kind[kind] = matrix
            assert matrix.shape == (len(syllables), BASELINE_DIMS[kind])
            assert np.all(np.isfinite(matrix))

        # vowels are voiced, so every F0 window has voiced frames
        assert np.all((syllables_by_kind[BaselineKind.F0] > 0).any(axis=1))

    def test_text_baseline_needs_model(self, mini_corpus, make_syllable):
        with pytest.raises(FeatureError):
            build_baseline_matrix(BaselineKind.TEXT, [make_syllable("sha1", "mini-000")], {}, None)

    def test_text_baseline_reads_full_sequence(self, make_syllable):
        # the neutral particle at position 1 was filtered out of the syllable table
        syllables = [
            replace(make_syllable("wo3", "u1"), position=0),
            replace(make_syllable("shu1", "u1", 0.3, 0.5), position=2),
        ]
        encoder = PositionTextEncoder()
        units = {"u1": ("我", "的", "书")}

        matrix = build_baseline_matrix(BaselineKind.TEXT, syllables, {}, encoder, units)
        assert encoder.seen == [["我", "的", "书"]]
        assert matrix[:, 0].tolist() == [0.0, 2.0]

    def test_text_baseline_needs_units(self, make_syllable):
        with pytest.raises(FeatureError, match="unit sequence"):
            build_baseline_matrix(BaselineKind.TEXT, [make_syllable("sha1", "u1")], {}, PositionTextEncoder(), {})

    def test_text_position_outside_sequence(self, make_syllable):
        syllable = replace(make_syllable("sha1", "u1"), position=3)
        with pytest.raises(FeatureError, match="position 3"):
            build_baseline_matrix(BaselineKind.TEXT, [syllable], {}, PositionTextEncoder(), {"u1": ("沙",)})

    def test_audio_reads_back(self, mini_corpus):
        audio = load_audio(mini_corpus.audio_root / "mini-000.wav")
        assert audio.dtype == np.float32
        assert len(audio) > 16000
