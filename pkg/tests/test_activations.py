"""Tests for the activation cache."""

import numpy as np
import pytest

from tone_probe.activations import (
    FINAL_STEP,
    ActivationCache,
    LayerActivations,
    decode_activations,
    encode_activations,
    CACHE_VERSION,
    HEADER,
    format_step,
)


def make_acts(step=FINAL_STEP, utterance_id="utt1", n_layers=3, n_frames=5, dim=4, seed=0):
    layers = np.random.default_rng(seed).standard_normal((n_layers, n_frames, dim)).astype(np.float32)
    return LayerActivations("model-a", step, utterance_id, layers)


class TestSteps:
    """Tests for checkpoint step formatting."""

    def test_format(self):
        assert format_step(5000) == "5000"
        assert format_step(FINAL_STEP) == "final"


class TestEncoding:
    """Tests for the binary cache format."""

    def test_exact_bytes(self):
        acts = make_acts()
        decoded = decode_activations(encode_activations(acts))
        assert np.array_equal(decoded, acts.layers)

    def test_truncated_is_unusable(self):
        data = encode_activations(make_acts())
        assert decode_activations(data[:-4]) is None
        assert decode_activations(b"xx") is None

    def test_wrong_magic_is_unusable(self):
        data = bytearray(encode_activations(make_acts()))
        data[:4] = b"NOPE"
        assert decode_activations(bytes(data)) is None

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            LayerActivations("m", FINAL_STEP, "u", np.zeros((2, 3)))


class TestActivationCache:
    """Tests for ActivationCache."""

    def test_put_get(self, tmp_path):
        cache = ActivationCache(tmp_path)
        acts = make_acts()
        cache.put(acts)

        loaded = cache.get("model-a", FINAL_STEP, "utt1")
        assert loaded is not None
        assert np.array_equal(loaded.layers, acts.layers)

    def test_miss(self, tmp_path):
        assert ActivationCache(tmp_path).get("model-a", FINAL_STEP, "nothing") is None

    def test_layer_subset(self, tmp_path):
        cache = ActivationCache(tmp_path)
        acts = make_acts()
        cache.put(acts)

        loaded = cache.get("model-a", FINAL_STEP, "utt1", layer_set=[0, 2])
        assert np.array_equal(loaded.layers, acts.layers[[0, 2]])
        assert cache.get("model-a", FINAL_STEP, "utt1", layer_set=[3]) is None

    def test_steps_kept_apart(self, tmp_path):
        cache = ActivationCache(tmp_path)
        cache.put(make_acts(step=0, seed=1))
        cache.put(make_acts(step=FINAL_STEP, seed=2))

        early = cache.get("model-a", 0, "utt1")
        final = cache.get("model-a", FINAL_STEP, "utt1")
        assert not np.array_equal(early.layers, final.layers)

    def test_corrupt_entry_is_a_miss(self, tmp_path):
        cache = ActivationCache(tmp_path)
        path = cache.put(make_acts())
        path.write_bytes(path.read_bytes()[:20])
        assert cache.get("model-a", FINAL_STEP, "utt1") is None

    def test_readable(self, tmp_path):
        cache = ActivationCache(tmp_path)
        assert not cache.readable("model-a", FINAL_STEP, "utt1")
        cache.put(make_acts())
        assert cache.readable("model-a", FINAL_STEP, "utt1")

    def test_old_version_is_unreadable(self, tmp_path):
        cache = ActivationCache(tmp_path)
        path = cache.put(make_acts())
        data = bytearray(path.read_bytes())
        data[4:8] = (CACHE_VERSION + 1).to_bytes(4, "little")
        path.write_bytes(bytes(data))

        assert not cache.readable("model-a", FINAL_STEP, "utt1")
        assert cache.get("model-a", FINAL_STEP, "utt1") is None

    def test_truncated_payload_is_unreadable(self, tmp_path):
        cache = ActivationCache(tmp_path)
        path = cache.put(make_acts())
        path.write_bytes(path.read_bytes()[: HEADER.size + 8])
        assert not cache.readable("model-a", FINAL_STEP, "utt1")

    def test_unsafe_ids(self, tmp_path):
        cache = ActivationCache(tmp_path)
        acts = make_acts(utterance_id="spk/1:a")
        path = cache.put(acts)
        assert path.parent.parent.parent == tmp_path
        assert cache.get("model-a", FINAL_STEP, "spk/1:a") is not None

    def test_manifest(self, tmp_path):
        cache = ActivationCache(tmp_path)
        cache.record_completed("model-a", 0, ["u2", "u1"], source="stub://a?seed=1")
        cache.record_completed("model-a", 0, ["u3"], source="stub://a?seed=1")

        assert cache.completed("model-a", 0, "stub://a?seed=1") == {"u1", "u2", "u3"}
        assert cache.completed("model-a", FINAL_STEP, "stub://a?seed=1") == set()

    def test_manifest_source_change_invalidates(self, tmp_path):
        cache = ActivationCache(tmp_path)
        cache.record_completed("model-a", FINAL_STEP, ["u1"], source="old")
        assert cache.completed("model-a", FINAL_STEP, "new") == set()

        cache.record_completed("model-a", FINAL_STEP, ["u2"], source="new")
        assert cache.completed("model-a", FINAL_STEP, "new") == {"u2"}
