"""
Probe inputs: pooled encoder activations and the three baselines.

Encoder activations live on the model's frame clock (20 ms stride for the
base architecture); F0 and MFCC baselines on a 10 ms clock. Every syllable
becomes one vector per encoder layer plus one 21-dim F0 window, one 840-dim
MFCC window and one 768-dim text embedding.
"""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.lib.format import open_memmap
from tqdm import tqdm

from .activations import ActivationCache, LayerActivations, Step
from .audio import WINDOW_FRAMES, center_frame, load_audio, mfcc_frames, track_f0, window_frames
from .corpus import AlignedSyllable
from .encoders import SpeechEncoder, TextEncoder
from .errors import FeatureError
from .utils import temp_path_for

logger = logging.getLogger(__name__)

FRAME_STRIDE_S = 0.02

F0_DIM = WINDOW_FRAMES
MFCC_DIM = WINDOW_FRAMES * 40
TEXT_DIM = 768


class BaselineKind(StrEnum):
    F0 = "f0"
    MFCC = "mfcc"
    TEXT = "text"


# Reserved pseudo-layer indices for baseline rows in reports
BASELINE_LAYER_INDEX: dict[BaselineKind, int] = {
    BaselineKind.F0: -1,
    BaselineKind.MFCC: -2,
    BaselineKind.TEXT: -3,
}

BASELINE_DIMS: dict[BaselineKind, int] = {
    BaselineKind.F0: F0_DIM,
    BaselineKind.MFCC: MFCC_DIM,
    BaselineKind.TEXT: TEXT_DIM,
}


def extract_activations(
    encoder: SpeechEncoder,
    audio: np.ndarray,
    layer_set: list[int] | None = None,
    model_id: str = "",
    checkpoint_step: Step = "final",
    utterance_id: str = "",
) -> LayerActivations:
    """
    Run one forward pass and keep the requested hidden states.

    Forward passes are serialized on the encoder's lock unless the adapter
    declares itself reentrant.
    """
    geometry = encoder.geometry
    if len(audio) < geometry.receptive_samples:
        raise FeatureError(
            f"{utterance_id or 'audio'}: {len(audio)} samples is shorter than one "
            f"receptive field ({geometry.receptive_samples})"
        )

    if encoder.reentrant:
        states = encoder.hidden_states(audio)
    else:
        with encoder.lock:
            states = encoder.hidden_states(audio)

    wanted = list(range(len(states))) if layer_set is None else list(layer_set)
    if max(wanted, default=-1) >= len(states):
        raise FeatureError(
            f"{model_id}: adapter returned {len(states)} hidden states, "
            f"layer {max(wanted)} requested"
        )
    frame_counts = {states[i].shape[0] for i in wanted}
    if len(frame_counts) != 1:
        raise FeatureError(f"{model_id}: layers disagree on frame count {sorted(frame_counts)}")

    return LayerActivations(
        model_id=model_id,
        checkpoint_step=checkpoint_step,
        utterance_id=utterance_id,
        layers=np.stack([states[i] for i in wanted]),
        frame_stride_s=geometry.stride_s,
        frame_receptive_s=geometry.receptive_s,
    )


def time_to_frames(start_s: float, end_s: float, n_frames: int, stride_s: float = FRAME_STRIDE_S) -> range:
    """
    Frames covering [start_s, end_s), clipped to the utterance.

    A span that falls entirely outside the frames maps to the single frame
    nearest its start.
    """
    # round away float noise such as 0.1 / 0.02 = 5.000000000000001
    first = math.floor(round(start_s / stride_s, 6))
    last = math.ceil(round(end_s / stride_s, 6))
    lo, hi = max(first, 0), min(last, n_frames)
    if lo < hi:
        return range(lo, hi)
    single = min(max(first, 0), n_frames - 1)
    return range(single, single + 1)


def pool_syllable(acts: LayerActivations, syllable: AlignedSyllable) -> np.ndarray:
    """Mean over the syllable's frames, one row per layer: (n_layers, dim)."""
    frames = time_to_frames(syllable.start_s, syllable.end_s, acts.n_frames, acts.frame_stride_s)
    return acts.layers[:, frames.start : frames.stop].mean(axis=1)


def extract_f0_window(audio: np.ndarray, syllable: AlignedSyllable, f0_track: np.ndarray | None = None) -> np.ndarray:
    """21 F0 values around the syllable centre (Hz, 0 when unvoiced)."""
    track = track_f0(audio) if f0_track is None else f0_track
    window = window_frames(track, center_frame(syllable.start_s, syllable.end_s))
    return window.reshape(-1)


def extract_mfcc_window(audio: np.ndarray, syllable: AlignedSyllable, mfcc: np.ndarray | None = None) -> np.ndarray:
    """21 MFCC frames around the syllable centre, concatenated in time order."""
    track = mfcc_frames(audio) if mfcc is None else mfcc
    window = window_frames(track, center_frame(syllable.start_s, syllable.end_s))
    return window.reshape(-1)


def extract_text_embedding(text_encoder: TextEncoder, units: list[str], position: int) -> np.ndarray:
    """Final-layer vector of the written unit at `position`."""
    if not 0 <= position < len(units):
        raise FeatureError(f"position {position} outside a sequence of {len(units)} units")
    vector = text_encoder.encode_units(units)[position]
    _check_dim(vector, TEXT_DIM, BaselineKind.TEXT)
    return vector


def _check_dim(vector: np.ndarray, expected: int, kind: str) -> None:
    if vector.shape != (expected,):
        raise FeatureError(f"{kind} vector has shape {vector.shape}, expected ({expected},)")
    if not np.all(np.isfinite(vector)):
        raise FeatureError(f"{kind} vector has non-finite entries")


def group_by_utterance(syllables: list[AlignedSyllable]) -> dict[str, list[int]]:
    """Row indices of each utterance's syllables, in table order."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(syllables):
        groups.setdefault(s.utterance_id, []).append(i)
    return groups


def extract_to_cache(
    encoder: SpeechEncoder,
    cache: ActivationCache,
    model_id: str,
    checkpoint_step: Step,
    audio_index: dict[str, Path],
    workers: int = 1,
    source: str = "",
) -> tuple[int, int]:
    """
    Fill the cache for every utterance of `audio_index`.

    Returns (extracted, failed). Utterances recorded in the model's manifest
    for the same checkpoint source are skipped when their cache file still
    decodes; stale or truncated entries are recomputed. Per-utterance
    failures are logged and counted.
    """
    recorded = cache.completed(model_id, checkpoint_step, source)
    done = {u for u in recorded if cache.readable(model_id, checkpoint_step, u)}
    if len(done) < len(recorded):
        logger.info(f"{model_id}@{checkpoint_step}: {len(recorded) - len(done)} stale cache entries, recomputing")
    todo = [u for u in audio_index if u not in done]
    if not todo:
        logger.debug(f"{model_id}@{checkpoint_step}: all {len(audio_index)} utterances cached")
        return 0, 0

    def work(utterance_id: str) -> str | None:
        try:
            audio = load_audio(audio_index[utterance_id])
            acts = extract_activations(encoder, audio, None, model_id, checkpoint_step, utterance_id)
        except Exception as e:
            logger.warning(f"{model_id}@{checkpoint_step}: {utterance_id} failed: {e}")
            return None
        cache.put(acts)
        return utterance_id

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            tqdm(
                pool.map(work, todo),
                total=len(todo),
                desc=f"{model_id}@{checkpoint_step}",
                unit="utt",
                disable=None,
                leave=False,
            )
        )

    completed = [u for u in results if u is not None]
    cache.record_completed(model_id, checkpoint_step, completed, source)
    return len(completed), len(todo) - len(completed)


def build_pooled_matrix(
    syllables: list[AlignedSyllable],
    load: Callable[[str], LayerActivations | None],
    out_path: Path,
    n_layers: int,
    dim: int,
) -> np.ndarray:
    """
    Pool every syllable into a (n_layers, N, dim) float32 array saved as .npy.

    `load` returns an utterance's activations or None when they are missing,
    in which case FeatureError is raised: a partial matrix is never saved.
    """
    staged = temp_path_for(out_path)
    matrix = open_memmap(staged, mode="w+", dtype=np.float32, shape=(n_layers, len(syllables), dim))
    try:
        for utterance_id, rows in group_by_utterance(syllables).items():
            acts = load(utterance_id)
            if acts is None:
                raise FeatureError(f"no activations for {utterance_id}")
            if acts.n_layers < n_layers or acts.dim != dim:
                raise FeatureError(
                    f"{utterance_id}: activations are {acts.layers.shape}, "
                    f"expected {n_layers} layers of dim {dim}"
                )
            for row in rows:
                matrix[:, row] = pool_syllable(acts, syllables[row])[:n_layers]
        matrix.flush()
        del matrix
        staged.replace(out_path)
    except BaseException:
        staged.unlink(missing_ok=True)
        raise
    return np.load(out_path, mmap_mode="r")


def build_baseline_matrix(
    kind: BaselineKind,
    syllables: list[AlignedSyllable],
    audio_index: dict[str, Path],
    text_encoder: TextEncoder | None = None,
    units: dict[str, tuple[str, ...]] | None = None,
) -> np.ndarray:
    """
    One baseline vector per syllable, as an (N, dim) float32 array.

    The text baseline encodes each utterance's full unit sequence from
    `units`, including units filtered out of the syllable table, and reads
    out each syllable at its position in that sequence.
    """
    kind = BaselineKind(kind)
    dim = BASELINE_DIMS[kind]
    out = np.zeros((len(syllables), dim), dtype=np.float32)
    groups = group_by_utterance(syllables)

    for utterance_id, rows in tqdm(groups.items(), desc=f"baseline {kind}", unit="utt", disable=None, leave=False):
        if kind == BaselineKind.TEXT:
            if text_encoder is None:
                raise FeatureError("text baseline requested without a text model")
            sequence = list((units or {}).get(utterance_id, ()))
            if not sequence:
                raise FeatureError(f"no unit sequence for {utterance_id}; re-run the ingest stage")
            encoded = text_encoder.encode_units(sequence)
            for row in rows:
                position = syllables[row].position
                if not 0 <= position < len(sequence):
                    raise FeatureError(
                        f"{utterance_id}: position {position} outside a sequence of {len(sequence)} units"
                    )
                out[row] = encoded[position]
                _check_dim(out[row], dim, kind)
            continue

        audio = load_audio(audio_index[utterance_id])
        if kind == BaselineKind.F0:
            track = track_f0(audio)
            for row in rows:
                out[row] = extract_f0_window(audio, syllables[row], track)
        else:
            track = mfcc_frames(audio)
            for row in rows:
                out[row] = extract_mfcc_window(audio, syllables[row], track)

    if not np.all(np.isfinite(out)):
        raise FeatureError(f"{kind} baseline has non-finite entries")
    return out
