"""
Layer activations and their on-disk cache.

One binary file per (model, checkpoint step, utterance): a little-endian
header {magic "TPRB", version, n_layers, n_frames, dim} followed by
layer-major float32 data. A JSON manifest per model lists the utterances
completed for each checkpoint.
"""

import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .utils import atomic_write_bytes, read_file, safe_name, write_file

logger = logging.getLogger(__name__)

MAGIC = b"TPRB"
CACHE_VERSION = 1
HEADER = struct.Struct("<4sIIII")

FINAL_STEP = "final"

Step = int | str


def format_step(step: Step) -> str:
    return str(step)


@dataclass
class LayerActivations:
    """Hidden states of one utterance: layer 0 is the feature-encoder output."""

    model_id: str
    checkpoint_step: Step
    utterance_id: str
    layers: np.ndarray  # (n_layers, n_frames, dim), float32
    frame_stride_s: float = 0.02
    frame_receptive_s: float = 0.025

    def __post_init__(self):
        self.layers = np.ascontiguousarray(self.layers, dtype=np.float32)
        if self.layers.ndim != 3:
            raise ValueError(f"expected (layers, frames, dim), got shape {self.layers.shape}")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def n_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


def encode_activations(acts: LayerActivations) -> bytes:
    header = HEADER.pack(MAGIC, CACHE_VERSION, acts.n_layers, acts.n_frames, acts.dim)
    return header + acts.layers.astype("<f4", copy=False).tobytes(order="C")


def decode_activations(data: bytes) -> np.ndarray | None:
    """Layer array from a cache file's bytes, or None if the file is unusable."""
    if len(data) < HEADER.size:
        return None
    magic, version, n_layers, n_frames, dim = HEADER.unpack_from(data)
    if magic != MAGIC or version != CACHE_VERSION:
        return None
    expected = HEADER.size + 4 * n_layers * n_frames * dim
    if len(data) != expected:
        return None
    layers = np.frombuffer(data, dtype="<f4", offset=HEADER.size)
    return layers.reshape(n_layers, n_frames, dim).astype(np.float32)


@dataclass
class ActivationCache:
    """
    Manages the activation cache directory.

    Layout:
    - <model>/step-<step>/<utterance>.tprb: one utterance's activations
    - <model>/manifest.json: completed utterances per checkpoint step
    - pooled/, baselines/: derived feature matrices
    """

    root: Path
    _manifest_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def model_dir(self, model_id: str) -> Path:
        return self.root / safe_name(model_id)

    def path(self, model_id: str, checkpoint_step: Step, utterance_id: str) -> Path:
        step_dir = f"step-{safe_name(format_step(checkpoint_step))}"
        return self.model_dir(model_id) / step_dir / f"{safe_name(utterance_id)}.tprb"

    def manifest_path(self, model_id: str) -> Path:
        return self.model_dir(model_id) / "manifest.json"

    def pooled_path(self, model_id: str, checkpoint_step: Step, table_key: str) -> Path:
        step = safe_name(format_step(checkpoint_step))
        return self.root / "pooled" / safe_name(model_id) / f"step-{step}" / f"{table_key}.npy"

    def baseline_path(self, kind: str, table_key: str) -> Path:
        return self.root / "baselines" / table_key / f"{kind}.npy"

    def put(self, acts: LayerActivations) -> Path:
        """Store activations atomically; concurrent readers never see partial files."""
        path = self.path(acts.model_id, acts.checkpoint_step, acts.utterance_id)
        atomic_write_bytes(path, encode_activations(acts))
        return path

    def get(
        self,
        model_id: str,
        checkpoint_step: Step,
        utterance_id: str,
        layer_set: list[int] | None = None,
    ) -> LayerActivations | None:
        """Cached activations, or None on a miss (absent, stale version, or too few layers)."""
        path = self.path(model_id, checkpoint_step, utterance_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None

        layers = decode_activations(data)
        if layers is None:
            logger.debug(f"Cache entry {path} unreadable or from another version, recomputing")
            return None
        if layer_set is not None:
            if max(layer_set, default=-1) >= layers.shape[0]:
                return None
            layers = layers[list(layer_set)]
        return LayerActivations(model_id, checkpoint_step, utterance_id, layers)

    def readable(self, model_id: str, checkpoint_step: Step, utterance_id: str) -> bool:
        """Whether the entry exists with the current magic, version and a complete payload."""
        path = self.path(model_id, checkpoint_step, utterance_id)
        try:
            with path.open("rb") as f:
                header = f.read(HEADER.size)
            size = path.stat().st_size
        except FileNotFoundError:
            return False
        if len(header) < HEADER.size:
            return False
        magic, version, n_layers, n_frames, dim = HEADER.unpack(header)
        if magic != MAGIC or version != CACHE_VERSION:
            return False
        return size == HEADER.size + 4 * n_layers * n_frames * dim

    def completed(self, model_id: str, checkpoint_step: Step, source: str = "") -> set[str]:
        """
        Utterances recorded as cached for a checkpoint.

        Entries written from a different checkpoint source count as absent.
        The manifest alone is not proof of a usable file; see `readable`.
        """
        text = read_file(self.manifest_path(model_id))
        if not text:
            return set()
        entry = json.loads(text).get("checkpoints", {}).get(format_step(checkpoint_step))
        if entry is None or entry.get("source", "") != source:
            return set()
        return set(entry["utterances"])

    def record_completed(
        self, model_id: str, checkpoint_step: Step, utterance_ids: list[str], source: str = ""
    ) -> None:
        """Add utterances to the model's sidecar manifest."""
        with self._manifest_lock:
            path = self.manifest_path(model_id)
            text = read_file(path)
            manifest = json.loads(text) if text else {"model_id": model_id, "checkpoints": {}}
            key = format_step(checkpoint_step)
            entry = manifest["checkpoints"].get(key)
            if entry is None or entry.get("source", "") != source:
                entry = {"source": source, "utterances": []}
            entry["utterances"] = sorted(set(entry["utterances"]) | set(utterance_ids))
            manifest["checkpoints"][key] = entry
            write_file(path, json.dumps(manifest, indent=2, ensure_ascii=False))
