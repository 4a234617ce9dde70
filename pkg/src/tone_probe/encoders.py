"""
Encoder adapters.

A speech adapter turns a 16 kHz waveform into all of its hidden states;
a text adapter turns a sequence of written units into one vector per unit.
Adapters are created from a locator string:

- `stub://<name>?seed=N&strength=S`: deterministic random-projection encoder
- `hf://<repo>`: a Hugging Face hub model (downloaded unless offline)
- anything else: a local model directory, never downloaded
"""

import hashlib
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

import librosa
import numpy as np
from scipy.ndimage import convolve1d

from .errors import FeatureError
from .utils import seed_from

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class EncoderGeometry:
    """Declared frame clock and shape of a speech encoder."""

    stride_s: float = 0.02
    receptive_s: float = 0.025
    n_layers: int = 12  # transformer layers; hidden states = n_layers + 1
    dim: int = 768

    @property
    def n_hidden_states(self) -> int:
        return self.n_layers + 1

    @property
    def receptive_samples(self) -> int:
        return int(round(self.receptive_s * SAMPLE_RATE))

    @property
    def stride_samples(self) -> int:
        return int(round(self.stride_s * SAMPLE_RATE))

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.receptive_samples:
            return 0
        return (n_samples - self.receptive_samples) // self.stride_samples + 1


class SpeechEncoder(ABC):
    """Adapter contract for speech encoders."""

    reentrant: bool = False

    def __init__(self, geometry: EncoderGeometry):
        self.geometry = geometry
        self.lock = threading.Lock()

    @abstractmethod
    def hidden_states(self, audio: np.ndarray) -> list[np.ndarray]:
        """All hidden states for one waveform, each (frames, dim)."""


class TextEncoder(ABC):
    dim: int = 768

    @abstractmethod
    def encode_units(self, units: list[str]) -> np.ndarray:
        """One vector per written unit, as a (len(units), dim) array."""


@dataclass(frozen=True)
class Locator:
    scheme: str  # stub | hf | path
    target: str
    params: dict[str, str]

    @property
    def downloads(self) -> bool:
        return self.scheme == "hf"


def parse_locator(locator: str) -> Locator:
    if locator.startswith("stub://") or locator.startswith("hf://"):
        parts = urlsplit(locator)
        target = (parts.netloc + parts.path).strip("/")
        params = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        return Locator(parts.scheme, target, params)
    return Locator("path", locator, {})


class StubSpeechEncoder(SpeechEncoder):
    """
    Deterministic random-projection speech encoder.

    Log-mel frames on the base-architecture clock are projected to `dim`
    and passed through `n_layers` random orthogonal layers with light
    temporal smoothing. `strength` blends the audio-driven signal with
    audio-independent noise: 0 gives an untrained encoder that carries no
    information about its input, 1 a fully informative one.
    """

    reentrant = True

    def __init__(self, seed: int = 0, strength: float = 1.0, geometry: EncoderGeometry | None = None, n_mels: int = 40):
        super().__init__(geometry or EncoderGeometry())
        if not 0.0 <= strength <= 1.0:
            raise ValueError(f"stub strength must be in [0, 1], got {strength}")
        self.seed = seed
        self.strength = strength
        self.n_mels = n_mels

        rng = np.random.default_rng(seed)
        dim = self.geometry.dim
        self.input_projection = rng.standard_normal((n_mels, dim)) / np.sqrt(n_mels)
        self.layer_weights = [
            np.linalg.qr(rng.standard_normal((dim, dim)))[0] for _ in range(self.geometry.n_layers)
        ]

    def hidden_states(self, audio: np.ndarray) -> list[np.ndarray]:
        audio = np.asarray(audio, dtype=np.float32)
        n_frames = self.geometry.n_frames(len(audio))
        if n_frames == 0:
            raise FeatureError(f"audio of {len(audio)} samples is shorter than one receptive field")

        mel = librosa.feature.melspectrogram(
            y=audio,
            sr=SAMPLE_RATE,
            n_fft=self.geometry.receptive_samples,
            hop_length=self.geometry.stride_samples,
            n_mels=self.n_mels,
            center=False,
        )
        log_mel = librosa.power_to_db(mel, ref=1.0, amin=1e-10, top_db=None).T[:n_frames]
        signal = (log_mel / 80.0 + 0.5) @ self.input_projection

        noise_rng = np.random.default_rng(
            seed_from(self.seed, hashlib.sha256(audio.tobytes()).hexdigest())
        )
        noise = 0.5 * noise_rng.standard_normal(signal.shape)

        hidden = self.strength * signal + (1.0 - self.strength) * noise
        states = [hidden]
        for weights in self.layer_weights:
            smoothed = convolve1d(hidden, [0.25, 0.5, 0.25], axis=0, mode="nearest")
            hidden = np.tanh(smoothed @ weights)
            states.append(hidden)
        return [s.astype(np.float32) for s in states]


class HFSpeechEncoder(SpeechEncoder):
    """Speech encoder loaded with `transformers.AutoModel`, read out via output_hidden_states."""

    def __init__(self, name_or_path: str, geometry: EncoderGeometry, local_files_only: bool):
        super().__init__(geometry)
        import torch
        from transformers import AutoFeatureExtractor, AutoModel

        self._torch = torch
        self.device = "cuda" if torch.cuda.is_available() else "cpu"
        self.model = AutoModel.from_pretrained(name_or_path, local_files_only=local_files_only)
        self.model.eval().to(self.device)
        try:
            self.processor = AutoFeatureExtractor.from_pretrained(
                name_or_path, local_files_only=local_files_only
            )
        except (OSError, ValueError):
            logger.debug(f"No feature extractor for {name_or_path}, using plain normalization")
            self.processor = None

    def hidden_states(self, audio: np.ndarray) -> list[np.ndarray]:
        audio = np.asarray(audio, dtype=np.float32)
        if len(audio) < self.geometry.receptive_samples:
            raise FeatureError(f"audio of {len(audio)} samples is shorter than one receptive field")

        torch = self._torch
        if self.processor is not None:
            inputs = self.processor(audio, sampling_rate=SAMPLE_RATE, return_tensors="pt")
            input_values = inputs["input_values"]
        else:
            normalized = (audio - audio.mean()) / np.sqrt(audio.var() + 1e-7)
            input_values = torch.from_numpy(normalized)[None]

        with torch.inference_mode():
            outputs = self.model(input_values.to(self.device), output_hidden_states=True)
        return [h[0].float().cpu().numpy() for h in outputs.hidden_states]


class StubTextEncoder(TextEncoder):
    """Deterministic per-unit random embeddings."""

    def __init__(self, seed: int = 0, dim: int = 768):
        self.seed = seed
        self.dim = dim

    def encode_units(self, units: list[str]) -> np.ndarray:
        vectors = [
            np.random.default_rng(seed_from(self.seed, unit)).standard_normal(self.dim)
            for unit in units
        ]
        return np.asarray(vectors, dtype=np.float32).reshape(len(units), self.dim)


class HFTextEncoder(TextEncoder):
    """
    Final-layer text encoder readout, one vector per written unit.

    Units the tokenizer splits into several pieces get the mean of their
    pieces.
    """

    def __init__(self, name_or_path: str, local_files_only: bool):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(name_or_path, local_files_only=local_files_only)
        self.model = AutoModel.from_pretrained(name_or_path, local_files_only=local_files_only).eval()
        self.dim = int(self.model.config.hidden_size)

    def encode_units(self, units: list[str]) -> np.ndarray:
        out = np.zeros((len(units), self.dim), dtype=np.float32)
        if not units:
            return out
        encoding = self.tokenizer(units, is_split_into_words=True, return_tensors="pt", truncation=True)
        with self._torch.inference_mode():
            hidden = self.model(**encoding).last_hidden_state[0].float().numpy()

        word_ids = encoding.word_ids(0)
        for position in range(len(units)):
            pieces = [i for i, w in enumerate(word_ids) if w == position]
            if pieces:
                out[position] = hidden[pieces].mean(axis=0)
            else:
                logger.warning(f"Unit {units[position]!r} produced no tokens; using a zero vector")
        return out


def load_speech_encoder(locator: str, geometry: EncoderGeometry, offline: bool = False) -> SpeechEncoder:
    parsed = parse_locator(locator)
    if parsed.scheme == "stub":
        return StubSpeechEncoder(
            seed=int(parsed.params.get("seed", 0)),
            strength=float(parsed.params.get("strength", 1.0)),
            geometry=geometry,
        )
    if parsed.scheme == "hf":
        logger.info(f"Loading speech encoder {parsed.target}")
        return HFSpeechEncoder(parsed.target, geometry, local_files_only=offline)
    if not Path(parsed.target).exists():
        raise FeatureError(f"checkpoint not found: {parsed.target}")
    logger.info(f"Loading speech encoder from {parsed.target}")
    return HFSpeechEncoder(parsed.target, geometry, local_files_only=True)


def load_text_encoder(locator: str, offline: bool = False, dim: int = 768) -> TextEncoder:
    parsed = parse_locator(locator)
    if parsed.scheme == "stub":
        return StubTextEncoder(seed=int(parsed.params.get("seed", 0)), dim=dim)
    if parsed.scheme == "hf":
        logger.info(f"Loading text encoder {parsed.target}")
        return HFTextEncoder(parsed.target, local_files_only=offline)
    if not Path(parsed.target).exists():
        raise FeatureError(f"text model not found: {parsed.target}")
    return HFTextEncoder(parsed.target, local_files_only=True)
