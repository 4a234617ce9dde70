"""
Synthetic Mandarin mini corpus for smoke runs and tests.

Twenty utterances of eight syllables each. Onsets cycle through the eight
group consonants and rimes through eight common finals, so every phoneme
string recurs with different tones. Onsets are band-passed noise (with a
burst for affricates); rimes are harmonic vowels shaped by formants and
following a citation-tone F0 contour. A few neutral-tone particles are
mixed in to exercise filtering.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import soundfile as sf
import tgt
from scipy.signal import butter, sosfilt

from .config import CorpusConfig, ExperimentConfig, RunConfig, TextModelSpec
from .corpus import AlignmentFormat, Language, TranscriptFormat
from .experiments import CheckpointSpec, ExperimentKind, ModelSpec
from .features import BaselineKind
from .phonology import CONSONANT_TASK_ONSETS
from .probe import TaskKind
from .utils import write_file

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

ONSETS = CONSONANT_TASK_ONSETS
RIMES = ("a", "ai", "an", "ang", "ao", "en", "eng", "ong")

# (low Hz, high Hz, frication s, burst)
ONSET_SHAPES: dict[str, tuple[float, float, float, bool]] = {
    "sh": (1800, 4200, 0.11, False),
    "x": (3000, 6000, 0.11, False),
    "ch": (1800, 4200, 0.09, True),
    "zh": (1800, 4200, 0.04, True),
    "q": (3000, 6000, 0.09, True),
    "s": (4500, 7500, 0.11, False),
    "z": (4500, 7500, 0.04, True),
    "c": (4500, 7500, 0.09, True),
    "d": (2000, 5000, 0.0, True),
    "l": (200, 600, 0.05, False),
}

# (F1, F2) in Hz
RIME_FORMANTS: dict[str, tuple[float, float]] = {
    "a": (850, 1300),
    "ai": (750, 1750),
    "an": (800, 1450),
    "ang": (800, 1100),
    "ao": (700, 1000),
    "en": (500, 1500),
    "eng": (500, 1300),
    "ong": (450, 850),
    "e": (550, 1200),
}
F3_HZ = 2600.0
FORMANT_BW_HZ = 130.0

NEUTRAL_PARTICLES = ("de5", "le5")


def tone_contour(tone: int, u: np.ndarray) -> np.ndarray:
    """F0 in Hz over normalized time u in [0, 1]."""
    if tone == 1:
        return np.full_like(u, 260.0)
    if tone == 2:
        return 150.0 + 110.0 * u**2
    if tone == 3:
        # dip to the low point at 70% then partial recovery
        fall = 80.0 * np.sin(0.5 * np.pi * np.minimum(u / 0.7, 1.0))
        return 190.0 - fall + 200.0 * np.maximum(u - 0.7, 0.0)
    if tone == 4:
        return 290.0 - 140.0 * u
    return np.full_like(u, 180.0)


def mini_token(index: int) -> str:
    """Numbered Pinyin of the index-th toned syllable of the corpus."""
    c, j = index % 64, index // 64
    tone = (c + j) % 4 + 1
    return f"{ONSETS[index % 8]}{RIMES[(index // 8) % 8]}{tone}"


def _onset(onset: str, rng: np.random.Generator) -> np.ndarray:
    low, high, frication_s, burst = ONSET_SHAPES[onset]
    parts = []
    if burst:
        closure = np.zeros(int(0.015 * SAMPLE_RATE))
        click = rng.standard_normal(int(0.006 * SAMPLE_RATE)) * np.linspace(0.5, 0.0, int(0.006 * SAMPLE_RATE))
        parts.extend([closure, click])
    n = int(frication_s * SAMPLE_RATE)
    if n:
        sos = butter(4, [low, high], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        noise = sosfilt(sos, rng.standard_normal(n + 256))[256:]
        envelope = np.sin(np.linspace(0.0, np.pi, n)) ** 0.5
        parts.append(0.3 * envelope * noise / (np.max(np.abs(noise)) + 1e-9))
    return np.concatenate(parts) if parts else np.zeros(0)


def _vowel(rime: str, tone: int, duration_s: float) -> np.ndarray:
    n = int(duration_s * SAMPLE_RATE)
    u = np.linspace(0.0, 1.0, n)
    f0 = tone_contour(tone, u)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    f1, f2 = RIME_FORMANTS[rime]
    out = np.zeros(n)
    for k in range(1, int(7000 // f0.max()) + 1):
        freq = k * f0
        gain = sum(np.exp(-0.5 * ((freq - f) / FORMANT_BW_HZ) ** 2) for f in (f1, f2, F3_HZ)) + 0.02
        out += gain * np.sin(k * phase) / np.sqrt(k)

    envelope = np.ones(n)
    attack, release = int(0.01 * SAMPLE_RATE), int(0.03 * SAMPLE_RATE)
    envelope[:attack] = np.linspace(0.0, 1.0, attack)
    envelope[-release:] = np.linspace(1.0, 0.0, release)
    if rime.endswith("n") or rime.endswith("ng"):
        coda = int(0.3 * n)
        envelope[-coda:] *= np.linspace(1.0, 0.5, coda)
    return 0.35 * envelope * out / (np.max(np.abs(out)) + 1e-9)


@dataclass
class MiniCorpus:
    root: Path
    audio_root: Path
    transcripts: Path
    alignments: Path
    textgrid_dir: Path
    tokens: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n_syllables(self) -> int:
        return sum(len(t) for t in self.tokens.values())


def generate_mini_corpus(
    root: Path,
    n_utterances: int = 20,
    syllables_per_utterance: int = 8,
    seed: int = 0,
) -> MiniCorpus:
    """
    Write audio, transcripts, a TSV alignment and per-utterance TextGrids under `root`.

    Utterances 1, 5, 9, ... end in "le5" and 3, 7, 11, ... in "de5".
    Output is identical for identical arguments.
    """
    root = Path(root)
    corpus = MiniCorpus(
        root=root,
        audio_root=root / "wav",
        transcripts=root / "transcripts.tsv",
        alignments=root / "alignments.tsv",
        textgrid_dir=root / "textgrids",
    )
    corpus.audio_root.mkdir(parents=True, exist_ok=True)
    corpus.textgrid_dir.mkdir(parents=True, exist_ok=True)

    transcript_rows, alignment_rows = [], []
    for u in range(n_utterances):
        utterance_id = f"mini-{u:03d}"
        rng = np.random.default_rng([seed, u])
        tokens = [mini_token(u * syllables_per_utterance + k) for k in range(syllables_per_utterance)]
        if u % 4 == 1:
            tokens.append(NEUTRAL_PARTICLES[1])
        elif u % 4 == 3:
            tokens.append(NEUTRAL_PARTICLES[0])

        pieces = [np.zeros(int(0.15 * SAMPLE_RATE))]
        cursor = len(pieces[0])
        intervals = []
        for k, token in enumerate(tokens):
            body, tone = token[:-1], int(token[-1])
            onset = next(o for o in sorted(ONSET_SHAPES, key=len, reverse=True) if body.startswith(o))
            rime = body[len(onset):]
            duration = 0.1 if tone == 5 else float(rng.uniform(0.16, 0.22))
            syllable = np.concatenate([_onset(onset, rng), _vowel(rime, tone, duration)])

            start = cursor
            cursor += len(syllable)
            intervals.append((start, cursor, body))
            pieces.append(syllable)
            gap = np.zeros(int(0.04 * SAMPLE_RATE) if k < len(tokens) - 1 else int(0.15 * SAMPLE_RATE))
            pieces.append(gap)
            cursor += len(gap)

        audio = np.concatenate(pieces)
        audio += 0.001 * rng.standard_normal(len(audio))
        audio_path = corpus.audio_root / f"{utterance_id}.wav"
        sf.write(audio_path, audio.astype(np.float32), SAMPLE_RATE, subtype="FLOAT")

        duration_s = len(audio) / SAMPLE_RATE
        labelled = _with_silences(intervals, len(audio))
        for start, end, label in labelled:
            alignment_rows.append((utterance_id, start / SAMPLE_RATE, end / SAMPLE_RATE, label))
        _write_textgrid(corpus.textgrid_dir / f"{utterance_id}.TextGrid", labelled, duration_s)

        transcript_rows.append((utterance_id, f"{utterance_id}.wav", " ".join(tokens)))
        corpus.tokens[utterance_id] = tokens

    transcripts = pd.DataFrame(transcript_rows, columns=["utterance_id", "audio", "tokens"])
    write_file(corpus.transcripts, transcripts.to_csv(sep="\t", index=False, lineterminator="\n"))
    alignments = pd.DataFrame(alignment_rows, columns=["utterance_id", "start_s", "end_s", "label"])
    write_file(corpus.alignments, alignments.to_csv(sep="\t", index=False, float_format="%.6f", lineterminator="\n"))

    logger.info(f"Mini corpus: {n_utterances} utterances, {corpus.n_syllables} syllables -> {root}")
    return corpus


def _with_silences(intervals: list[tuple[int, int, str]], n_samples: int) -> list[tuple[int, int, str]]:
    labelled = []
    cursor = 0
    for start, end, label in intervals:
        if start > cursor:
            labelled.append((cursor, start, "sil"))
        labelled.append((start, end, label))
        cursor = end
    if cursor < n_samples:
        labelled.append((cursor, n_samples, "sil"))
    return labelled


def _write_textgrid(path: Path, labelled: list[tuple[int, int, str]], duration_s: float) -> None:
    tier = tgt.core.IntervalTier(0.0, duration_s, "syllables")
    for start, end, label in labelled:
        tier.add_interval(tgt.core.Interval(start / SAMPLE_RATE, end / SAMPLE_RATE, label))
    textgrid = tgt.core.TextGrid()
    textgrid.add_tier(tier)
    tgt.io.write_to_file(textgrid, str(path), format="long")


def demo_models() -> list[ModelSpec]:
    """Stub encoders: a tonal model with a checkpoint series, fine-tuned variants, and a non-tonal model."""
    return [
        ModelSpec(
            model_id="stub-tonal",
            language="mandarin",
            tonality="tonal",
            locator="stub://tonal?seed=1&strength=1.0",
            checkpoints=[
                CheckpointSpec(step=0, locator="stub://tonal?seed=1&strength=0.0"),
                CheckpointSpec(step=5000, locator="stub://tonal?seed=1&strength=0.6"),
            ],
            reentrant=True,
        ),
        ModelSpec(
            model_id="stub-tonal-ft",
            language="mandarin",
            tonality="tonal",
            training_stage="finetuned",
            locator="stub://tonal-ft?seed=2&strength=1.0",
            reentrant=True,
        ),
        ModelSpec(
            model_id="stub-english",
            language="english",
            tonality="non_tonal",
            locator="stub://english?seed=3&strength=0.8",
            reentrant=True,
        ),
        ModelSpec(
            model_id="stub-english-ft",
            language="english",
            tonality="non_tonal",
            training_stage="finetuned",
            locator="stub://english-ft?seed=4&strength=0.5",
            reentrant=True,
        ),
    ]


def demo_config(corpus: MiniCorpus, seed: int = 13, workers: int = 2) -> RunConfig:
    """A config running all four experiment families on the mini corpus with stub encoders."""
    return RunConfig(
        corpora=[
            CorpusConfig(
                corpus_id="mini",
                language=Language.MANDARIN,
                audio_root=Path(corpus.audio_root.name),
                transcripts=Path(corpus.transcripts.name),
                transcript_format=TranscriptFormat.TSV,
                alignments=Path(corpus.alignments.name),
                alignment_format=AlignmentFormat.TSV,
            )
        ],
        models=demo_models(),
        text_model=TextModelSpec(model_id="stub-text", locator="stub://text?seed=5"),
        experiments=[
            ExperimentConfig(
                name="layer_sweep",
                kind=ExperimentKind.LAYER_SWEEP,
                corpus="mini",
                models=["stub-tonal", "stub-english"],
                tasks=[TaskKind.TONE, TaskKind.CONSONANT],
            ),
            ExperimentConfig(
                name="finetune_contrast",
                kind=ExperimentKind.FINETUNE_CONTRAST,
                corpus="mini",
                pairs=[("stub-tonal", "stub-tonal-ft"), ("stub-english", "stub-english-ft")],
                baselines=[],
            ),
            ExperimentConfig(
                name="trajectory",
                kind=ExperimentKind.TRAJECTORY,
                corpus="mini",
                models=["stub-tonal"],
                tasks=[TaskKind.TONE, TaskKind.CONSONANT],
                baselines=[BaselineKind.F0, BaselineKind.MFCC],
            ),
            ExperimentConfig(
                name="contrasts",
                kind=ExperimentKind.CONTRASTS,
                corpus="mini",
                models=["stub-tonal", "stub-english"],
                baselines=[],
            ),
        ],
        cache_dir=Path("cache"),
        output_dir=Path("results"),
        seed=seed,
        workers=workers,
    )


def write_demo(root: Path, seed: int = 13) -> Path:
    """Generate the mini corpus under `root` and write root/config.yaml for it."""
    corpus = generate_mini_corpus(root)
    config_path = Path(root) / "config.yaml"
    demo_config(corpus, seed=seed).save(config_path)
    return config_path
