"""
Corpus ingestion: transcripts + forced alignments -> tone-bearing syllables.

Each transcript token is paired positionally with one speech interval of
the utterance's alignment. Utterances whose counts disagree are dropped and
counted; every transcript syllable ends up either emitted or in a counter.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from pathlib import Path

import pandas as pd

from .alignment import Interval, read_alignment_tsv, read_textgrid, speech_intervals
from .errors import CorpusError, ParseError
from .phonology import (
    MANDARIN_TONES,
    NEUTRAL_TONE,
    VIETNAMESE_TONES,
    parse_pinyin,
    parse_vietnamese_ipa,
    split_vietnamese_onset,
)
from .utils import write_file

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

SYLLABLE_COLUMNS = (
    "utterance_id", "start_s", "end_s", "surface",
    "phoneme_string", "tone", "onset", "rime", "position",
)


class Language(StrEnum):
    MANDARIN = "mandarin"
    VIETNAMESE = "vietnamese"


class TranscriptFormat(StrEnum):
    THCHS30 = "thchs30"
    TSV = "tsv"


class AlignmentFormat(StrEnum):
    TEXTGRID = "textgrid"
    TSV = "tsv"


@dataclass(frozen=True)
class ToneLabel:
    language: Language
    tone_id: int

    def __post_init__(self):
        allowed = (
            MANDARIN_TONES + (NEUTRAL_TONE,)
            if self.language == Language.MANDARIN
            else VIETNAMESE_TONES
        )
        if self.tone_id not in allowed:
            raise ValueError(f"tone {self.tone_id} invalid for {self.language}")

    @property
    def is_neutral(self) -> bool:
        return self.language == Language.MANDARIN and self.tone_id == NEUTRAL_TONE


@dataclass(frozen=True)
class AlignedSyllable:
    """One tone-bearing unit with its time span and labels."""

    utterance_id: str
    start_s: float
    end_s: float
    surface: str
    phoneme_string: str
    tone: ToneLabel
    onset: str
    rime: str
    # index of the unit in its utterance's full aligned sequence, before any filtering
    position: int = 0

    def __post_init__(self):
        if self.start_s < 0 or self.end_s <= self.start_s:
            raise ValueError(f"bad span {self.start_s}-{self.end_s} in {self.utterance_id}")
        if self.onset + self.rime != self.phoneme_string:
            raise ValueError(f"onset+rime does not rebuild {self.phoneme_string!r}")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: Path
    tokens: tuple[str, ...]
    # TextGrid path, pre-read TSV intervals, or None when no alignment exists
    alignment: Path | tuple[Interval, ...] | None


@dataclass
class CorpusManifest:
    corpus_id: str
    language: Language
    audio_root: Path
    entries: list[ManifestEntry]
    sample_rate: int = SAMPLE_RATE
    alignment_tier: str | None = None
    mismatch_threshold: float = 0.05

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise CorpusError(f"{self.corpus_id}: sample rate must be {SAMPLE_RATE}")
        ids = [e.utterance_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise CorpusError(f"{self.corpus_id}: duplicate utterance ids in transcripts")

    def audio_index(self) -> dict[str, Path]:
        return {e.utterance_id: e.audio_path for e in self.entries}


@dataclass
class IngestStats:
    """Reconciliation counters for one ingest."""

    utterances: int = 0
    utterances_ok: int = 0
    utterances_mismatch: int = 0
    utterances_unreadable: int = 0
    transcript_syllables: int = 0
    emitted: int = 0
    parse_failures: int = 0
    dropped_mismatch: int = 0
    dropped_unreadable: int = 0
    neutral_filtered: int = 0
    failed_tokens: list[str] = field(default_factory=list)

    @property
    def mismatch_rate(self) -> float:
        return self.utterances_mismatch / self.utterances if self.utterances else 0.0

    def record_neutral_filter(self, removed: int) -> None:
        """Move syllables removed by neutral-tone filtering out of `emitted`."""
        self.emitted -= removed
        self.neutral_filtered += removed

    def reconciles(self) -> bool:
        accounted = (
            self.emitted
            + self.neutral_filtered
            + self.parse_failures
            + self.dropped_mismatch
            + self.dropped_unreadable
        )
        return accounted == self.transcript_syllables

    def to_json(self) -> str:
        data = asdict(self)
        data["mismatch_rate"] = self.mismatch_rate
        data["reconciles"] = self.reconciles()
        return json.dumps(data, indent=2, ensure_ascii=False)


@dataclass
class IngestResult:
    syllables: list[AlignedSyllable]
    stats: IngestStats
    # full aligned unit sequence of every ingested utterance
    units: dict[str, tuple[str, ...]] = field(default_factory=dict)


@dataclass
class _UtteranceOutcome:
    status: str  # ok | mismatch | unreadable
    n_tokens: int
    syllables: list[AlignedSyllable] = field(default_factory=list)
    failed_tokens: list[str] = field(default_factory=list)
    units: tuple[str, ...] = ()


def read_thchs30_transcripts(transcript_dir: Path, audio_root: Path) -> dict[str, tuple[Path, tuple[str, ...]]]:
    """
    Read THCHS-30 style `*.wav.trn` files.

    Line 1 holds the characters, line 2 the numbered Pinyin. Files whose
    first line is a relative path to another .trn file are followed, as in
    the corpus's train/dev/test folders.
    """
    transcripts = {}
    for trn in sorted(transcript_dir.glob("*.wav.trn")):
        lines = trn.read_text(encoding="utf-8").splitlines()
        if len(lines) == 1 and lines[0].strip().endswith(".trn"):
            target = (trn.parent / lines[0].strip()).resolve()
            lines = target.read_text(encoding="utf-8").splitlines()
        if len(lines) < 2:
            logger.warning(f"Skipping {trn.name}: no Pinyin line")
            continue
        utterance_id = trn.name[: -len(".wav.trn")]
        transcripts[utterance_id] = (audio_root / f"{utterance_id}.wav", tuple(lines[1].split()))
    return transcripts


def read_tsv_transcripts(path: Path, audio_root: Path) -> dict[str, tuple[Path, tuple[str, ...]]]:
    """Read a TSV with columns utterance_id, audio, tokens (space separated)."""
    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    missing = [c for c in ("utterance_id", "audio", "tokens") if c not in frame.columns]
    if missing:
        raise CorpusError(f"{path}: missing columns {missing}")
    transcripts = {}
    for row in frame.itertuples(index=False):
        if row.utterance_id in transcripts:
            raise CorpusError(f"{path}: duplicate utterance {row.utterance_id}")
        transcripts[row.utterance_id] = (audio_root / row.audio, tuple(row.tokens.split()))
    return transcripts


def build_manifest(
    corpus_id: str,
    language: Language,
    audio_root: Path,
    transcripts: Path,
    transcript_format: TranscriptFormat,
    alignments: Path,
    alignment_format: AlignmentFormat,
    alignment_tier: str | None = None,
    sample_rate: int = SAMPLE_RATE,
    mismatch_threshold: float = 0.05,
) -> CorpusManifest:
    """Resolve every transcript utterance to its audio file and alignment entry."""
    if transcript_format == TranscriptFormat.THCHS30:
        table = read_thchs30_transcripts(transcripts, audio_root)
    else:
        table = read_tsv_transcripts(transcripts, audio_root)

    tsv_alignments = read_alignment_tsv(alignments) if alignment_format == AlignmentFormat.TSV else {}

    entries = []
    for utterance_id in sorted(table):
        audio_path, tokens = table[utterance_id]
        alignment: Path | tuple[Interval, ...] | None
        if alignment_format == AlignmentFormat.TSV:
            found = tsv_alignments.get(utterance_id)
            alignment = tuple(found) if found is not None else None
        else:
            grid = alignments / f"{utterance_id}.TextGrid"
            alignment = grid if grid.exists() else None
        entries.append(ManifestEntry(utterance_id, audio_path, tokens, alignment))

    logger.info(f"Manifest {corpus_id}: {len(entries)} utterances")
    return CorpusManifest(
        corpus_id=corpus_id,
        language=Language(language),
        audio_root=audio_root,
        entries=entries,
        sample_rate=sample_rate,
        alignment_tier=alignment_tier,
        mismatch_threshold=mismatch_threshold,
    )


def _parse_token(token: str, language: Language) -> tuple[str, int, str, str]:
    if language == Language.MANDARIN:
        parsed = parse_pinyin(token)
        return parsed.phoneme_string, parsed.tone, parsed.onset, parsed.rime
    parsed_vi = parse_vietnamese_ipa(token)
    onset, rime = split_vietnamese_onset(parsed_vi.phoneme_string)
    return parsed_vi.phoneme_string, parsed_vi.tone, onset, rime


def _ingest_utterance(entry: ManifestEntry, language: Language, tier: str | None) -> _UtteranceOutcome:
    n_tokens = len(entry.tokens)
    if entry.alignment is None:
        logger.warning(f"Skipping {entry.utterance_id}: no alignment entry")
        return _UtteranceOutcome("unreadable", n_tokens)

    try:
        if isinstance(entry.alignment, Path):
            intervals = read_textgrid(entry.alignment, tier)
        else:
            intervals = list(entry.alignment)
        speech = speech_intervals(intervals)
        if not entry.audio_path.exists():
            raise CorpusError(f"missing audio {entry.audio_path}")
    except Exception as e:  # tgt raises bare Exception on malformed files
        logger.warning(f"Skipping {entry.utterance_id}: {e}")
        return _UtteranceOutcome("unreadable", n_tokens)

    if len(speech) != n_tokens:
        logger.warning(
            f"Skipping {entry.utterance_id}: {n_tokens} transcript syllables "
            f"vs {len(speech)} aligned intervals"
        )
        return _UtteranceOutcome("mismatch", n_tokens)

    outcome = _UtteranceOutcome("ok", n_tokens, units=tuple(i.label for i in speech))
    for position, (token, interval) in enumerate(zip(entry.tokens, speech)):
        try:
            phoneme_string, tone, onset, rime = _parse_token(token, language)
        except ParseError as e:
            logger.warning(f"{entry.utterance_id}: {e}")
            outcome.failed_tokens.append(token)
            continue
        outcome.syllables.append(
            AlignedSyllable(
                utterance_id=entry.utterance_id,
                start_s=interval.start_s,
                end_s=interval.end_s,
                surface=interval.label,
                phoneme_string=phoneme_string,
                tone=ToneLabel(language, tone),
                onset=onset,
                rime=rime,
                position=position,
            )
        )
    return outcome


def ingest_corpus(manifest: CorpusManifest, workers: int = 1) -> IngestResult:
    """
    Ingest a manifest and reconcile counts.

    Raises CorpusError when the share of count-mismatched utterances exceeds
    the manifest's threshold, which signals alignments from the wrong run.
    """
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(
            pool.map(
                lambda e: _ingest_utterance(e, manifest.language, manifest.alignment_tier),
                manifest.entries,
            )
        )

    stats = IngestStats(utterances=len(outcomes))
    syllables: list[AlignedSyllable] = []
    units: dict[str, tuple[str, ...]] = {}
    for entry, outcome in zip(manifest.entries, outcomes):
        stats.transcript_syllables += outcome.n_tokens
        if outcome.status == "mismatch":
            stats.utterances_mismatch += 1
            stats.dropped_mismatch += outcome.n_tokens
        elif outcome.status == "unreadable":
            stats.utterances_unreadable += 1
            stats.dropped_unreadable += outcome.n_tokens
        else:
            stats.utterances_ok += 1
            stats.parse_failures += len(outcome.failed_tokens)
            stats.failed_tokens.extend(outcome.failed_tokens)
            syllables.extend(outcome.syllables)
            units[entry.utterance_id] = outcome.units
    stats.emitted = len(syllables)

    logger.info(
        f"Ingested {manifest.corpus_id}: {stats.emitted} syllables from "
        f"{stats.utterances_ok}/{stats.utterances} utterances"
    )
    if stats.mismatch_rate > manifest.mismatch_threshold:
        raise CorpusError(
            f"{manifest.corpus_id}: {stats.mismatch_rate:.1%} of utterances have "
            f"transcript/alignment count mismatches (limit {manifest.mismatch_threshold:.0%})"
        )
    return IngestResult(syllables, stats, units)


def load_corpus(manifest: CorpusManifest, workers: int = 1) -> list[AlignedSyllable]:
    """One AlignedSyllable per aligned tone-bearing unit of the manifest."""
    return ingest_corpus(manifest, workers).syllables


def filter_neutral_tone(syllables: list[AlignedSyllable]) -> list[AlignedSyllable]:
    """Drop Mandarin neutral-tone syllables."""
    kept = [s for s in syllables if not s.tone.is_neutral]
    removed = len(syllables) - len(kept)
    if syllables:
        logger.info(f"Removed {removed} neutral-tone syllables ({removed / len(syllables):.2%})")
    return kept


def write_syllable_table(path: Path, syllables: list[AlignedSyllable]) -> None:
    """Write the syllable table as TSV with 6-decimal fixed-point seconds."""
    frame = pd.DataFrame(
        {
            "utterance_id": [s.utterance_id for s in syllables],
            "start_s": [s.start_s for s in syllables],
            "end_s": [s.end_s for s in syllables],
            "surface": [s.surface for s in syllables],
            "phoneme_string": [s.phoneme_string for s in syllables],
            "tone": [s.tone.tone_id for s in syllables],
            "onset": [s.onset for s in syllables],
            "rime": [s.rime for s in syllables],
            "position": [s.position for s in syllables],
        },
        columns=list(SYLLABLE_COLUMNS),
    )
    write_file(path, frame.to_csv(sep="\t", index=False, float_format="%.6f", lineterminator="\n"))


def read_syllable_table(path: Path, language: Language) -> list[AlignedSyllable]:
    frame = pd.read_csv(
        path,
        sep="\t",
        dtype={c: str for c in SYLLABLE_COLUMNS if c not in ("start_s", "end_s", "tone", "position")},
        keep_default_na=False,
    )
    language = Language(language)
    return [
        AlignedSyllable(
            utterance_id=row.utterance_id,
            start_s=float(row.start_s),
            end_s=float(row.end_s),
            surface=row.surface,
            phoneme_string=row.phoneme_string,
            tone=ToneLabel(language, int(row.tone)),
            onset=row.onset,
            rime=row.rime,
            position=int(row.position),
        )
        for row in frame.itertuples(index=False)
    ]


def write_utterance_index(
    path: Path, audio_index: dict[str, Path], units: dict[str, tuple[str, ...]] | None = None
) -> None:
    """Write utterance -> audio path, plus each utterance's space-joined unit sequence."""
    units = units or {}
    frame = pd.DataFrame(
        {
            "utterance_id": list(audio_index),
            "audio_path": [str(p) for p in audio_index.values()],
            "units": [" ".join(units.get(u, ())) for u in audio_index],
        }
    )
    write_file(path, frame.to_csv(sep="\t", index=False, lineterminator="\n"))


def read_utterance_index(path: Path) -> dict[str, Path]:
    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    return {row.utterance_id: Path(row.audio_path) for row in frame.itertuples(index=False)}


def read_utterance_units(path: Path) -> dict[str, tuple[str, ...]]:
    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    if "units" not in frame.columns:
        return {}
    return {row.utterance_id: tuple(row.units.split()) for row in frame.itertuples(index=False)}
