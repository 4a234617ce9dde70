"""
Forced-alignment readers.

Ingestion is driven by file format rather than by aligner: interval-tier
TextGrid files (one per utterance) and a single TSV with columns
utterance_id, start_s, end_s, label.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import tgt

from .errors import CorpusError

logger = logging.getLogger(__name__)

# Aligner tokens that bear no tone
SILENCE_LABELS = frozenset({"", "sil", "sp", "spn", "<eps>", "<sil>", "<unk>"})

TSV_COLUMNS = ("utterance_id", "start_s", "end_s", "label")


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float
    label: str

    @property
    def is_silence(self) -> bool:
        return self.label.strip().lower() in SILENCE_LABELS


def read_textgrid(path: Path, tier_name: str | None = None) -> list[Interval]:
    """
    Read the intervals of one tier of a TextGrid file.

    Uses the named tier, or the first interval tier when no name is given.
    """
    textgrid = tgt.io.read_textgrid(str(path), include_empty_intervals=True)
    if tier_name is not None:
        tier = textgrid.get_tier_by_name(tier_name)
    else:
        interval_tiers = [t for t in textgrid.tiers if isinstance(t, tgt.core.IntervalTier)]
        if not interval_tiers:
            raise CorpusError(f"{path}: no interval tier")
        tier = interval_tiers[0]
    return [
        Interval(float(iv.start_time), float(iv.end_time), iv.text.strip())
        for iv in tier.intervals
    ]


def read_alignment_tsv(path: Path) -> dict[str, list[Interval]]:
    """Read a TSV alignment file into intervals grouped by utterance, in file order."""
    frame = pd.read_csv(
        path,
        sep="\t",
        dtype={"utterance_id": str, "label": str},
        keep_default_na=False,
    )
    missing = [c for c in TSV_COLUMNS if c not in frame.columns]
    if missing:
        raise CorpusError(f"{path}: missing columns {missing}")

    intervals: dict[str, list[Interval]] = {}
    for row in frame.itertuples(index=False):
        intervals.setdefault(row.utterance_id, []).append(
            Interval(float(row.start_s), float(row.end_s), row.label.strip())
        )
    return intervals


def speech_intervals(intervals: list[Interval]) -> list[Interval]:
    """
    Drop silence and noise intervals, checking order along the way.

    Raises CorpusError when spans are empty, unsorted or overlapping.
    """
    speech = [iv for iv in intervals if not iv.is_silence]
    previous_end = 0.0
    for iv in speech:
        if iv.start_s < 0 or iv.end_s <= iv.start_s:
            raise CorpusError(f"empty or negative interval {iv}")
        if iv.start_s < previous_end - 1e-9:
            raise CorpusError(f"overlapping or unsorted interval {iv}")
        previous_end = iv.end_s
    return speech
