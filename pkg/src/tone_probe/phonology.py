"""
Syllable parsing for numbered Pinyin and tone-numbered Vietnamese IPA.

Splits a transcript token into its toneless segmental string, tone number,
onset and rime. Tone numbers are always the base (citation) form written in
the transcript; sandhi is never applied.
"""

import re
import unicodedata
from itertools import combinations
from typing import NamedTuple

from .errors import ParseError

# Mandarin initials; digraphs come first so they win over their first letter.
MANDARIN_INITIALS: tuple[str, ...] = (
    "zh", "ch", "sh",
    "b", "p", "m", "f", "d", "t", "n", "l",
    "g", "k", "h", "j", "q", "x", "r", "z", "c", "s",
)

MANDARIN_TONES = (1, 2, 3, 4)
NEUTRAL_TONE = 5
VIETNAMESE_TONES = tuple(range(1, 9))

# Perceptual groups: members of a group assimilate to one English category.
CONSONANT_GROUPS: dict[int, tuple[str, ...]] = {
    1: ("sh", "x"),
    2: ("ch", "zh", "q"),
    3: ("s", "z", "c"),
}
CONSONANT_TASK_ONSETS: tuple[str, ...] = tuple(
    onset for group in CONSONANT_GROUPS.values() for onset in group
)

TONE_PAIRS: tuple[tuple[int, int], ...] = tuple(combinations(MANDARIN_TONES, 2))

# Syllables made of a nasal alone (嗯 ng2, n2; 呣 m2) have no onset
SYLLABIC_NASALS = frozenset({"m", "n", "ng"})

# Onsets as written by the Vietnamese phonetizer, longest first.
VIETNAMESE_ONSETS: tuple[str, ...] = tuple(
    sorted(
        (
            "tʰ", "kʷ", "ŋʷ", "xʷ", "ɣʷ", "hʷ", "ʔʷ", "zʷ", "ʂʷ", "tʷ",
            "ɓ", "ɗ", "b", "m", "f", "v", "t", "d", "n", "s", "z", "l",
            "c", "ɲ", "ʂ", "ʐ", "ʈ", "k", "x", "ŋ", "ɣ", "h", "ʔ", "p", "r", "w", "j",
        ),
        key=len,
        reverse=True,
    )
)

_PINYIN_TOKEN = re.compile(r"^([a-zü]+)([1-5])$")
_SUPERSCRIPT_DIGITS = str.maketrans("¹²³⁴⁵⁶⁷⁸⁹⁰₁₂₃₄₅₆₇₈₉₀", "12345678901234567890")


class PinyinSyllable(NamedTuple):
    phoneme_string: str
    tone: int
    onset: str
    rime: str


class VietnameseSyllable(NamedTuple):
    phoneme_string: str
    tone: int


def split_mandarin_onset(phoneme_string: str) -> tuple[str, str]:
    """Split a toneless Pinyin base into (onset, rime); onset may be empty."""
    if phoneme_string in SYLLABIC_NASALS:
        return "", phoneme_string
    for initial in MANDARIN_INITIALS:
        if phoneme_string.startswith(initial) and len(phoneme_string) > len(initial):
            return initial, phoneme_string[len(initial):]
    return "", phoneme_string


def parse_pinyin(numbered_syllable: str) -> PinyinSyllable:
    """
    Parse a numbered Pinyin syllable such as "hao3" or "zhong1".

    The trailing digit is the citation tone (5 marks the neutral tone).
    "v" is accepted as the usual ASCII stand-in for "ü".
    """
    token = numbered_syllable.strip().lower()
    if not token or not token[-1].isdigit():
        raise ParseError(numbered_syllable, "missing trailing tone digit")
    match = _PINYIN_TOKEN.match(token)
    if match is None:
        raise ParseError(numbered_syllable, "unexpected characters or tone digit outside 1-5")

    base = token[:-1]
    onset, rime = split_mandarin_onset(base)
    return PinyinSyllable(base, int(token[-1]), onset, rime)


def parse_vietnamese_ipa(ipa_syllable_with_tone: str) -> VietnameseSyllable:
    """
    Parse a phonetizer syllable with a trailing tone number, e.g. "ʔan1".

    Tone numbers follow the eight-tone scheme (7 and 8 are the checked
    tones); superscript and subscript digits are accepted.
    """
    token = unicodedata.normalize("NFC", ipa_syllable_with_tone.strip())
    token = token.translate(_SUPERSCRIPT_DIGITS)
    digits = len(token) - len(token.rstrip("0123456789"))
    if digits == 0:
        raise ParseError(ipa_syllable_with_tone, "missing tone marker")
    segments, marker = token[:-digits], token[-digits:]
    tone = int(marker)
    if tone not in VIETNAMESE_TONES:
        raise ParseError(ipa_syllable_with_tone, f"tone marker {marker} outside 1-8")
    if not segments or any(ch.isdigit() for ch in segments):
        raise ParseError(ipa_syllable_with_tone, "malformed segmental string")
    return VietnameseSyllable(segments, tone)


def split_vietnamese_onset(phoneme_string: str) -> tuple[str, str]:
    """Split a toneless Vietnamese IPA syllable into (onset, rime)."""
    for onset in VIETNAMESE_ONSETS:
        if phoneme_string.startswith(onset) and len(phoneme_string) > len(onset):
            return onset, phoneme_string[len(onset):]
    return "", phoneme_string


def consonant_group_of(onset: str) -> int | None:
    for group, members in CONSONANT_GROUPS.items():
        if onset in members:
            return group
    return None
