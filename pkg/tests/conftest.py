"""Shared fixtures: the synthetic mini corpus and configs that point at it."""

from pathlib import Path

import pytest

from tone_probe.config import RunConfig
from tone_probe.corpus import AlignedSyllable, Language, ToneLabel
from tone_probe.minicorpus import MiniCorpus, demo_config, generate_mini_corpus
from tone_probe.phonology import parse_pinyin


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory) -> MiniCorpus:
    return generate_mini_corpus(tmp_path_factory.mktemp("mini"))


def absolute_demo_config(corpus: MiniCorpus, root: Path, **updates) -> RunConfig:
    """The demo config with absolute corpus paths and cache/results under `root`."""
    config = demo_config(corpus)
    corpora = [
        config.corpora[0].model_copy(
            update={
                "audio_root": corpus.audio_root,
                "transcripts": corpus.transcripts,
                "alignments": corpus.alignments,
            }
        )
    ]
    return config.model_copy(
        update={
            "corpora": corpora,
            "cache_dir": root / "cache",
            "output_dir": root / "results",
            **updates,
        }
    )


@pytest.fixture
def write_config(mini_corpus, tmp_path):
    """Write a demo-based config file into tmp_path and return its path."""

    def write(name: str = "config.yaml", **updates) -> Path:
        path = tmp_path / name
        absolute_demo_config(mini_corpus, tmp_path, **updates).save(path)
        return path

    return write


@pytest.fixture
def make_syllable():
    """Build a Mandarin AlignedSyllable from a numbered Pinyin token."""

    def make(token: str, utterance_id: str = "u1", start_s: float = 0.0, end_s: float = 0.2) -> AlignedSyllable:
        parsed = parse_pinyin(token)
        return AlignedSyllable(
            utterance_id=utterance_id,
            start_s=start_s,
            end_s=end_s,
            surface=parsed.phoneme_string,
            phoneme_string=parsed.phoneme_string,
            tone=ToneLabel(Language.MANDARIN, parsed.tone),
            onset=parsed.onset,
            rime=parsed.rime,
        )

    return make


@pytest.fixture(scope="session")
def config_for(mini_corpus):
    """Build a demo-based RunConfig rooted at a given directory."""

    def build(root: Path, **updates) -> RunConfig:
        return absolute_demo_config(mini_corpus, root, **updates)

    return build
