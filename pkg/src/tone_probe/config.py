"""Run configuration with validation."""

import logging
import os
from pathlib import Path
from typing import Self

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .corpus import AlignmentFormat, Language, TranscriptFormat
from .encoders import parse_locator
from .errors import ConfigError
from .experiments import ExperimentKind, ModelSpec
from .features import BaselineKind
from .probe import DEFAULT_ALPHA_GRID, TaskKind
from .utils import stable_hash

logger = logging.getLogger(__name__)


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus_id: str = Field(min_length=1)
    language: Language
    audio_root: Path
    transcripts: Path
    transcript_format: TranscriptFormat = TranscriptFormat.TSV
    alignments: Path
    alignment_format: AlignmentFormat = AlignmentFormat.TSV
    # Default: the first interval tier
    alignment_tier: str | None = None
    sample_rate: int = Field(default=16000, ge=16000, le=16000)
    mismatch_threshold: float = Field(default=0.05, ge=0, le=1)


class TextModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model_id: str = Field(default="text", min_length=1)
    locator: str = Field(min_length=1)
    dim: int = Field(default=768, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    kind: ExperimentKind
    corpus: str
    models: list[str] = Field(default_factory=list)
    # (pretrained, finetuned) model ids, for finetune_contrast
    pairs: list[tuple[str, str]] = Field(default_factory=list)
    tasks: list[TaskKind] = Field(default_factory=lambda: [TaskKind.TONE])
    baselines: list[BaselineKind] = Field(default_factory=lambda: list(BaselineKind))

    def model_ids(self) -> list[str]:
        ids = list(self.models)
        for pretrained, finetuned in self.pairs:
            ids.extend([pretrained, finetuned])
        return list(dict.fromkeys(ids))


# Settings that change how a run executes but not what it computes
EXECUTION_ONLY = {"workers", "extraction_workers", "offline", "output_dir", "cache_dir"}


class RunConfig(BaseModel):
    """Configuration for a probing run."""

    model_config = ConfigDict(extra="forbid")

    corpora: list[CorpusConfig] = Field(default_factory=list)
    models: list[ModelSpec] = Field(default_factory=list)
    text_model: TextModelSpec | None = None
    experiments: list[ExperimentConfig] = Field(default_factory=list)

    # Activation cache and report directories (relative to the config file)
    cache_dir: Path = Field(default=Path("cache"))
    output_dir: Path = Field(default=Path("results"))

    # No implicit randomness: every run names its seed
    seed: int

    subsample_fraction: float = Field(default=1.0, gt=0, le=1)
    alpha_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_ALPHA_GRID), min_length=1)
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    n_folds: int = Field(default=5, ge=2)
    center_features: bool = True

    # Probe workers default to all processors, extraction to one
    workers: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    extraction_workers: int = Field(default=1, ge=1)
    offline: bool = False

    @classmethod
    def load(cls, path: Path | str) -> Self:
        """Load and validate a config file; relative paths resolve against its directory."""
        return validate(path)

    def save(self, path: Path | str) -> None:
        """Save config to YAML file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        with open(path, "w") as f:
            yaml.dump(self.model_dump(mode="json"), f, default_flow_style=False, sort_keys=False)

    def corpus(self, corpus_id: str) -> CorpusConfig:
        return next(c for c in self.corpora if c.corpus_id == corpus_id)

    def model(self, model_id: str) -> ModelSpec:
        return next(m for m in self.models if m.model_id == model_id)

    def resolve_paths(self, base_dir: Path) -> Self:
        def resolve(p: Path) -> Path:
            return p if p.is_absolute() else (base_dir / p).resolve()

        corpora = [
            c.model_copy(
                update={
                    "audio_root": resolve(c.audio_root),
                    "transcripts": resolve(c.transcripts),
                    "alignments": resolve(c.alignments),
                }
            )
            for c in self.corpora
        ]
        models = [m.model_copy(update=_resolved_locators(m, base_dir)) for m in self.models]
        text_model = self.text_model
        if text_model is not None and parse_locator(text_model.locator).scheme == "path":
            text_model = text_model.model_copy(update={"locator": str(resolve(Path(text_model.locator)))})
        return self.model_copy(
            update={
                "corpora": corpora,
                "models": models,
                "text_model": text_model,
                "cache_dir": resolve(self.cache_dir),
                "output_dir": resolve(self.output_dir),
            }
        )

    def config_hash(self) -> str:
        """Digest of the settings that determine results."""
        return stable_hash(self.model_dump(mode="json", exclude=EXECUTION_ONLY))

    def experiment_hash(self, experiment: ExperimentConfig) -> str:
        """
        Digest of one experiment and everything its results depend on.

        The experiment name is left out, so renamed duplicates share cells.
        """
        uses_text = BaselineKind.TEXT in experiment.baselines and experiment.kind != ExperimentKind.CONTRASTS
        payload = {
            "experiment": experiment.model_dump(mode="json", exclude={"name"}),
            "corpus": self.corpus(experiment.corpus).model_dump(mode="json"),
            "models": [self.model(m).model_dump(mode="json") for m in experiment.model_ids()],
            "text_model": self.text_model.model_dump(mode="json") if uses_text and self.text_model else None,
            "seed": self.seed,
            "subsample_fraction": self.subsample_fraction,
            "alpha_grid": sorted(self.alpha_grid),
            "test_fraction": self.test_fraction,
            "n_folds": self.n_folds,
            "center_features": self.center_features,
        }
        return stable_hash(payload)


def _resolved_locators(model: ModelSpec, base_dir: Path) -> dict:
    def resolve(locator: str) -> str:
        if parse_locator(locator).scheme != "path" or Path(locator).is_absolute():
            return locator
        return str((base_dir / locator).resolve())

    return {
        "locator": resolve(model.locator),
        "checkpoints": [c.model_copy(update={"locator": resolve(c.locator)}) for c in model.checkpoints],
    }


def format_validation_error(error: ValidationError) -> list[str]:
    messages = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "config"
        messages.append(f"{where}: {item['msg']}")
    return messages


def _path_errors(corpora: list[dict], base_dir: Path) -> list[str]:
    errors = []
    for i, corpus in enumerate(corpora):
        if not isinstance(corpus, dict):
            continue
        name = corpus.get("corpus_id", f"corpora.{i}")
        for key in ("audio_root", "transcripts", "alignments"):
            value = corpus.get(key)
            if value is None:
                continue
            path = Path(value)
            path = path if path.is_absolute() else base_dir / path
            if not path.exists():
                errors.append(f"corpus {name}: {key} does not exist: {path}")
    return errors


def _reference_errors(config: RunConfig) -> list[str]:
    errors = []
    for what, ids in (
        ("corpus", [c.corpus_id for c in config.corpora]),
        ("model", [m.model_id for m in config.models]),
        ("experiment", [e.name for e in config.experiments]),
    ):
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            errors.append(f"duplicate {what} ids: {duplicates}")

    corpora = {c.corpus_id: c for c in config.corpora}
    models = {m.model_id: m for m in config.models}
    for experiment in config.experiments:
        where = f"experiment {experiment.name}"
        if experiment.corpus not in corpora:
            errors.append(f"{where}: unknown corpus {experiment.corpus!r}")
        for model_id in experiment.model_ids():
            if model_id not in models:
                errors.append(f"{where}: unknown model {model_id!r}")
        if experiment.kind == ExperimentKind.FINETUNE_CONTRAST and not experiment.pairs:
            errors.append(f"{where}: finetune_contrast needs model pairs")
        if experiment.kind != ExperimentKind.FINETUNE_CONTRAST and not experiment.models:
            errors.append(f"{where}: no models listed")
        if BaselineKind.TEXT in experiment.baselines and config.text_model is None and experiment.kind in (
            ExperimentKind.LAYER_SWEEP,
            ExperimentKind.FINETUNE_CONTRAST,
            ExperimentKind.TRAJECTORY,
        ):
            errors.append(f"{where}: text baseline requested but no text_model is configured")
        corpus = corpora.get(experiment.corpus)
        if corpus is not None and corpus.language != Language.MANDARIN:
            if TaskKind.CONSONANT in experiment.tasks or experiment.kind == ExperimentKind.CONTRASTS:
                errors.append(f"{where}: consonant probes need a Mandarin corpus")
    return errors


def validate(path: Path | str) -> RunConfig:
    """
    Load a config file, reporting every problem at once.

    Raises ConfigError carrying the full list of errors.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])

    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: not valid YAML: {e}"]) from e
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected a mapping at the top level"])

    base_dir = path.parent.resolve()
    errors = _path_errors(data.get("corpora") or [], base_dir)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e) + errors) from e

    errors.extend(_reference_errors(config))
    if errors:
        raise ConfigError(errors)

    logger.debug(f"Loaded config {path} ({config.config_hash()})")
    return config.resolve_paths(base_dir)
