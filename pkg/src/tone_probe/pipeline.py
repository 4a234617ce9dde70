"""
Pipeline stages: ingest -> extract -> probe -> report.

Each stage reads the previous stage's artifacts from disk, so stages can be
re-run on their own. Output directory layout:

- syllables/<corpus>.tsv: syllable table (after neutral filtering and subsampling)
- syllables/<corpus>.utterances.tsv: utterance -> audio path and full unit sequence
- syllables/<corpus>.ingest.json: reconciliation counters
- splits/<corpus>-<task>-seed<seed>.json: persisted train/test assignment
- cells/<experiment hash>/: rows and tables of one finished experiment
- report.csv, tables/, plots/: the merged report
"""

import io
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .activations import ActivationCache, Step
from .config import CorpusConfig, ExperimentConfig, RunConfig
from .corpus import (
    AlignedSyllable,
    build_manifest,
    filter_neutral_tone,
    ingest_corpus,
    read_syllable_table,
    read_utterance_index,
    read_utterance_units,
    write_syllable_table,
    write_utterance_index,
)
from .encoders import TextEncoder, load_speech_encoder, load_text_encoder
from .errors import CorpusError, FeatureError, ReportError, ToneProbeError
from .experiments import (
    ExperimentContext,
    ExperimentKind,
    ExperimentReport,
    ModelSpec,
    planned_cells,
    run_contrasts,
    run_finetune_contrast,
    run_layer_sweep,
    run_trajectory,
)
from .features import BaselineKind, build_baseline_matrix, build_pooled_matrix, extract_to_cache
from .report import emit_report, read_report_csv, report_to_csv
from .utils import atomic_write_bytes, read_file, safe_name, stable_hash, subsample_ids, write_file

logger = logging.getLogger(__name__)


@dataclass
class CorpusArtifacts:
    corpus_id: str
    syllables: list[AlignedSyllable]
    audio_index: dict[str, Path]
    units: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def table_key(self) -> str:
        """Digest of the syllable spans, keying derived feature matrices."""
        return stable_hash([(s.utterance_id, s.start_s, s.end_s, s.surface, s.position) for s in self.syllables])


def syllable_table_path(config: RunConfig, corpus_id: str) -> Path:
    return config.output_dir / "syllables" / f"{safe_name(corpus_id)}.tsv"


def utterance_index_path(config: RunConfig, corpus_id: str) -> Path:
    return config.output_dir / "syllables" / f"{safe_name(corpus_id)}.utterances.tsv"


def ingest_report_path(config: RunConfig, corpus_id: str) -> Path:
    return config.output_dir / "syllables" / f"{safe_name(corpus_id)}.ingest.json"


def cell_dir(config: RunConfig, experiment: ExperimentConfig) -> Path:
    return config.output_dir / "cells" / config.experiment_hash(experiment)


def ingest_corpus_stage(config: RunConfig, corpus: CorpusConfig, workers: int) -> CorpusArtifacts:
    """Ingest one corpus, filter neutral tones, subsample, and write its artifacts."""
    logger.info(f"Ingesting {corpus.corpus_id}")
    manifest = build_manifest(
        corpus_id=corpus.corpus_id,
        language=corpus.language,
        audio_root=corpus.audio_root,
        transcripts=corpus.transcripts,
        transcript_format=corpus.transcript_format,
        alignments=corpus.alignments,
        alignment_format=corpus.alignment_format,
        alignment_tier=corpus.alignment_tier,
        sample_rate=corpus.sample_rate,
        mismatch_threshold=corpus.mismatch_threshold,
    )
    result = ingest_corpus(manifest, workers)
    syllables = filter_neutral_tone(result.syllables)
    result.stats.record_neutral_filter(len(result.syllables) - len(syllables))

    audio_index = manifest.audio_index()
    kept = set(subsample_ids(sorted({s.utterance_id for s in syllables}), config.subsample_fraction, config.seed))
    if config.subsample_fraction < 1.0:
        syllables = [s for s in syllables if s.utterance_id in kept]
        logger.info(f"  Subsample: {len(kept)} utterances ({config.subsample_fraction:.0%})")
    audio_index = {u: p for u, p in audio_index.items() if u in kept}

    stats = json.loads(result.stats.to_json())
    stats["subsample_fraction"] = config.subsample_fraction
    stats["subsampled_syllables"] = len(syllables)
    write_file(ingest_report_path(config, corpus.corpus_id), json.dumps(stats, indent=2, ensure_ascii=False))
    write_syllable_table(syllable_table_path(config, corpus.corpus_id), syllables)
    units = {u: result.units[u] for u in audio_index}
    write_utterance_index(utterance_index_path(config, corpus.corpus_id), audio_index, units)

    logger.info(f"  Syllables: {len(syllables)}")
    logger.info(f"  Neutral tone removed: {result.stats.neutral_filtered}")
    logger.info(f"  Dropped (mismatch/unreadable): {result.stats.dropped_mismatch}/{result.stats.dropped_unreadable}")
    if not result.stats.reconciles():
        logger.error(f"  Ingest counters for {corpus.corpus_id} do not reconcile")
    return CorpusArtifacts(corpus.corpus_id, syllables, audio_index, units)


def ingest(config: RunConfig, workers: int | None = None) -> dict[str, CorpusArtifacts]:
    workers = workers or config.workers
    return {c.corpus_id: ingest_corpus_stage(config, c, workers) for c in config.corpora}


def load_ingested(config: RunConfig, corpus_id: str) -> CorpusArtifacts:
    table = syllable_table_path(config, corpus_id)
    index = utterance_index_path(config, corpus_id)
    if not table.exists() or not index.exists():
        raise CorpusError(f"{corpus_id} has not been ingested (missing {table.name}); run the ingest stage first")
    corpus = config.corpus(corpus_id)
    return CorpusArtifacts(
        corpus_id,
        read_syllable_table(table, corpus.language),
        read_utterance_index(index),
        read_utterance_units(index),
    )


def _checkpoints_needed(config: RunConfig, experiment: ExperimentConfig) -> list[tuple[ModelSpec, Step]]:
    models = [config.model(m) for m in experiment.model_ids()]
    if experiment.kind == ExperimentKind.TRAJECTORY:
        return [(m, step) for m in models for step in m.steps()]
    return [(m, "final") for m in models]


def extract(config: RunConfig, offline: bool | None = None, workers: int | None = None) -> dict[tuple[str, str], tuple[int, int]]:
    """
    Fill the activation cache for every (model, checkpoint) the experiments use.

    A checkpoint that cannot be loaded is logged and skipped; its cells end
    up absent in the report. Returns (extracted, failed) per (model, step).
    """
    offline = config.offline if offline is None else offline
    workers = workers or config.extraction_workers
    cache = ActivationCache(config.cache_dir)

    jobs: dict[tuple[str, str], tuple[ModelSpec, Step, set[str]]] = {}
    for experiment in config.experiments:
        for model, step in _checkpoints_needed(config, experiment):
            _, _, corpora = jobs.setdefault((model.model_id, str(step)), (model, step, set()))
            corpora.add(experiment.corpus)

    counts = {}
    for key, (model, step, corpora) in jobs.items():
        audio_index: dict[str, Path] = {}
        for corpus_id in sorted(corpora):
            audio_index.update(load_ingested(config, corpus_id).audio_index)
        locator = model.locator_for(step)
        logger.info(f"Extracting {model.model_id}@{step} ({len(audio_index)} utterances)")
        try:
            encoder = load_speech_encoder(locator, model.geometry, offline=offline)
        except Exception as e:
            logger.warning(f"  Cannot load {model.model_id}@{step} from {locator}: {e}")
            counts[key] = (0, len(audio_index))
            continue
        if model.reentrant:
            encoder.reentrant = True
        counts[key] = extract_to_cache(encoder, cache, model.model_id, step, audio_index, workers, locator)
        logger.info(f"  Extracted: {counts[key][0]}, failed: {counts[key][1]}")
    return counts


class CachedFeatures:
    """
    Feature matrices for one corpus, backed by the activation cache.

    Pooled and baseline matrices are built on first use and stored as .npy
    files next to the activations.
    """

    def __init__(
        self,
        config: RunConfig,
        artifacts: CorpusArtifacts,
        cache: ActivationCache,
        offline: bool = False,
    ):
        self.config = config
        self.artifacts = artifacts
        self.cache = cache
        self.offline = offline
        self._locks: dict[tuple, threading.Lock] = {}
        self._guard = threading.Lock()
        self._pooled: dict[tuple, np.ndarray] = {}
        self._baselines: dict[BaselineKind, np.ndarray] = {}
        self._text_encoder: TextEncoder | None = None

    def _lock(self, key: tuple) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _pooled_matrix(self, model: ModelSpec, step: Step) -> np.ndarray:
        key = (model.model_id, str(step))
        with self._lock(key):
            if key in self._pooled:
                return self._pooled[key]
            locator = model.locator_for(step)
            table_key = stable_hash([self.artifacts.table_key, locator, model.n_layers, model.dim])
            path = self.cache.pooled_path(model.model_id, step, table_key)
            expected = (model.n_hidden_states, len(self.artifacts.syllables), model.dim)
            matrix = np.load(path, mmap_mode="r") if path.exists() else None
            if matrix is None or matrix.shape != expected:
                done = self.cache.completed(model.model_id, step, locator)
                missing = [
                    u for u in self.artifacts.audio_index
                    if u not in done or not self.cache.readable(model.model_id, step, u)
                ]
                if missing:
                    raise FeatureError(
                        f"{model.model_id}@{step}: {len(missing)} utterances missing or stale "
                        f"in the activation cache; run the extract stage"
                    )
                matrix = build_pooled_matrix(
                    self.artifacts.syllables,
                    lambda u: self.cache.get(model.model_id, step, u),
                    path,
                    model.n_hidden_states,
                    model.dim,
                )
            self._pooled[key] = matrix
            return matrix

    def layer_matrix(self, model: ModelSpec, step: Step, layer: int) -> np.ndarray:
        return self._pooled_matrix(model, step)[layer]

    def _text(self) -> TextEncoder:
        if self._text_encoder is None:
            if self.config.text_model is None:
                raise FeatureError("no text_model configured")
            self._text_encoder = load_text_encoder(
                self.config.text_model.locator, offline=self.offline, dim=self.config.text_model.dim
            )
        return self._text_encoder

    def baseline_matrix(self, kind: BaselineKind) -> np.ndarray:
        kind = BaselineKind(kind)
        with self._lock(("baseline", str(kind))):
            if kind in self._baselines:
                return self._baselines[kind]
            key_parts = [self.artifacts.table_key]
            if kind == BaselineKind.TEXT and self.config.text_model is not None:
                key_parts.append(self.config.text_model.locator)
                key_parts.append(sorted(self.artifacts.units.items()))
            path = self.cache.baseline_path(str(kind), stable_hash(key_parts))
            if path.exists():
                matrix = np.load(path)
            else:
                text = self._text() if kind == BaselineKind.TEXT else None
                matrix = build_baseline_matrix(
                    kind, self.artifacts.syllables, self.artifacts.audio_index, text, self.artifacts.units
                )
                atomic_write_bytes(path, _npy_bytes(matrix))
            self._baselines[kind] = matrix
            return matrix


def _npy_bytes(matrix: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, matrix, allow_pickle=False)
    return buffer.getvalue()


def run_experiment(config: RunConfig, experiment: ExperimentConfig, artifacts: CorpusArtifacts, features: CachedFeatures, workers: int) -> ExperimentReport:
    corpus = config.corpus(experiment.corpus)
    ctx = ExperimentContext(
        experiment=experiment.name,
        corpus_id=corpus.corpus_id,
        language=corpus.language,
        syllables=artifacts.syllables,
        features=features,
        split_dir=config.output_dir / "splits",
        seed=config.seed,
        alpha_grid=tuple(config.alpha_grid),
        test_fraction=config.test_fraction,
        n_folds=config.n_folds,
        center_features=config.center_features,
        workers=workers,
        config_hash=config.experiment_hash(experiment),
    )
    if experiment.kind == ExperimentKind.LAYER_SWEEP:
        models = [config.model(m) for m in experiment.models]
        return run_layer_sweep(ctx, models, experiment.tasks, experiment.baselines)
    if experiment.kind == ExperimentKind.FINETUNE_CONTRAST:
        pairs = [(config.model(p), config.model(f)) for p, f in experiment.pairs]
        return run_finetune_contrast(ctx, pairs, experiment.tasks, experiment.baselines)
    if experiment.kind == ExperimentKind.TRAJECTORY:
        models = [config.model(m) for m in experiment.models]
        return run_trajectory(ctx, models, experiment.tasks, experiment.baselines)
    models = [config.model(m) for m in experiment.models]
    return run_contrasts(ctx, models)


def save_cells(path: Path, report: ExperimentReport) -> None:
    """Store one experiment's finished rows and tables; rows.csv is written last."""
    for name, table in report.tables.items():
        write_file(path / "tables" / f"{safe_name(name)}.csv", table.to_csv(index=False, na_rep="NA", lineterminator="\n"))
    write_file(path / "meta.json", json.dumps(report.metadata, indent=2, ensure_ascii=False, default=str))
    write_file(path / "rows.csv", report_to_csv(report))


def load_cells(path: Path, experiment_name: str) -> ExperimentReport | None:
    """A stored experiment relabelled with the current experiment name, or None."""
    rows_path = path / "rows.csv"
    if not rows_path.exists():
        return None
    frame = read_report_csv(rows_path)
    frame["experiment"] = pd.array([experiment_name] * len(frame), dtype="string")
    report = ExperimentReport.from_frame(frame)
    for table_path in sorted((path / "tables").glob("*.csv")):
        table = pd.read_csv(table_path, na_values=["NA"], keep_default_na=False, float_precision="round_trip")
        if "experiment" in table.columns:
            table["experiment"] = experiment_name
        report.tables[table_path.stem] = table
    text = read_file(path / "meta.json")
    report.metadata = json.loads(text) if text else {}
    report.metadata["experiment"] = experiment_name
    return report


@dataclass
class ProbeOutcome:
    report: ExperimentReport = field(default_factory=ExperimentReport)
    failed: list[str] = field(default_factory=list)
    reused: list[str] = field(default_factory=list)


def probe(config: RunConfig, resume: bool = True, offline: bool | None = None, workers: int | None = None) -> ProbeOutcome:
    """
    Run every configured experiment, reusing stored cells when resuming.

    Only complete stored experiments are reused; one with absent cells is
    probed again, so cells missing after a failed load or a skipped extract
    are filled in once the activations exist.

    An experiment that fails is logged and listed in `failed`; the others
    still run.
    """
    offline = config.offline if offline is None else offline
    workers = workers or config.workers
    cache = ActivationCache(config.cache_dir)
    outcome = ProbeOutcome()
    outcome.report.metadata.update(seed=config.seed, config_hash=config.config_hash())
    sources: dict[str, tuple[CorpusArtifacts, CachedFeatures]] = {}

    for experiment in config.experiments:
        path = cell_dir(config, experiment)
        stored = load_cells(path, experiment.name) if resume else None
        if stored is not None and stored.absent_cells:
            logger.info(f"Experiment {experiment.name}: {stored.absent_cells} absent stored cells, probing again")
            stored = None
        if stored is not None:
            logger.info(f"Experiment {experiment.name}: reusing {len(stored)} stored cells")
            outcome.report.merge(stored)
            outcome.reused.append(experiment.name)
            continue

        logger.info(f"Experiment {experiment.name} ({experiment.kind})")
        try:
            if experiment.corpus not in sources:
                artifacts = load_ingested(config, experiment.corpus)
                sources[experiment.corpus] = (artifacts, CachedFeatures(config, artifacts, cache, offline))
            artifacts, features = sources[experiment.corpus]
            report = run_experiment(config, experiment, artifacts, features, workers)
        except ToneProbeError as e:
            logger.error(f"Experiment {experiment.name} failed: {e}")
            outcome.failed.append(experiment.name)
            continue
        save_cells(path, report)
        outcome.report.merge(report)
    return outcome


def report(config: RunConfig, probe_report: ExperimentReport | None = None, plots: bool = True) -> list[Path]:
    """Emit the merged report, loading stored experiment cells when none is given."""
    if probe_report is None:
        probe_report = ExperimentReport(metadata={"seed": config.seed, "config_hash": config.config_hash()})
        for experiment in config.experiments:
            stored = load_cells(cell_dir(config, experiment), experiment.name)
            if stored is None:
                logger.warning(f"Experiment {experiment.name} has no stored results")
                continue
            probe_report.merge(stored)
    if not len(probe_report):
        raise ReportError("no experiment results to report; run the probe stage first")
    return emit_report(probe_report, config.output_dir, plots=plots)


@dataclass
class RunPlan:
    experiments: dict[str, int]
    extraction_passes: int
    syllables: dict[str, int] = field(default_factory=dict)

    @property
    def total_cells(self) -> int:
        return sum(self.experiments.values())


def plan(config: RunConfig) -> RunPlan:
    """Probe cell and extraction-pass counts, computed without touching audio."""
    experiments = {}
    passes: set[tuple[str, str]] = set()
    for experiment in config.experiments:
        models = [config.model(m) for m in experiment.model_ids()]
        experiments[experiment.name] = planned_cells(experiment.kind, models, experiment.tasks, experiment.baselines)
        passes.update((m.model_id, str(s)) for m, s in _checkpoints_needed(config, experiment))

    syllables = {}
    for corpus in config.corpora:
        table = syllable_table_path(config, corpus.corpus_id)
        if table.exists():
            syllables[corpus.corpus_id] = len(pd.read_csv(table, sep="\t", usecols=["utterance_id"]))
    return RunPlan(experiments, len(passes), syllables)


def log_plan(run_plan: RunPlan) -> None:
    logger.info("Dry run:")
    for name, cells in run_plan.experiments.items():
        logger.info(f"  {name}: {cells} probe trainings")
    logger.info(f"  Total probe trainings: {run_plan.total_cells}")
    logger.info(f"  Extraction passes: {run_plan.extraction_passes}")
    for corpus_id, n in run_plan.syllables.items():
        logger.info(f"  {corpus_id}: {n} syllables ingested")


def run(
    config: RunConfig,
    resume: bool = True,
    offline: bool | None = None,
    workers: int | None = None,
    plots: bool = True,
) -> ProbeOutcome:
    """All stages in order. Experiments already stored under their hash are skipped when resuming."""
    ingest(config, workers)
    extract(config, offline)
    outcome = probe(config, resume=resume, offline=offline, workers=workers)
    if len(outcome.report):
        report(config, outcome.report, plots=plots)
    return outcome


def ingest_summary(config: RunConfig, corpus_id: str) -> dict:
    text = read_file(ingest_report_path(config, corpus_id))
    return json.loads(text) if text else {}

