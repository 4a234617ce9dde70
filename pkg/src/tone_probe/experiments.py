"""
The four experiment families and their report.

- layer sweep: every layer of every model plus the baselines
- fine-tune contrast: paired pretrained/fine-tuned sweeps with per-layer deltas
- trajectory: layer sweeps over a model's training checkpoints
- contrasts: tone-pair and consonant-group probes at each model's best layer

Each family returns an ExperimentReport whose rows follow REPORT_COLUMNS.
Baselines appear as pseudo-layers with negative indices.
"""

import logging
import math
import threading
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import StrEnum
from functools import partial
from pathlib import Path
from typing import Protocol, Self

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .activations import FINAL_STEP, Step, format_step
from .corpus import AlignedSyllable, Language
from .encoders import EncoderGeometry
from .errors import ProbeError
from .features import BASELINE_LAYER_INDEX, BaselineKind
from .phonology import CONSONANT_GROUPS, TONE_PAIRS
from .probe import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_N_FOLDS,
    DEFAULT_TEST_FRACTION,
    ProbeDataset,
    ProbeResult,
    SplitReport,
    SplitSpec,
    Task,
    TaskKind,
    evaluate_consonant_group,
    evaluate_pair_probe,
    run_cells,
    shared_split,
    split_report,
    task_rows,
    train_ridge_probe,
)
from .utils import safe_name

logger = logging.getLogger(__name__)

REPORT_COLUMNS: tuple[str, ...] = (
    "experiment", "corpus", "model_id", "language", "tonality", "training_stage",
    "checkpoint_step", "layer_index", "task", "subtask", "selected_alpha",
    "train_n", "test_n", "accuracy", "realized_test_fraction", "seed", "config_hash",
)

BASELINE_MODEL_ID = "baseline"
NOT_APPLICABLE = "none"


class ModelLanguage(StrEnum):
    MANDARIN = "mandarin"
    ENGLISH = "english"
    VIETNAMESE = "vietnamese"
    CANTONESE = "cantonese"
    FRENCH = "french"
    OTHER = "other"


class Tonality(StrEnum):
    TONAL = "tonal"
    NON_TONAL = "non_tonal"


class TrainingStage(StrEnum):
    PRETRAINED = "pretrained"
    FINETUNED = "finetuned"


class ExperimentKind(StrEnum):
    LAYER_SWEEP = "layer_sweep"
    FINETUNE_CONTRAST = "finetune_contrast"
    TRAJECTORY = "trajectory"
    CONTRASTS = "contrasts"


# Pre-training languages and whether they use lexical tone
LANGUAGE_TONALITY: dict[ModelLanguage, Tonality] = {
    ModelLanguage.MANDARIN: Tonality.TONAL,
    ModelLanguage.VIETNAMESE: Tonality.TONAL,
    ModelLanguage.CANTONESE: Tonality.TONAL,
    ModelLanguage.ENGLISH: Tonality.NON_TONAL,
    ModelLanguage.FRENCH: Tonality.NON_TONAL,
}


class CheckpointSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int = Field(ge=0)
    locator: str = Field(min_length=1)


class ModelSpec(BaseModel):
    """A speech encoder under study and where to find its checkpoints."""

    model_config = ConfigDict(extra="forbid")

    model_id: str = Field(min_length=1)
    language: ModelLanguage
    tonality: Tonality
    training_stage: TrainingStage = TrainingStage.PRETRAINED

    # Final checkpoint; intermediate ones are listed in `checkpoints`
    locator: str = Field(min_length=1)
    checkpoints: list[CheckpointSpec] = Field(default_factory=list)

    stride_s: float = Field(default=0.02, gt=0)
    receptive_s: float = Field(default=0.025, gt=0)
    n_layers: int = Field(default=12, ge=1)
    dim: int = Field(default=768, ge=1)
    reentrant: bool = False

    @model_validator(mode="after")
    def check_consistency(self) -> Self:
        expected = LANGUAGE_TONALITY.get(self.language)
        if expected is not None and self.tonality != expected:
            raise ValueError(
                f"model {self.model_id}: {self.language} is {expected}, not {self.tonality}"
            )
        steps = [c.step for c in self.checkpoints]
        if len(steps) != len(set(steps)):
            raise ValueError(f"model {self.model_id}: duplicate checkpoint steps")
        return self

    @property
    def geometry(self) -> EncoderGeometry:
        return EncoderGeometry(self.stride_s, self.receptive_s, self.n_layers, self.dim)

    @property
    def n_hidden_states(self) -> int:
        return self.n_layers + 1

    def steps(self) -> list[Step]:
        """Intermediate checkpoint steps in order, then the final checkpoint."""
        return [c.step for c in sorted(self.checkpoints, key=lambda c: c.step)] + [FINAL_STEP]

    def locator_for(self, step: Step) -> str:
        if step == FINAL_STEP:
            return self.locator
        for checkpoint in self.checkpoints:
            if checkpoint.step == step:
                return checkpoint.locator
        raise KeyError(f"{self.model_id} has no checkpoint at step {step}")


@dataclass
class ReportRow:
    """One report cell; metric fields are None when the cell is absent."""

    experiment: str
    corpus: str
    model_id: str
    language: str
    tonality: str
    training_stage: str
    checkpoint_step: str
    layer_index: int
    task: str
    subtask: str
    selected_alpha: float | None
    train_n: int | None
    test_n: int | None
    accuracy: float | None
    realized_test_fraction: float | None
    seed: int
    config_hash: str

    @property
    def key(self) -> tuple:
        return (
            self.experiment, self.corpus, self.model_id,
            self.checkpoint_step, self.layer_index, self.task, self.subtask,
        )

    @property
    def is_absent(self) -> bool:
        return self.accuracy is None


@dataclass
class ExperimentReport:
    """Report rows keyed by cell, plus run metadata and derived tables."""

    rows: dict[tuple, ReportRow] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)

    def add(self, row: ReportRow) -> None:
        """Add a row; a row for an existing cell replaces it."""
        self.rows[row.key] = row

    def merge(self, other: "ExperimentReport") -> None:
        for row in other.rows.values():
            self.add(row)
        for name, table in other.tables.items():
            if name in self.tables:
                self.tables[name] = pd.concat([self.tables[name], table], ignore_index=True)
            else:
                self.tables[name] = table.copy()
        for key, value in other.metadata.items():
            self.metadata.setdefault(key, value)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def absent_cells(self) -> int:
        return sum(1 for r in self.rows.values() if r.is_absent)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.rows.values()], columns=list(REPORT_COLUMNS))
        return frame.astype(REPORT_DTYPES)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> Self:
        report = cls()
        for record in frame.to_dict(orient="records"):
            report.add(ReportRow(**{k: _from_cell(record[k]) for k in REPORT_COLUMNS}))
        return report


REPORT_DTYPES: dict[str, str] = {
    "experiment": "string", "corpus": "string", "model_id": "string",
    "language": "string", "tonality": "string", "training_stage": "string",
    "checkpoint_step": "string", "layer_index": "int64", "task": "string",
    "subtask": "string", "selected_alpha": "Float64", "train_n": "Int64",
    "test_n": "Int64", "accuracy": "Float64", "realized_test_fraction": "Float64",
    "seed": "int64", "config_hash": "string",
}


def _from_cell(value):
    if value is pd.NA or value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


class FeatureSource(Protocol):
    """Supplies (N, D) feature matrices aligned with the corpus syllables."""

    def layer_matrix(self, model: ModelSpec, step: Step, layer: int) -> np.ndarray:
        """Raises FeatureError when the activations are unavailable."""
        ...

    def baseline_matrix(self, kind: BaselineKind) -> np.ndarray: ...


@dataclass
class TaskData:
    rows: np.ndarray
    labels: np.ndarray
    group_keys: np.ndarray
    class_names: tuple[str, ...]
    is_test: np.ndarray
    split: SplitReport


@dataclass
class ExperimentContext:
    """Everything an experiment needs besides its models."""

    experiment: str
    corpus_id: str
    language: Language
    syllables: list[AlignedSyllable]
    features: FeatureSource
    split_dir: Path
    seed: int
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    test_fraction: float = DEFAULT_TEST_FRACTION
    n_folds: int = DEFAULT_N_FOLDS
    center_features: bool = True
    workers: int = 1
    config_hash: str = ""
    _task_data: dict[TaskKind, TaskData] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def split_path(self, task: TaskKind) -> Path:
        return self.split_dir / f"{safe_name(self.corpus_id)}-{task}-seed{self.seed}.json"

    def task_data(self, task: TaskKind) -> TaskData:
        """Rows, labels and the shared persisted split of a full task."""
        with self._lock:
            if task not in self._task_data:
                selected = task_rows(self.syllables, Task(task), self.language)
                spec = SplitSpec(Task(task).exclusion_key, self.test_fraction, self.seed)
                is_test = shared_split(self.split_path(task), selected.group_keys.tolist(), spec, selected.labels)
                report = split_report(self.corpus_id, self.language, task, self.seed, is_test)
                logger.info(
                    f"  Split {self.corpus_id}/{task}: train {report.train_n}, "
                    f"test {report.test_n} ({report.realized_test_fraction:.1%})"
                )
                self._task_data[task] = TaskData(
                    selected.rows, selected.labels, selected.group_keys,
                    selected.class_names, is_test, report,
                )
            return self._task_data[task]

    def probe(
        self,
        task: Task,
        matrix: Callable[[], np.ndarray],
        model_id: str,
        step: Step,
        layer_index: int,
    ) -> ProbeResult:
        data = self.task_data(task.kind)
        dataset = ProbeDataset(
            features=np.asarray(matrix()[data.rows]),
            labels=data.labels,
            group_keys=data.group_keys,
            is_test=data.is_test,
            task=Task(task.kind),
            class_names=data.class_names,
        )
        kwargs = dict(
            alpha_grid=self.alpha_grid,
            n_folds=self.n_folds,
            center=self.center_features,
            seed=self.seed,
            model_id=model_id,
            checkpoint_step=step,
            layer_index=layer_index,
        )
        if task.pair is not None:
            return evaluate_pair_probe(dataset, task.pair, **kwargs)
        if task.group is not None:
            return evaluate_consonant_group(dataset, task.group, **kwargs)
        return train_ridge_probe(dataset, **kwargs)

    def new_report(self, kind: ExperimentKind) -> ExperimentReport:
        return ExperimentReport(
            metadata={
                "experiment": self.experiment,
                "kind": str(kind),
                "corpus": self.corpus_id,
                "seed": self.seed,
                "config_hash": self.config_hash,
                "started": datetime.now(timezone.utc).isoformat(),
            }
        )

    def row(
        self,
        model: ModelSpec | None,
        step: Step,
        layer_index: int,
        task: Task,
        result: ProbeResult | None,
    ) -> ReportRow:
        return ReportRow(
            experiment=self.experiment,
            corpus=self.corpus_id,
            model_id=model.model_id if model else BASELINE_MODEL_ID,
            language=str(model.language) if model else NOT_APPLICABLE,
            tonality=str(model.tonality) if model else NOT_APPLICABLE,
            training_stage=str(model.training_stage) if model else NOT_APPLICABLE,
            checkpoint_step=format_step(step),
            layer_index=layer_index,
            task=str(task.kind),
            subtask=task.subtask,
            selected_alpha=result.selected_alpha if result else None,
            train_n=result.train_n if result else None,
            test_n=result.test_n if result else None,
            accuracy=result.accuracy if result else None,
            realized_test_fraction=result.realized_test_fraction if result else None,
            seed=self.seed,
            config_hash=self.config_hash,
        )


@dataclass(frozen=True)
class Cell:
    model: ModelSpec | None
    step: Step
    layer_index: int
    task: Task

    @property
    def key(self) -> tuple:
        model_id = self.model.model_id if self.model else BASELINE_MODEL_ID
        return (model_id, format_step(self.step), self.layer_index, str(self.task))


def layer_cells(models: Iterable[ModelSpec], tasks: Iterable[Task], steps: Callable[[ModelSpec], list[Step]] | None = None) -> list[Cell]:
    cells = []
    for task in tasks:
        for model in models:
            for step in steps(model) if steps else [FINAL_STEP]:
                cells.extend(Cell(model, step, layer, task) for layer in range(model.n_hidden_states))
    return cells


def baseline_cells(baselines: Iterable[BaselineKind], tasks: Iterable[Task]) -> list[Cell]:
    return [
        Cell(None, FINAL_STEP, BASELINE_LAYER_INDEX[BaselineKind(kind)], task)
        for task in tasks
        for kind in baselines
    ]


def _baseline_kind(layer_index: int) -> BaselineKind:
    return {v: k for k, v in BASELINE_LAYER_INDEX.items()}[layer_index]


def run_probe_cells(ctx: ExperimentContext, cells: list[Cell], report: ExperimentReport) -> None:
    """Probe every cell on the context's worker pool and add one row per cell."""
    jobs = []
    for cell in cells:
        if cell.model is None:
            matrix = partial(ctx.features.baseline_matrix, _baseline_kind(cell.layer_index))
            model_id = BASELINE_MODEL_ID
        else:
            matrix = partial(ctx.features.layer_matrix, cell.model, cell.step, cell.layer_index)
            model_id = cell.model.model_id
        jobs.append((cell.key, partial(ctx.probe, cell.task, matrix, model_id, cell.step, cell.layer_index)))

    # Split drawing happens once, before the workers start
    for task in dict.fromkeys(c.task.kind for c in cells):
        ctx.task_data(task)

    outcomes = run_cells(jobs, ctx.workers, desc=ctx.experiment)
    for cell, outcome in zip(cells, outcomes):
        report.add(ctx.row(cell.model, cell.step, cell.layer_index, cell.task, outcome.result))
    absent = sum(1 for o in outcomes if o.result is None)
    if absent:
        logger.warning(f"{ctx.experiment}: {absent} of {len(outcomes)} cells absent")


def _finish(ctx: ExperimentContext, report: ExperimentReport) -> ExperimentReport:
    for table in report.tables.values():
        if "experiment" not in table.columns:
            table.insert(0, "experiment", ctx.experiment)
    report.metadata["finished"] = datetime.now(timezone.utc).isoformat()
    report.metadata["splits"] = {str(k): asdict(v.split) for k, v in ctx._task_data.items()}
    return report


def run_layer_sweep(
    ctx: ExperimentContext,
    models: list[ModelSpec],
    tasks: Iterable[TaskKind] = (TaskKind.TONE,),
    baselines: Iterable[BaselineKind] = tuple(BaselineKind),
) -> ExperimentReport:
    """One probe per (model, layer, task) at the final checkpoint, plus baseline rows."""
    task_list = [Task(TaskKind(t)) for t in tasks]
    report = ctx.new_report(ExperimentKind.LAYER_SWEEP)
    cells = layer_cells(models, task_list) + baseline_cells(baselines, task_list)
    logger.info(f"Layer sweep {ctx.experiment}: {len(cells)} probe cells")
    run_probe_cells(ctx, cells, report)
    report.tables["best_layer"] = best_layers(report.to_frame())
    return _finish(ctx, report)


def run_finetune_contrast(
    ctx: ExperimentContext,
    pairs: list[tuple[ModelSpec, ModelSpec]],
    tasks: Iterable[TaskKind] = (TaskKind.TONE,),
    baselines: Iterable[BaselineKind] = (),
) -> ExperimentReport:
    """
    Sweep both stages of each (pretrained, fine-tuned) pair.

    Adds a `deltas` table (fine-tuned minus pretrained accuracy per layer)
    and a `finetune_summary` table with the mean delta over the upper half
    of the layers.
    """
    for pretrained, finetuned in pairs:
        if pretrained.n_layers != finetuned.n_layers:
            raise ProbeError(
                f"cannot pair {pretrained.model_id} ({pretrained.n_layers} layers) "
                f"with {finetuned.model_id} ({finetuned.n_layers} layers)"
            )

    task_list = [Task(TaskKind(t)) for t in tasks]
    models = list({m.model_id: m for pair in pairs for m in pair}.values())
    report = ctx.new_report(ExperimentKind.FINETUNE_CONTRAST)
    cells = layer_cells(models, task_list) + baseline_cells(baselines, task_list)
    logger.info(f"Fine-tune contrast {ctx.experiment}: {len(pairs)} pairs, {len(cells)} probe cells")
    run_probe_cells(ctx, cells, report)

    deltas = finetune_deltas(report.to_frame(), [(p.model_id, f.model_id) for p, f in pairs])
    report.tables["deltas"] = deltas
    report.tables["finetune_summary"] = finetune_summary(deltas, {p.model_id: p.n_layers for p, _ in pairs})
    return _finish(ctx, report)


def run_trajectory(
    ctx: ExperimentContext,
    models: list[ModelSpec],
    tasks: Iterable[TaskKind] = (TaskKind.TONE, TaskKind.CONSONANT),
    baselines: Iterable[BaselineKind] = (BaselineKind.F0, BaselineKind.MFCC),
) -> ExperimentReport:
    """
    Layer sweeps at every checkpoint of each model.

    The `trajectory` table holds the best layer and its accuracy per
    (model, checkpoint, task).
    """
    task_list = [Task(TaskKind(t)) for t in tasks]
    report = ctx.new_report(ExperimentKind.TRAJECTORY)
    cells = layer_cells(models, task_list, steps=ModelSpec.steps) + baseline_cells(baselines, task_list)
    n_steps = sum(len(m.steps()) for m in models)
    logger.info(f"Trajectory {ctx.experiment}: {n_steps} checkpoints, {len(cells)} probe cells")
    run_probe_cells(ctx, cells, report)
    report.tables["trajectory"] = best_layers(report.to_frame())
    return _finish(ctx, report)


def run_contrasts(
    ctx: ExperimentContext,
    models: list[ModelSpec],
) -> ExperimentReport:
    """
    Tone-pair and consonant-group probes at each model's best layer.

    Best layers come from full tone and consonant sweeps of the final
    checkpoints, which are part of the report too.
    """
    full_tasks = [Task.tone(), Task.consonant()]
    report = ctx.new_report(ExperimentKind.CONTRASTS)
    logger.info(f"Contrasts {ctx.experiment}: sweeping {len(models)} models for best layers")
    run_probe_cells(ctx, layer_cells(models, full_tasks), report)

    best = best_layers(report.to_frame())
    best_layer = {(r.model_id, r.task): int(r.best_layer) for r in best.itertuples(index=False)}

    cells = []
    for model in models:
        for task, subtasks in (
            (TaskKind.TONE, [Task.tone_pair(i, j) for i, j in TONE_PAIRS]),
            (TaskKind.CONSONANT, [Task.consonant_group(g) for g in CONSONANT_GROUPS]),
        ):
            layer = best_layer.get((model.model_id, str(task)))
            if layer is None:
                logger.warning(f"{model.model_id}: no {task} sweep results, skipping its contrasts")
                for subtask in subtasks:
                    report.add(ctx.row(model, FINAL_STEP, 0, subtask, None))
                continue
            cells.extend(Cell(model, FINAL_STEP, layer, subtask) for subtask in subtasks)
    logger.info(f"  {len(cells)} contrast cells")
    run_probe_cells(ctx, cells, report)

    frame = report.to_frame()
    contrasts = frame[frame["subtask"] != "all"][["model_id", "tonality", "task", "subtask", "layer_index", "accuracy"]]
    report.tables["contrasts"] = contrasts.reset_index(drop=True)
    report.tables["contrast_gaps"] = contrast_gaps(contrasts)
    return _finish(ctx, report)


def best_layers(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Best layer per (model, checkpoint, task, subtask) among present encoder rows.

    Ties go to the lower layer index.
    """
    columns = ["model_id", "checkpoint_step", "task", "subtask", "best_layer", "best_accuracy"]
    layers = frame[(frame["layer_index"] >= 0) & frame["accuracy"].notna()]
    if layers.empty:
        return pd.DataFrame(columns=columns)
    ordered = layers.sort_values(
        ["model_id", "checkpoint_step", "task", "subtask", "accuracy", "layer_index"],
        ascending=[True, True, True, True, False, True],
        kind="mergesort",
    )
    best = ordered.groupby(["model_id", "checkpoint_step", "task", "subtask"], sort=False).head(1)
    best = best.rename(columns={"layer_index": "best_layer", "accuracy": "best_accuracy"})
    return best[columns].reset_index(drop=True)


def finetune_deltas(frame: pd.DataFrame, pairs: list[tuple[str, str]]) -> pd.DataFrame:
    """Per-layer accuracy of both stages and their difference (fine-tuned minus pretrained)."""
    columns = ["pretrained", "finetuned", "task", "layer_index", "pretrained_accuracy", "finetuned_accuracy", "delta"]
    layers = frame[(frame["layer_index"] >= 0) & (frame["subtask"] == "all")]
    tables = []
    for pretrained, finetuned in pairs:
        left = layers[layers["model_id"] == pretrained][["task", "layer_index", "accuracy"]]
        right = layers[layers["model_id"] == finetuned][["task", "layer_index", "accuracy"]]
        merged = left.merge(right, on=["task", "layer_index"], suffixes=("_pre", "_ft"))
        merged = merged.rename(columns={"accuracy_pre": "pretrained_accuracy", "accuracy_ft": "finetuned_accuracy"})
        merged["delta"] = merged["finetuned_accuracy"] - merged["pretrained_accuracy"]
        merged.insert(0, "finetuned", finetuned)
        merged.insert(0, "pretrained", pretrained)
        tables.append(merged[columns])
    if not tables:
        return pd.DataFrame(columns=columns)
    return pd.concat(tables, ignore_index=True)


def upper_half_layers(n_layers: int) -> range:
    """Layers ceil(n/2) .. n."""
    return range(math.ceil(n_layers / 2), n_layers + 1)


def upper_half_mean(deltas: pd.Series, n_layers: int) -> float:
    """Mean of per-layer deltas (indexed by layer) over the upper half of the layers."""
    values = deltas[deltas.index.isin(list(upper_half_layers(n_layers)))].dropna()
    return float(values.mean()) if len(values) else math.nan


def finetune_summary(deltas: pd.DataFrame, n_layers: dict[str, int]) -> pd.DataFrame:
    records = []
    for (pretrained, finetuned, task), group in deltas.groupby(["pretrained", "finetuned", "task"], sort=False):
        series = pd.Series(
            group["delta"].to_numpy(dtype="float64", na_value=np.nan),
            index=group["layer_index"].to_numpy(),
        )
        records.append(
            {
                "pretrained": pretrained,
                "finetuned": finetuned,
                "task": task,
                "upper_half_mean_delta": upper_half_mean(series, n_layers[pretrained]),
                "mean_delta": float(series.mean()),
            }
        )
    return pd.DataFrame(records, columns=["pretrained", "finetuned", "task", "upper_half_mean_delta", "mean_delta"])


def contrast_gaps(contrasts: pd.DataFrame) -> pd.DataFrame:
    """
    Accuracy gap (tonal minus non-tonal) for every subtask and cross-tonality model pair.

    Ranks are 1-based, largest gap first, within each (pair, task).
    """
    columns = ["tonal_model", "non_tonal_model", "task", "subtask", "tonal_accuracy", "non_tonal_accuracy", "gap", "rank"]
    tonal = contrasts[contrasts["tonality"] == str(Tonality.TONAL)]
    non_tonal = contrasts[contrasts["tonality"] == str(Tonality.NON_TONAL)]
    tables = []
    for tonal_id in tonal["model_id"].unique():
        for other_id in non_tonal["model_id"].unique():
            left = tonal[tonal["model_id"] == tonal_id][["task", "subtask", "accuracy"]]
            right = non_tonal[non_tonal["model_id"] == other_id][["task", "subtask", "accuracy"]]
            merged = left.merge(right, on=["task", "subtask"], suffixes=("_t", "_n"))
            merged = merged.rename(columns={"accuracy_t": "tonal_accuracy", "accuracy_n": "non_tonal_accuracy"})
            merged["gap"] = (merged["tonal_accuracy"] - merged["non_tonal_accuracy"]).to_numpy(
                dtype="float64", na_value=np.nan
            )
            merged["rank"] = merged.groupby("task")["gap"].rank(ascending=False, method="first").astype("Int64")
            merged.insert(0, "non_tonal_model", other_id)
            merged.insert(0, "tonal_model", tonal_id)
            tables.append(merged[columns])
    if not tables:
        return pd.DataFrame(columns=columns)
    return pd.concat(tables, ignore_index=True).sort_values(
        ["tonal_model", "non_tonal_model", "task", "rank"], kind="mergesort"
    ).reset_index(drop=True)


def planned_cells(
    kind: ExperimentKind,
    models: list[ModelSpec],
    tasks: Iterable[TaskKind],
    baselines: Iterable[BaselineKind],
) -> int:
    """Number of probe trainings an experiment will run."""
    task_count = len(list(tasks))
    baseline_count = len(list(baselines))
    if kind == ExperimentKind.CONTRASTS:
        contrasts = len(TONE_PAIRS) + len(CONSONANT_GROUPS)
        return sum(2 * m.n_hidden_states + contrasts for m in models)
    if kind == ExperimentKind.TRAJECTORY:
        layers = sum(len(m.steps()) * m.n_hidden_states for m in models)
    else:
        layers = sum(m.n_hidden_states for m in models)
    return (layers + baseline_count) * task_count

