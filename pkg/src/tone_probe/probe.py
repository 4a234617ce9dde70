"""
Leakage-proof probe datasets and ridge linear probes.

Train and test sides never share a group key: phoneme strings for the tone
task, rimes for the consonant task. The regularization strength is picked
by stratified cross-validation on the train side only.
"""

import json
import logging
import math
import threading
from collections.abc import Callable, Hashable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Self

import numpy as np
from sklearn.linear_model import RidgeClassifier
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from .activations import FINAL_STEP, Step
from .corpus import AlignedSyllable, Language
from .errors import ProbeError, ToneProbeError
from .phonology import CONSONANT_GROUPS, CONSONANT_TASK_ONSETS, MANDARIN_TONES, VIETNAMESE_TONES
from .utils import read_file, write_file

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
DEFAULT_TEST_FRACTION = 0.2
DEFAULT_N_FOLDS = 5
MAX_RESTRATIFY = 3

# Published train/test sizes, for comparison in split reports
REFERENCE_SPLIT_SIZES: dict[tuple[str, str], tuple[int, int]] = {
    ("mandarin", "tone"): (223_851, 45_772),
    ("mandarin", "consonant"): (92_413, 15_688),
    ("vietnamese", "tone"): (124_248, 29_629),
}


class ExclusionKey(StrEnum):
    PHONEME_STRING = "phoneme_string"
    RIME = "rime"


class TaskKind(StrEnum):
    TONE = "tone"
    CONSONANT = "consonant"


@dataclass(frozen=True)
class SplitSpec:
    exclusion_key: ExclusionKey
    test_fraction: float = DEFAULT_TEST_FRACTION
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


@dataclass(frozen=True)
class Task:
    """A probing task: full tone or consonant classification, or a restriction of one."""

    kind: TaskKind
    pair: tuple[int, int] | None = None
    group: int | None = None

    @classmethod
    def tone(cls) -> Self:
        return cls(TaskKind.TONE)

    @classmethod
    def consonant(cls) -> Self:
        return cls(TaskKind.CONSONANT)

    @classmethod
    def tone_pair(cls, i: int, j: int) -> Self:
        return cls(TaskKind.TONE, pair=(i, j))

    @classmethod
    def consonant_group(cls, group: int) -> Self:
        return cls(TaskKind.CONSONANT, group=group)

    @property
    def subtask(self) -> str:
        if self.pair is not None:
            return f"T{self.pair[0]}-T{self.pair[1]}"
        if self.group is not None:
            return f"group{self.group}"
        return "all"

    @property
    def exclusion_key(self) -> ExclusionKey:
        return ExclusionKey.PHONEME_STRING if self.kind == TaskKind.TONE else ExclusionKey.RIME

    @classmethod
    def parse(cls, kind: str, subtask: str = "all") -> Self:
        kind = TaskKind(kind)
        if subtask == "all":
            return cls(kind)
        if subtask.startswith("group"):
            return cls(kind, group=int(subtask[len("group"):]))
        first, second = subtask.split("-")
        return cls(kind, pair=(int(first.lstrip("T")), int(second.lstrip("T"))))

    def __str__(self) -> str:
        return self.kind if self.subtask == "all" else f"{self.kind}:{self.subtask}"


@dataclass
class ProbeDataset:
    """Feature rows with labels, group keys and a train/test assignment."""

    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) class indices into class_names
    group_keys: np.ndarray  # (N,) str
    is_test: np.ndarray  # (N,) bool
    task: Task
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.group_keys = np.asarray(self.group_keys, dtype=str)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        n = len(self.labels)
        if not (self.features.shape[0] == len(self.group_keys) == len(self.is_test) == n):
            raise ProbeError(f"{self.task}: row counts disagree")
        if not np.all(np.isfinite(self.features)):
            raise ProbeError(f"{self.task}: features contain non-finite values")

        shared = set(self.group_keys[self.is_test]) & set(self.group_keys[~self.is_test])
        if shared:
            raise ProbeError(f"{self.task}: group keys on both sides: {sorted(shared)[:5]}")
        check_classes_present(self.labels, self.is_test, self.class_names, str(self.task))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def train_n(self) -> int:
        return int((~self.is_test).sum())

    @property
    def test_n(self) -> int:
        return int(self.is_test.sum())

    def restrict(self, class_names: Sequence[str], task: Task) -> "ProbeDataset":
        """Keep only rows of the given classes, relabelled in the given order."""
        index = {name: i for i, name in enumerate(self.class_names)}
        missing = [c for c in class_names if c not in index]
        if missing:
            raise ProbeError(f"{task}: unknown classes {missing}")
        old = np.array([index[c] for c in class_names])
        rows = np.isin(self.labels, old)
        relabel = np.full(self.n_classes, -1, dtype=np.int64)
        relabel[old] = np.arange(len(old))
        return ProbeDataset(
            features=self.features[rows],
            labels=relabel[self.labels[rows]],
            group_keys=self.group_keys[rows],
            is_test=self.is_test[rows],
            task=task,
            class_names=tuple(class_names),
        )


@dataclass
class ProbeResult:
    task: Task
    model_id: str
    checkpoint_step: Step
    layer_index: int
    selected_alpha: float
    train_n: int
    test_n: int
    accuracy: float
    confusion: np.ndarray
    class_names: tuple[str, ...] = ()
    cv_scores: dict[float, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.test_n and not math.isclose(self.accuracy, np.trace(self.confusion) / self.test_n):
            raise ProbeError(f"{self.task}: accuracy does not match the confusion matrix")

    @property
    def realized_test_fraction(self) -> float:
        total = self.train_n + self.test_n
        return self.test_n / total if total else 0.0


def check_classes_present(labels: np.ndarray, is_test: np.ndarray, class_names: Sequence[str], what: str) -> None:
    for side, mask in (("train", ~is_test), ("test", is_test)):
        present = set(np.unique(labels[mask]).tolist())
        for i, name in enumerate(class_names):
            if i not in present:
                raise ProbeError(f"{what}: class {name!r} absent from the {side} side")


def make_exclusive_split(
    group_keys: Sequence[str],
    spec: SplitSpec,
    labels: Sequence[Hashable] | None = None,
) -> np.ndarray:
    """
    Assign whole groups to the test side until it holds test_fraction of the items.

    Groups are visited in a seeded random order; the remaining groups form
    the train side. Returns a boolean is-test mask.
    """
    keys = np.asarray(group_keys, dtype=str)
    if keys.size == 0:
        raise ProbeError("cannot split an empty dataset")
    if np.any(keys == ""):
        raise ProbeError("every item needs a non-empty group key")

    groups, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    n = len(keys)
    largest = int(counts.max())
    if largest > (1.0 - spec.test_fraction) * n:
        raise ProbeError(
            f"group {groups[counts.argmax()]!r} holds {largest} of {n} items; "
            f"a {spec.test_fraction:.0%} test split is impossible"
        )

    target = math.ceil(spec.test_fraction * n - 1e-9)
    order = np.random.default_rng(spec.seed).permutation(len(groups))
    test_groups = np.zeros(len(groups), dtype=bool)
    filled = 0
    for g in order:
        if filled >= target:
            break
        test_groups[g] = True
        filled += counts[g]
    is_test = test_groups[inverse]

    if labels is not None:
        values = np.asarray(labels)
        classes = sorted(set(values.tolist()), key=str)
        for side, mask in (("train", ~is_test), ("test", is_test)):
            present = set(values[mask].tolist())
            for c in classes:
                if c not in present:
                    raise ProbeError(f"class {c!r} absent from the {side} side of the split")
    return is_test


def split_assignment(group_keys: Sequence[str], is_test: np.ndarray) -> dict[str, str]:
    """Group key -> "train" or "test"."""
    return {
        key: "test" if test else "train"
        for key, test in sorted(zip(np.asarray(group_keys, dtype=str).tolist(), np.asarray(is_test).tolist()))
    }


def apply_split(group_keys: Sequence[str], assignment: dict[str, str]) -> np.ndarray:
    missing = sorted({k for k in group_keys if k not in assignment})
    if missing:
        raise ProbeError(f"group keys missing from the stored split: {missing[:5]}")
    return np.array([assignment[k] == "test" for k in group_keys], dtype=bool)


def save_split(path: Path, spec: SplitSpec, assignment: dict[str, str]) -> None:
    payload = {
        "exclusion_key": str(spec.exclusion_key),
        "test_fraction": spec.test_fraction,
        "seed": spec.seed,
        "groups": assignment,
    }
    write_file(path, json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))


def load_split(path: Path, spec: SplitSpec) -> dict[str, str] | None:
    """Stored assignment, or None when absent or drawn with other parameters."""
    text = read_file(path)
    if not text:
        return None
    payload = json.loads(text)
    if (
        payload.get("exclusion_key") != str(spec.exclusion_key)
        or payload.get("test_fraction") != spec.test_fraction
        or payload.get("seed") != spec.seed
    ):
        logger.warning(f"Stored split {path.name} was drawn with other parameters, redrawing")
        return None
    return payload["groups"]


def shared_split(
    path: Path,
    group_keys: Sequence[str],
    spec: SplitSpec,
    labels: Sequence[Hashable] | None = None,
) -> np.ndarray:
    """
    The persisted split for these items, drawn and saved on first use.

    A stored split that does not cover exactly these group keys is redrawn.
    """
    assignment = load_split(path, spec)
    if assignment is not None and set(assignment) == set(group_keys):
        return apply_split(group_keys, assignment)
    is_test = make_exclusive_split(group_keys, spec, labels)
    save_split(path, spec, split_assignment(group_keys, is_test))
    logger.debug(f"Saved split {path}")
    return is_test


@dataclass(frozen=True)
class TaskRows:
    """The syllables taking part in a task, with their labels and group keys."""

    rows: np.ndarray
    labels: np.ndarray
    group_keys: np.ndarray
    class_names: tuple[str, ...]


def task_rows(syllables: list[AlignedSyllable], task: Task, language: Language) -> TaskRows:
    """
    Select and label the syllables of a full task.

    Tone: every syllable, labelled by tone, grouped by phoneme string.
    Consonant: syllables whose onset is one of the eight group consonants,
    labelled by onset, grouped by rime.
    """
    if task.kind == TaskKind.TONE:
        tones = MANDARIN_TONES if Language(language) == Language.MANDARIN else VIETNAMESE_TONES
        present = sorted({s.tone.tone_id for s in syllables if s.tone.tone_id in tones})
        class_names = tuple(str(t) for t in present)
        index = {t: i for i, t in enumerate(present)}
        rows = [i for i, s in enumerate(syllables) if s.tone.tone_id in index]
        labels = [index[syllables[i].tone.tone_id] for i in rows]
        keys = [syllables[i].phoneme_string for i in rows]
    else:
        if Language(language) != Language.MANDARIN:
            raise ProbeError("the consonant task is defined for Mandarin only")
        class_names = CONSONANT_TASK_ONSETS
        index = {o: i for i, o in enumerate(class_names)}
        rows = [i for i, s in enumerate(syllables) if s.onset in index]
        labels = [index[syllables[i].onset] for i in rows]
        keys = [syllables[i].rime for i in rows]

    if not rows:
        raise ProbeError(f"no syllables for the {task.kind} task")
    return TaskRows(
        rows=np.asarray(rows, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64),
        group_keys=np.asarray(keys, dtype=str),
        class_names=class_names,
    )


def ridge_pipeline(alpha: float = 1.0, center: bool = True) -> Pipeline:
    """One-vs-rest ridge regression on +/-1 targets, read out by argmax."""
    steps = []
    if center:
        steps.append(("center", StandardScaler(with_std=False)))
    steps.append(("ridge", RidgeClassifier(alpha=alpha, fit_intercept=False)))
    return Pipeline(steps)


def stratified_folds(labels: np.ndarray, n_classes: int, n_folds: int, seed: int, max_attempts: int = MAX_RESTRATIFY) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Stratified folds whose training parts contain every class.

    A degenerate draw is retried with the next seed; after `max_attempts`
    failures ProbeError is raised.
    """
    placeholder = np.zeros((len(labels), 1))
    for attempt in range(max_attempts):
        splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed + attempt)
        try:
            folds = list(splitter.split(placeholder, labels))
        except ValueError as e:
            logger.debug(f"Stratification attempt {attempt + 1} failed: {e}")
            continue
        if all(np.unique(labels[train]).size == n_classes for train, _ in folds):
            return folds
        logger.debug(f"Stratification attempt {attempt + 1} left a fold without a class")
    raise ProbeError(f"could not build {n_folds} stratified folds with every class in training")


def train_ridge_probe(
    dataset: ProbeDataset,
    alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    n_folds: int = DEFAULT_N_FOLDS,
    center: bool = True,
    seed: int = 0,
    model_id: str = "",
    checkpoint_step: Step = FINAL_STEP,
    layer_index: int = 0,
) -> ProbeResult:
    """
    Pick alpha by cross-validation on the train side, refit, and score on test.

    Ties in mean fold accuracy go to the smallest alpha.
    """
    grid = sorted(float(a) for a in alpha_grid)
    if not grid:
        raise ProbeError("empty alpha grid")

    train = ~dataset.is_test
    x_train = np.asarray(dataset.features[train], dtype=np.float64)
    y_train = dataset.labels[train]
    x_test = np.asarray(dataset.features[dataset.is_test], dtype=np.float64)
    y_test = dataset.labels[dataset.is_test]

    folds = stratified_folds(y_train, dataset.n_classes, n_folds, seed)
    search = GridSearchCV(
        ridge_pipeline(center=center),
        {"ridge__alpha": grid},
        scoring="accuracy",
        cv=folds,
        refit=False,
        n_jobs=1,
    )
    search.fit(x_train, y_train)
    scores = np.asarray(search.cv_results_["mean_test_score"], dtype=np.float64)
    best = int(np.flatnonzero(scores >= scores.max() - 1e-12)[0])
    alpha = grid[best]

    model = ridge_pipeline(alpha, center).fit(x_train, y_train)
    predicted = model.predict(x_test)
    confusion = confusion_matrix(y_test, predicted, labels=np.arange(dataset.n_classes))
    accuracy = float(np.trace(confusion) / len(y_test))

    return ProbeResult(
        task=dataset.task,
        model_id=model_id,
        checkpoint_step=checkpoint_step,
        layer_index=layer_index,
        selected_alpha=alpha,
        train_n=len(y_train),
        test_n=len(y_test),
        accuracy=accuracy,
        confusion=confusion,
        class_names=dataset.class_names,
        cv_scores=dict(zip(grid, scores.tolist())),
    )


def evaluate_pair_probe(dataset: ProbeDataset, pair: tuple[int, int], **kwargs) -> ProbeResult:
    """Binary probe on the rows of two tones of a tone dataset."""
    first, second = sorted(pair)
    if first == second:
        raise ProbeError(f"tone pair ({first}, {second}) needs two distinct tones")
    if dataset.task.kind != TaskKind.TONE:
        raise ProbeError(f"pair probes need a tone dataset, got {dataset.task}")
    restricted = dataset.restrict((str(first), str(second)), Task.tone_pair(first, second))
    return train_ridge_probe(restricted, **kwargs)


def evaluate_consonant_group(dataset: ProbeDataset, group: int, **kwargs) -> ProbeResult:
    """Within-group onset probe on the rows of one perceptual consonant group."""
    if group not in CONSONANT_GROUPS:
        raise ProbeError(f"unknown consonant group {group}")
    if dataset.task.kind != TaskKind.CONSONANT:
        raise ProbeError(f"consonant group probes need a consonant dataset, got {dataset.task}")
    restricted = dataset.restrict(CONSONANT_GROUPS[group], Task.consonant_group(group))
    return train_ridge_probe(restricted, **kwargs)


@dataclass(frozen=True)
class SplitReport:
    corpus_id: str
    task: str
    seed: int
    train_n: int
    test_n: int
    reference_train_n: int | None = None
    reference_test_n: int | None = None

    @property
    def realized_test_fraction(self) -> float:
        return self.test_n / (self.train_n + self.test_n)

    @property
    def relative_deviation(self) -> float | None:
        """Relative difference of the total item count from the published total."""
        if self.reference_train_n is None or self.reference_test_n is None:
            return None
        reference = self.reference_train_n + self.reference_test_n
        return (self.train_n + self.test_n - reference) / reference


def split_report(corpus_id: str, language: Language, task: TaskKind, seed: int, is_test: np.ndarray) -> SplitReport:
    reference = REFERENCE_SPLIT_SIZES.get((str(language), str(task)), (None, None))
    return SplitReport(
        corpus_id=corpus_id,
        task=str(task),
        seed=seed,
        train_n=int((~is_test).sum()),
        test_n=int(is_test.sum()),
        reference_train_n=reference[0],
        reference_test_n=reference[1],
    )


@dataclass
class CellOutcome:
    """Result of one probe cell, or the reason it is absent."""

    key: tuple
    result: ProbeResult | None = None
    error: str | None = None


class ResultSink:
    """Append-only, thread-safe collector for cell outcomes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._outcomes: list[CellOutcome] = []

    def append(self, outcome: CellOutcome) -> None:
        with self._lock:
            self._outcomes.append(outcome)

    def outcomes(self) -> list[CellOutcome]:
        with self._lock:
            return list(self._outcomes)


def run_cells(
    cells: list[tuple[tuple, Callable[[], ProbeResult]]],
    workers: int = 1,
    desc: str = "probes",
) -> list[CellOutcome]:
    """
    Run independent probe cells on a thread pool.

    A failing cell becomes an outcome with an error instead of stopping the
    others. Outcomes come back in the order the cells were given.
    """
    sink = ResultSink()

    def work(key: tuple, fn: Callable[[], ProbeResult]) -> None:
        try:
            sink.append(CellOutcome(key, result=fn()))
        except ToneProbeError as e:
            logger.warning(f"Cell {key} absent: {e}")
            sink.append(CellOutcome(key, error=str(e)))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(work, key, fn) for key, fn in cells]
        for future in tqdm(as_completed(futures), total=len(futures), desc=desc, unit="cell", disable=None, leave=False):
            future.result()

    order = {key: i for i, (key, _) in enumerate(cells)}
    return sorted(sink.outcomes(), key=lambda o: order[o.key])
