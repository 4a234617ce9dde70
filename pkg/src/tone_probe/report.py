"""
Report output: the CSV contract, auxiliary tables and plots.

report.csv is the contract: fixed columns, one row per cell, absent cells
written as NA. Tables and plots are derived views.
"""

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .activations import FINAL_STEP  # noqa: E402
from .errors import ReportError  # noqa: E402
from .features import BASELINE_LAYER_INDEX  # noqa: E402
from .experiments import REPORT_COLUMNS, REPORT_DTYPES, ExperimentReport  # noqa: E402
from .utils import safe_name, write_file  # noqa: E402

logger = logging.getLogger(__name__)

NA = "NA"
REPORT_FILE = "report.csv"
METADATA_FILE = "report.meta.json"


def report_to_csv(report: ExperimentReport) -> str:
    frame = report.to_frame()
    return frame.to_csv(index=False, na_rep=NA, lineterminator="\n")


def read_report_csv(path: Path) -> pd.DataFrame:
    """Parse a report CSV back into typed columns."""
    frame = pd.read_csv(
        path,
        dtype=REPORT_DTYPES,
        na_values=[NA],
        keep_default_na=False,
        float_precision="round_trip",
    )
    if tuple(frame.columns) != REPORT_COLUMNS:
        raise ReportError(f"{path}: unexpected columns {list(frame.columns)}")
    return frame


def emit_report(report: ExperimentReport, out_dir: Path, plots: bool = True) -> list[Path]:
    """
    Write report.csv, the auxiliary tables, run metadata and plots.

    Returns the written paths. Raises ReportError for an empty report.
    """
    if not len(report):
        raise ReportError("report has no rows")

    written = []
    csv_path = out_dir / REPORT_FILE
    write_file(csv_path, report_to_csv(report))
    written.append(csv_path)

    for name, table in sorted(report.tables.items()):
        path = out_dir / "tables" / f"{safe_name(name)}.csv"
        write_file(path, table.to_csv(index=False, na_rep=NA, lineterminator="\n"))
        written.append(path)

    meta_path = out_dir / METADATA_FILE
    metadata = dict(report.metadata, rows=len(report), absent_cells=report.absent_cells)
    write_file(meta_path, json.dumps(metadata, indent=2, ensure_ascii=False, default=str))
    written.append(meta_path)

    if plots:
        written.extend(plot_report(report.to_frame(), out_dir / "plots"))

    logger.info(f"Report: {len(report)} rows ({report.absent_cells} absent) -> {csv_path}")
    return written


def plot_report(frame: pd.DataFrame, plot_dir: Path) -> list[Path]:
    """Accuracy-vs-layer plots per experiment and task, accuracy-vs-step where checkpoints exist."""
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    present = frame[frame["accuracy"].notna() & (frame["subtask"] == "all")]

    for (experiment, task), group in present.groupby(["experiment", "task"], sort=True):
        final = group[group["checkpoint_step"] == FINAL_STEP]
        layers = final[final["layer_index"] >= 0]
        baselines = final[final["layer_index"] < 0]
        if layers.empty:
            continue

        fig, ax = plt.subplots(figsize=(7, 4))
        for model_id, rows in layers.groupby("model_id", sort=True):
            rows = rows.sort_values("layer_index")
            ax.plot(rows["layer_index"], rows["accuracy"].astype(float), marker="o", label=model_id)
        for row in baselines.sort_values("layer_index", ascending=False).itertuples(index=False):
            ax.axhline(float(row.accuracy), linestyle="--", linewidth=1, label=f"baseline {_baseline_name(row.layer_index)}")
        ax.set_xlabel("layer")
        ax.set_ylabel("accuracy")
        ax.set_title(f"{experiment}: {task}")
        ax.legend(fontsize="small")
        path = plot_dir / f"{safe_name(experiment)}-{task}-layers.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

        steps = group[(group["checkpoint_step"] != FINAL_STEP) & (group["layer_index"] >= 0)]
        if not steps.empty:
            written.append(_plot_trajectory(group, experiment, task, plot_dir))
    return written


def _plot_trajectory(group: pd.DataFrame, experiment: str, task: str, plot_dir: Path) -> Path:
    layers = group[group["layer_index"] >= 0]
    best = layers.groupby(["model_id", "checkpoint_step"], sort=False)["accuracy"].max().reset_index()

    fig, ax = plt.subplots(figsize=(7, 4))
    for model_id, rows in best.groupby("model_id", sort=True):
        # the final checkpoint is drawn last
        rows = rows.assign(
            order=[int(s) if s != FINAL_STEP else float("inf") for s in rows["checkpoint_step"]]
        ).sort_values("order")
        ax.plot(rows["checkpoint_step"].astype(str), rows["accuracy"].astype(float), marker="o", label=model_id)
    ax.set_xlabel("checkpoint step")
    ax.set_ylabel("best-layer accuracy")
    ax.set_title(f"{experiment}: {task}")
    ax.legend(fontsize="small")
    path = plot_dir / f"{safe_name(experiment)}-{task}-steps.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def _baseline_name(layer_index: int) -> str:
    names = {index: str(kind) for kind, index in BASELINE_LAYER_INDEX.items()}
    return names.get(int(layer_index), str(layer_index))
