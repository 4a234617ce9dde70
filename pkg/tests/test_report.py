"""Tests for report output."""

import json

import pandas as pd
import pytest

from tone_probe.errors import ReportError
from tone_probe.experiments import REPORT_COLUMNS, ExperimentReport, ReportRow
from tone_probe.report import REPORT_FILE, emit_report, read_report_csv, report_to_csv


def make_report() -> ExperimentReport:
    report = ExperimentReport(metadata={"experiment": "sweep", "seed": 0})
    common = dict(
        experiment="sweep", corpus="mini", language="mandarin", tonality="tonal",
        training_stage="pretrained", task="tone", subtask="all", seed=0, config_hash="abc",
    )
    for step in ("0", "final"):
        for layer, accuracy in enumerate([0.4, 0.7, 0.55]):
            report.add(
                ReportRow(
                    model_id="m", checkpoint_step=step, layer_index=layer, selected_alpha=0.1,
                    train_n=128, test_n=32, accuracy=accuracy - (0.1 if step == "0" else 0.0),
                    realized_test_fraction=0.2, **common,
                )
            )
    report.add(
        ReportRow(
            model_id="baseline", checkpoint_step="final", layer_index=-1, selected_alpha=1.0,
            train_n=128, test_n=32, accuracy=0.5, realized_test_fraction=0.2,
            **dict(common, language="none", tonality="none", training_stage="none"),
        )
    )
    report.add(
        ReportRow(
            model_id="m", checkpoint_step="final", layer_index=3, selected_alpha=None,
            train_n=None, test_n=None, accuracy=None, realized_test_fraction=None, **common,
        )
    )
    report.tables["best_layer"] = pd.DataFrame({"model_id": ["m"], "best_layer": [1]})
    return report


class TestReportCsv:
    """Tests for the report CSV."""

    def test_header(self):
        header = report_to_csv(make_report()).splitlines()[0]
        assert header.split(",") == list(REPORT_COLUMNS)

    def test_absent_written_as_na(self):
        lines = report_to_csv(make_report()).splitlines()
        absent = [line for line in lines if ",3,tone," in line]
        assert len(absent) == 1
        assert absent[0].count("NA") == 5

    def test_read_back(self, tmp_path):
        report = make_report()
        path = tmp_path / REPORT_FILE
        path.write_text(report_to_csv(report))

        frame = read_report_csv(path)
        assert len(frame) == len(report)
        assert frame["accuracy"].isna().sum() == 1
        assert ExperimentReport.from_frame(frame).rows == report.rows

    def test_wrong_columns(self, tmp_path):
        path = tmp_path / REPORT_FILE
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ReportError):
            read_report_csv(path)


class TestEmitReport:
    """Tests for emit_report."""

    def test_empty_report(self, tmp_path):
        with pytest.raises(ReportError):
            emit_report(ExperimentReport(), tmp_path)

    def test_writes_everything(self, tmp_path):
        written = emit_report(make_report(), tmp_path)

        assert (tmp_path / REPORT_FILE).exists()
        assert (tmp_path / "tables" / "best_layer.csv").exists()
        assert (tmp_path / "plots" / "sweep-tone-layers.png").exists()
        assert (tmp_path / "plots" / "sweep-tone-steps.png").exists()
        assert set(written) >= {tmp_path / REPORT_FILE, tmp_path / "report.meta.json"}

        metadata = json.loads((tmp_path / "report.meta.json").read_text())
        assert metadata["rows"] == 8
        assert metadata["absent_cells"] == 1
        assert metadata["experiment"] == "sweep"

    def test_no_plots(self, tmp_path):
        emit_report(make_report(), tmp_path, plots=False)
        assert not (tmp_path / "plots").exists()

    def test_deterministic_csv(self, tmp_path):
        emit_report(make_report(), tmp_path / "a", plots=False)
        emit_report(make_report(), tmp_path / "b", plots=False)
        assert (tmp_path / "a" / REPORT_FILE).read_bytes() == (tmp_path / "b" / REPORT_FILE).read_bytes()
