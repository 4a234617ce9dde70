"""End-to-end tests of the pipeline stages on the mini corpus with stub encoders."""

import shutil

import pytest

from tone_probe.activations import CACHE_VERSION, ActivationCache
from tone_probe.config import ExperimentConfig
from tone_probe.errors import ReportError
from tone_probe.experiments import ExperimentKind, ModelSpec
from tone_probe.features import BaselineKind
from tone_probe.pipeline import (
    extract,
    ingest,
    ingest_summary,
    load_ingested,
    plan,
    probe,
    report,
    run,
)
from tone_probe.probe import TaskKind
from tone_probe.report import REPORT_FILE, read_report_csv, report_to_csv


@pytest.fixture(scope="module")
def demo_run(config_for, tmp_path_factory):
    config = config_for(tmp_path_factory.mktemp("run"))
    outcome = run(config)
    return config, outcome


def sweep(name="sweep", models=("stub-tonal",), baselines=(BaselineKind.F0,)) -> ExperimentConfig:
    return ExperimentConfig(
        name=name,
        kind=ExperimentKind.LAYER_SWEEP,
        corpus="mini",
        models=list(models),
        tasks=[TaskKind.TONE],
        baselines=list(baselines),
    )


class TestDemoRun:
    """Tests for a full run of the demo config."""

    def test_every_cell_reported(self, demo_run):
        config, outcome = demo_run
        assert outcome.failed == []
        assert len(outcome.report) == plan(config).total_cells == 262
        assert outcome.report.absent_cells == 0

    def test_outputs_written(self, demo_run):
        config, _ = demo_run
        out = config.output_dir

        frame = read_report_csv(out / REPORT_FILE)
        assert len(frame) == 262
        for table in ("best_layer", "deltas", "finetune_summary", "trajectory", "contrasts", "contrast_gaps"):
            assert (out / "tables" / f"{table}.csv").exists()
        assert any((out / "plots").glob("*.png"))
        assert (out / "report.meta.json").exists()

    def test_rows_per_experiment(self, demo_run):
        config, _ = demo_run
        frame = read_report_csv(config.output_dir / REPORT_FILE)
        counts = frame["experiment"].value_counts().to_dict()
        assert counts == {"layer_sweep": 58, "finetune_contrast": 52, "trajectory": 82, "contrasts": 70}

    def test_baseline_rows(self, demo_run):
        config, _ = demo_run
        frame = read_report_csv(config.output_dir / REPORT_FILE)
        baselines = frame[(frame["experiment"] == "layer_sweep") & (frame["layer_index"] < 0)]

        assert sorted(baselines["layer_index"].unique().tolist()) == [-3, -2, -1]
        assert set(baselines["model_id"]) == {"baseline"}
        assert set(baselines["tonality"]) == {"none"}

    def test_training_improves_best_layer(self, demo_run):
        config, _ = demo_run
        frame = read_report_csv(config.output_dir / REPORT_FILE)
        layers = frame[(frame["experiment"] == "trajectory") & (frame["layer_index"] >= 0)]
        best = layers.groupby(["task", "checkpoint_step"])["accuracy"].max()

        for task in ("tone", "consonant"):
            assert best[(task, "final")] > best[(task, "0")]

    def test_ingest_summary(self, demo_run):
        config, _ = demo_run
        summary = ingest_summary(config, "mini")
        assert summary["emitted"] == 170
        assert summary["neutral_filtered"] == 10
        assert summary["subsampled_syllables"] == 160

    def test_unit_sequences_stored(self, demo_run):
        config, _ = demo_run
        artifacts = load_ingested(config, "mini")

        assert len(artifacts.units) == 20
        for s in artifacts.syllables:
            assert artifacts.units[s.utterance_id][s.position] == s.surface
        # neutral particles are gone from the table but not from the sequence
        assert artifacts.units["mini-001"][-1] == "le"

    def test_plan(self, demo_run):
        config, _ = demo_run
        run_plan = plan(config)
        assert run_plan.experiments == {
            "layer_sweep": 58, "finetune_contrast": 52, "trajectory": 82, "contrasts": 70,
        }
        assert run_plan.extraction_passes == 6
        assert run_plan.syllables == {"mini": 160}

    def test_rerun_reuses_everything(self, demo_run):
        config, outcome = demo_run
        again = probe(config)

        assert sorted(again.reused) == sorted(e.name for e in config.experiments)
        assert report_to_csv(again.report) == report_to_csv(outcome.report)

    def test_report_stage_alone(self, demo_run):
        config, _ = demo_run
        before = (config.output_dir / REPORT_FILE).read_bytes()
        report(config, plots=False)
        assert (config.output_dir / REPORT_FILE).read_bytes() == before

    def test_renamed_experiment_reuses_cells(self, demo_run):
        config, _ = demo_run
        renamed = config.experiments[0].model_copy(update={"name": "renamed_sweep"})
        outcome = probe(config.model_copy(update={"experiments": [renamed]}))

        assert outcome.reused == ["renamed_sweep"]
        assert {r.experiment for r in outcome.report.rows.values()} == {"renamed_sweep"}


class TestStages:
    """Tests for individual stages and failure handling."""

    def test_same_seed_same_report(self, config_for, tmp_path):
        shared = tmp_path / "cache"
        first = config_for(tmp_path / "a", experiments=[sweep()], cache_dir=shared, workers=1)
        second = config_for(tmp_path / "b", experiments=[sweep()], cache_dir=shared, workers=2)
        run(first, plots=False)
        run(second, plots=False)

        assert (first.output_dir / REPORT_FILE).read_bytes() == (second.output_dir / REPORT_FILE).read_bytes()

    def test_probe_before_ingest(self, config_for, tmp_path):
        config = config_for(tmp_path, experiments=[sweep()])
        outcome = probe(config)

        assert outcome.failed == ["sweep"]
        with pytest.raises(ReportError):
            report(config)

    def test_missing_checkpoint_gives_absent_cells(self, config_for, tmp_path):
        missing = ModelSpec(
            model_id="gone", language="mandarin", tonality="tonal", locator=str(tmp_path / "no-such-checkpoint"),
        )
        config = config_for(tmp_path, models=[missing], experiments=[sweep(models=["gone"])])
        outcome = run(config, plots=False)

        assert outcome.failed == []
        assert len(outcome.report) == 14
        assert outcome.report.absent_cells == 13

    def test_subsample(self, config_for, tmp_path):
        config = config_for(tmp_path, subsample_fraction=0.5)
        artifacts = ingest(config)["mini"]

        assert len(artifacts.audio_index) == 10
        assert len(artifacts.syllables) == 80
        assert ingest_summary(config, "mini")["subsampled_syllables"] == 80

    def test_absent_cells_probed_again(self, config_for, tmp_path):
        config = config_for(tmp_path, experiments=[sweep()])
        ingest(config)
        before_extract = probe(config)
        assert before_extract.failed == []
        assert before_extract.report.absent_cells > 0

        extract(config)
        after_extract = probe(config)
        assert after_extract.reused == []
        assert len(after_extract.report) == len(before_extract.report)
        assert after_extract.report.absent_cells == 0
        assert probe(config).reused == ["sweep"]

    def test_stale_cache_entry_recomputed(self, config_for, tmp_path):
        config = config_for(tmp_path, experiments=[sweep()])
        run(config, plots=False)
        cache = ActivationCache(config.cache_dir)
        path = cache.path("stub-tonal", "final", "mini-000")
        data = bytearray(path.read_bytes())
        data[4:8] = (CACHE_VERSION + 1).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        shutil.rmtree(config.cache_dir / "pooled")

        assert probe(config, resume=False).report.absent_cells > 0
        assert extract(config)[("stub-tonal", "final")] == (1, 0)
        assert cache.readable("stub-tonal", "final", "mini-000")
        assert probe(config).report.absent_cells == 0
