import os
from dataclasses import replace

import pandas as pd
import pytest
import torch
from PIL import Image

from ddim_sampler import SamplerConfig
from errors import StageError, ValidationError
from imaging import save_png
from manifest import SOURCE_GENERATED, SOURCE_OVERSAMPLED, DatasetManifest
from models import StageRun
from pipeline import STAGES, PipelineRunner, load_inquiries, render_report_grid, run_sweep
from verification_eval import gap_to_real


def test_tiny_pipeline_runs_then_hits_the_cache(tiny_pipeline_config):
    first = PipelineRunner(tiny_pipeline_config)
    report = first.run()
    assert [s for s, _ in first.executed] == list(STAGES)
    assert list(report.per_set) == ["toy"]
    assert 0.0 <= report.avg <= 100.0
    assert report.gap_to_real == gap_to_real(94.26, report.avg)

    assembled = DatasetManifest.read(first.artifacts["assemble"])
    assert len(assembled.subject_ids()) == 3
    assert sum(r.source == SOURCE_GENERATED for r in assembled.records) == 6
    assert sum(r.source == SOURCE_OVERSAMPLED for r in assembled.records) == 3

    second = PipelineRunner(tiny_pipeline_config)
    assert second.run() == report
    assert second.executed == []
    assert [s for s, _ in second.skipped] == list(STAGES)

    third = PipelineRunner(replace(tiny_pipeline_config, fr_lr=0.05))
    third.run()
    assert [s for s, _ in third.executed] == ["fr", "eval"]


def test_pipeline_needs_a_baseline(tiny_pipeline_config):
    with pytest.raises(ValidationError):
        PipelineRunner(replace(tiny_pipeline_config, baseline_avg=None))


def test_failed_stage_is_recorded(tiny_pipeline_config):
    runner = PipelineRunner(tiny_pipeline_config)

    def build(out_dir):
        raise RuntimeError("out of memory")

    with pytest.raises(StageError) as info:
        runner.run_stage("encoder", "d" * 64, build)
    assert info.value.stage == "encoder"
    with runner.Session() as s:
        row = s.query(StageRun).filter_by(stage="encoder").one()
    assert row.status == "error"
    assert row.error_message == "out of memory"
    assert runner.cached_artifact("encoder", "d" * 64) is None


def test_stage_reruns_when_its_artifact_disappears(tiny_pipeline_config):
    runner = PipelineRunner(tiny_pipeline_config)
    calls = []

    def build(out_dir):
        calls.append(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "artifact.txt")
        with open(path, "w") as f:
            f.write("x")
        return path, 1

    path = runner.run_stage("toy_data", "a" * 64, build)
    assert runner.run_stage("toy_data", "a" * 64, build) == path
    assert len(calls) == 1
    os.remove(path)
    runner.run_stage("toy_data", "a" * 64, build)
    assert len(calls) == 2


def test_sweep_shares_upstream_stages(tiny_pipeline_config):
    config = replace(tiny_pipeline_config, sweep_m=(0.0, 0.4))
    reports = run_sweep(config)
    assert list(reports) == ["m=0", "m=0.4"]
    frame = pd.read_csv(os.path.join(config.workdir, "sweep.csv"))
    assert list(frame["variant"]) == ["m=0", "m=0.4"]
    runner = PipelineRunner(config)
    with runner.Session() as s:
        encoder_runs = s.query(StageRun).filter_by(stage="encoder", status="success").count()
        assemble_runs = s.query(StageRun).filter_by(stage="assemble", status="success").count()
    assert encoder_runs == 1
    assert assemble_runs == 2


def test_report_grid_layout(denoiser, schedule, encoder, tmp_path):
    inquiries = [torch.rand(3, 8, 8) * 2 - 1 for _ in range(2)]
    path = render_report_grid(denoiser, schedule, encoder, inquiries, [-0.4, 0.0, 0.4], seed=3,
                              path=str(tmp_path / "grid.png"), config=SamplerConfig(num_steps=2))
    with Image.open(path) as img:
        assert img.size == (4 * 10 + 2, 2 * 10 + 2)
    with pytest.raises(ValidationError):
        render_report_grid(denoiser, schedule, encoder, [], [0.0], 0, str(tmp_path / "empty.png"))


def test_load_inquiries_accepts_file_manifest_and_directory(toy_corpus, tmp_path):
    assert len(load_inquiries(toy_corpus.root, 8, 3)) == 12
    assert len(load_inquiries(os.path.join(toy_corpus.root, "manifest.jsonl"), 8, 3, limit=2)) == 2
    single = load_inquiries(toy_corpus.abspath(toy_corpus.records[0]), 8, 3)
    assert len(single) == 1 and single[0].shape == (3, 8, 8)
    flat = tmp_path / "flat"
    for k in range(3):
        save_png(torch.zeros(3, 16, 16), str(flat / f"{k}.png"))
    images = load_inquiries(str(flat), 8, 3)
    assert [tuple(x.shape) for x in images] == [(3, 8, 8)] * 3
