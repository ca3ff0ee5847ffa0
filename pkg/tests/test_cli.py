import json
import os

import pytest

from cli import main
from diffusion_core import DiffusionTrainConfig, save_denoiser
from manifest import DatasetManifest
from verification_eval import make_toy_pairs, write_pair_list


def run(capsys, *argv):
    code = main(list(argv))
    return code, json.loads(capsys.readouterr().out)


def test_make_toy_data_with_pairs(capsys, tmp_path):
    out = str(tmp_path / "toy")
    code, result = run(capsys, "make-toy-data", "--out", out, "--identities", "3", "--per-identity", "2",
                       "--resolution", "8", "--pairs", "10")
    assert code == 0
    assert result["success"] is True
    assert result["images"] == 6
    assert result["subjects"] == 3
    assert os.path.exists(result["pairs"])
    DatasetManifest.read(out).validate(check_files=True, per_subject=2)


def test_combine_and_ingest(capsys, tmp_path):
    for name, seed in (("a", "0"), ("b", "1")):
        run(capsys, "make-toy-data", "--out", str(tmp_path / name), "--identities", "2", "--per-identity", "2",
            "--resolution", "8", "--seed", seed)
    code, result = run(capsys, "combine", "--manifests", str(tmp_path / "a"), str(tmp_path / "b"),
                       "--out", str(tmp_path / "all" / "manifest.jsonl"))
    assert code == 0
    assert result["subjects"] == 4

    code, result = run(capsys, "ingest", "--src", str(tmp_path / "a"), "--out", str(tmp_path / "a.jsonl"),
                       "--ledger", str(tmp_path / "work"))
    assert code == 0
    assert result["images"] == 4
    assert os.path.exists(tmp_path / "work" / "ledger.db")


def test_eval_reports_gap(capsys, encoder, toy_corpus, tmp_path):
    encoder_path = encoder.save(str(tmp_path / "encoder.pt"))
    pairs = write_pair_list(make_toy_pairs(toy_corpus, 20, seed=1), str(tmp_path / "toy.tsv"))
    code, result = run(capsys, "eval", "--encoder", encoder_path, "--pairs", pairs, "--baseline", "94.26",
                       "--report", str(tmp_path / "report.json"))
    assert code == 0
    assert list(result["per_set"]) == ["toy"]
    assert result["baseline_avg"] == 94.26
    assert os.path.exists(tmp_path / "report.json")

    same_stem = [write_pair_list(make_toy_pairs(toy_corpus, 20, seed=1), str(tmp_path / d / "pairs.tsv"))
                 for d in ("lfw", "cfp")]
    code, result = run(capsys, "eval", "--encoder", encoder_path, "--pairs", *same_stem, "--baseline", "94.26")
    assert code == 0
    assert sorted(result["per_set"]) == ["cfp/pairs", "lfw/pairs"]


def test_failures_return_nonzero(capsys, tmp_path):
    code, result = run(capsys, "eval", "--encoder", str(tmp_path / "missing.pt"), "--pairs",
                       str(tmp_path / "missing.tsv"), "--baseline", "94.26")
    assert code == 1
    assert result["success"] is False

    code, result = run(capsys, "run-pipeline", "--set", "no_such_key=1")
    assert code == 1
    assert "no_such_key" in result["error"]

    code, result = run(capsys, "run-pipeline", "--set", f"workdir={tmp_path / 'run'}")
    assert code == 1
    assert "baseline_avg" in result["error"]


def test_unknown_subcommand_exits(capsys):
    with pytest.raises(SystemExit):
        main(["no-such-command"])
    with pytest.raises(SystemExit):
        main([])


def test_generate_requires_an_encoder(capsys, denoiser, schedule, tmp_path):
    model_path = save_denoiser(denoiser, schedule, DiffusionTrainConfig(), str(tmp_path / "denoiser.pt"))
    code, result = run(capsys, "generate", "--model", model_path, "--inquiry", str(tmp_path / "x.png"),
                       "--out", str(tmp_path / "out"))
    assert code == 1
    assert "--encoder" in result["error"]
