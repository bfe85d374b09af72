import json

import pytest
import yaml

from cdisrad.cli import main
from cdisrad.config import CACHE_ENV, load_config

GRID = ["--grid", "20", "20", "5"]


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture
def cohort(tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "ph"), "--n", "5", "--seed", "1", *GRID]) == 0
    return tmp_path / "ph"


def _config(tmp_path, cohort, **extra):
    cfg = {
        "manifest": str(cohort / "manifest.csv"),
        "cache_dir": str(tmp_path / "cache"),
        "output_dir": str(tmp_path / "out"),
        "task": "grading",
        "net": {"miniature": True},
        "train": {"epochs": 1, "batch_size": 4},
        **extra,
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


# --------------------------------------------------------------------------
# phantom


def test_phantom_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["phantom", "--out", str(tmp_path / name), "--n", "3", "--seed", "9", *GRID]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_phantom_zero_patients(tmp_path, capsys):
    assert main(["phantom", "--out", str(tmp_path / "z"), "--n", "0"]) == 0
    assert _last_json(capsys)["n_patients"] == 0


def test_phantom_negative_count_is_usage_error(tmp_path, capsys):
    assert main(["phantom", "--out", str(tmp_path / "z"), "--n", "-3"]) == 1
    assert "must be >= 0" in capsys.readouterr().err


def test_no_command_is_usage_error():
    assert main([]) == 1


# --------------------------------------------------------------------------
# synth


def test_synth_writes_one_volume_per_patient_and_caches(tmp_path, cohort, capsys):
    cfg = _config(tmp_path, cohort)
    assert main(["synth", "--config", str(cfg)]) == 0
    first = _last_json(capsys)
    assert first["computed"] == 5 and first["cached"] == 0
    outputs = sorted((tmp_path / "cache" / "cdis").glob("*.cdv"))
    assert len(outputs) == 5
    stamp = {p.name: p.stat().st_mtime_ns for p in outputs}

    assert main(["synth", "--config", str(cfg)]) == 0
    again = _last_json(capsys)
    assert again["computed"] == 0 and again["cached"] == 5
    assert {p.name: p.stat().st_mtime_ns for p in outputs} == stamp

    assert main(["synth", "--config", str(cfg), "--force"]) == 0
    assert _last_json(capsys)["computed"] == 5


def test_synth_missing_dwi_file_names_patient(tmp_path, cohort, capsys):
    (cohort / "P0002" / "dwi_b600.cdv").unlink()
    cfg = _config(tmp_path, cohort)
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "P0002" in capsys.readouterr().err


def test_missing_manifest_is_data_error(tmp_path, capsys):
    code = main(["synth", "--manifest", str(tmp_path / "none.csv"), "--cache-dir", str(tmp_path)])
    assert code == 2


def test_env_cache_dir_and_flag_precedence(tmp_path, cohort, monkeypatch, capsys):
    cfg = _config(tmp_path, cohort)
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "envcache"))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "envcache" / "cdis").glob("*.cdv"))) == 5
    assert main(["synth", "--config", str(cfg), "--cache-dir", str(tmp_path / "flagcache")]) == 0
    assert len(list((tmp_path / "flagcache" / "cdis").glob("*.cdv"))) == 5


# --------------------------------------------------------------------------
# config


def test_config_relative_paths_and_fingerprint(tmp_path, cohort):
    cfg = load_config(_config(tmp_path, cohort), env={})
    assert cfg.net.base_width == 4 and cfg.train.epochs == 1
    moved = load_config(_config(tmp_path, cohort), {"cache_dir": tmp_path / "x", "jobs": 3}, env={})
    assert moved.fingerprint == cfg.fingerprint
    other = load_config(_config(tmp_path, cohort), {"seed": 4}, env={})
    assert other.fingerprint != cfg.fingerprint


def test_bad_config_is_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("colour: blue\n")
    assert main(["synth", "--config", str(path)]) == 1
    assert "unknown config keys" in capsys.readouterr().err


# --------------------------------------------------------------------------
# cube / loocv / report


def test_unknown_modality_is_usage_error(tmp_path, cohort, capsys):
    cfg = _config(tmp_path, cohort)
    assert main(["loocv", "--config", str(cfg), "--modality", "PET"]) == 1
    assert "PET" in capsys.readouterr().err


def test_cube_then_loocv_then_report(tmp_path, cohort, capsys):
    cfg = _config(tmp_path, cohort)
    assert main(["cube", "--config", str(cfg), "--modality", "CDIs", "ADC"]) == 0
    assert len(list((tmp_path / "cache" / "cubes" / "ADC").glob("*.cdv"))) == 5
    capsys.readouterr()

    assert main(["loocv", "--config", str(cfg), "--modality", "CDIs", "ADC"]) == 0
    table = capsys.readouterr().out
    header = table.splitlines()[2].split()
    assert header == ["Modality", "Accuracy", "Sensitivity", "Specificity"]
    out = tmp_path / "out" / "grading"
    report = json.loads((out / "CDIs.report.jsonl").read_text())
    assert report["tp"] + report["fp"] + report["tn"] + report["fn"] == 5
    folds = [json.loads(line) for line in (out / "CDIs.folds.jsonl").read_text().splitlines()]
    assert len(folds) == 5 and all(f["n_train"] == 4 for f in folds)
    assert len({f["config_fingerprint"] for f in folds}) == 1
    first = _tree_bytes(out)

    assert main(["loocv", "--config", str(cfg), "--modality", "CDIs", "ADC"]) == 0
    assert _tree_bytes(out) == first

    capsys.readouterr()
    assert main(["report", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out == table


def test_report_without_files_is_usage_error(tmp_path, cohort):
    assert main(["report", "--config", str(_config(tmp_path, cohort))]) == 1
