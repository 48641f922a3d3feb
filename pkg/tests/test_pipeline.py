import json

import numpy as np
import pytest

from fiplab import cli, pipeline
from fiplab import config as C
from fiplab.data import gen_synthetic, save_idx
from fiplab.errors import PrerequisiteError, SchemaMismatchError
from fiplab.nn import load_checkpoint

TINY = {
    "dataset": {"per_class": 30, "test_per_class": 10, "image_size": 8, "val_fraction": None, "val_per_class": 2},
    "attack": {"size": 2},
    "model": {"hidden": [8]},
    "train": {
        "benign": {"epochs": 2, "batch_size": 16},
        "backdoor": {"epochs": 2, "batch_size": 16},
    },
    "analysis": {"batch_size": 20, "power_iters": 10, "probes": 5, "lanczos_steps": 5, "density_probes": 2},
    "defense": {"epochs": 2},
}


def tiny_config(**sections):
    over = json.loads(json.dumps(TINY))
    for k, v in sections.items():
        over[k] = {**over.get(k, {}), **v}
    return C.load_config(overrides=over)


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_full_run_writes_artifacts_and_report(tmp_path):
    res = pipeline.run(tiny_config(), out_dir=tmp_path)
    for name in ("report.json", "metrics.csv", "smoothness.csv", "density.csv", "purified.ckpt", "fisher.bin", "config.json"):
        assert (tmp_path / name).exists(), name
    r = res.report
    assert r["schema_version"] == C.SCHEMA_VERSION
    assert set(r["metrics"]) == set(r["smoothness"]) == {"benign", "before", "after"}
    assert r["tunable_parameters"]["weights_ffip"] == 8 + 3
    assert r["tunable_parameters"]["weights_full"] == 64 * 8 + 8 * 3
    assert r["provenance"]["label_mode"] == "ground-truth"
    assert load_checkpoint(tmp_path / "purified.ckpt").dims == (64, 8, 3)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "model,acc,asr,lcr"


def test_rerun_is_cached_and_bit_identical(tmp_path):
    cfg = tiny_config()
    first = pipeline.run(cfg, out_dir=tmp_path)
    second = pipeline.run(cfg, out_dir=tmp_path)
    assert all(second.cached.values())
    assert sum(second.seconds.values()) == 0.0
    assert second.report_checksum == first.report_checksum
    forced = pipeline.run(cfg, out_dir=tmp_path, force=True)
    assert not any(forced.cached.values())
    assert forced.report_checksum == first.report_checksum


def test_changing_defense_reuses_training(tmp_path):
    pipeline.run(tiny_config(), out_dir=tmp_path)
    res = pipeline.run(tiny_config(defense={"mode": "ffip"}), out_dir=tmp_path)
    assert res.cached == {"gen-data": True, "train": True, "analyze": True, "purify": False, "report": False}
    assert res.report["defense_mode"] == "ffip"
    assert res.report["timings"]["svd_seconds"] is not None


def test_upstream_rerun_invalidates_downstream(tmp_path):
    cfg = tiny_config()
    pipeline.run(cfg, out_dir=tmp_path)
    pipeline.run(cfg, stages="gen-data", out_dir=tmp_path, force=True)
    with pytest.raises(PrerequisiteError) as exc:
        pipeline.run(cfg, stages="analyze", out_dir=tmp_path)
    assert exc.value.stage == "train"


def test_report_without_artifacts_names_first_stage(tmp_path):
    with pytest.raises(PrerequisiteError) as exc:
        pipeline.run(tiny_config(), stages="report", out_dir=tmp_path)
    assert exc.value.stage == "gen-data"


def test_stage_by_stage_equals_full_run(tmp_path):
    cfg = tiny_config()
    for stage in pipeline.STAGES:
        res = pipeline.run(cfg, stages=stage, out_dir=tmp_path / "a")
    full = pipeline.run(cfg, out_dir=tmp_path / "b")
    a, b = dict(res.report), dict(full.report)
    for r in (a, b):
        r.pop("timings")
    assert a == b


def test_vanilla_fine_tuning_mode(tmp_path):
    res = pipeline.run(tiny_config(defense={"mode": "vanilla-ft"}), out_dir=tmp_path)
    assert res.report["defense_mode"] == "vanilla-ft"


def test_idx_source(tmp_path):
    paths = {}
    for split, n in (("train", 30), ("test", 10)):
        ds = gen_synthetic(3, n, 8, seed=n)
        paths[f"{split}_images"] = str(tmp_path / f"{split}-images")
        paths[f"{split}_labels"] = str(tmp_path / f"{split}-labels")
        save_idx(ds, paths[f"{split}_images"], paths[f"{split}_labels"])
    res = pipeline.run(tiny_config(dataset={"source": "idx", **paths}), out_dir=tmp_path / "out")
    assert res.report["metrics"]["before"]["acc"] >= 0


def test_output_env_overrides_config(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.OUTPUT_ENV, str(tmp_path / "env"))
    pipeline.run(tiny_config(), stages="gen-data")
    assert (tmp_path / "env" / "data.npz").exists()


def _report(asr_before, asr_after, acc_before=0.9, acc_after=0.9, version=1):
    m = lambda acc, asr: {"acc": acc, "asr": asr, "lcr": 0.0}
    return {"schema_version": version, "metrics": {"after": m(acc_after, asr_after), "before": m(acc_before, asr_before)}}


def test_diff_identical_reports_is_zero():
    r = _report(1.0, 0.5)
    assert all(v == 0 for v in pipeline.diff_reports(r, r).deltas.values())


def test_diff_drop_convention():
    no_defense = _report(1.0, 1.0, acc_after=0.9335)
    purified = _report(1.0, 0.0186, acc_after=0.9182)
    d = pipeline.diff_reports(no_defense, purified).deltas
    assert d["asr_drop"] == pytest.approx(98.14, abs=1e-9)
    assert d["acc_drop"] == pytest.approx(93.35 - 91.82, abs=1e-9)


def test_diff_schema_mismatch():
    with pytest.raises(SchemaMismatchError):
        pipeline.diff_reports(_report(1, 0), _report(1, 0, version=2))


def test_cli_exit_codes(tmp_path, cfg_file, capsys):
    out = str(tmp_path / "cli")
    assert cli.main(["report", "--config", str(cfg_file), "--out", out]) == cli.EXIT_PREREQUISITE
    assert "gen-data" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"defense": {"eta_f": 1}}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", out]) == cli.EXIT_CONFIG
    assert "/defense/eta_f" in capsys.readouterr().err
    for stage in ("gen-data", "train", "analyze", "purify", "report"):
        assert cli.main([stage, "--config", str(cfg_file), "--out", out]) == cli.EXIT_OK
    assert cli.main(["run", "--config", str(cfg_file), "--out", out]) == cli.EXIT_OK
    assert "cached" in capsys.readouterr().out
    report = str(tmp_path / "cli" / "report.json")
    assert cli.main(["diff", report, report, "--json"]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["asr_drop"] == 0


def test_cli_numerical_failure_exit_code(tmp_path, cfg_file, monkeypatch):
    from fiplab.errors import SvdConvergenceError

    def boom(*args, **kwargs):
        raise SvdConvergenceError(1.0, 30)

    monkeypatch.setattr(pipeline, "run", boom)
    assert cli.main(["purify", "--config", str(cfg_file)]) == cli.EXIT_NUMERICAL


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "fiplab", "report", "--out", str(tmp_path)], capture_output=True, text=True
    )
    assert proc.returncode == cli.EXIT_PREREQUISITE
    assert "gen-data" in proc.stderr
