from __future__ import annotations

import pytest
from click.testing import CliRunner

from recsys.cli import cli
from recsys.serve import recommend, save_snapshot
from recsys.synthgen import ADS_FILE, EVENTS_FILE


@pytest.fixture
def runner():
    return CliRunner()


def test_synth_writes_marketplace(runner, tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("n_users=30\nn_items=40\nimage_dim=4\n")
    out = tmp_path / "data"
    result = runner.invoke(cli, ["synth", "--config", str(cfg), "--out", str(out), "--seed", "2"])
    assert result.exit_code == 0, result.output
    assert "wrote 40 ads" in result.output
    assert (out / ADS_FILE).exists() and (out / EVENTS_FILE).exists()


def test_synth_rejects_bad_config(runner, tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("n_items=0\n")
    result = runner.invoke(cli, ["synth", "--config", str(cfg), "--out", str(tmp_path / "data")])
    assert result.exit_code == 1
    assert "n_items" in result.output


def test_recommend_command(runner, tmp_path, toy_snapshot):
    snap_dir = save_snapshot(toy_snapshot, tmp_path / "snap")
    result = runner.invoke(cli, ["recommend", "--snapshot", str(snap_dir), "-k", "3", "i007"])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert [line.split("\t")[0] for line in lines] == [i for i, _ in recommend(toy_snapshot, "i007", 3)]

    unknown = runner.invoke(cli, ["recommend", "--snapshot", str(snap_dir), "ghost"])
    assert unknown.exit_code == 1
    assert "ghost" in unknown.output


def test_recommend_needs_snapshot(runner, monkeypatch):
    monkeypatch.delenv("RECSYS_SNAPSHOT_DIR", raising=False)
    result = runner.invoke(cli, ["recommend", "i001"])
    assert result.exit_code == 2


def test_serve_reports_bind_failures(runner, tmp_path, toy_snapshot, monkeypatch):
    import recsys.serve

    def port_taken(*args, **kwargs):
        raise OSError(98, "Address already in use")

    monkeypatch.setattr(recsys.serve, "serve_http", port_taken)
    snap_dir = save_snapshot(toy_snapshot, tmp_path / "snap")
    result = runner.invoke(cli, ["serve", "--snapshot", str(snap_dir), "--port", "5999"])
    assert result.exit_code == 1
    assert "Address already in use" in result.output
    assert "5999" in result.output
    assert not isinstance(result.exception, OSError)


def test_eval_command(runner, refreshed, tmp_path):
    out, _ = refreshed
    report_dir = tmp_path / "report"
    result = runner.invoke(cli, ["eval", "--model", str(out), "--n", "1,10", "--report", str(report_dir)])
    assert result.exit_code == 0, result.output
    assert "HR@1" in result.output and "HR@10" in result.output
    assert (report_dir / "eval_report.kv").exists()

    bad = runner.invoke(cli, ["eval", "--model", str(out), "--n", "0"])
    assert bad.exit_code == 2


def test_refresh_failure_is_reported(runner, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    result = runner.invoke(cli, ["refresh", "--data", str(data), "--out", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "load" in result.output
