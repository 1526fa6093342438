import json
import shutil

import pytest

from lidarseed.cli import main
from lidarseed.pipeline import ConfigError, PipelineConfig

SMALL = """\
n_frames = 40
C = 24
rounds = 2
steps = 150
overlay_frames = 2
"""


def write_cfg(path, text=SMALL):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(root / "cfg.txt", SMALL + "out = run\n")
    for sub in ("synth-gen", "segment", "init", "iterate", "export", "eval"):
        assert main([sub, "--config", str(cfg)]) == 0, sub
    return root


def test_config_defaults_and_types(tmp_path):
    cfg = PipelineConfig.load(write_cfg(tmp_path / "c.txt", "C = 7\neta = 0.9\nhidden = 32 16\nwrap_azimuth = true\n"))
    assert cfg.C == 7 and cfg.eta == 0.9 and cfg.hidden == (32, 16) and cfg.wrap_azimuth is True
    assert cfg.rounds == 10 and cfg.pos_neg_ratio == "1:3"
    assert cfg.out == tmp_path / "out" and cfg.dataset_dir == tmp_path / "out" / "synth-gen"
    lc = cfg.labeler_config()
    assert lc.C == 7 and lc.hidden == (32, 16)


@pytest.mark.parametrize("text", ["bogus = 1\n", "pos_neg_ratio = 1:2\n", "eta = 1.5\n", "C = many\n",
                                  "beams = missing.txt\n", "workers = 0\n"])
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        PipelineConfig.load(write_cfg(tmp_path / "c.txt", text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "nope.txt")


def test_cli_error_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.txt", "bogus = 1\n")
    assert main(["init", "--config", str(cfg)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error=ConfigError stage=init message=")


def test_stage_before_dataset_fails(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.txt")
    assert main(["segment", "--config", str(cfg)]) != 0
    assert "error=ConfigError stage=segment" in capsys.readouterr().err


def test_missing_upstream_stage(run_dir, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.txt", SMALL + f"dataset = {run_dir / 'run' / 'synth-gen'}\nout = fresh\n")
    assert main(["init", "--config", str(cfg)]) == 1
    assert "error=MissingArtifact stage=init" in capsys.readouterr().err


def test_segment_outputs(run_dir):
    out = run_dir / "run"
    assert len(list((out / "segment" / "frames").glob("*.npz"))) == 40
    lines = (out / "segment" / "summary.txt").read_text().splitlines()
    assert len(lines) == 41 and lines[-1].startswith("# frames 40 segments")


def test_stage_outputs(run_dir):
    out = run_dir / "run"
    reports = [json.loads(l) for l in (out / "iterate" / "reports.jsonl").read_text().splitlines()]
    assert [r["round"] for r in reports] == [1, 2]
    assert (out / "iterate" / "round_01.txt").exists() and (out / "iterate" / "labels.txt").exists()
    assert (out / "export" / "pseudo_annotations.jsonl.schema").exists()
    report = (out / "eval" / "report.txt").read_text()
    assert report.splitlines()[0].split() == ["category", "AP", "AP_S", "AP_M", "AP_L"]
    assert "mapping_error" in report


@pytest.mark.parametrize("stage,artifact", [("init", "labels.txt"), ("iterate", "labels.txt"),
                                            ("export", "pseudo_annotations.jsonl"), ("eval", "report.txt")])
def test_stage_is_resumable(run_dir, stage, artifact):
    cfg = run_dir / "cfg.txt"
    target = run_dir / "run" / stage
    before = (target / artifact).read_bytes()
    moved = run_dir / f"{stage}.bak"
    shutil.move(target, moved)
    try:
        assert main([stage, "--config", str(cfg)]) == 0
        assert (target / artifact).read_bytes() == before
    finally:
        shutil.rmtree(target, ignore_errors=True)
        shutil.move(moved, target)


def test_workers_do_not_change_results(run_dir, tmp_path):
    cfg = write_cfg(tmp_path / "c.txt", SMALL + f"dataset = {run_dir / 'run' / 'synth-gen'}\nout = par\n")
    for sub in ("segment", "init"):
        assert main([sub, "--config", str(cfg), "--workers", "3"]) == 0
    a = (run_dir / "run" / "init" / "labels.txt").read_bytes()
    assert (tmp_path / "par" / "init" / "labels.txt").read_bytes() == a


def test_sweep_stats_overlay(run_dir, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(run_dir / "run", out)
    cfg = write_cfg(tmp_path / "c.txt", SMALL + f"out = {out}\n")
    for sub in ("sweep-eta", "stats", "overlay"):
        assert main([sub, "--config", str(cfg)]) == 0, sub
    table = (out / "sweep-eta" / "table.txt").read_text().splitlines()
    assert len(table) == 6
    assert sorted(p.name for p in (out / "sweep-eta").iterdir() if p.is_dir()) == \
        ["eta_0.8", "eta_0.9", "eta_0.95", "eta_0.99", "eta_0.999"]
    for d in (out / "sweep-eta").iterdir():
        if d.is_dir():
            assert (d / "labels.txt").exists()
    assert (out / "stats" / "clusters.csv").read_text().startswith("stage,non_empty,clusters_90,clusters_80")
    assert (out / "stats" / "clusters.png").stat().st_size > 0
    assert len(list((out / "overlay").glob("*.png"))) == 2


def test_seed_override_changes_labels(run_dir, tmp_path):
    cfg = write_cfg(tmp_path / "c.txt", SMALL + f"dataset = {run_dir / 'run' / 'synth-gen'}\n"
                    f"out = {tmp_path / 'x'}\n")
    shutil.copytree(run_dir / "run" / "segment", tmp_path / "x" / "segment")
    assert main(["init", "--config", str(cfg), "--seed", "9"]) == 0
    assert (tmp_path / "x" / "init" / "labels.txt").read_bytes() != \
        (run_dir / "run" / "init" / "labels.txt").read_bytes()
