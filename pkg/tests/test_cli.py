import subprocess
import sys

import numpy as np
import pytest
import yaml

from hqvae import cli
from hqvae.checkpoint import save_arrays

SMALL = """
model:
  variant: rsqvae
  d_b: 3
  hidden: 4
  n_res: 1
  input_shape: [3, 16, 16]
  shared_codebook: true
  layers:
    - {kind: first, resolution: 4, codebook_size: 4}
    - {kind: residual, resolution: 4, codebook_size: 4}
train:
  epochs: 1
  batch_size: 4
data:
  source: synth
  n_train: 8
  n_val: 4
  n_test: 4
  image_size: 16
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def _train(tmp_path, cfg_path, *extra):
    return cli.main(["train", "--config", str(cfg_path), "--runs-dir", str(tmp_path / "runs"), *extra])


def _run_dir(tmp_path):
    (d,) = [p for p in (tmp_path / "runs").iterdir()]
    return d


def test_train_writes_run_tree(tmp_path, cfg_path):
    assert _train(tmp_path, cfg_path) == 0
    d = _run_dir(tmp_path)
    man = yaml.safe_load((d / "manifest.yaml").read_text())
    assert man["config_hash"] == d.name
    assert man["config"]["train"]["lr"] == 1e-3  # defaults materialized
    assert (d / "metrics.csv").exists() and (d / "eval" / "test.json").exists()
    assert (d / "checkpoints" / "final.ckpt").exists()


def test_rerun_refuses_without_force(tmp_path, cfg_path, capsys):
    assert _train(tmp_path, cfg_path) == 0
    assert _train(tmp_path, cfg_path) == cli.EXIT_IO
    assert "--force" in capsys.readouterr().err
    assert _train(tmp_path, cfg_path, "--force") == 0


def test_overrides_reach_manifest(tmp_path, cfg_path):
    assert _train(tmp_path, cfg_path, "--variant", "sqvae2", "--layers", "2", "--K", "8") == 0
    man = yaml.safe_load((_run_dir(tmp_path) / "manifest.yaml").read_text())
    layers = man["config"]["model"]["layers"]
    assert man["config"]["model"]["variant"] == "sqvae2"
    assert [(l["kind"], l["codebook_size"]) for l in layers] == [("first", 8), ("injected", 8)]


def test_missing_config_names_path(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tmp_path / "nope.yaml")])
    assert code == cli.EXIT_CONFIG
    assert "nope.yaml" in capsys.readouterr().err


def test_config_parse_error_has_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("model:\n  variant: [unclosed\n")
    assert cli.main(["train", "--config", str(p)]) == cli.EXIT_CONFIG
    assert "line" in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path, cfg_path):
    p = tmp_path / "inv.yaml"
    p.write_text(SMALL.replace("variant: rsqvae", "variant: sqvae2"))
    assert _train(tmp_path, p) == cli.EXIT_CONFIG
    p.write_text(SMALL + "extra: 1\n")
    assert _train(tmp_path, p) == cli.EXIT_CONFIG


def test_numeric_abort_exit_code(tmp_path, cfg_path, monkeypatch):
    from hqvae import objectives

    def boom(*a, **k):
        raise objectives.NumericAbort("gap_1", float("nan"))

    monkeypatch.setattr("hqvae.trainer.O.objective", boom)
    assert _train(tmp_path, cfg_path) == cli.EXIT_NUMERIC


def test_inspect_evaluate_sample_dump(tmp_path, cfg_path, capsys):
    assert _train(tmp_path, cfg_path) == 0
    d = _run_dir(tmp_path)
    ck = str(d / "checkpoints" / "final.ckpt")
    capsys.readouterr()
    assert cli.main(["inspect-checkpoint", ck]) == 0
    out = capsys.readouterr().out
    assert "codebook/1/vectors\tfloat32\t(4, 3)" in out and "variant: rsqvae" in out
    assert cli.main(["evaluate", ck, "--split", "train", "test"]) == 0
    assert (d / "eval" / "train.json").exists() and (d / "eval" / "test.json").exists()
    assert cli.main(["sample", ck, "--n", "4", "--seed", "5"]) == 0
    first = (d / "dumps" / "samples_seed5.png").read_bytes()
    assert cli.main(["sample", ck, "--n", "4", "--seed", "5"]) == 0
    assert (d / "dumps" / "samples_seed5.png").read_bytes() == first
    assert cli.main(["progressive-dump", ck, "--n", "2"]) == 0
    assert (d / "dumps" / "progressive_test" / "prefix_2.png").exists()


def test_checkpoint_version_mismatch(tmp_path, capsys):
    p = tmp_path / "c.ckpt"
    save_arrays(p, {"a": np.zeros(2)})
    raw = bytearray(p.read_bytes())
    raw[8] = 99
    p.write_bytes(bytes(raw))
    assert cli.main(["inspect-checkpoint", str(p)]) == cli.EXIT_IO
    assert "version" in capsys.readouterr().err


def test_progressive_dump_refused_for_sqvae2(tmp_path, cfg_path, capsys):
    assert _train(tmp_path, cfg_path, "--variant", "sqvae2", "--layers", "2") == 0
    ck = _run_dir(tmp_path) / "checkpoints" / "final.ckpt"
    assert cli.main(["progressive-dump", str(ck)]) == cli.EXIT_CONFIG
    assert "prefix" in capsys.readouterr().err


def test_rd_sweep_command(tmp_path, cfg_path):
    code = cli.main(["rd-sweep", "--config", str(cfg_path), "--variants", "rqvae", "--layers", "1", "2",
                     "--K", "4", "--seeds", "0", "1", "--runs-dir", str(tmp_path / "runs")])
    assert code == 0
    (csvp,) = list((tmp_path / "runs" / "rd").glob("*/rd.csv"))
    assert len(csvp.read_text().splitlines()) == 1 + 4
    assert (csvp.parent / "rd_summary.csv").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hqvae.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
