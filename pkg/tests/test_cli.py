import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stereonas import config as CFG
from stereonas.cli import main
from stereonas.data import pfm_read
from stereonas.decode import read_genotype
from stereonas.report import read_ledger

TINY = {
    "data_samples": "12",
    "eval_samples": "4",
    "feature_layers": "2",
    "matching_layers": "2",
    "feature_filters": "2",
    "matching_filters": "2",
    "search_epochs": "2",
    "warmup_epochs": "1",
    "train_epochs": "1",
    "batch_size": "4",
    "extra_skips": "",
}


def _write_config(tmp_path, extra=None):
    vals = dict(TINY)
    vals.update(extra or {})
    p = tmp_path / "run.cfg"
    p.write_text("".join(f"{k}={v}\n" for k, v in vals.items()))
    return p


def _run(argv):
    return main(argv)


# ---- config --------------------------------------------------------------------


def test_config_roundtrip_canonical():
    cfg = CFG.RunConfig(seed=3, lr_start=0.02)
    text = cfg.canonical()
    back = CFG.RunConfig(**{k: CFG._convert(k, v)
                            for k, v in CFG.parse_config_text(text).items()})
    assert back == cfg
    assert back.canonical() == text


def test_config_rejects_unknown_key():
    with pytest.raises(CFG.ConfigError, match="unknown config key"):
        CFG.load_config(None, {"bogus": "1"})


def test_config_rejects_bad_density():
    with pytest.raises(CFG.ConfigError, match="density"):
        CFG.RunConfig(data_density=1.5)


def test_config_flag_overrides_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed=5\nbatch_size=2\n")
    cfg = CFG.load_config(p, {"seed": 9})
    assert cfg.seed == 9 and cfg.batch_size == 2


def test_config_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n\nseed=7  # trailing\n")
    assert CFG.load_config(p, {}).seed == 7


# ---- CLI commands ----------------------------------------------------------------


def test_cli_errors_are_single_line(tmp_path, capsys):
    rc = _run(["search", "--out", str(tmp_path / "o")])
    captured = capsys.readouterr()
    assert rc == 1
    err_lines = [l for l in captured.err.splitlines() if l]
    assert len(err_lines) == 1
    assert err_lines[0].startswith("error: ")


def test_cli_gen_data_outputs(tmp_path):
    cfgp = _write_config(tmp_path)
    out = tmp_path / "run"
    assert _run(["gen-data", "--config", str(cfgp), "--out", str(out)]) == 0
    manifest = (out / "dataset" / "manifest.txt").read_text().splitlines()
    assert len(manifest) == 12
    gt = pfm_read(out / "dataset" / "gt" / "sample_0000.pfm")
    assert gt.shape == (24, 48)
    meta = (out / "dataset" / "meta.txt").read_text()
    assert "config:" in meta and "data_samples=12" in meta


def test_cli_gen_data_deterministic(tmp_path):
    cfgp = _write_config(tmp_path)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert _run(["gen-data", "--config", str(cfgp), "--out", str(out),
                     "--seed", "5"]) == 0
        outs.append((out / "dataset" / "manifest.txt").read_bytes())
    assert outs[0] == outs[1]


def test_cli_rejects_bad_density_config(tmp_path):
    cfgp = _write_config(tmp_path, {"data_density": "1.5"})
    rc = _run(["gen-data", "--config", str(cfgp), "--out", str(tmp_path / "x")])
    assert rc == 1


def test_cli_full_tiny_pipeline(tmp_path, capsys):
    cfgp = _write_config(tmp_path)
    out = tmp_path / "run"
    base = ["--config", str(cfgp), "--out", str(out), "--seed", "1"]
    assert _run(["gen-data"] + base) == 0
    assert _run(["search"] + base) == 0
    geno_path = out / "search" / "genotype.txt"
    genotype = read_genotype(geno_path)
    assert len(genotype.feature_path) == 2

    ledger = read_ledger(out / "search" / "ledger.tsv")
    warm = [r for r in ledger if r.epoch == 1]
    assert all(r.phase == "warmup" for r in warm)
    assert (out / "search" / "ledger.png").exists()
    assert (out / "search" / "paths.png").exists()
    params = (out / "search" / "params.txt").read_text()
    sup = int(params.split("supernet_params: ")[1].splitlines()[0])
    dec = int(params.split("decoded_params: ")[1].splitlines()[0])
    assert dec < sup

    assert _run(["decode"] + base +
                ["--arch", str(out / "search" / "arch_params.npz")]) == 0
    assert (out / "decode" / "genotype.txt").read_bytes() == \
        geno_path.read_bytes()

    assert _run(["train"] + base + ["--genotype", str(geno_path)]) == 0
    weights = out / "train" / "weights.npz"
    assert weights.exists()
    assert (out / "train" / "loss_curve.png").exists()

    capsys.readouterr()
    assert _run(["eval"] + base + ["--genotype", str(geno_path),
                                   "--weights", str(weights)]) == 0
    report = capsys.readouterr().out
    lines = report.splitlines()
    assert lines[0].startswith("epe: ")
    assert lines[1].startswith("bad_1.0: ")
    assert lines[2].startswith("params: ")
    assert lines[3].startswith("wall_time_s: ")
    assert (out / "eval" / "report.txt").exists()
    assert (out / "eval" / "disparity_00.png").exists()


def test_cli_separate_mode_writes_two_ledgers(tmp_path):
    cfgp = _write_config(tmp_path)
    out = tmp_path / "run"
    base = ["--config", str(cfgp), "--out", str(out), "--seed", "2"]
    assert _run(["gen-data"] + base) == 0
    assert _run(["search", "--search-mode", "separate"] + base) == 0
    assert (out / "search" / "ledger_feature.tsv").exists()
    assert (out / "search" / "ledger_matching.tsv").exists()


def test_cli_eval_weights_mismatch_is_error(tmp_path, capsys):
    cfgp = _write_config(tmp_path)
    out = tmp_path / "run"
    base = ["--config", str(cfgp), "--out", str(out), "--seed", "3"]
    assert _run(["gen-data"] + base) == 0
    assert _run(["search"] + base) == 0
    geno = out / "search" / "genotype.txt"
    assert _run(["train"] + base + ["--genotype", str(geno)]) == 0
    # evaluating with a different cell variant changes the parameter tree
    rc = _run(["eval", "--cell", "direct"] + base +
              ["--genotype", str(geno),
               "--weights", str(out / "train" / "weights.npz")])
    captured = capsys.readouterr()
    assert rc == 1 and "mismatch" in captured.err


def test_cli_entrypoint_runs_as_module():
    proc = subprocess.run(
        [sys.executable, "-m", "stereonas.cli", "gen-data", "--help"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "--seed" in proc.stdout
