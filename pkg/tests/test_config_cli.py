import csv

import numpy as np
import pytest

from nestfl.cli import main
from nestfl.config import DEFAULT_TIERS, OUT_ENV, ConfigError, ExperimentConfig, load_config, parse_config
from nestfl.protocol import Mode
from nestfl.simenv import read_dataset

TINY = """\
[protocol]
rounds = 2
num_devices = 6
devices_per_round = 3
server_pretrain_epochs = 1
local_epochs = 1

[task]
samples_per_class = 40
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- config parsing --------------------------------------------------------------


def test_empty_config_is_defaults():
    assert parse_config("") == ExperimentConfig().with_seed(0)


def test_values_override_and_seed_propagates():
    cfg = parse_config("[experiment]\nseed = 9\n[protocol]\nrounds = 4\ngamma = 0.5\n")
    assert cfg.protocol.rounds == 4 and cfg.protocol.gamma == 0.5
    assert cfg.seed == cfg.protocol.seed == cfg.convergence.seed == 9


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("[protocol]\nrounds = 3\nbogus = 1\n", source="x.ini")
    assert exc.value.line == 3 and str(exc.value) == "x.ini:3: unknown key 'bogus' in [protocol]"


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r":2: unknown section \[nope\]"):
        parse_config("\n[nope]\nx = 1\n")


def test_bad_value_and_malformed_lines():
    with pytest.raises(ConfigError, match=":2: bad value for rounds"):
        parse_config("[protocol]\nrounds = many\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("[protocol]\nthis line has no separator\n")
    with pytest.raises(ConfigError, match="outside"):
        parse_config("rounds = 3\n")


def test_seed_key_only_in_experiment_section():
    with pytest.raises(ConfigError, match="unknown key 'seed'"):
        parse_config("[protocol]\nseed = 3\n")


def test_tier_sections_replace_default_fleet():
    cfg = parse_config("[tier.small]\nfraction = 1.0\n")
    assert list(cfg.tiers) == ["small"] and cfg.tiers["small"].compute_rate == DEFAULT_TIERS["small"].compute_rate
    with pytest.raises(ConfigError, match="missing"):
        parse_config("[tier.huge]\nfraction = 1.0\n")
    with pytest.raises(ConfigError, match="sum to 1"):
        parse_config("[tier.small]\nfraction = 0.4\n")


def test_presets_and_file(tiny):
    cfg = load_config(tiny, "fedx_vs_noft")
    assert cfg.modes == (Mode.FEDX, Mode.FEDX_NO_FINETUNE) and cfg.protocol.rounds == 2
    with pytest.raises(ConfigError):
        load_config(None, "nope")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tiny.with_name("missing.ini"))


# --- command line ----------------------------------------------------------------


def test_cli_rejects_unknown_key(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[protocol]\nrounds = 2\nbogus = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert f"{bad}:3: unknown key 'bogus'" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_cli_rejects_malformed_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[protocol\nrounds = 2\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_dry_run_writes_nothing(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", str(tiny), "--out", str(out), "--seed", "4", "--dry-run"]) == 0
    text = capsys.readouterr().out
    assert "seed: 4" in text and "modes: fedx" in text
    assert not out.exists()


def test_out_directory_from_environment(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env-out"))
    assert main(["codec-bench", "--n", "100", "--q", "4"]) == 0
    assert (tmp_path / "env-out" / "codec_bench.csv").exists()


def test_run_two_modes_writes_comparison(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(tiny), "--preset", "fedx_vs_noft", "--out", str(out)]) == 0
    for mode in ("fedx", "fedx_no_finetune"):
        rounds = _rows(out / mode / "rounds.csv")
        assert [r["round"] for r in rounds] == ["1", "2"]
        assert (out / mode / "assignments.csv").exists()
        with np.load(out / mode / "model.npz") as z:
            assert z["params"].ndim == 1
    comparison = _rows(out / "comparison.csv")
    assert list(comparison[0]) == ["round", "mode", "mean_device_acc", "global_acc"]
    assert len(comparison) == 4


def test_select_prints_assignments(tiny, tmp_path, capsys):
    assert main(["select", "--config", str(tiny), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "assignments.csv")
    assert rows and all(1 <= int(r["q"]) <= 16 for r in rows)
    assert "device" in capsys.readouterr().out


def test_mix_sweep_writes_one_row_per_fraction(tiny, tmp_path):
    assert main(["mix-sweep", "--config", str(tiny), "--preset", "mix_sweep", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "mix_sweep.csv")
    assert [float(r["medium_fraction"]) for r in rows] == [0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert [int(r["num_medium"]) for r in rows] == [0, 1, 2, 4, 5, 6]
    assert main(["mix-sweep", "--config", str(tiny), "--fractions", "0,1", "--out", str(tmp_path)]) == 0
    assert len(_rows(tmp_path / "mix_sweep.csv")) == 2


def test_convergence_command(tmp_path, capsys):
    assert main(["convergence", "--trials", "3", "--max-log2-steps", "8", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "convergence.csv")
    assert [int(r["steps"]) for r in rows] == [16, 32, 64, 128, 256]
    assert "slope" in capsys.readouterr().out


def test_codec_bench(tmp_path):
    assert main(["codec-bench", "--n", "100000", "--q", "1,8", "--out", str(tmp_path)]) == 0
    rows = {int(r["q"]): r for r in _rows(tmp_path / "codec_bench.csv")}
    assert float(rows[8]["bits_per_coord"]) < 16
    assert float(rows[1]["bits_per_coord"]) < float(rows[8]["bits_per_coord"])
    assert main(["codec-bench", "--n", "0", "--q", "8", "--out", str(tmp_path)]) == 0
    assert _rows(tmp_path / "codec_bench.csv")[0]["bits"] == "72"


def test_gen_data(tiny, tmp_path):
    assert main(["gen-data", "--config", str(tiny), "--out", str(tmp_path)]) == 0
    files = sorted(p.name for p in tmp_path.glob("*.bin"))
    assert len(files) == 2 + 2 * 6
    data, classes = read_dataset(tmp_path / "server_train.bin")
    assert classes == 10 and set(data.y.tolist()) == {6, 7, 8, 9}


def test_bad_workers_flag(tmp_path):
    assert main(["codec-bench", "--workers", "0", "--out", str(tmp_path)]) == 2
