import json
import subprocess
import sys

import pandas as pd
import pytest

from pensionkit.cli import COMMANDS, DESIGNS, OUT_DIR_ENV, build_parser, main
from pensionkit.config import KEYS, parse_list, load_config

from conftest import CONFIGS, ROOT


def scaled_config(tmp_path, **over):
    """Copy of the example scenario with smaller sample sizes."""
    over = {"n_workers": 1500, "estimation.n_workers": 3000, "bootstrap.replicates": 8, **over}
    lines = []
    for line in (CONFIGS / "example.cfg").read_text().splitlines():
        key = line.split("=", 1)[0].strip()
        if "=" in line and key in over:
            line = f"{key} = {over.pop(key)}"
        lines.append(line)
    lines += [f"{k} = {v}" for k, v in over.items()]
    path = tmp_path / "scenario.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    return scaled_config(tmp_path_factory.mktemp("cfg"))


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.mark.parametrize("command", [c for c in COMMANDS if c != "estimate"])
def test_commands_write_outputs_with_manifest(command, cfg_path, tmp_path):
    extra = ["--param", "gamma"] if command == "sweep" else []
    assert run_cli(command, "--config", cfg_path, "--seed", 5, "--out", tmp_path, *extra) == 0
    files = [p for p in tmp_path.iterdir() if p.name != "error.json"]
    assert len(files) == 1
    text = files[0].read_text()
    if files[0].suffix == ".csv":
        header = text.splitlines()[0]
        assert header.startswith("# ") and f"command={command}" in header and "seed=5" in header
    else:
        manifest = json.loads(text)["manifest"]
        assert manifest["command"] == command and manifest["seed"] == 5
        assert manifest["config_sha256"] == load_config(cfg_path).digest


@pytest.mark.filterwarnings("ignore::pensionkit.econometrics.WeakInstrumentWarning")
@pytest.mark.parametrize("design", DESIGNS)
def test_estimate_designs(design, cfg_path, tmp_path):
    assert run_cli("estimate", "--design", design, "--config", cfg_path, "--seed", 2,
                   "--out", tmp_path) == 0
    table = pd.read_csv(tmp_path / f"estimate_{design}.csv", comment="#")
    assert list(table.columns) == ["table", "name", "estimate", "se", "t", "ci_lo", "ci_hi"]
    assert table["estimate"].notna().all()
    assert run_cli("estimate", "--design", design, "--config", cfg_path, "--seed", 2,
                   "--out", tmp_path, "--format", "json") == 0
    assert "manifest" in json.loads((tmp_path / f"estimate_{design}.json").read_text())


def test_estimate_tax_on_shipped_panel(tmp_path):
    assert run_cli("estimate", "--design", "tax", "--panel", ROOT / "data" / "tax_panel.csv",
                   "--config", CONFIGS / "small.cfg", "--out", tmp_path) == 0
    table = pd.read_csv(tmp_path / "estimate_tax.csv", comment="#")
    eti = table[(table["table"] == "did") & (table["name"] == "log_net")]
    assert len(eti) == 1 and eti["se"].iloc[0] > 0


@pytest.mark.parametrize("command", ["gen", "panel", "gradient", "bootstrap"])
def test_reruns_are_byte_identical(command, cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(command, "--config", cfg_path, "--seed", 9, "--out", a) == 0
    assert run_cli(command, "--config", cfg_path, "--seed", 9, "--out", b) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_bootstrap_threads_do_not_change_output(cfg_path, tmp_path):
    assert run_cli("bootstrap", "--config", cfg_path, "--seed", 4, "--out", tmp_path / "one") == 0
    assert run_cli("bootstrap", "--config", cfg_path, "--seed", 4, "--out", tmp_path / "two",
                   "--threads", 3) == 0
    one = (tmp_path / "one" / "bootstrap.json").read_bytes()
    assert one == (tmp_path / "two" / "bootstrap.json").read_bytes()


def test_seed_falls_back_to_config(tmp_path):
    assert run_cli("gen", "--config", CONFIGS / "small.cfg", "--out", tmp_path) == 0
    assert "seed=3" in (tmp_path / "population.csv").read_text().splitlines()[0]


def test_missing_seed_is_a_config_error(tmp_path, capsys):
    text = (CONFIGS / "small.cfg").read_text().replace("seed = 3\n", "")
    path = tmp_path / "noseed.cfg"
    path.write_text(text)
    assert run_cli("gen", "--config", path, "--out", tmp_path / "out") == 2
    record = json.loads((tmp_path / "out" / "error.json").read_text())
    assert record["error"] == "ConfigError" and record["command"] == "gen"
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_bad_config_path_is_io_error(tmp_path):
    assert run_cli("gen", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == 3
    assert "error" in json.loads((tmp_path / "error.json").read_text())


def test_module_error_exit_code(tmp_path):
    # the link design needs the chile rule
    assert run_cli("estimate", "--design", "link", "--config", CONFIGS / "small.cfg",
                   "--out", tmp_path) == 1
    assert json.loads((tmp_path / "error.json").read_text())["error"] == "GenerationError"


def test_usage_errors(tmp_path):
    assert run_cli("estimate", "--design", "mpc", "--config", CONFIGS / "small.cfg",
                   "--out", tmp_path, "--panel", ROOT / "data" / "tax_panel.csv") == 2
    assert json.loads((tmp_path / "error.json").read_text())["error"] == "UsageError"
    with pytest.raises(SystemExit) as exc:
        run_cli("estimate", "--design", "nope", "--config", CONFIGS / "small.cfg")
    assert exc.value.code == 2


def test_validate_config(tmp_path, capsys):
    assert run_cli("validate-config", CONFIGS / "example.cfg") == 0
    assert json.loads(capsys.readouterr().out) == []
    bad = tmp_path / "bad.cfg"
    bad.write_text((CONFIGS / "small.cfg").read_text().replace("policy.phi = 0.3", "policy.phi = 1.3"))
    assert run_cli("validate-config", bad) == 2
    diags = json.loads(capsys.readouterr().out)
    assert any(d["key"] == "policy.phi" and d["severity"] == "error" for d in diags)
    assert run_cli("validate-config", tmp_path / "missing.cfg") == 3


def test_help_lists_every_config_key():
    text = build_parser().format_help()
    for key in KEYS:
        assert key in text


def test_sweep_rows_match_grid(tmp_path):
    assert run_cli("sweep", "--param", "theta", "--config", CONFIGS / "small.cfg",
                   "--out", tmp_path) == 0
    frame = pd.read_csv(tmp_path / "sweep_theta.csv", comment="#")
    grid = parse_list(load_config(CONFIGS / "small.cfg")["sweep.theta"])
    assert len(frame) == len(grid)
    assert frame["value"].tolist() == pytest.approx(grid)


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env"))
    assert run_cli("lifeexp", "--config", CONFIGS / "small.cfg") == 0
    payload = json.loads((tmp_path / "env" / "life_expectancy.json").read_text())
    assert 0.15 <= payload["retirement_gap"] <= 0.21


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pensionkit.cli", "lifeexp", "--config",
                           str(CONFIGS / "small.cfg"), "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("life_expectancy.json")
