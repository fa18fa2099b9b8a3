import csv
import json

import pytest

from twoscale import cli

SMALL = """\
[schedule]
pairs = 24:6, 48:8

[sim]
t_end = 0.01
checkpoints = 3
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return path


def _run(args, tmp_path, name="out"):
    out = tmp_path / name
    code = cli.main(list(args) + ["--out", str(out)])
    return code, out


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_verify_small_schedule(small_config, tmp_path):
    code, out = _run(["verify", "--config", str(small_config)], tmp_path)
    assert code == cli.EXIT_OK
    rows = _read_csv(out / "results.csv")
    assert [(r["N"], r["M"]) for r in rows] == [("24", "6"), ("48", "8")]
    for r in rows:
        assert r["ok"] == "True"
        assert float(r["NPPt_residual"]) == 0.0
        assert float(r["lambda"]) > 0 and float(r["tau"]) > 0 and float(r["gamma"]) > 0
    verdicts = json.loads((out / "verdicts.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    assert verdicts["identities_ok"] is True
    assert verdicts["config_hash"] == manifest["config_hash"] == rows[0]["config_hash"]
    assert set(manifest["tables"]) == {"psi_k_K4", "psi_k_K6"}
    assert manifest["config"]["schedule"]["pairs"] == "24:6, 48:8"


@pytest.mark.parametrize(
    "text",
    [
        "[schedule]\npairs = 24:5\n",
        "[schedule]\npairs = 48:8, 24:6\n",
        "[sim]\ndt = fast\n",
        "[sim]\nunknown_key = 1\n",
        "[model]\na = 0.5\nb = 2.0\n",
        "not an ini file\n",
    ],
)
def test_malformed_config_exits_2(text, tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    code, out = _run(["verify", "--config", str(path)], tmp_path)
    assert code == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_override(tmp_path):
    assert _run(["verify", "--config", str(tmp_path / "nope.ini")], tmp_path)[0] == cli.EXIT_CONFIG
    assert _run(["verify", "--set", "sim.nothing=1"], tmp_path)[0] == cli.EXIT_CONFIG
    assert _run(["verify", "--seed", "-1"], tmp_path)[0] == cli.EXIT_CONFIG


def test_set_override_reaches_manifest(small_config, tmp_path):
    code, out = _run(["pde", "--config", str(small_config), "--set", "pde.m_pde=32", "--seed", "7"], tmp_path)
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["pde"]["m_pde"] == "32"
    assert manifest["config"]["run"]["seed"] == "7"


@pytest.mark.parametrize("command", ["pde", "macro"])
def test_outputs_bit_identical(command, small_config, tmp_path):
    args = [command, "--config", str(small_config), "--set", "pde.m_pde=64", "--deterministic", "true"]
    c1, o1 = _run(args, tmp_path, "a")
    c2, o2 = _run(args, tmp_path, "b")
    assert c1 == c2 == cli.EXIT_OK
    for name in ("results.csv", "manifest.json", "verdicts.json"):
        assert (o1 / name).read_bytes() == (o2 / name).read_bytes()
    assert "wall_time" not in (o1 / "results.csv").read_text().splitlines()[0]


def test_pde_mass_conserved(small_config, tmp_path):
    code, out = _run(["pde", "--config", str(small_config), "--set", "pde.m_pde=64"], tmp_path)
    assert code == cli.EXIT_OK
    rows = _read_csv(out / "results.csv")
    assert all(float(r["l2_error_vs_exact"]) < 1e-3 for r in rows)
    assert json.loads((out / "verdicts.json").read_text())["mass_drift"] <= 1e-13


def test_tiny_sweep(tmp_path):
    path = tmp_path / "sweep.ini"
    path.write_text(
        "[schedule]\npairs = 24:6, 48:6\n[sim]\nr = 20\nt_end = 0.002\ndt = 1e-4\ncheckpoints = 3\n[pde]\nm_pde = 96\n"
    )
    code, out = _run(["sweep", "--config", str(path), "--deterministic", "false"], tmp_path)
    assert code == cli.EXIT_OK
    rows = _read_csv(out / "results.csv")
    assert [int(r["K"]) for r in rows] == [4, 8]
    assert all(r["bound_ok"] == "True" for r in rows)
    assert all(float(r["wall_time"]) > 0 for r in rows)
    verdicts = json.loads((out / "verdicts.json").read_text())
    assert "gap_decreasing" in verdicts and verdicts["bounds_ok"] is True
    assert "git_revision" in json.loads((out / "manifest.json").read_text())


def test_sweep_tables_identical_for_identical_seeds(tmp_path):
    path = tmp_path / "sweep.ini"
    path.write_text("[schedule]\npairs = 24:6\n[sim]\nr = 8\nt_end = 0.001\ndt = 1e-4\ncheckpoints = 2\n[pde]\nm_pde = 48\n")
    _, o1 = _run(["sweep", "--config", str(path)], tmp_path, "a")
    _, o2 = _run(["sweep", "--config", str(path)], tmp_path, "b")
    assert (o1 / "results.csv").read_bytes() == (o2 / "results.csv").read_bytes()
    assert (o1 / "verdicts.json").read_bytes() == (o2 / "verdicts.json").read_bytes()


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for cmd in ("verify", "simulate", "macro", "pde", "sweep", "oracle"):
        assert cmd in text
