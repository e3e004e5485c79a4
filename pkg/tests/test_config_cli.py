from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest
import yaml

from fedgdiff.cli import main
from fedgdiff.config import ConfigError, config_from_dict, config_to_dict, dump_config, load_config

from .conftest import REPO


def _toy_config(tmp_path, **overrides):
    raw = yaml.safe_load((REPO / "configs" / "toy.yaml").read_text())
    raw["data"]["root"] = str(tmp_path / "data")
    raw.update(overrides)
    path = tmp_path / "toy.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


# ---------------------------------------------------------------- config


def test_defaults_validate():
    cfg = config_from_dict({})
    assert cfg.pipeline == "cefgc-advanced" and cfg.variant == "advanced"
    assert config_from_dict({"pipeline": "cefgc"}).variant == "basic"


@pytest.mark.parametrize("raw,where", [
    ({"gnn": {"hiden": 3}}, "gnn.hiden: unknown key"),
    ({"typo": 1}, "typo: unknown key"),
    ({"pipeline": "magic"}, "pipeline"),
    ({"data": {"clients": 1}}, "data.clients"),
    ({"data": {"local_split": [0.5, 0.5, 0.5]}}, "data.local_split"),
    ({"gnn": {"lr": "fast"}}, "gnn.lr"),
    ({"seed": -1}, "seed"),
    ({"sampler": {"threshold": 0.3}}, "sampler.threshold"),
    ({"metrics": {"heterogeneity": "yes"}}, "metrics.heterogeneity"),
])
def test_invalid_configs_name_the_field(raw, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        config_from_dict(raw)


def test_config_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 9, "data": {"assignment": {0: "A", 1: "B"}, "partition": "across-dataset",
                                                "datasets": ["A", "B"], "clients": 2},
                            "diffusion": {"sigmas": [1.0, 0.5]}})
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert config_to_dict(back) == config_to_dict(cfg)


@pytest.mark.parametrize("name", ["mutag_cefgc", "mutag_fedavg", "mutag_heterogeneity", "toy"])
def test_shipped_configs_load(name):
    load_config(REPO / "configs" / f"{name}.yaml")


def test_unknown_key_exits_with_code_two(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("pipeline: cefgc\ngnn:\n  hiden: 3\n")
    proc = subprocess.run([sys.executable, "-m", "fedgdiff.cli", "run", "--config", str(bad),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "gnn.hiden" in proc.stderr


def test_missing_dataset_exits_with_code_one(tmp_path, capsys):
    assert main(["run", "--config", str(_toy_config(tmp_path)), "--out", str(tmp_path / "o")]) == 1
    assert "[data]" in capsys.readouterr().err


# ---------------------------------------------------------------- toy runs


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy-data", "--out", str(base / "data")]) == 0
    cfg = _toy_config(base)
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(base / name)]) == 0
    baseline = _toy_config(base, pipeline="fedavg-baseline", baseline={"max_rounds": 5, "patience": 2})
    assert main(["run", "--config", str(baseline), "--out", str(base / "fedavg")]) == 0
    return base


def test_gen_toy_data_layout(toy_runs):
    files = sorted(p.name for p in (toy_runs / "data" / "TOY").iterdir())
    assert files == ["TOY_A.txt", "TOY_graph_indicator.txt", "TOY_graph_labels.txt"]
    labels = (toy_runs / "data" / "TOY" / "TOY_graph_labels.txt").read_text().split()
    assert len(labels) == 200


def test_toy_run_artifacts(toy_runs):
    out = toy_runs / "a"
    for name in ("config.yaml", "ledger.csv", "metrics.json", "loss_traces.csv"):
        assert (out / name).exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
        "client0_diffusion.fgdm", "client1_diffusion.fgdm", "global_gnn.fgdm"]
    metrics = json.loads((out / "metrics.json").read_text())
    comm = metrics["communication"]
    assert comm["rounds"] == [1, 2, 3]
    assert comm["headline_bytes"] == comm["formula_bytes"]
    assert 0.0 <= metrics["global"]["auc"] <= 1.0
    assert set(metrics["clients"][0]["generation_mmd"]) == {"degree", "clustering", "orbit", "average"}
    assert 0.0 <= metrics["heterogeneity"]["structure_mean"] <= 1.0


def test_toy_run_is_reproducible(toy_runs):
    for name in ("metrics.json", "ledger.csv", "loss_traces.csv"):
        assert (toy_runs / "a" / name).read_bytes() == (toy_runs / "b" / name).read_bytes()
    for ckpt in (toy_runs / "a" / "checkpoints").iterdir():
        assert ckpt.read_bytes() == (toy_runs / "b" / "checkpoints" / ckpt.name).read_bytes()


def test_report_table(toy_runs, tmp_path, capsys):
    out_csv = tmp_path / "report.csv"
    runs = [str(toy_runs / "a"), str(toy_runs / "fedavg")]
    assert main(["report", *runs, "--out", str(out_csv)]) == 0
    with out_csv.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["run"] for r in rows] == ["a", "fedavg"]
    assert [r["method"] for r in rows] == ["cefgc-advanced", "fedavg-baseline"]
    assert rows[0]["rounds"] == "3" and int(rows[1]["rounds"]) <= 5
    for r in rows:
        bits = int(r["total_bytes"]) * 8
        assert float(r["wan_seconds"]) == pytest.approx(bits / 1e6, abs=1e-6)
        assert float(r["lan_seconds"]) == pytest.approx(bits / 45e6, abs=1e-6)
    assert "wan_seconds" in capsys.readouterr().out


def test_report_on_missing_run(tmp_path):
    assert main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "r.csv")]) == 1
