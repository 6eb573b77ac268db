import json
import re
import subprocess
import sys

import pytest

from meshprop import cli, __version__
from meshprop.topology import Topology

BLOBS = {"dataset": "blobs", "n_train": 400, "n_test": 100, "n_classes": 4, "dim": 9, "spread": 0.5}


def write_cfg(path, **over):
    d = {"topology": {"kind": "BA", "n": 8, "p": 2}, "data": BLOBS, "train": {"epochs": 1, "lr": 0.1},
         "model": {"hidden": [8]}, "rounds": 3}
    d.update(over)
    path.write_text(json.dumps(d))
    return path


def test_run_minimal(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    lines = (tmp_path / "out" / "rounds.csv").read_text().splitlines()
    assert len(lines) == 1 + 24


def test_run_tau_zero_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", strategy={"kind": "Degree", "tau": 0})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "strategy.tau" in capsys.readouterr().err


def test_run_bad_json_exit_2(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    assert cli.main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_run_runtime_failure_exit_1(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", data={"dataset": "mnist", "path": str(tmp_path / "missing")})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_threads_do_not_change_results(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", strategy={"kind": "Random"})
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--threads", "1"])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "8"])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()


def test_seed_override(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", rounds=1)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "4"])
    summary = (tmp_path / "a" / "summary.csv").read_text()
    assert "__seed4," in summary


def plan(tmp_path, **over):
    p = {"base": {"data": BLOBS, "train": {"epochs": 1, "lr": 0.1}, "model": {"hidden": [4]}, "rounds": 1},
         "strategies": ["Unweighted", "Degree"], "topologies": [{"kind": "BA", "n": 33, "p": 2}],
         "ood_ranks": [1, 4], "seeds": [0, 1, 2]}
    p.update(over)
    (tmp_path / "plan.json").write_text(json.dumps(p))
    return tmp_path / "plan.json"


def test_sweep_counts_and_idempotent(tmp_path):
    pl = plan(tmp_path)
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--plan", str(pl), "--out", str(out)]) == 0
    first = (out / "summary.csv").read_text()
    assert len(first.splitlines()) == 1 + 12
    assert len([d for d in out.iterdir() if d.is_dir()]) == 12
    assert cli.main(["sweep", "--plan", str(pl), "--out", str(out)]) == 0
    assert (out / "summary.csv").read_text() == first


def test_sweep_records_failures(tmp_path):
    pl = plan(tmp_path, strategies=["Unweighted"], ood_ranks=[1, 40], seeds=[0])
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--plan", str(pl), "--out", str(out)]) == 1
    failures = json.loads((out / "failures.json").read_text())
    assert len(failures) == 1 and "rank40" in failures[0]["cell"]
    assert len((out / "summary.csv").read_text().splitlines()) == 2


def test_sweep_rejects_empty_axis(tmp_path):
    assert cli.main(["sweep", "--plan", str(plan(tmp_path, seeds=[])), "--out", str(tmp_path / "o")]) == 2


def path_topology(tmp_path):
    Topology(3, ((0, 1), (1, 2))).save(tmp_path / "t.json")
    return tmp_path / "t.json"


def fills(svg):
    return re.findall(r'<circle [^>]*fill="#([0-9a-f]{6})"', svg)


def test_render_path_degree(tmp_path):
    t = path_topology(tmp_path)
    assert cli.main(["render", "--topology", str(t), "--metric", "degree", "--out", str(tmp_path / "a.svg")]) == 0
    f = fills((tmp_path / "a.svg").read_text())
    brightness = [sum(int(c[i:i + 2], 16) for i in (0, 2, 4)) for c in f]
    assert brightness[1] < brightness[0] and brightness[1] < brightness[2]


def test_render_deterministic(tmp_path):
    t = path_topology(tmp_path)
    for name in ("a", "b"):
        cli.main(["render", "--topology", str(t), "--metric", "betweenness", "--out", str(tmp_path / f"{name}.svg")])
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_render_run_dir(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", rounds=1)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")])
    out = tmp_path / "ood.svg"
    assert cli.main(["render", "--run", str(tmp_path / "run"), "--metric", "acc_ood", "--out", str(out)]) == 0
    svg = out.read_text()
    assert svg.startswith("<svg") and 'stroke="#d62728"' in svg and len(fills(svg)) == 8


def test_render_unknown_metric(tmp_path):
    t = path_topology(tmp_path)
    assert cli.main(["render", "--topology", str(t), "--metric", "pagerank", "--out", str(tmp_path / "x.svg")]) == 2


def test_version_entry_point():
    out = subprocess.run([sys.executable, "-m", "meshprop.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


def test_plan_cells_order(tmp_path):
    p = cli.ExperimentPlan.load(plan(tmp_path))
    cells = p.cells()
    assert len(cells) == 12
    assert [c.strategy["kind"] for c in cells[:6]] == ["Unweighted"] * 6
    assert [(c.partition["ood_rank"], c.master_seed) for c in cells[:3]] == [(1, 0), (1, 1), (1, 2)]
