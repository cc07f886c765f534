import json
import re

import numpy as np
import pytest

from rmpc import cli
from rmpc import config as cfgmod
from rmpc.bounds import load_bounds, save_bounds
from rmpc.errors import ConfigError
from rmpc.model import EXAMPLE_K, example_system
from rmpc.roa import ROAResult
from rmpc.sim import SuiteSummary
from rmpc.terminal import TerminalIngredients


def raw_example():
    return json.loads(cfgmod.example_path().read_text("utf-8"))


def test_bundled_config_is_exact():
    cfg = cfgmod.load_example()
    ref = example_system()
    s = cfg.system
    assert np.array_equal(s.A_bar, [[1.0, 0.15], [0.1, 1.0]]) and np.array_equal(s.B_bar, [[0.1], [1.1]])
    for a, b in zip(s.deltaA_vertices, ref.deltaA_vertices):
        assert np.array_equal(a, b)
    for a, b in zip(s.deltaB_vertices, ref.deltaB_vertices):
        assert np.array_equal(a, b)
    assert np.array_equal(s.X.h, [8] * 4) and np.array_equal(s.U.h, [4, 4]) and np.array_equal(s.W.h, [0.1] * 4)
    assert np.array_equal(s.P, 10 * np.eye(2)) and np.array_equal(s.R, [[2.0]])
    assert s.N == 3 and np.array_equal(cfg.K, EXAMPLE_K)
    assert cfg.bounds.p == "inf" and cfg.n_dirs == 36


def test_schema_shipped_in_docs():
    from pathlib import Path
    docs = Path(__file__).resolve().parents[1] / "docs" / "config.schema.json"
    assert json.loads(docs.read_text()) == cfgmod.schema()


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(extra=1),
    lambda r: r["system"].update(colour="red"),
    lambda r: r["sim"].update(speed=2),
    lambda r: r["system"]["A_bar"].__setitem__(0, [1.0]),
    lambda r: r.update(K=[[1.0, 2.0, 3.0]]),
    lambda r: r.update(N=0),
    lambda r: r["bounds"].update(N_cut=7),
    lambda r: r["bounds"].update(p="2"),
    lambda r: r["cost"].update(P=[[-1, 0], [0, 1]]),
    lambda r: r["sim"].update(x0=[[1.0, 2.0, 3.0]]),
])
def test_invalid_configs(mutate):
    raw = raw_example()
    mutate(raw)
    with pytest.raises(ConfigError):
        cfgmod.from_dict(raw)


def test_not_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        cfgmod.load(p)


def test_digest_ignores_sim_block():
    a = cfgmod.from_dict(raw_example())
    raw = raw_example()
    raw["sim"]["T"] = 5
    assert cfgmod.from_dict(raw).digest() == a.digest()
    raw["K"] = [[-0.3, -0.3]]
    assert cfgmod.from_dict(raw).digest() != a.digest()


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


def run(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_terminal_set_command(tmp_path, capsys):
    code, out, _ = run(["terminal-set", "--out", str(tmp_path)], capsys)
    assert code == 0 and re.search(r"converged in \d+ iterations", out)
    data = json.loads((tmp_path / "terminal.json").read_text())
    back = TerminalIngredients.from_dict(data).to_dict()
    assert back == data


def test_bounds_command_roundtrip(tmp_path, cache, capsys):
    code, out, _ = run(["bounds", "--out", str(tmp_path), "--cache", str(cache)], capsys)
    assert code == 0 and "Nt = [2, 3]" in out
    p = tmp_path / "bounds.json"
    save_bounds(load_bounds(p), tmp_path / "again.json")
    assert p.read_bytes() == (tmp_path / "again.json").read_bytes()
    assert any(f.name.startswith("bounds-") for f in cache.iterdir())
    assert any(f.name.startswith("terminal-") for f in cache.iterdir())


def test_solve_command(tmp_path, cache, capsys):
    code, _, _ = run(["solve", "--x", "0,0", "--out", str(tmp_path), "--cache", str(cache)], capsys)
    data = json.loads((tmp_path / "solve.json").read_text())
    assert code == 0 and data["status"] == "optimal" and abs(data["objective"]) <= 1e-8
    code, _, _ = run(["solve", "--x", "8,8", "--out", str(tmp_path), "--cache", str(cache)], capsys)
    assert code == cli.EXIT_INFEASIBLE
    code, _, err = run(["solve", "--x", "1,2,3", "--out", str(tmp_path), "--cache", str(cache)], capsys)
    assert code == cli.EXIT_VALIDATION and err.startswith("error:")


def test_validation_exit(tmp_path, capsys):
    raw = raw_example()
    raw["bogus"] = True
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    code, _, err = run(["terminal-set", "--config", str(p), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_VALIDATION and "bogus" in err
    code, _, _ = run(["terminal-set", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_VALIDATION


def _small_config(tmp_path, **sim):
    raw = raw_example()
    raw["sim"].update({"T": 8, "runs": 4, "n_initial": 2, **sim})
    p = tmp_path / "small.json"
    p.write_text(json.dumps(raw))
    return str(p)


def test_simulate_command(tmp_path, cache, capsys):
    code, out, _ = run(["simulate", "--config", _small_config(tmp_path), "--out", str(tmp_path),
                        "--cache", str(cache)], capsys)
    data = json.loads((tmp_path / "simulate.json").read_text())
    assert code == 0 and data["ok"] and data["runs"] == 4 and "0 violations" in out


def test_simulate_infeasible_start(tmp_path, cache, capsys):
    cfg = _small_config(tmp_path, x0=[[8.0, 8.0]])
    code, _, err = run(["simulate", "--config", cfg, "--out", str(tmp_path), "--cache", str(cache)], capsys)
    assert code == cli.EXIT_INFEASIBLE and err.startswith("infeasible:")


def test_simulate_violation_exit(tmp_path, cache, capsys, monkeypatch):
    import rmpc.sim
    monkeypatch.setattr(rmpc.sim, "run_suite", lambda *a, **k: SuiteSummary(runs=1, violations=1, min_margin=-1.0))
    code, _, _ = run(["simulate", "--config", _small_config(tmp_path), "--out", str(tmp_path),
                      "--cache", str(cache)], capsys)
    assert code == cli.EXIT_INVARIANT


def test_roa_command(tmp_path, cache, capsys):
    raw = raw_example()
    raw["roa"]["n_dirs"] = 8
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    code, out, _ = run(["roa", "--config", str(p), "--out", str(tmp_path), "--cache", str(cache)], capsys)
    assert code == 0 and "8 of 8 directions feasible" in out
    for name in ("roa.csv", "roa.json", "roa.svg"):
        assert (tmp_path / name).exists()
    data = json.loads((tmp_path / "roa.json").read_text())
    assert ROAResult.from_dict(data).to_dict() == data


def test_bench_command(tmp_path, cache, capsys):
    code, out, _ = run(["bench", "--samples", "3", "--out", str(tmp_path), "--cache", str(cache)], capsys)
    data = json.loads((tmp_path / "bench.json").read_text())
    assert code == 0 and set(data["online"]) == {"1", "2", "3"}
    assert all(v["median_s"] is not None for v in data["online"].values())
