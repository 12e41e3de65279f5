"""Configuration parsing, validation and the command-line interface."""

import json
import os
import subprocess
import sys

import pytest
from conftest import CONFIGS
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, list_catalog, main
from flowlab.config import ConfigError, RunConfig
from flowlab.experiments import EXPERIMENTS
from flowlab.model import CATALOG

SMALL_DECOMP = """
experiment = "decomposition_convergence"
[pair.base]
name = "ou"
[pair.perturbed]
name = "ou"
sigma = 0.5
[mesh]
H_list = [0.25, 0.125]
fine_factor = 4
[mc]
M = 16
seed = 7
[params]
t = 0.5
[output]
dir = "{out}"
"""

SMALL_PLATEAU_GBM = """
experiment = "uniform_difference"
[pair.base]
name = "gbm"
beta = 0.5
alpha = 0.2
[pair.perturbed]
name = "gbm"
beta = 0.25
alpha = 0.2
[mesh]
h = 0.02
[mc]
M = 256
seed = 1
[params]
t_list = [1.0, 4.0]
[output]
dir = "{out}"
"""


def write_cfg(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text.format(out=(tmp_path / "out").as_posix()))
    return str(path)


# ---------------------------------------------------------------------------
# configuration

scalars = st.one_of(st.integers(-1000, 1000), st.floats(-1e6, 1e6, allow_nan=False),
                    st.text("abcxyz_", min_size=1, max_size=6), st.booleans())
tables = st.dictionaries(st.text("abcdefgh", min_size=1, max_size=5),
                         st.one_of(scalars, st.lists(st.floats(0.001, 10.0), max_size=4)), max_size=4)


@settings(max_examples=60, deadline=None)
@given(mesh=tables, mc=tables, params=tables, tol=tables,
       exp=st.one_of(st.none(), st.sampled_from(sorted(EXPERIMENTS))))
def test_round_trip_is_identity(mesh, mc, params, tol, exp):
    cfg = RunConfig(experiment=exp, mesh=mesh, mc=mc, params=params, tolerances=tol,
                    pair={"base": {"name": "ou"}, "perturbed": {"name": "ou", "sigma": 0.5}})
    again = RunConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()


@pytest.mark.parametrize("fname", sorted(f for f in os.listdir(CONFIGS) if f.endswith(".toml")))
def test_shipped_configs_round_trip(fname):
    cfg = RunConfig.load(os.path.join(CONFIGS, fname))
    assert RunConfig.loads(cfg.dumps()) == cfg


def test_missing_seed_is_reported():
    cfg = RunConfig.loads('experiment = "bel"\n[model]\nname = "ou"\n[mc]\nM = 8\n')
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert ("mc.seed" in [p for p, _ in info.value.problems])


def test_every_problem_is_listed():
    text = ('experiment = "zzz"\nreduction = "random"\n[model]\nname = "ou"\nbogus = 1\n'
            '[mesh]\nh = 0.01\nH = 0.015\n[mc]\nM = 1\nseed = -1\n')
    with pytest.raises(ConfigError) as info:
        RunConfig.loads(text).validate()
    paths = {p for p, _ in info.value.problems}
    assert paths == {"experiment", "reduction", "model.bogus", "mesh.H", "mc.M", "mc.seed"}


def test_unknown_top_level_key():
    with pytest.raises(ConfigError):
        RunConfig.loads("[meshes]\nh = 0.1\n")


def test_toml_syntax_error():
    with pytest.raises(ConfigError):
        RunConfig.loads("[mesh\nh = ")


def test_multiple_of_h_accepted():
    cfg = RunConfig.loads('[mesh]\nh = 0.001\nH = 0.003\n[mc]\nseed = 0\n')
    cfg.validate(require_experiment=False)


def test_overrides_do_not_mutate():
    cfg = RunConfig.loads('[mc]\nseed = 1\n')
    new = cfg.with_overrides(seed=9, out="o", threads=2)
    assert cfg.mc == {"seed": 1}
    assert new.mc == {"seed": 9, "threads": 2}
    assert new.output_dir == "o"


# ---------------------------------------------------------------------------
# command line


def test_list_is_stable_and_complete(capsys):
    assert main(["list"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.strip() == list_catalog()
    names = [ln.split()[0] for ln in out.splitlines()[2:] if ln and not ln.startswith("EXPERIMENTS")]
    assert names[:len(CATALOG)] == list(CATALOG)
    assert "frozen_drift" in names
    assert names[len(CATALOG):] == list(EXPERIMENTS)


def test_h_not_multiple_exits_one(capsys):
    code = main(["run", os.path.join(CONFIGS, "h_not_multiple.toml")])
    assert code == EXIT_ERROR
    assert "mesh.H" in capsys.readouterr().err


def test_missing_config_exits_one(capsys):
    assert main(["run"]) == EXIT_ERROR
    assert "--config" in capsys.readouterr().err


def test_unknown_experiment_exits_one(tmp_path, capsys):
    path = write_cfg(tmp_path, 'experiment = "nope"\n[mc]\nseed = 1\n')
    assert main(["run", path]) == EXIT_ERROR
    assert "experiment" in capsys.readouterr().err


def test_small_decomposition_run(tmp_path):
    path = write_cfg(tmp_path, SMALL_DECOMP)
    code = main(["run", "--config", path])
    assert code in (EXIT_OK, EXIT_FAIL)
    data = json.loads((tmp_path / "out" / "decomposition_convergence.json").read_text())
    assert data["name"] == "decomposition_convergence"
    assert (tmp_path / "out" / "decomposition_convergence.csv").exists()
    assert code == (EXIT_OK if data["passed"] else EXIT_FAIL)


def test_negative_control_exits_two(tmp_path):
    path = write_cfg(tmp_path, SMALL_PLATEAU_GBM)
    assert main(["run", path]) == EXIT_FAIL


def test_seed_override_changes_results(tmp_path):
    path = write_cfg(tmp_path, SMALL_DECOMP)
    main(["run", path, "--out", str(tmp_path / "a")])
    main(["run", path, "--out", str(tmp_path / "b"), "--seed", "8"])
    main(["run", path, "--out", str(tmp_path / "c")])
    load = lambda d: json.loads((tmp_path / d / "decomposition_convergence.json").read_text())  # noqa: E731
    assert load("a")["tables"] == load("c")["tables"]
    assert load("a")["tables"] != load("b")["tables"]


def test_threads_do_not_change_output(tmp_path, monkeypatch):
    path = write_cfg(tmp_path, SMALL_DECOMP)
    main(["run", path, "--out", str(tmp_path / "one"), "--threads", "1"])
    monkeypatch.setenv("FLOWLAB_THREADS", "2")
    main(["run", path, "--out", str(tmp_path / "two")])
    a = json.loads((tmp_path / "one" / "decomposition_convergence.json").read_text())
    b = json.loads((tmp_path / "two" / "decomposition_convergence.json").read_text())
    assert a["tables"] == b["tables"] and a["slopes"] == b["slopes"]


def test_check_subcommand(tmp_path, capsys):
    path = write_cfg(tmp_path, SMALL_DECOMP)
    assert main(["check", path]) == EXIT_OK
    data = json.loads((tmp_path / "out" / "check.json").read_text())
    assert set(data) == {"base", "perturbed"}


def test_decompose_subcommand(tmp_path):
    path = write_cfg(tmp_path, SMALL_DECOMP)
    assert main(["decompose", path]) == EXIT_OK
    assert (tmp_path / "out" / "decompose.csv").exists()
    rows = json.loads((tmp_path / "out" / "decompose.json").read_text())["rows"]
    assert [r["H"] for r in rows] == [0.25, 0.125]


def test_moments_and_oracle_agree(tmp_path):
    text = ('[model]\nname = "ou"\n[mesh]\nh = 0.01\n[mc]\nM = 4000\nseed = 3\n'
            '[params]\nt = [0.5, 1.0]\nn = 2\nx = 1.0\n[output]\ndir = "{out}"\n')
    path = write_cfg(tmp_path, text)
    assert main(["moments", path]) == EXIT_OK
    assert main(["oracle", path]) == EXIT_OK
    mom = json.loads((tmp_path / "out" / "moments.json").read_text())["rows"]
    ora = json.loads((tmp_path / "out" / "oracle.json").read_text())["rows"]
    for m, o in zip(mom, ora):
        assert m["t"] == o["t"]
        assert abs(m["value"] - o["moment"]) <= 4 * m["stderr"] + 0.02 * o["moment"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flowlab", "run", os.path.join(CONFIGS, "h_not_multiple.toml")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_ERROR
    assert "config error: mesh.H" in proc.stderr
