import json
import subprocess
import sys

import numpy as np
import pytest

import habitree.instances as gi
from habitree import EventTree, SchemaError
from habitree import io as hio
from habitree.cli import RunConfig, emit_figure_data, main


def run_cli(args, tmp_path=None):
    proc = subprocess.run([sys.executable, "-m", "habitree.cli"] + args,
                          capture_output=True)
    return proc.returncode, proc.stdout, proc.stderr


def write_json(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def iid_input(tmp_path):
    return write_json(tmp_path, "iid.json", {
        "support": [{"x": 3.0, "p": 0.5}, {"x": 4.0, "p": 0.5}],
        "gamma": 2.0, "rho": 0.0, "beta": 0.0, "horizon": 1})


@pytest.fixture
def market_agent_input(tmp_path):
    market = gi.deterministic_market(2, 0.05)
    obj = {"market": hio.dump_market(market),
           "agent": {"gamma": 2.0, "rho": 0.01, "beta": 0.2,
                     "endowment": {nid: 1.0 for nid in market.tree.ids}}}
    return write_json(tmp_path, "solve.json", obj)


# -- JSON schemas ----------------------------------------------------------------


def test_tree_json_round_trip():
    rng = np.random.default_rng(90)
    tree = gi.random_tree(rng, min_depth=2)
    back = hio.load_tree(hio.dump_tree(tree))
    assert back.ids == tree.ids
    assert np.allclose(back.trans_prob, tree.trans_prob)


def test_market_json_round_trip_spd():
    rng = np.random.default_rng(91)
    market = gi.random_classC_market(rng, gi.random_tree(rng, min_depth=2))
    dumped = hio.dump_market(market)
    dumped["classC_blocks"] = {
        str(k): [[market.tree.ids[i] for i in b] for b in market.classC[k - 1].blocks]
        for k in range(1, market.tree.horizon + 1)}
    back = hio.load_market(dumped)
    assert np.max(np.abs(back.spd.values - market.spd.values)) < 1e-12


def test_agent_json_beta_matrix_forms():
    tree = EventTree.single_path(2)
    tdump = hio.dump_tree(tree)
    endow = {nid: 1.0 for nid in tree.ids}
    ragged = hio.load_agent({"gamma": 2.0, "rho": 0.0, "endowment": endow,
                             "beta_matrix": [[], [0.3], [0.1, 0.2]]}, tree)
    assert ragged.habits[1, 0] == 0.3 and ragged.habits[2, 1] == 0.2
    static = hio.load_agent({"gamma": 2.0, "rho": 0.0, "beta": 0.3, "endowment": endow}, tree)
    assert static.habits[1, 0] == 0.3 and static.habits[2, 1] == 0.3
    with pytest.raises(SchemaError):
        hio.load_agent({"gamma": 2.0, "rho": 0.0, "endowment": endow}, tree)
    assert tdump["horizon"] == 2


def test_schema_errors_name_fields():
    with pytest.raises(SchemaError) as e:
        hio.load_tree({"horizon": 1})
    assert "nodes" in str(e.value)
    with pytest.raises(SchemaError) as e:
        hio.load_iid({"support": [{"x": 3.0}], "gamma": 2.0, "rho": 0.0, "horizon": 1})
    assert "support[0].p" in str(e.value)


def test_equilibrium_json_round_trip():
    econ = gi.desk_heterogeneous_economy()
    from habitree.equilibrium import heterogeneous_equilibrium
    res = heterogeneous_equilibrium(econ)
    dumped = hio.dump_equilibrium(res)
    back = hio.load_equilibrium(json.loads(json.dumps(dumped)))
    assert np.max(np.abs(back.M.values - res.M.values)) == 0.0
    assert back.lambdas == res.lambdas
    assert np.max(np.abs(back.consumptions[1].values - res.consumptions[1].values)) == 0.0


# -- CLI ---------------------------------------------------------------------------


def test_cli_bond_curve_endpoints(iid_input):
    rc, out, err = run_cli(["bond-curve", "--input", iid_input, "--beta-grid", "0:1:0.5"])
    assert rc == 0, err
    lines = out.decode().strip().splitlines()
    assert lines[0] == "beta,value"
    first = float(lines[1].split(",")[1])
    last = float(lines[-1].split(",")[1])
    assert first == pytest.approx(25 / 288, abs=1e-15)
    assert last == pytest.approx(13 / 59, abs=1e-15)


def test_cli_determinism(iid_input):
    args = ["bond-curve", "--input", iid_input, "--beta-grid", "0:1:0.25"]
    rc1, out1, _ = run_cli(args)
    rc2, out2, _ = run_cli(args)
    assert rc1 == rc2 == 0
    assert out1 == out2


def test_cli_lucas_curve(iid_input):
    rc, out, err = run_cli(["lucas-curve", "--input", iid_input, "--beta-grid", "0:1:0.5"])
    assert rc == 0, err
    lines = out.decode().strip().splitlines()
    vals = [float(l.split(",")[1]) for l in lines[1:]]
    assert vals[0] == pytest.approx(7 / 17, abs=1e-14)
    assert vals == sorted(vals)


def test_cli_spd_solve_bounds(market_agent_input, tmp_path):
    rc, out, err = run_cli(["spd", "--input", market_agent_input])
    assert rc == 0, err
    spd = json.loads(out)["spd"]
    assert spd["n0"] == 1.0

    rc, out, err = run_cli(["solve", "--input", market_agent_input])
    assert rc == 0, err
    solved = json.loads(out)
    assert solved["foc_residual"] < 1e-9

    rc, out, err = run_cli(["bounds", "--input", market_agent_input])
    assert rc == 0, err
    rep = json.loads(out)
    assert rep["min_slack"] >= -1e-9
    quantities = {(row["period"], row["quantity"]) for row in rep["periods"]}
    assert (0, "consumption") in quantities and (2, "wealth") in quantities
    for row in rep["periods"]:
        assert row["lower"] <= row["value"] + 1e-9 <= row["upper"] + 2e-9


def test_cli_asymptotics(market_agent_input):
    rc, out, err = run_cli(["asymptotics", "--input", market_agent_input,
                            "--eps0-grid", "1e1,1e2,1e3,1e4"])
    assert rc == 0, err
    text = out.decode()
    assert text.startswith("eps0,err_c,err_W")
    assert "# summary:" in text


def test_cli_equilibrium_and_exit_codes(tmp_path):
    econ = gi.desk_heterogeneous_economy()
    obj = {"economy": {
        "tree": hio.dump_tree(econ.tree), "beta": econ.beta,
        "agents": [{"gamma": a.gamma, "rho": a.rho,
                    "endowment": {nid: float(a.endowment.values[i])
                                  for i, nid in enumerate(econ.tree.ids)}}
                   for a in econ.agents]}}
    path = write_json(tmp_path, "econ.json", obj)
    rc, out, err = run_cli(["equilibrium", "--input", path])
    assert rc == 0, err
    res = json.loads(out)
    assert res["residuals"]["h_inf"] < 1e-10

    # schema violation -> 2, field named on stderr
    obj_bad = json.loads(json.dumps(obj))
    del obj_bad["economy"]["beta"]
    path2 = write_json(tmp_path, "bad.json", obj_bad)
    rc, out, err = run_cli(["equilibrium", "--input", path2])
    assert rc == 2
    msg = json.loads(err)
    assert msg["error"] == "SchemaError" and "beta" in msg["field"]

    # existence condition violation -> 4
    tdump = hio.dump_tree(EventTree.single_path(1))
    obj_cond = {"economy": {"tree": tdump, "beta": 0.9,
                            "agents": [{"gamma": 2.0, "rho": 0.0,
                                        "endowment": {"n0": 1.0, "n1": 0.5}}]}}
    path3 = write_json(tmp_path, "cond.json", obj_cond)
    rc, out, err = run_cli(["equilibrium", "--input", path3])
    assert rc == 4
    assert json.loads(err)["error"] == "ConditionError"


def test_cli_malformed_json(tmp_path):
    path = tmp_path / "garbage.json"
    path.write_text("{not json")
    rc, out, err = run_cli(["equilibrium", "--input", str(path)])
    assert rc == 2


def test_cli_nonconvergence_exit_code(tmp_path):
    # a tolerance below the evaluation noise floor cannot be met
    econ = gi.desk_heterogeneous_economy()
    obj = {"economy": {
        "tree": hio.dump_tree(econ.tree), "beta": econ.beta,
        "agents": [{"gamma": a.gamma, "rho": a.rho,
                    "endowment": {nid: float(a.endowment.values[i])
                                  for i, nid in enumerate(econ.tree.ids)}}
                   for a in econ.agents]}}
    path = write_json(tmp_path, "tight.json", obj)
    rc, out, err = run_cli(["equilibrium", "--input", path, "--tol", "1e-18"])
    assert rc == 3
    assert json.loads(err)["error"] == "ConvergenceError"


def test_cli_verify_small_manifest(tmp_path):
    manifest = write_json(tmp_path, "manifest.json",
                          {"suites": {"tree-tower": 3, "perturbed-spd": 3}})
    rc, out, err = run_cli(["verify", "--input", manifest, "--seed", "7"])
    assert rc == 0, err
    rep = json.loads(out)
    assert rep["all_passed"] and rep["seed"] == 7
    names = [s["name"] for s in rep["suites"]]
    assert names == sorted(names)


def test_cli_verify_deterministic_given_seed(tmp_path):
    manifest = write_json(tmp_path, "manifest.json", {"suites": {"tree-tower": 2}})
    rc1, out1, _ = run_cli(["verify", "--input", manifest, "--seed", "11"])
    rc2, out2, _ = run_cli(["verify", "--input", manifest, "--seed", "11"])
    assert out1 == out2 and rc1 == rc2 == 0


def test_run_config_validation():
    with pytest.raises(SchemaError):
        RunConfig(command="unknown")
    with pytest.raises(SchemaError):
        RunConfig(command="solve", tol=-1.0)


def test_figure_data_grids():
    econ = gi.example_iid_economy(horizon=1)
    rows1 = emit_figure_data(econ, 1)
    rows2 = emit_figure_data(econ, 2)
    assert len(rows1) == len(rows2) == 101
    betas = [b for b, _ in rows1]
    assert betas == sorted(betas)
    assert all(abs((b2 - b1) - 0.01) < 1e-12 for b1, b2 in zip(betas, betas[1:]))
    assert rows1[0][1] == pytest.approx(25 / 288, abs=1e-15)
    assert rows2[-1][1] == pytest.approx(0.9381854436689929, abs=1e-12)


def test_main_returns_zero_in_process(tmp_path, iid_input, capsys):
    rc = main(["bond-curve", "--input", iid_input, "--beta-grid", "0:1:0.5",
               "--output", str(tmp_path / "out.csv")])
    assert rc == 0
    text = (tmp_path / "out.csv").read_text()
    assert text.startswith("beta,value")
