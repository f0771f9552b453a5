"""Config loading, the experiment runner, result tables, and the CLI."""

import json
import textwrap

import numpy as np
import pytest

from etckit import cli
from etckit.config import (PAPER_EVAL_SEEDS, SCHEMA, ConfigError,
                           apply_override, build_config, load_config,
                           parse_arch, substream_seed)
from etckit.experiment import (aggregate_metrics, compute_bound,
                               emit_table, initial_condition, read_table,
                               run_experiment, simulate_only)
from etckit.systems import get_system
from etckit.training import TrainConfig


def base_data(out_dir, method="lqr", system="grn", **evaluation):
    ev = {"seeds": [2, 4], "trigger_budget": 5, "horizon": 3.0}
    ev.update(evaluation)
    return {
        "experiment": {"name": f"{system}-{method}", "system": system,
                       "method": method, "out_dir": str(out_dir)},
        "evaluation": ev,
        "integration": {"step": 0.01},
    }


def write_toml(path, text):
    path.write_text(textwrap.dedent(text))
    return str(path)


# ------------------------------------------------------------- config


def test_full_toml_parses(tmp_path):
    p = write_toml(tmp_path / "c.toml", """\
        [experiment]
        name = "grn-pi"
        system = "grn"
        method = "netc-pi"
        out_dir = "out"

        [train]
        n_samples = 200
        learning_rate = 0.02
        icnn = "ICNN(2,10,10,1)"
        control = "Control(2,20,20,1)"
        classk = "K(1,20,1)"
        seed = 3

        [evaluation]
        seeds = [1, 2, 3]
        sigma = 0.4

        [integration]
        step = 0.005
        """)
    cfg = load_config(p)
    assert cfg.method == "netc-pi"
    assert cfg.train.icnn_arch == (2, 10, 10, 1)
    assert cfg.train.control_arch == (2, 20, 20, 1)
    assert cfg.train.n_samples == 200
    assert cfg.train.seed == 3
    assert cfg.train.system == "grn"
    assert cfg.evaluation.seeds == (1, 2, 3)
    assert cfg.evaluation.sigma == 0.4
    assert cfg.integration["step"] == 0.005


def test_seeds_default_per_system(tmp_path):
    for system in ("grn", "lorenz", "cell"):
        data = base_data(tmp_path, method="balsa", system=system)
        del data["evaluation"]["seeds"]
        cfg = build_config(data)
        assert cfg.evaluation.seeds == PAPER_EVAL_SEEDS[system]


def test_validation_lists_every_problem(tmp_path):
    data = base_data(tmp_path, method="lqr", system="cell")
    data["evaluation"]["sigma"] = 1.5
    data["train"] = {"bogus_knob": 1}
    data["typo_table"] = {}
    with pytest.raises(ConfigError) as err:
        build_config(data)
    msg = str(err.value)
    assert "lqr" in msg and "cell" in msg
    assert "evaluation.sigma" in msg
    assert "train.bogus_knob" in msg
    assert "typo_table" in msg


def test_empty_seeds_rejected(tmp_path):
    data = base_data(tmp_path, seeds=[])
    with pytest.raises(ConfigError, match="seeds"):
        build_config(data)


def test_unknown_method_and_system(tmp_path):
    data = base_data(tmp_path)
    data["experiment"]["method"] = "magic"
    data["experiment"]["system"] = "pendulum"
    with pytest.raises(ConfigError) as err:
        build_config(data)
    assert "magic" in str(err.value) and "pendulum" in str(err.value)


def test_parse_arch_forms():
    assert parse_arch("ICNN(2,10,10,1)", "icnn_arch") == (2, 10, 10, 1)
    assert parse_arch("MLP(3, 64, 1)", "icnn_arch") == (3, 64, 1)
    assert parse_arch([2, 8, 1], "control_arch") == (2, 8, 1)
    with pytest.raises(ConfigError, match="tag"):
        parse_arch("K(2,10,1)", "icnn_arch")
    with pytest.raises(ConfigError):
        parse_arch("ICNN(2,,1)", "icnn_arch")
    with pytest.raises(ConfigError):
        parse_arch([2], "icnn_arch")


def test_apply_override_types():
    data = {}
    apply_override(data, "train.seed=7")
    apply_override(data, "evaluation.sigma=0.8")
    apply_override(data, "evaluation.project=true")
    apply_override(data, "experiment.name=fancy-run")
    apply_override(data, "evaluation.seeds=[1, 2]")
    assert data["train"]["seed"] == 7
    assert data["evaluation"]["sigma"] == 0.8
    assert data["evaluation"]["project"] is True
    assert data["experiment"]["name"] == "fancy-run"
    assert data["evaluation"]["seeds"] == [1, 2]
    with pytest.raises(ConfigError, match="key=value"):
        apply_override(data, "no_equals_sign")


def test_seed_flag_overrides_train_seed(tmp_path):
    p = write_toml(tmp_path / "c.toml", """\
        [experiment]
        name = "n"
        system = "grn"
        method = "balsa"
        out_dir = "out"
        [train]
        seed = 1
        """)
    assert load_config(p).train.seed == 1
    assert load_config(p, seed=42).train.seed == 42
    assert load_config(p, overrides=["train.seed=9"]).train.seed == 9


def test_substream_seeds_are_stable_and_distinct():
    a = substream_seed(0, "lip-u")
    assert a == substream_seed(0, "lip-u")
    assert a != substream_seed(0, "lip-f")
    assert a != substream_seed(1, "lip-u")
    r1 = np.random.default_rng(substream_seed(0, "x")).uniform(size=4)
    r2 = np.random.default_rng(substream_seed(0, "y")).uniform(size=4)
    assert not np.allclose(r1, r2)


def test_echo_dict_formats_arches(tmp_path):
    cfg = build_config(base_data(tmp_path))
    echo = cfg.echo_dict()
    assert echo["train"]["icnn_arch"] == "ICNN(2,10,10,1)"
    assert echo["train"]["control_arch"] == "Control(2,20,20,1)"
    assert echo["evaluation"]["n_initial_conditions"] == 2
    json.dumps(echo)  # must be plain data


# ------------------------------------------------ initial conditions


def test_initial_condition_perturbs_start_state():
    system = get_system("grn")
    tc = TrainConfig()
    x0 = initial_condition(system, 5, tc)
    rng = np.random.default_rng(5)
    assert np.array_equal(x0, system.start + rng.uniform(-1.0, 1.0, 2))
    # half-width 0.5 for the cell network
    cell = get_system("cell")
    x0c = initial_condition(cell, 3, TrainConfig(system="cell"))
    assert np.max(np.abs(x0c - cell.start)) <= 0.5


def test_initial_condition_draws_from_training_data():
    system = get_system("lorenz")
    tc = TrainConfig(system="lorenz", n_samples=50, seed=11)
    data = system.sample_domain(np.random.default_rng(11), 50)
    x0 = initial_condition(system, 3, tc)
    assert any(np.array_equal(x0, row) for row in data)
    assert np.array_equal(x0, initial_condition(system, 3, tc))


# ------------------------------------------------------------- runner


def test_run_experiment_lqr_grn(tmp_path):
    cfg = build_config(base_data(tmp_path / "a"))
    rep = run_experiment(cfg)
    assert rep["schema"] == SCHEMA
    assert rep["method"] == "lqr" and rep["system"] == "grn"
    assert rep["train"] is None
    assert rep["care_residual"] <= 1e-8
    assert len(rep["per_seed"]) == 2
    for row in rep["per_seed"]:
        assert (tmp_path / "a" / row["trace"]).exists()
        assert (tmp_path / "a" / row["trace_budget"]).exists()
    assert (tmp_path / "a" / "config_echo.json").exists()
    assert (tmp_path / "a" / "report.json").exists()


def test_aggregates_recomputable_from_per_seed(tmp_path):
    rep = run_experiment(build_config(base_data(tmp_path / "a")))
    again = aggregate_metrics(rep["per_seed"])
    assert json.dumps(again, sort_keys=True) == json.dumps(rep["aggregate"],
                                                           sort_keys=True)
    trig = [row["num_triggers"] for row in rep["per_seed"]]
    assert rep["aggregate"]["num_triggers"]["mean"] == pytest.approx(
        np.mean(trig))
    assert rep["aggregate"]["num_triggers"]["std"] == pytest.approx(
        np.std(trig))


def test_reruns_are_byte_identical(tmp_path):
    r1 = run_experiment(build_config(base_data(tmp_path / "a")))
    r2 = run_experiment(build_config(base_data(tmp_path / "b")))
    dump = lambda r: json.dumps({"per_seed": r["per_seed"],
                                 "aggregate": r["aggregate"]}, sort_keys=True)
    assert dump(r1) == dump(r2)
    # the on-disk report is canonical json: reload + re-dump reproduces it
    raw = (tmp_path / "a" / "report.json").read_text()
    assert json.dumps(json.loads(raw), indent=2, sort_keys=True) + "\n" == raw


def test_run_experiment_balsa_budget_zero(tmp_path):
    cfg = build_config(base_data(tmp_path / "z", method="balsa",
                                 trigger_budget=0))
    rep = run_experiment(cfg)
    for row in rep["per_seed"]:
        assert row["mse_budget"] is not None
    assert rep["aggregate"]["mse_budget"] is not None


MC_TOML = """\
    [experiment]
    name = "grn-mc-tiny"
    system = "grn"
    method = "netc-mc"
    out_dir = "%s"

    [train]
    n_samples = 60
    batch_size = 10
    m_warm = 12
    m_main = 4
    learning_rate = 0.05
    lambda2 = 0.1
    icnn = "ICNN(2,8,1)"
    control = "Control(2,8,8,1)"
    classk = "K(1,8,1)"
    diag_probes = 0
    seed = 0

    [evaluation]
    seeds = [2, 4]
    trigger_budget = 5
    horizon = 3.0

    [integration]
    step = 0.01
    """


def test_simulate_only_matches_evaluate(tmp_path):
    p = write_toml(tmp_path / "mc.toml", MC_TOML % (tmp_path / "a"))
    rep = run_experiment(load_config(p))
    sim = simulate_only(load_config(p),
                        checkpoint_path=tmp_path / "a" / "checkpoint.json",
                        out_dir=tmp_path / "b")
    for full, lite in zip(rep["per_seed"], sim["per_seed"]):
        for key in ("seed", "num_triggers", "min_inter_event", "mse_window",
                    "temporal_variance", "mse_budget"):
            assert full[key] == lite[key]


def test_compute_bound_from_checkpoint(tmp_path):
    p = write_toml(tmp_path / "mc.toml", MC_TOML % (tmp_path / "a"))
    rep = run_experiment(load_config(p))
    bound = compute_bound(load_config(p), out_dir=tmp_path / "a")
    assert sorted(bound) == ["c", "empirical_min_inter_event", "l_alpha_inv",
                             "l_f", "l_u", "sigma", "tau_h", "tau_h_tilde"]
    assert bound["tau_h"] > 0 and bound["tau_h_tilde"] > 0
    emp = min(r["min_inter_event"] for r in rep["per_seed"])
    assert bound["empirical_min_inter_event"] == emp
    assert bound == rep["bound"]
    assert (tmp_path / "a" / "bound.json").exists()


def test_bound_rejects_methods_without_class_k(tmp_path):
    cfg = build_config(base_data(tmp_path, method="lqr"))
    with pytest.raises(ConfigError, match="netc-mc"):
        compute_bound(cfg)


def test_train_report_artifacts(tmp_path):
    p = write_toml(tmp_path / "mc.toml", MC_TOML % (tmp_path / "a"))
    rep = run_experiment(load_config(p))
    out = tmp_path / "a"
    assert (out / "checkpoint.json").exists()
    tr = json.loads((out / "train_report.json").read_text())
    assert tr["schema"] == SCHEMA
    assert len(tr["curves"]["loss_total"]) == 16
    for name in rep["train"]["curve_files"]:
        lines = (out / name).read_text().splitlines()
        assert lines[0] == "iter,value"
        assert len(lines) == 17


def test_system_override_rejects_unknown_kwarg(tmp_path):
    data = base_data(tmp_path)
    data["system"] = {"warp": 9}
    cfg = build_config(data)
    with pytest.raises(ConfigError, match="system"):
        run_experiment(cfg)


def test_lorenz_box_override(tmp_path):
    data = base_data(tmp_path, method="balsa", system="lorenz", horizon=0.05)
    data["system"] = {"box": 5.0}
    cfg = build_config(data)
    system = get_system("lorenz", **cfg.system_overrides)
    assert system.domain_hi[0] == 5.0 and system.domain_lo[0] == -5.0


# -------------------------------------------------------------- table


def fake_report(method, system, triggers=4.0):
    agg = {
        "num_triggers": {"mean": triggers, "std": 0.5},
        "min_inter_event": {"mean": 0.25, "std": 0.01},
        "mse_window": {"mean": 1.0, "std": 0.1},
        "temporal_variance": {"mean": 0.0, "std": 0.0},
        "mse_budget": {"mean": 2.0, "std": 0.2},
    }
    return {"schema": SCHEMA, "method": method, "system": system,
            "aggregate": agg}


def test_emit_table_sorts_rows():
    text = emit_table([fake_report("nlc", "lorenz"),
                       fake_report("lqr", "grn"),
                       fake_report("balsa", "grn")])
    lines = text.splitlines()
    assert lines[0].startswith("method,system,")
    firsts = [ln.split(",")[:2] for ln in lines[1:]]
    assert firsts == [["balsa", "grn"], ["lqr", "grn"], ["nlc", "lorenz"]]


def test_emit_table_empty_and_none_cells():
    assert emit_table([]).splitlines() == [
        "method,system,triggers_mean,triggers_std,min_inter_event_mean,"
        "min_inter_event_std,mse_budget_mean,mse_budget_std"]
    rep = fake_report("lqr", "grn")
    rep["aggregate"]["mse_budget"] = None
    rows = read_table(emit_table([rep]))
    assert rows[0]["mse_budget_mean"] is None
    assert rows[0]["triggers_mean"] == 4.0


def test_table_round_trip_is_idempotent():
    text = emit_table([fake_report("lqr", "grn", triggers=1 / 3),
                       fake_report("nlc", "lorenz", triggers=0.1 + 0.2)])
    assert emit_table(read_table(text)) == text


def test_emit_table_schema_mismatch_names_versions():
    bad = fake_report("lqr", "grn")
    bad["schema"] = "etckit-report-v0"
    with pytest.raises(Exception, match="etckit-report-v1.*etckit-report-v0"):
        emit_table([bad])


def test_read_table_rejects_foreign_header():
    with pytest.raises(Exception, match="header"):
        read_table("a,b,c\n1,2,3\n")


# ---------------------------------------------------------------- cli


def test_cli_evaluate_and_table(tmp_path, capsys):
    p = write_toml(tmp_path / "c.toml", """\
        [experiment]
        name = "grn-lqr"
        system = "grn"
        method = "lqr"
        out_dir = "%s"

        [evaluation]
        seeds = [2, 4]
        trigger_budget = 5
        horizon = 3.0

        [integration]
        step = 0.01
        """ % (tmp_path / "out"))
    assert cli.main(["evaluate", "--config", p]) == 0
    out = capsys.readouterr().out
    assert "report.json" in out
    csv_path = tmp_path / "table.csv"
    rc = cli.main(["table", "--reports",
                   str(tmp_path / "out" / "report.json"),
                   "--out", str(csv_path)])
    assert rc == 0
    rows = read_table(csv_path.read_text())
    assert rows[0]["method"] == "lqr" and rows[0]["system"] == "grn"


def test_cli_rejects_bad_config(tmp_path, capsys):
    p = write_toml(tmp_path / "c.toml", """\
        [experiment]
        name = "x"
        system = "cell"
        method = "lqr"
        out_dir = "out"
        """)
    assert cli.main(["evaluate", "--config", p]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_override_flag(tmp_path, capsys):
    p = write_toml(tmp_path / "c.toml", """\
        [experiment]
        name = "grn-lqr"
        system = "grn"
        method = "lqr"
        out_dir = "%s"

        [evaluation]
        seeds = [2]
        horizon = 1.0

        [integration]
        step = 0.01
        """ % (tmp_path / "out"))
    rc = cli.main(["evaluate", "--config", p,
                   "--override", "evaluation.sigma=0.25"])
    assert rc == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["config"]["evaluation"]["sigma"] == 0.25


def test_cli_sweep_writes_index(tmp_path, capsys):
    p = write_toml(tmp_path / "c.toml", """\
        [experiment]
        name = "grn-lqr"
        system = "grn"
        method = "lqr"
        out_dir = "%s"

        [evaluation]
        seeds = [2]
        horizon = 1.0

        [integration]
        step = 0.01

        [sweep]
        key = "evaluation.sigma"
        values = [0.3, 0.7]
        """ % (tmp_path / "out"))
    assert cli.main(["sweep", "--config", p]) == 0
    idx = json.loads((tmp_path / "out" / "sweep_index.json").read_text())
    assert idx["sweep_key"] == "evaluation.sigma"
    assert [run["value"] for run in idx["runs"]] == [0.3, 0.7]
    for run in idx["runs"]:
        rep = json.loads((tmp_path / "out" / run["report"]).read_text())
        assert rep["config"]["evaluation"]["sigma"] == run["value"]


def test_cli_missing_config_file(tmp_path, capsys):
    assert cli.main(["evaluate", "--config",
                     str(tmp_path / "nope.toml")]) == 1
    assert "error:" in capsys.readouterr().err
