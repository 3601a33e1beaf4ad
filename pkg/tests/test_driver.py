import csv
import json

import numpy as np
import pytest

from sopelab import cli, envlab
from sopelab.accounting import FlopLedger, closed_form_total, flops_per_update, network_flops
from sopelab.agent import AgentConfig, SacAgent
from sopelab.config import ScheduleConfig, load_config, read_config_text
from sopelab.driver import RunHooks, evaluate_policy, run, run_sacfd, run_sope, write_run_dir
from sopelab.errors import ConfigError, DependencyError

TINY = dict(env="pendulum", hidden=(8, 8), batch_size=8, total_steps=120, online_steps=40, eval_every=60,
            eval_episodes=1, eval_interval=5, patience=2, cap=40, n_fix=7, utd=3, dtype="float64")


@pytest.fixture(scope="module")
def prior():
    ds = envlab.generate_dataset("pendulum", envlab.uniform_policy(1), 300, seed=0, tier="expert")
    return ds, envlab.ScoreAnchors("pendulum-swingup", -1500.0, -300.0)


@pytest.fixture
def data_dir(tmp_path, prior):
    ds, anchors = prior
    env = tmp_path / "data" / "pendulum-swingup"
    env.mkdir(parents=True)
    envlab.save_dataset(ds, env / "expert.sopd")
    anchors.save(env / "anchors.json")
    return tmp_path / "data"


def tiny(schedule, **kw):
    return ScheduleConfig(schedule=schedule, **{**TINY, **kw})


def test_sacfd_counts_and_closed_form(prior):
    cfg = tiny("sacfd")
    r = run_sacfd(cfg, dataset=prior[0], anchors=prior[1])
    assert r.grad_updates == cfg.total_steps and r.ledger.actor_updates == cfg.total_steps
    agent_cfg = cfg.agent_config(3, 1)
    assert closed_form_total(r.update_log, agent_cfg, cfg.batch_size) == (r.ledger.forward, r.ledger.backward)
    per = flops_per_update("sac", agent_cfg, cfg.batch_size)
    assert r.ledger.total == cfg.total_steps * sum(per)


@pytest.mark.parametrize("schedule", ["sope", "sacfd", "rlpd_lite", "speq_fixed"])
def test_ledger_equals_closed_form(schedule, prior):
    cfg = tiny(schedule)
    r = run(cfg, dataset=prior[0], anchors=prior[1])
    ledger = r.ledger
    assert closed_form_total(r.update_log, cfg.agent_config(3, 1), cfg.batch_size) == (ledger.forward,
                                                                                         ledger.backward)
    assert ledger.grad_updates == ledger.online_critic_updates + sum(p.updates for p in r.phases)
    assert ledger.env_steps == cfg.total_steps
    cum = [e[4] for e in r.evals]
    assert cum == sorted(cum)


def test_rlpd_utd_counts(prior):
    cfg = tiny("rlpd_lite", utd=20, total_steps=50, eval_every=50)
    r = run(cfg, dataset=prior[0], anchors=prior[1])
    assert r.grad_updates == 1000 and r.ledger.actor_updates == 50


def test_speq_fixed_phase_identity(prior):
    cfg = tiny("speq_fixed")
    r = run(cfg, dataset=prior[0], anchors=prior[1])
    assert len(r.phases) == 3
    assert r.ledger.phase_critic_updates == len(r.phases) * cfg.n_fix


def test_minimal_stabilization_identity(prior):
    cfg = tiny("sope", total_steps=40, online_steps=40, cap=5, eval_every=40)
    r = run_sope(cfg, dataset=prior[0], anchors=prior[1])
    assert r.grad_updates == cfg.total_steps + cfg.eval_interval
    with pytest.raises(ConfigError):
        tiny("sope", cap=0)


def test_degenerate_schedules_match(prior):
    base = dict(dataset=prior[0], anchors=prior[1])
    a = run(tiny("speq_fixed", n_fix=0), **base)
    b = run(tiny("sacfd"), **base)
    c = run(tiny("rlpd_lite", utd=1, ensemble=2), **base)
    assert a.update_log == b.update_log == c.update_log
    # with the same agent profile the runs coincide entirely
    d = run(tiny("rlpd_lite", utd=1, profile="sope"), **base)
    assert [e[:3] for e in a.evals] == [e[:3] for e in b.evals] == [e[:3] for e in d.evals]


def test_actor_frozen_and_validation_never_trained_on(prior):
    checks, leaks = [], []
    hooks = RunHooks(
        phase_start=lambda agent, split, i: checks.append(["start", agent.actor_checksum()]),
        phase_end=lambda agent, rec: checks[-1].append(agent.actor_checksum()),
        stab_batch=lambda batch, split: leaks.append(np.intersect1d(batch.index, split.validation).size),
    )
    r = run(tiny("sope"), dataset=prior[0], anchors=prior[1], hooks=hooks)
    assert len(checks) == len(r.phases) == 3
    assert all(before == after for _, before, after in checks)
    assert len(leaks) == sum(p.updates for p in r.phases) and not any(leaks)


def test_determinism_and_run_dir(tmp_path, prior):
    cfg = tiny("sope")
    for name in ("a", "b"):
        run(cfg, dataset=prior[0], anchors=prior[1], out_dir=tmp_path / name)
    for f in ("metrics.csv", "phases.csv", "flops.csv", "updates.csv", "trace.csv", "config.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "env_step,mean_return,normalized_score,cum_grad_updates,cum_flops"
    assert (tmp_path / "a" / "phases.csv").read_text().startswith(
        "phase_index,start_env_step,updates_in_phase,final_j_dm,stop_reason")
    assert load_config(tmp_path / "a" / "config.txt") == cfg


def test_missing_data_is_dependency_error(tmp_path):
    with pytest.raises(DependencyError):
        run(tiny("sacfd", data_dir=str(tmp_path)))


def test_evaluate_policy_is_repeatable_and_anchored():
    spec = envlab.make_spec("chain")
    agent = SacAgent(AgentConfig(10, 1, hidden=(8,)), np.random.default_rng(0))
    agent.actor.weights[-1][...] = 0.0
    agent.actor.biases[-1][...] = [2.0, 0.0]
    anchors = envlab.ScoreAnchors("tabular-chain", -1.0, 0.6)
    first = evaluate_policy(agent, spec, 3, seed=4, anchors=anchors)
    assert first == evaluate_policy(agent, spec, 3, seed=4, anchors=anchors)
    assert first[0] == pytest.approx(0.6) and first[1] == pytest.approx(100.0)


def test_cost_model_examples():
    assert network_flops([4, 1]) == 8
    cfg = AgentConfig(3, 1, hidden=(16,))
    for kind in ("critic", "actor", "dm"):
        f1, b1 = flops_per_update(kind, cfg, 5)
        f2, b2 = flops_per_update(kind, cfg, 10)
        assert (f2, b2) == (2 * f1, 2 * b1)
    sope = sum(flops_per_update("critic", AgentConfig.profile("sope", 3, 1), 256))
    rlpd = sum(flops_per_update("critic", AgentConfig.profile("rlpd_lite", 3, 1), 256))
    # per sample both default networks cost 2 * (4*256 + 256*256 + 256) = 133632 FLOPs forward;
    # critic update = actor + (|Z| + E) critic forwards + 2E critic backward units
    unit = 133632 * 256
    assert sope == (1 + 4 + 4) * unit
    assert rlpd == (1 + 12 + 20) * unit
    with pytest.raises(ValueError):
        FlopLedger().sync(type("C", (), {"forward": -1, "backward": 0})())


def test_config_text_round_trip():
    cfg = ScheduleConfig(schedule="speq_fixed", hidden=(32, 16), max_val_states=None, layer_norm=False)
    assert load_config(None, **read_config_text(cfg.to_text())) == cfg
    text = "# comment\nschedule = sope  # trailing\npatience = 3\nhidden = 64,64\n"
    assert read_config_text(text) == {"schedule": "sope", "patience": 3, "hidden": (64, 64)}
    for bad in ("nokey", "patience = three", "bogus = 1"):
        with pytest.raises(ConfigError):
            read_config_text(bad)


# -- command line -------------------------------------------------------------

CLI_TINY = ["--env", "pendulum", "hidden=8,8", "batch_size=8", "total_steps=80", "online_steps=40",
            "eval_every=40", "eval_episodes=1", "eval_interval=5", "patience=2", "cap=20"]


def test_cli_run_report_and_export(tmp_path, data_dir, monkeypatch, capsys):
    monkeypatch.setenv("SOPE_DATA_DIR", str(data_dir))
    for seed in (0, 1):
        code = cli.main(["run", "--schedule", "sope", "--tier", "expert", "--seed", str(seed),
                         "--out", str(tmp_path / "runs" / f"seed{seed}"), *CLI_TINY])
        assert code == 0
    run_dir = tmp_path / "runs" / "seed0"
    for f in ("metrics.csv", "phases.csv", "flops.csv", "config.txt", "summary.json"):
        assert (run_dir / f).exists()
    assert cli.main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == 0
    with open(tmp_path / "rep" / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["n_runs"] for r in rows] == ["2", "2"] and "std_score" in rows[0]
    assert (tmp_path / "rep" / "phase_updates.csv").exists() and (tmp_path / "rep" / "flops_curve.csv").exists()
    assert cli.main(["export-csv", str(data_dir / "pendulum-swingup" / "expert.sopd"),
                     str(tmp_path / "d.csv")]) == 0
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 301


def test_cli_sweep_writes_comparison(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("SOPE_DATA_DIR", str(data_dir))
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--param", "patience", "--values", "1,3", "--seeds", "0,1", "--out", str(out),
                     *CLI_TINY]) == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["patience=1", "patience=3"]
    with open(out / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["1", "3"] and rows[0]["n_seeds"] == "2"
    summary = json.loads((out / "patience=1" / "seed0" / "summary.json").read_text())
    assert "final_score" in summary


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SOPE_DATA_DIR", str(tmp_path))
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["run", "--no-such-flag"]) == 2
    assert cli.main(["run", "--schedule", "nope"]) == ConfigError.exit_code
    assert cli.main(["run", "--schedule", "sacfd"]) == DependencyError.exit_code
    assert "sopelab bootstrap" in capsys.readouterr().err
    assert cli.main(["sweep", "--param", "bogus", "--values", "1"]) == ConfigError.exit_code
    (tmp_path / "bad.sopd").write_bytes(b"junk")
    assert cli.main(["export-csv", str(tmp_path / "bad.sopd"), str(tmp_path / "o.csv")]) == 6


def test_write_run_dir_excludes_wall_clock_from_csvs(tmp_path, prior):
    r = run(tiny("sacfd"), dataset=prior[0], anchors=prior[1])
    write_run_dir(r, tmp_path)
    assert "wall_clock_s" in json.loads((tmp_path / "summary.json").read_text())
    assert "wall" not in (tmp_path / "metrics.csv").read_text()
