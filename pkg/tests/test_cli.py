import csv
import io
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mkstream.cli import main
from mkstream.config import (
    ALL_STRATEGIES,
    ConfigError,
    ExperimentPlan,
    SimConfig,
    Strategy,
    parse_config,
    serialize_config,
)
from mkstream.experiment import (
    CSV_HEADER,
    ExperimentResults,
    emit_summary,
    render_csvs,
    run_experiment,
    run_replicates,
    sweep,
)
from mkstream.sim_engine import simulate

TINY = "t_sim=20\nnb_measure=15\nnb_gop=20\nnb_video=10\nnb_vs=5\nnb_p=3\n"
TINY_CFG = parse_config(TINY)


def test_parse_examples():
    c = parse_config("lambda=0.5\nnb_vs=10")
    assert c.lam == 0.5 and c.nb_vs == 10
    assert c.replace(lam=SimConfig().lam, nb_vs=SimConfig().nb_vs) == SimConfig()
    assert parse_config("qos=30").qos == 30
    with pytest.raises(ConfigError, match=r"nb_p.*\[3,9\]"):
        parse_config("nb_p=12")


def test_parse_errors_name_the_key():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("bogus=1")
    with pytest.raises(ConfigError, match="p_loss"):
        parse_config("p_loss=1.5")
    with pytest.raises(ConfigError, match="nb_gop"):
        parse_config("nb_gop=20.5")
    with pytest.raises(ConfigError, match="strategy"):
        parse_config("strategy=Fancy")
    with pytest.raises(ConfigError):
        parse_config("no equals sign")


def test_comments_and_blank_lines():
    c = parse_config("# header\n\nlambda = 0.7  # trailing\nstrategy=baseline\n")
    assert c.lam == 0.7 and c.strategy is Strategy.BASELINE


def test_env_overrides():
    c = parse_config("lambda=0.5", env={"MKSTREAM_LAMBDA": "1.5", "HOME": "/root"})
    assert c.lam == 1.5
    with pytest.raises(ConfigError, match="MKSTREAM_NOPE"):
        parse_config("", env={"MKSTREAM_NOPE": "1"})


configs = st.builds(
    SimConfig,
    lam=st.floats(0, 2),
    qos=st.floats(25, 35),
    nb_p=st.integers(3, 9),
    p_loss=st.floats(0, 1),
    seed=st.integers(0, 2**40),
    strategy=st.sampled_from(list(Strategy)),
    net_capacity=st.floats(1, 1e6),
)


@given(configs)
def test_config_round_trip(cfg):
    assert parse_config(serialize_config(cfg), env={}) == cfg


@given(configs, st.lists(st.sampled_from([0.1, 0.5, 1.0, 1.7, 2.0]), min_size=1, unique=True),
       st.lists(st.sampled_from(list(Strategy)), min_size=1, unique=True), st.integers(1, 200))
def test_plan_round_trip(cfg, grid, strategies, reps):
    plan = ExperimentPlan(cfg, tuple(grid), tuple(strategies), reps, "out dir")
    assert parse_config(serialize_config(plan), env={}) == plan


def test_plan_defaults_and_grid_syntax():
    plan = parse_config("n_reps=3", env={})
    assert isinstance(plan, ExperimentPlan)
    assert plan.lambda_grid == tuple(round(0.1 * i, 10) for i in range(1, 21))
    assert plan.strategies == ALL_STRATEGIES
    assert parse_config("lambda_grid=0.5,1.5", env={}).lambda_grid == (0.5, 1.5)
    with pytest.raises(ConfigError):
        parse_config("lambda_grid=", env={})
    with pytest.raises(ConfigError):
        parse_config("n_reps=0", env={})


def test_run_replicates_single():
    stats = run_replicates(TINY_CFG.replace(lam=1.0, seed=5), 1)
    single = simulate(TINY_CFG.replace(lam=1.0, seed=5))
    assert np.array_equal(stats.mean["received"], single.rates("received"))
    assert all(not sd.any() for sd in stats.std.values())


def test_run_replicates_seeds_and_repeatability():
    cfg = TINY_CFG.replace(lam=1.0, seed=40)
    a, b = run_replicates(cfg, 4), run_replicates(cfg, 4)
    assert [r.seed for r in a.runs] == [40, 41, 42, 43]
    for m in a.mean:
        assert np.array_equal(a.mean[m], b.mean[m]) and np.array_equal(a.std[m], b.std[m])
    stack = np.vstack([simulate(cfg.replace(seed=s)).rates("useful") for s in range(40, 44)])
    assert np.allclose(a.mean["useful"], stack.mean(axis=0))
    assert np.allclose(a.std["useful"], stack.std(axis=0, ddof=1))


def test_run_replicates_parallel_matches_serial():
    cfg = TINY_CFG.replace(lam=1.5, seed=7)
    a, b = run_replicates(cfg, 3, jobs=1), run_replicates(cfg, 3, jobs=2)
    for m in a.mean:
        assert np.array_equal(a.mean[m], b.mean[m])


def read_csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_csv_schema(tmp_path):
    plan = ExperimentPlan(TINY_CFG, (0.5,), (Strategy.MK,), 1, str(tmp_path / "out"))
    run_experiment(plan)
    names = sorted(os.listdir(tmp_path / "out"))
    assert names == ["lost.csv", "received.csv", "served.csv", "summary.csv", "useful.csv", "waiting.csv"]
    rows = read_csv((tmp_path / "out" / "received.csv").read_text())
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + TINY_CFG.nb_measure
    assert all(r[4] == "0.000000" for r in rows[1:])
    assert (tmp_path / "out" / "received.csv").read_bytes().endswith(b"\n")


def test_plan_dimensions():
    plan = ExperimentPlan(TINY_CFG, (0.5, 1.0), ALL_STRATEGIES, 2, "unused")
    texts = render_csvs(sweep(plan))
    assert len(texts) == 6
    for m in ("received", "useful", "lost", "waiting", "served"):
        assert len(read_csv(texts[f"{m}.csv"])) == 1 + 2 * 4 * TINY_CFG.nb_measure
    summary = read_csv(texts["summary.csv"])
    assert len(summary) == 1 + 8 and all(r[2] == "2" for r in summary[1:])


def test_emit_summary():
    plan = ExperimentPlan(TINY_CFG, (1.0,), (Strategy.MK,), 1, "unused")
    buf = io.StringIO()
    text = emit_summary(sweep(plan), out=buf)
    lines = text.strip().splitlines()
    assert len(lines) == 2 and "rank" not in text and "ordering" not in text
    with pytest.raises(ValueError):
        emit_summary(ExperimentResults(plan, {}))
    plan = plan.replace(strategies=ALL_STRATEGIES)
    text = emit_summary(sweep(plan), out=io.StringIO())
    assert "received ordering:" in text and len(text.strip().splitlines()) == 6


def write(tmp_path, text, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--config", write(tmp_path, TINY)]) == 0
    assert parse_config(capsys.readouterr().out, env={}) == TINY_CFG
    assert main(["validate", "--config", write(tmp_path, "nb_p=12")]) == 2
    assert "[3,9]" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.txt")]) == 1


def test_cli_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write(tmp_path, TINY + "lambda_grid=0.5\nn_reps=1\n")
    assert main(["sweep", "--config", cfg, "--out", str(blocker / "sub")]) != 0


def test_cli_sweep_and_run(tmp_path, capsys):
    cfg = write(tmp_path, TINY + "lambda_grid=0.5,1.0\nstrategies=Mk,MkKframes\n", "plan.txt")
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "a"), "--reps", "2", "--seed", "3"]) == 0
    summary = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert len(summary) == 5 and summary[1].startswith("0.5,Mk,2,")
    assert main(["run", "--config", write(tmp_path, TINY), "--out", str(tmp_path / "b"), "--reps", "2"]) == 0
    assert "MkKframes" in capsys.readouterr().out
    assert main(["run", "--config", cfg]) == 2


def test_cli_env_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MKSTREAM_LAMBDA", "0.3")
    assert main(["validate", "--config", write(tmp_path, TINY)]) == 0
    assert "lambda=0.3\n" in capsys.readouterr().out
