import json

import pandas as pd
import pytest
import yaml

from micromeasures import cli
from micromeasures.config import config_from_dict
from micromeasures.pipeline import (
    StageError, compare_strategies, default_seeds, derive_seed, prepare_inputs, rerun_manifest, run_ensemble,
    run_scenario,
)

SYNTH = {"source": "synthetic", "synthetic": {"n_antennas": 20, "n_clusters": 4, "population": 20_000, "seed": 1}}


def scenario(tmp_path, **overrides):
    data = {"seed": 4, "output": "out", "mobility": SYNTH, "epidemic": {"steps": 45}, "ensemble": {"runs": 2}}
    data.update(overrides)
    return config_from_dict(data, tmp_path)


def digests(manifest):
    return {k: v for k, v in manifest.outputs.items()}


def test_derive_seed_is_stable_and_stage_specific():
    assert derive_seed(1, 0, "simulate") == derive_seed(1, 0, "simulate")
    seeds = {derive_seed(1, r, s) for r in range(5) for s in ("simulate", "louvain")}
    assert len(seeds) == 10
    assert derive_seed(1, 0, "simulate") != derive_seed(2, 0, "simulate")


def test_default_seeds_split():
    assert default_seeds([5, 50, 40, 0, 50, 30, 20], 23, 5) == [(1, 5), (4, 5), (2, 5), (5, 4), (6, 4)]


def test_zero_steps_outputs_initial_state(tmp_path):
    cfg = scenario(tmp_path, epidemic={"steps": 0}, ensemble={"runs": 1})
    run_scenario(cfg)
    frame = pd.read_csv(tmp_path / "out" / "runs" / "run_000.csv")
    assert frame["step"].tolist() == [0] and frame["I"].tolist() == [23]


def test_rerun_is_byte_identical(tmp_path):
    cfg = scenario(tmp_path, strategy={"kind": "cut_communities", "p": 0.9})
    first = run_scenario(cfg, tmp_path / "a")
    second = run_scenario(cfg, tmp_path / "b")
    assert digests(first) == digests(second)
    for rel in first.outputs:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_contents_and_replay(tmp_path):
    manifest = run_scenario(scenario(tmp_path))
    stored = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert stored["config"]["seed"] == 4 and len(stored["seeds"]["runs"]) == 2
    assert {"model", "communities", "strategy", "simulate", "metrics"} <= set(stored["timings"])
    assert "runs/run_001.csv" in stored["outputs"] and "communities.csv" in stored["outputs"]
    replay, changed = rerun_manifest(tmp_path / "out" / "manifest.json", tmp_path / "replay")
    assert changed == [] and replay.outputs == manifest.outputs


def test_workers_do_not_change_results(tmp_path):
    cfg = scenario(tmp_path, ensemble={"runs": 3})
    inputs = prepare_inputs(cfg)
    tasks = [(None, derive_seed(0, r, "simulate"), False) for r in range(3)]
    serial = run_ensemble(inputs, tasks, 1)
    parallel = run_ensemble(inputs, tasks, 2)
    assert all(a.to_frame().equals(b.to_frame()) for a, b in zip(serial, parallel))


def test_comparison_rows_match_cells(tmp_path):
    cells = [{"kind": "baseline"}, {"kind": "cut_communities", "p": 0.9},
             {"kind": "decrease_mix", "q": 0.1}, {"kind": "go_home", "p": 0.5}]
    cfg = scenario(tmp_path, cells=cells)
    compare_strategies(cfg.expand_cells())
    table = pd.read_csv(tmp_path / "out" / "comparison.csv")
    assert table["strategy"].tolist() == ["baseline", "cut_communities", "decrease_mix", "go_home"]
    assert len(list((tmp_path / "out" / "trajectories").glob("*.csv"))) == 4


def test_three_parameter_cells(tmp_path):
    cfg = scenario(tmp_path, cells=[{"kind": "go_home", "p": p} for p in (0, 0.1, 0.5)])
    compare_strategies(cfg.expand_cells())
    assert len(pd.read_csv(tmp_path / "out" / "comparison.csv")) == 3


def test_noop_cell_matches_baseline_trajectory(tmp_path):
    cfg = scenario(tmp_path, cells=[{"kind": "baseline"}, {"kind": "cut_communities", "p": 0.0}])
    compare_strategies(cfg.expand_cells())
    a = (tmp_path / "out" / "trajectories" / "00_baseline.csv").read_bytes()
    b = (tmp_path / "out" / "trajectories" / "01_cut_communities_p0.csv").read_bytes()
    assert a == b


def test_gohome_lowers_final_size(tmp_path):
    cfg = scenario(tmp_path, epidemic={"steps": 150}, ensemble={"runs": 3},
                   cells=[{"kind": "baseline"}, {"kind": "go_home", "p": 0.5}])
    compare_strategies(cfg.expand_cells())
    table = pd.read_csv(tmp_path / "out" / "comparison.csv")
    assert table.loc[1, "q_star_mean"] < table.loc[0, "q_star_mean"]


def test_mismatched_bases_rejected(tmp_path):
    a = scenario(tmp_path)
    b = scenario(tmp_path, seed=5)
    with pytest.raises(StageError, match="base"):
        compare_strategies([a, b])


def test_stage_tagged_failure(tmp_path):
    cfg = config_from_dict({"mobility": {"source": "model", "model": "m.npz"},
                            "epidemic": {"population": "p.csv"}}, tmp_path, check_files=False)
    with pytest.raises(StageError) as err:
        run_scenario(cfg)
    assert err.value.stage == "model"


def test_outputs_never_overwrite_inputs(tmp_path):
    (tmp_path / "communities.csv").write_text("antenna_id,community_id\n" + "".join(
        f"{k + 1},{k // 5}\n" for k in range(20)))
    before = (tmp_path / "communities.csv").read_bytes()
    cfg = scenario(tmp_path, output=".", communities={"source": "communities.csv"})
    with pytest.raises(StageError, match="overwrite"):
        run_scenario(cfg)
    assert (tmp_path / "communities.csv").read_bytes() == before


@pytest.fixture
def trace_inputs(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "trace.csv"), "--users", "300", "--antennas", "20",
                     "--subprefs", "4", "--subpref-out", str(tmp_path / "sp.csv"),
                     "--population-out", str(tmp_path / "pop.csv")]) == 0
    return tmp_path


def test_cli_fit_and_communities(trace_inputs, capsys):
    d = trace_inputs
    assert cli.main(["fit", "--trace", str(d / "trace.csv"), "--antennas", "20", "--subpref-map", str(d / "sp.csv"),
                     "--evaluate", "--out", str(d / "model.npz")]) == 0
    table = capsys.readouterr().out
    assert table.startswith("model,avg_loglik,n_test") and "markov" in table
    assert cli.main(["communities", "--model", str(d / "model.npz"), "--population", str(d / "pop.csv"),
                     "--out-dir", str(d / "comm")]) == 0
    assert pd.read_csv(d / "comm" / "communities.csv").shape == (20, 2)


def test_cli_simulate_from_trace_and_replay(trace_inputs):
    d = trace_inputs
    (d / "s.yaml").write_text(yaml.safe_dump({
        "output": "sim", "mobility": {"source": "trace", "trace": "trace.csv", "antenna_count": 20},
        "epidemic": {"population": "pop.csv", "steps": 30}, "ensemble": {"runs": 2}}))
    assert cli.main(["simulate", str(d / "s.yaml")]) == 0
    assert cli.main(["simulate", "--manifest", str(d / "sim" / "manifest.json"), "--output", str(d / "again")]) == 0
    assert (d / "sim" / "metrics.txt").read_bytes() == (d / "again" / "metrics.txt").read_bytes()


def test_cli_compare(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({
        "output": "cmp", "mobility": SYNTH, "epidemic": {"steps": 20},
        "cells": [{"kind": "baseline"}, {"kind": "decrease_mix", "q": 0.1}]}))
    assert cli.main(["compare", str(tmp_path / "c.yaml")]) == 0
    assert len(pd.read_csv(tmp_path / "cmp" / "comparison.csv")) == 2


def test_cli_errors_are_stage_tagged(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("strategy: {q: 1.5}\nmobility: {source: synthetic}\n")
    assert cli.main(["simulate", str(tmp_path / "bad.yaml")]) == 2
    assert "error [config]: strategy.q" in capsys.readouterr().err
    assert cli.main(["fit", "--trace", str(tmp_path / "none.csv"), "--antennas", "3", "--out", "x.npz"]) == 2
    assert "error [trace]" in capsys.readouterr().err
