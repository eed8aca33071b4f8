"""Harness behavior: config parsing, trace persistence, reference caching."""

import json
import math

import numpy as np
import pytest

from schwarzopt import cli
from schwarzopt.algorithms import IterationRecord, SolverConfig, Trace, run_backtracking
from schwarzopt.errors import ConfigError, SchwarzError
from schwarzopt.problems import make_quadratic_toy


SMALL = [
    "--m", "9", "--coarse-m", "3", "--overlap", "1", "--iters", "10",
]


def small_cfg(problem="obstacle", **overrides):
    kwargs = dict(m=9, coarse_m=3, overlap=1, iters=10)
    kwargs.update(overrides)
    cfg = cli.ExperimentConfig(problem=problem, **kwargs)
    cfg.validate()
    return cfg


# ------------------------------------------------------------- parse_config


def test_parse_config_flags():
    command, cfg = cli.parse_config(["run", "--problem", "slap", *SMALL, "--rho", "0.7"])
    assert command == "run"
    assert cfg.problem == "slap" and cfg.m == 9 and cfg.rho == 0.7
    assert cfg.algorithm == "backtracking"  # default


def test_parse_config_file_and_override(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# benchmark setup\n"
        "problem=obstacle\n"
        "coarse-m = 3\n"
        "m=9\n"
        "\n"
        "iters=25\n"
    )
    _, cfg = cli.parse_config(["run", "--config", str(path), "--iters", "10", "--overlap", "1"])
    assert cfg.problem == "obstacle"
    assert cfg.coarse_m == 3  # dashes in the file map to underscores
    assert cfg.iters == 10  # the flag wins over the file


def test_parse_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        cli.parse_config(["run", *SMALL])  # no problem given
    bad_key = tmp_path / "bad-key.cfg"
    bad_key.write_text("problem=slap\nwidth=9\n")
    with pytest.raises(ConfigError):
        cli.parse_config(["run", "--config", str(bad_key)])
    bad_value = tmp_path / "bad-value.cfg"
    bad_value.write_text("problem=slap\nm=nine\n")
    with pytest.raises(ConfigError):
        cli.parse_config(["run", "--config", str(bad_value)])
    no_eq = tmp_path / "no-eq.cfg"
    no_eq.write_text("problem slap\n")
    with pytest.raises(ConfigError):
        cli.parse_config(["run", "--config", str(no_eq)])
    with pytest.raises(ConfigError):
        cli.parse_config(["run", "--config", str(tmp_path / "missing.cfg")])


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(problem="poisson")
    with pytest.raises(ConfigError):
        small_cfg(rho=1.0)
    with pytest.raises(ConfigError):
        small_cfg(omega=0.5)
    with pytest.raises(ConfigError):
        small_cfg(iters=0)
    with pytest.raises(ConfigError):
        small_cfg(overlap=-1)


# ------------------------------------------------------------ build_problem


def test_build_problem_shapes():
    obstacle = cli.build_problem(small_cfg("obstacle"))
    assert obstacle.label == "obstacle-m9"
    slap = cli.build_problem(small_cfg("slap"))
    assert slap.label == "slap-m9"
    dualtv = cli.build_problem(small_cfg("dualtv", m=8))
    assert dualtv.label == "dualtv-m8"
    # the subdomain grid tracks the coarse mesh: coarse_m - 1 blocks per side
    assert dualtv.decomposition.N == (3 - 1) ** 2


# ------------------------------------------------------------- persistence


def test_run_experiment_writes_stable_artifacts(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = small_cfg("obstacle")
    trace, summary = cli.run_experiment(cfg, out="trace.csv")

    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == cli.CSV_HEADER
    assert len(lines) == 1 + len(trace.records)
    errors = []
    for line in lines[1:]:
        n, energy, error, tau, trials, restarted, elapsed = line.split(",")
        assert elapsed == "0.0"
        assert restarted in ("0", "1")
        errors.append(float(error))
    assert all(e >= 0.0 for e in errors)
    assert all(b <= a + 1e-12 for a, b in zip(errors[:-1], errors[1:]))

    payload = json.loads((tmp_path / "trace.json").read_text())
    assert payload == summary
    for key in (
        "problem", "algorithm", "rho", "tau0", "E_star", "iters_to_1e2",
        "iters_to_1e4", "iters_to_1e6", "total_backtrack_trials",
        "restart_count", "initial_energy", "final_energy", "iterations",
        "fingerprint", "total_elapsed_ms", "trace_path",
    ):
        assert key in payload

    # a rerun with the same cache produces byte-identical traces
    first = (tmp_path / "trace.csv").read_bytes()
    cli.run_experiment(cfg, out="trace.csv")
    assert (tmp_path / "trace.csv").read_bytes() == first


def test_trace_bytes_ignore_worker_count(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = small_cfg("obstacle")
    blobs = {}
    for threads in ("1", "8"):
        monkeypatch.setenv("SCHWARZ_THREADS", threads)
        cli.run_experiment(cfg, out=f"threads-{threads}.csv")
        blobs[threads] = (tmp_path / f"threads-{threads}.csv").read_bytes()
    assert blobs["1"] == blobs["8"]


def test_write_trace_requires_a_reference():
    trace = Trace(meta={"initial_energy": 1.0})
    trace.records.append(IterationRecord(1, 0.5, 0.5, 1, False, 3.0))
    with pytest.raises(ConfigError):
        cli.write_trace(trace, "nowhere.csv")


def test_reference_is_cached_by_fingerprint(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    problem = cli.build_problem(small_cfg("obstacle"))
    record = cli.compute_reference(problem, budget=40, cache_path="refs.json")
    assert record.fingerprint == problem.fingerprint
    assert record.tolerance >= 0.0

    def boom(*args, **kwargs):
        raise AssertionError("cache miss: reference was recomputed")

    monkeypatch.setattr(cli, "run_momentum", boom)
    again = cli.compute_reference(problem, budget=40, cache_path="refs.json")
    assert again == record

    payload = json.loads((tmp_path / "refs.json").read_text())
    assert payload["version"] == 1
    assert problem.fingerprint in payload["records"]


def test_reference_cache_rejects_garbage(tmp_path):
    path = tmp_path / "refs.json"
    path.write_text("{not json")
    problem = cli.build_problem(small_cfg("obstacle"))
    with pytest.raises(ConfigError):
        cli.compute_reference(problem, budget=5, cache_path=str(path))


# ------------------------------------------------------------- summaries


def test_iters_to_threshold_is_relative():
    trace = Trace(meta={"initial_energy": 10.0, "E_star": 0.0})
    for n, energy in enumerate([5.0, 1.0, 0.05, 0.0005], start=1):
        trace.records.append(IterationRecord(n, energy, 0.5, 1, False, 0.0))
    assert cli._iters_to_threshold(trace, 1e-1) == 2  # 1.0 <= 0.1 * 10, inclusive
    assert cli._iters_to_threshold(trace, 1e-2) == 3
    assert cli._iters_to_threshold(trace, 1e-4) == 4
    assert cli._iters_to_threshold(trace, 1e-6) is None
    already = Trace(meta={"initial_energy": 0.0, "E_star": 0.0})
    assert cli._iters_to_threshold(already, 1e-2) == 0


def test_summarize_comparison_flags_slow_backtracking():
    def fake(algorithm, energies):
        trace = Trace(meta={
            "problem": "toy", "algorithm": algorithm, "rho": 0.5, "tau0": 0.5,
            "fingerprint": "fp", "initial_energy": 1.0, "E_star": 0.0,
        })
        for n, energy in enumerate(energies, start=1):
            trace.records.append(IterationRecord(n, energy, 0.5, 1, False, 0.0))
        return trace

    plain = fake("plain", [0.5, 1e-3, 1e-5, 1e-7])
    slow_bt = fake("backtracking", [0.5, 0.4, 0.3, 1e-7])
    report = cli.summarize_comparison([plain, slow_bt])
    assert report["iterations_to_threshold"]["1e2"] == {"plain": 2, "backtracking": 4}
    assert report["violations"]

    ok_bt = fake("backtracking", [0.5, 1e-3, 1e-5, 1e-7])
    assert not cli.summarize_comparison([plain, ok_bt])["violations"]

    with pytest.raises(ConfigError):
        cli.summarize_comparison([])
    other = fake("plain", [0.5])
    other.meta["fingerprint"] = "other"
    with pytest.raises(ConfigError):
        cli.summarize_comparison([plain, other])


def test_salvage_recognizes_only_infeasible_deaths():
    err = SchwarzError("boom")
    assert cli._salvageable(err) is None

    trace = Trace(meta={"initial_energy": 1.0})
    trace.records.append(IterationRecord(1, math.inf, 0.5, 1, False, 0.0))
    err.partial_trace = trace
    assert cli._salvageable(err) is trace

    finite = Trace(meta={"initial_energy": 1.0})
    finite.records.append(IterationRecord(1, 0.5, 0.5, 1, False, 0.0))
    err.partial_trace = finite
    assert cli._salvageable(err) is None

    err.partial_trace = Trace(meta={"initial_energy": 1.0})
    assert cli._salvageable(err) is None


# ------------------------------------------------------------------- main


def test_main_run_roundtrip(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = cli.main([
        "run", "--problem", "obstacle", *SMALL, "--out", "run.csv",
        "--reference-cache", "refs.json",
    ])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["problem"] == "obstacle-m9"
    assert (tmp_path / "run.csv").exists() and (tmp_path / "run.json").exists()


def test_main_compare_and_sweep(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = cli.main([
        "compare", "--problem", "obstacle", *SMALL, "--reference-cache", "refs.json",
    ])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["iterations_to_threshold"]) == {"1e2", "1e4", "1e6"}
    row = report["iterations_to_threshold"]["1e2"]
    assert set(row) == {"plain", "backtracking", "momentum"}

    rc = cli.main([
        "sweep-rho", "--problem", "obstacle", *SMALL, "--reference-cache", "refs.json",
    ])
    assert rc == 0
    reports = json.loads(capsys.readouterr().out)
    assert [r["rho"] for r in reports] == [0.5, 0.7, 0.9]


def test_main_reference_subcommand(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = cli.main([
        "reference", "--problem", "obstacle", *SMALL,
        "--reference-cache", "refs.json",
    ])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert "E_star" in payload and "elapsed_s" in payload


def test_main_reports_config_errors(capsys):
    rc = cli.main(["run", "--m", "9"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
