import json

import numpy as np
import pytest

from pegpucb.cli import main
from pegpucb.environments import Environment
from pegpucb.gp_core import GPPrior, TimeVaryingRBF, zero_mean
from pegpucb.harness import (
    PROBLEMS,
    ConfigError,
    ExperimentConfig,
    Problem,
    read_trace,
    read_traces,
    run_cell,
    run_experiment,
    stream,
    write_trace,
)

SMALL = dict(experiment="toy", horizon=8, num_seeds=2)


def one_arm_problem(config, seed):
    env = Environment(
        arms=np.zeros((1, 1)),
        horizon=config.horizon or 1,
        noise_std=0.1,
        values=lambda t: np.array([0.7]),
        feasible=lambda t: np.array([0]),
    )
    return Problem(env, [GPPrior("only", zero_mean, TimeVaryingRBF(1.0))], 0.1, "only")


def flaky_problem(config, seed):
    if seed == 1:
        raise RuntimeError("boom")
    return one_arm_problem(config, seed)


@pytest.fixture
def extra_problems(monkeypatch):
    monkeypatch.setitem(PROBLEMS, "one-arm", one_arm_problem)
    monkeypatch.setitem(PROBLEMS, "flaky", flaky_problem)


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(
            experiment="toy",
            algorithms=["pe-gp-ucb", "regret-balancing"],
            horizon=50,
            num_seeds=3,
            seed=7,
            delta=0.05,
            noise_std=0.2,
            problem={"tall_height": 2.0},
            output_dir="out",
            overrides={"regret-balancing": {"bounds": {"scale": 2.0, "exponent": 0.5}}},
        )
        back = ExperimentConfig.loads(cfg.dumps())
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_digest_ignores_output_dir(self):
        assert ExperimentConfig(output_dir="a").digest() == ExperimentConfig(output_dir="b").digest()

    @pytest.mark.parametrize(
        "bad",
        [
            {"num_seeds": 0},
            {"algorithms": ["nope"]},
            {"algorithms": []},
            {"delta": 1.0},
            {"experiment": "mars"},
            {"horizon": 0},
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.loads('{"seeds": 3}')

    def test_streams_are_independent_and_reproducible(self):
        a = stream(5, "noise").normal(size=4)
        assert np.array_equal(a, stream(5, "noise").normal(size=4))
        assert not np.array_equal(a, stream(5, "policy").normal(size=4))
        assert not np.array_equal(a, stream(6, "noise").normal(size=4))


class TestRuns:
    def test_one_arm_single_step(self, extra_problems):
        cfg = ExperimentConfig(experiment="one-arm", algorithms=["random"], horizon=1, num_seeds=1)
        trace = run_cell(cfg, "random", 0)
        assert len(trace) == 1
        assert trace.records[0].regret == 0.0

    def test_byte_identical_traces(self, tmp_path):
        files = []
        for name in ("a", "b"):
            cfg = ExperimentConfig(algorithms=["pe-gp-ucb", "random"], output_dir=str(tmp_path / name), **SMALL)
            run_experiment(cfg)
            files.append(sorted((tmp_path / name).glob("trace_*")))
        assert [p.name for p in files[0]] == [p.name for p in files[1]]
        for a, b in zip(*files):
            assert a.read_bytes() == b.read_bytes()

    def test_shared_noise_across_algorithms(self):
        cfg = ExperimentConfig(algorithms=["random", "pe-gp-ucb"], **SMALL)
        a, b = run_cell(cfg, "random", 0), run_cell(cfg, "pe-gp-ucb", 0)
        # Same function draw and noise stream: y - f is the same sequence.
        np.testing.assert_allclose([r.y - r.f for r in a.records], [r.y - r.f for r in b.records], atol=1e-12)

    def test_failure_is_isolated(self, extra_problems, tmp_path):
        cfg = ExperimentConfig(experiment="flaky", algorithms=["random"], horizon=3, num_seeds=3, output_dir=str(tmp_path))
        result = run_experiment(cfg)
        assert [tr.seed for tr in result.traces] == [0, 2]
        assert [(f.algorithm, f.seed) for f in result.failures] == [("random", 1)]
        assert "boom" in result.failures[0].error
        assert len(read_traces(tmp_path)) == 2
        assert json.loads((tmp_path / "failures.json").read_text())[0]["seed"] == 1

    def test_parallel_matches_serial(self, tmp_path):
        for name, workers in (("serial", 1), ("parallel", 2)):
            cfg = ExperimentConfig(algorithms=["mle"], output_dir=str(tmp_path / name), **SMALL)
            run_experiment(cfg, workers=workers)
        for a in sorted((tmp_path / "serial").glob("trace_*")):
            assert a.read_bytes() == (tmp_path / "parallel" / a.name).read_bytes()


@pytest.fixture(scope="module")
def traces():
    cfg = ExperimentConfig(algorithms=["pe-gp-ucb", "regret-balancing", "fully-bayesian"], experiment="toy", horizon=40, num_seeds=2)
    return run_experiment(cfg, write=False).traces


class TestTraces:
    def test_cumulative_regret_is_prefix_sum(self, traces):
        for tr in traces:
            assert len(tr) == 40
            assert np.all(tr.regret >= 0)
            np.testing.assert_allclose(np.cumsum(tr.regret), tr.cum_regret, atol=1e-9)

    def test_eliminations_recheck_from_trace(self):
        # Taller hills make wrong priors fail fast, so eliminations occur.
        cfg = ExperimentConfig(algorithms=["pe-gp-ucb"], horizon=60, num_seeds=3, problem={"tall_height": 3.0})
        checked = 0
        for tr in run_experiment(cfg, write=False).traces:
            for t, pid in tr.eliminations():
                rows = [r for r in tr.records if r.prior == pid and r.t <= t]
                eta = sum(r.eta for r in rows)
                bound = np.sqrt(tr.records[t - 1].xi * len(rows)) + sum(r.beta * r.sigma for r in rows)
                assert abs(eta) > bound
                assert tr.records[t - 1].threshold == pytest.approx(bound, rel=1e-12)
                checked += 1
        assert checked > 0

    def test_eliminated_prior_never_selected_again(self, traces):
        for tr in (t for t in traces if t.algorithm == "pe-gp-ucb"):
            for t, pid in tr.eliminations():
                later = [r for r in tr.records[t:] if r.prior == pid]
                recovered = any(r.recovered for r in tr.records)
                assert not later or recovered

    def test_csv_round_trip(self, traces, tmp_path):
        cfg = ExperimentConfig(**SMALL)
        path = write_trace(traces[0], tmp_path, cfg)
        back = read_trace(path)
        assert back == traces[0]
        meta = json.loads(path.with_suffix(".json").read_text())
        assert meta["config_hash"] == cfg.digest()
        assert meta["version"]


class TestCli:
    def test_run_aggregate_emit(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["run", "--experiment", "toy", "--algorithms", "random,mle", "--num-seeds", "2", "--horizon", "5", "--out", str(out)])
        assert code == 0
        assert (out / "report.json").exists()
        assert main(["aggregate", "--traces", str(out), "--out", str(tmp_path / "r.json")]) == 0
        assert main(["emit", "--report", str(tmp_path / "r.json"), "--format", "csv", "--out", str(tmp_path / "csv")]) == 0
        assert (tmp_path / "csv" / "regret.csv").read_text().startswith("algorithm,t,mean_cum_regret,stderr\n")
        assert main(["emit", "--report", str(tmp_path / "r.json"), "--format", "svg", "--out", str(tmp_path / "svg")]) == 0
        assert (tmp_path / "svg" / "regret.svg").read_text().lstrip().startswith("<?xml")

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(ExperimentConfig(algorithms=["random"], horizon=3, num_seeds=5).dumps())
        assert main(["run", "--config", str(cfg), "--num-seeds", "1", "--out", str(tmp_path / "o")]) == 0
        assert len(list((tmp_path / "o").glob("trace_*.csv"))) == 1

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PEGPUCB_OUTPUT", str(tmp_path / "env"))
        assert main(["run", "--algorithms", "random", "--num-seeds", "1", "--horizon", "2"]) == 0
        assert list((tmp_path / "env").glob("trace_random_seed0.csv"))

    def test_config_error_exit_code(self, tmp_path):
        assert main(["run", "--algorithms", "bogus", "--out", str(tmp_path)]) == 1
        assert main(["aggregate", "--traces", str(tmp_path / "empty")]) == 1

    def test_cell_failure_exit_code(self, extra_problems, tmp_path):
        assert main(["run", "--experiment", "flaky", "--algorithms", "random", "--num-seeds", "2", "--horizon", "2", "--out", str(tmp_path)]) == 2
        assert len(list(tmp_path.glob("trace_*.csv"))) == 1

    def test_io_error_exit_code(self, tmp_path):
        assert main(["emit", "--report", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3

    def test_ingest(self, tmp_path):
        from pathlib import Path

        fixture = Path(__file__).parent / "data" / "intel_fixture.txt"
        out = tmp_path / "day.csv"
        assert main(["ingest-intel", "--data", str(fixture), "--day", "2004-03-01", "--interval", "360", "--out", str(out)]) == 0
        assert out.read_text().splitlines()[1] == "0,21.0,27.25"
