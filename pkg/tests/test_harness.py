import numpy as np
import pytest

from kbtransformer import harness
from kbtransformer.control import success_rate
from kbtransformer.harness import (
    CSV_COLUMNS,
    SCHEMA,
    ConfigError,
    ExperimentConfig,
    MetricsRow,
    SampleBreakdown,
    SampleBuffer,
    SchemaError,
    converged_variance,
    dump_config,
    load_pretrained,
    main,
    max_drop,
    model_policy,
    moving_average,
    no_forgetting,
    parse_config,
    read_metrics_csv,
    run_baseline,
    run_proposed,
    run_trials,
    run_uq,
    series,
    time_slope,
    worker_count,
    write_metrics_csv,
)
from kbtransformer.moments import NumericalBreakdown


def _write_config(path, config: ExperimentConfig):
    path.write_text(dump_config(config))
    return str(path)


# ---------------------------------------------------------------- config


def test_parse_config_values_and_comments():
    c = parse_config("""
        # a comment
        seed = 7
        memory_capacities = 10, 25   # trailing comment
        timing = false
        input_var = 1e-6
        measurement_mode = assign
    """)
    assert c.seed == 7 and c.memory_capacities == (10, 25) and c.timing is False
    assert c.input_var == 1e-6 and c.measurement_mode == "assign"
    assert c.n_samples == 400 and c.trials == 10 and c.baseline_epochs == 100
    assert c.sigma_data == (0.0, 10.0, 20.0, 50.0) and c.eval_every == 20


@pytest.mark.parametrize("text", ["bogus = 1", "seed = 1\nseed = 2", "seed", "seed = x", "timing = maybe",
                                  "n_samples = 0", "memory_capacities = 0, 10", "uq_noise = both",
                                  "cross_cov = banded", "sampler_low = 1, 1, 1, 1"])
def test_parse_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_error_names_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("seed = 1\nnope = 2", source="c.cfg")


def test_dump_parse_round_trip():
    c = ExperimentConfig(seed=3, memory_capacities=(5, 7), input_var=1e-4, timing=False, checkpoint="m.ckpt",
                         lqr_q_diag=(1, 2, 3, 4))
    assert parse_config(dump_config(c)) == c
    assert parse_config(dump_config(ExperimentConfig())) == ExperimentConfig()


def test_config_builds_control_objects():
    c = ExperimentConfig(success_steps=100, lqr_r=1.0)
    assert c.criterion.n_steps == 100
    assert c.lqr(c.nominal).K.shape == (1, 4)
    assert c.head_config().widths == (32, 17) and c.model_config().d_world == 17
    a, b = c.rng(1, 2).random(3), c.rng(1, 2).random(3)
    assert np.array_equal(a, b) and not np.array_equal(a, c.rng(1, 3).random(3))


def test_worker_count(monkeypatch):
    monkeypatch.delenv(harness.WORKERS_ENV, raising=False)
    assert worker_count() == 1
    monkeypatch.setenv(harness.WORKERS_ENV, "3")
    assert worker_count() == 3
    for bad in ("0", "two"):
        monkeypatch.setenv(harness.WORKERS_ENV, bad)
        with pytest.raises(ConfigError):
            worker_count()


# ---------------------------------------------------------------- CSV


def test_csv_round_trip(tmp_path):
    rows = [MetricsRow("proposed", 0, 0, 0.5, None, None, 0.01),
            MetricsRow("uq-ma", 2, 700, None, 1.5e-3, 0.123456789012345, 50.0)]
    path = tmp_path / "m.csv"
    assert write_metrics_csv(path, rows) == 2
    text = path.read_text().splitlines()
    assert text[0] == ",".join(CSV_COLUMNS) and text[1].startswith(SCHEMA + ",proposed,0,0,0.5,,,")
    back = read_metrics_csv(path)
    assert back[0] == rows[0]
    assert back[1].mean_pred_variance == pytest.approx(rows[1].mean_pred_variance, rel=1e-11)


@pytest.mark.parametrize("content", ["a,b\n", "",
                                     ",".join(CSV_COLUMNS) + "\nkbt-metrics-v0,p,0,0,,,,\n",
                                     ",".join(CSV_COLUMNS) + f"\n{SCHEMA},p,0,0,1.5,,,\n",
                                     ",".join(CSV_COLUMNS) + f"\n{SCHEMA},p,0\n"])
def test_csv_schema_errors(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(SchemaError):
        read_metrics_csv(path)


def test_metrics_row_invariants():
    for kw in (dict(success_rate=1.2), dict(time_per_sample_s=-1.0), dict(samples_seen=-1)):
        args = dict(method="m", trial=0, samples_seen=0) | kw
        with pytest.raises(ValueError):
            MetricsRow(**args)


# ---------------------------------------------------------------- small helpers


def test_moving_average_against_convolution():
    x = np.random.default_rng(0).normal(size=1500)
    ma = moving_average(x, 500)
    assert len(ma) == len(x) - 499
    assert np.allclose(ma, np.convolve(x, np.ones(500) / 500, mode="valid"), atol=1e-12)
    assert len(moving_average(x[:10], 500)) == 0
    with pytest.raises(ValueError):
        moving_average(x, 0)


def test_sample_buffer():
    b = SampleBuffer(2)
    b.push(1)
    assert not b.full()
    b.push(2)
    assert b.full() and len(b) == 2
    with pytest.raises(OverflowError):
        b.push(3)
    b.clear()
    assert len(b) == 0 and b.max_held == 2
    with pytest.raises(ValueError):
        SampleBuffer(0)


def test_trend_helpers():
    assert no_forgetting([0.0, 0.3, 0.6, 0.55, 0.7])
    assert not no_forgetting([0.0, 0.6, 0.45])
    assert no_forgetting([0.4, 0.2, 0.6])  # drops before first exceeding 0.5 do not count
    assert max_drop([0.2, 0.5, 0.3, 0.25]) == pytest.approx(0.2)
    slope, mean = time_slope([20, 40, 60], [1.0, 1.0, 1.0])
    assert abs(slope) < 1e-12 and mean == 1.0


def test_load_pretrained_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pretrained(ExperimentConfig())
    with pytest.raises(FileNotFoundError):
        load_pretrained(ExperimentConfig(checkpoint=str(tmp_path / "none.ckpt")))


# ---------------------------------------------------------------- experiment bookkeeping


class CountingBuffer(SampleBuffer):
    """Counts how often a full buffer is emptied (one retraining each)."""

    def __init__(self, capacity):
        super().__init__(capacity)
        self.flushes = 0

    def clear(self):
        self.flushes += self.full()
        super().clear()


def test_proposed_rows_and_memory(tiny_config):
    model = load_pretrained(tiny_config)
    buf = CountingBuffer(1)
    rows = list(run_proposed(tiny_config, model, buffer=buf))
    assert [r.samples_seen for r in rows] == [0, 20, 40]
    assert len(rows) == tiny_config.n_samples // tiny_config.eval_every + 1
    assert buf.max_held == 1 and buf.flushes == tiny_config.n_samples
    assert all(r.method == "proposed" and r.sigma_data == tiny_config.finetune_sigma_data for r in rows)
    # the untouched head is the pretrained output layer, so the first row is the plain model's rate
    tk = tiny_config.tokenizer
    assert rows[0].success_rate == success_rate(tiny_config.shifted, model_policy(model, tk),
                                                tiny_config.criterion, batched=True)


def test_proposed_last_row_when_cadence_does_not_divide(tiny_config):
    rows = list(run_proposed(tiny_config.replace(n_samples=25), load_pretrained(tiny_config)))
    assert [r.samples_seen for r in rows] == [0, 20, 25]


@pytest.mark.parametrize("capacity,flushes", [(10, 40), (400, 1), (25, 16), (300, 1)])
def test_baseline_retraining_count_and_memory(tiny_config, capacity, flushes):
    config = tiny_config.replace(n_samples=400, baseline_epochs=1, eval_every=200)
    buf = CountingBuffer(capacity)
    rows = list(run_baseline(config, capacity, load_pretrained(config), buffer=buf))
    assert buf.flushes == flushes
    assert buf.max_held == min(capacity, 400)
    assert [r.samples_seen for r in rows] == [0, 200, 400]
    assert rows[0].method == f"baseline-c{capacity}"


def test_baseline_rejects_bad_capacity(tiny_config):
    with pytest.raises(ValueError):
        list(run_baseline(tiny_config, 0))


def test_runs_are_deterministic(tiny_config):
    model = load_pretrained(tiny_config)
    assert list(run_proposed(tiny_config, model, trial=1)) == list(run_proposed(tiny_config, model, trial=1))
    assert list(run_baseline(tiny_config, 10, model)) == list(run_baseline(tiny_config, 10, model))


def test_parallel_trials_match_serial(tiny_config):
    config = tiny_config.replace(n_samples=20)
    assert run_trials(config, "proposed", workers=2) == run_trials(config, "proposed", workers=1)


def test_breakdown_reports_sample_index(tiny_config, monkeypatch):
    real = harness.sequential_update
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 4:
            raise NumericalBreakdown("forced")
        return real(*a, **k)

    monkeypatch.setattr(harness, "sequential_update", flaky)
    with pytest.raises(SampleBreakdown) as err:
        list(run_proposed(tiny_config, load_pretrained(tiny_config)))
    assert err.value.sample_index == 3 and "sample 3" in str(err.value)


def test_baseline_time_grows_with_epochs(tiny_config):
    # the cost model: retraining work scales with the epoch count
    model = load_pretrained(tiny_config)
    config = tiny_config.replace(n_samples=100, eval_every=100, timing=True)

    def mean_time(epochs):
        rows = list(run_baseline(config.replace(baseline_epochs=epochs), 25, model))
        return np.mean([r.time_per_sample_s for r in rows if r.samples_seen > 0])

    assert mean_time(100) > 3 * mean_time(10)


def test_no_shift_control_keeps_success(pretrained_config):
    config = pretrained_config.replace(trials=1)
    rows = list(run_proposed(config, load_pretrained(config), params=config.nominal))
    rates = [r.success_rate for r in rows]
    assert len(rates) == 21
    assert max(abs(r - rates[0]) for r in rates) <= 0.1


# ---------------------------------------------------------------- UQ


@pytest.mark.parametrize("noise", ["target", "action"])
def test_uq_rows(tiny_config, noise):
    config = tiny_config.replace(uq_iterations=30, uq_window=10, sigma_data=(0.0, 10.0), uq_noise=noise,
                                 uq_probes=4)
    rows = list(run_uq(config, load_pretrained(config)))
    for s in (0.0, 10.0):
        raw = [r for r in rows if r.method == "uq-raw" and r.sigma_data == s]
        ma = [r for r in rows if r.method == "uq-ma" and r.sigma_data == s]
        assert [r.samples_seen for r in raw] == list(range(1, 31))
        assert len(ma) == len(raw) - 9 and ma[0].samples_seen == 10
        assert np.isclose(ma[-1].mean_pred_variance, np.mean([r.mean_pred_variance for r in raw[-10:]]))
        assert all(r.mean_pred_variance >= 0 for r in raw)
    conv = converged_variance(rows)
    assert set(conv) == {0.0, 10.0}
    # noiseless data shrinks the predicted variance below its starting value
    raw0 = [r.mean_pred_variance for r in series(rows, "uq-raw", 0) if r.sigma_data == 0.0]
    assert raw0[-1] < raw0[0]


def test_uq_window_restricts_rows(tiny_config):
    config = tiny_config.replace(uq_iterations=20, uq_window=5, uq_window_start=10, uq_window_end=18,
                                 sigma_data=(0.0,), uq_probes=2)
    raw = [r for r in run_uq(config, load_pretrained(config)) if r.method == "uq-raw"]
    assert [r.samples_seen for r in raw] == list(range(10, 19))


# ---------------------------------------------------------------- CLI


def test_cli_missing_config(tmp_path, capsys):
    path = tmp_path / "nope.cfg"
    assert main(["finetune", "--config", str(path)]) == 2
    assert str(path) in capsys.readouterr().err


def test_cli_schema_error(tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text("n_samples = 5\nfrobnicate = 1\n")
    assert main(["finetune", "--config", str(path)]) == 3
    assert "frobnicate" in capsys.readouterr().err


def test_cli_checkpoint_errors(tmp_path, capsys):
    assert main(["finetune", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 4
    bad = tmp_path / "bad.ckpt"
    bad.write_text("garbage\n")
    assert main(["evaluate", "--checkpoint", str(bad)]) == 4
    assert "checkpoint" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["finetune", "--bogus"], ["finetune", "--seed", "x"]])
def test_cli_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 64
    assert "error" in capsys.readouterr().err


def test_cli_numerical_breakdown_exit_code(tiny_config, tmp_path, monkeypatch):
    def broken(*a, **k):
        raise NumericalBreakdown("forced")

    monkeypatch.setattr(harness, "sequential_update", broken)
    cfg = _write_config(tmp_path / "c.cfg", tiny_config)
    assert main(["finetune", "--config", cfg]) == 5


def test_cli_finetune_is_byte_identical(tiny_config, tmp_path):
    cfg = _write_config(tmp_path / "c.cfg", tiny_config.replace(n_samples=20))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["finetune", "--config", cfg, "--seed", "7", "--out", str(a)]) == 0
    assert main(["finetune", "--config", cfg, "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_metrics_csv(a)
    assert len(rows) == 2 * 2 and {r.trial for r in rows} == {0, 1}


def test_cli_baseline_capacities(tiny_config, tmp_path):
    cfg = _write_config(tmp_path / "c.cfg", tiny_config.replace(n_samples=20, baseline_epochs=2, trials=1))
    out = tmp_path / "b.csv"
    assert main(["baseline", "--config", cfg, "--capacity", "5", "--capacity", "10", "--out", str(out)]) == 0
    assert {r.method for r in read_metrics_csv(out)} == {"baseline-c5", "baseline-c10"}


def test_cli_uq_and_evaluate(tiny_config, tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.cfg", tiny_config.replace(uq_iterations=12, uq_window=5, trials=1,
                                                                sigma_data=(0.0, 20.0), uq_probes=2))
    out = tmp_path / "u.csv"
    assert main(["uq", "--config", cfg, "--out", str(out)]) == 0
    rows = read_metrics_csv(out)
    assert sum(r.method == "uq-raw" for r in rows) == 24 and sum(r.method == "uq-ma" for r in rows) == 16
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", tiny_config.checkpoint]) == 0
    printed = capsys.readouterr().out
    assert "nominal success_rate" in printed and "shifted success_rate" in printed


def test_cli_pretrain_writes_checkpoint(tmp_path, capsys):
    ckpt = tmp_path / "p.ckpt"
    cfg = _write_config(tmp_path / "c.cfg", ExperimentConfig(pretrain_samples=64, pretrain_epochs=1,
                                                             checkpoint=str(ckpt), timing=False))
    out = tmp_path / "p.csv"
    assert main(["pretrain", "--config", cfg, "--out", str(out)]) == 0
    assert ckpt.is_file() and "saved" in capsys.readouterr().out
    assert [r.method for r in read_metrics_csv(out)] == ["pretrained-nominal", "pretrained-shifted"]
