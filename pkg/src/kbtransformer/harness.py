"""Experiment orchestration and command-line interface.

Runs pretraining, sequential Bayesian fine-tuning, the bounded-memory
gradient retraining baseline and the uncertainty study, and writes one CSV
row per (trial, evaluation point) in a fixed, versioned schema.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import checkpoint
from .bayes_head import (
    HeadConfig,
    WeightState,
    deterministic_forward,
    deterministic_loss_and_grads,
    init_head,
    mean_predicted_variance,
    predict_mean,
)
from .control import (
    LqrGain,
    PendulumParams,
    StateSampler,
    SuccessCriterion,
    design_lqr,
    generate_samples,
    success_rate,
)
from .moments import NumericalBreakdown
from .seqmodel import (
    SOS,
    ModelConfig,
    Tokenizer,
    TransformerModel,
    preprocess_pair,
    pretrain,
    token_accuracy,
)
from .smoother import sequential_update

logger = logging.getLogger(__name__)

SCHEMA = "kbt-metrics-v1"
CSV_COLUMNS = ["schema", "method", "trial", "samples_seen", "success_rate",
               "time_per_sample_s", "mean_pred_variance", "sigma_data"]
WORKERS_ENV = "KBT_WORKERS"

# RNG stream ids, combined with (seed, trial) through SeedSequence
_STREAM_PRETRAIN_DATA, _STREAM_PRETRAIN_INIT, _STREAM_FINETUNE, _STREAM_UQ, _STREAM_HELDOUT = range(5)


class ConfigError(ValueError):
    """Config file content does not match the schema."""


class SchemaError(ValueError):
    """A metrics CSV does not match the expected schema."""


class SampleBreakdown(NumericalBreakdown):
    """Numerical breakdown during an update, tagged with the sample that caused it."""

    def __init__(self, sample_index: int, cause: NumericalBreakdown):
        super().__init__(f"sample {sample_index}: {cause}", getattr(cause, "layer", None))
        self.sample_index = sample_index


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of an experiment; file keys map one-to-one onto these fields."""

    seed: int = 0
    n_samples: int = 400
    trials: int = 10
    eval_every: int = 20
    memory_capacities: tuple = (10, 20, 25, 50, 75, 100)
    baseline_epochs: int = 100
    baseline_step_size: float = 0.1
    sigma_data: tuple = (0.0, 10.0, 20.0, 50.0)
    # proposed method
    finetune_sigma_data: float = 0.01
    measurement_mode: str = "kalman"
    cross_cov: str = "full"
    epsilon: float = 0.1
    input_var: float | None = None
    hidden_widths: tuple = (32,)
    # plants
    nominal_m_c: float = 1.0
    nominal_m_p: float = 0.1
    nominal_l_p: float = 0.5
    shifted_m_c: float = 1.0
    shifted_m_p: float = 1.0
    shifted_l_p: float = 5.0
    dt: float = 0.02
    # LQR weights, i.i.d. state sampler, success criterion
    lqr_q_diag: tuple = (1.0, 1.0, 10.0, 1.0)
    lqr_r: float = 0.1
    sampler_low: tuple = (-1.0, -1.0, -0.2, -1.0)
    sampler_high: tuple = (1.0, 1.0, 0.2, 1.0)
    success_steps: int = 500
    theta_limit: float = 0.5
    x_limit: float = 5.0
    theta_final: float = 0.05
    # tokenizer
    n_bins: int = 16
    u_max: float = 10.0
    # pretraining
    pretrain_samples: int = 8000
    pretrain_epochs: int = 200
    pretrain_step_size: float = 1e-2
    pretrain_batch_size: int = 32
    # uncertainty study
    uq_iterations: int = 1500
    uq_window: int = 500
    uq_window_start: int = 0
    uq_window_end: int = 0
    uq_probes: int = 32
    uq_probe_seed: int = 12345
    uq_noise: str = "target"
    # io
    checkpoint: str = ""
    timing: bool = True

    def __post_init__(self):
        for name in ("memory_capacities", "hidden_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("sigma_data", "lqr_q_diag", "sampler_low", "sampler_high"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.n_samples >= 1, "n_samples must be >= 1")
        need(self.trials >= 1, "trials must be >= 1")
        need(self.eval_every >= 1, "eval_every must be >= 1")
        need(len(self.memory_capacities) > 0 and min(self.memory_capacities) >= 1, "capacities must be >= 1")
        need(self.baseline_epochs >= 0, "baseline_epochs must be >= 0")
        need(self.baseline_step_size >= 0, "baseline_step_size must be >= 0")
        need(all(s >= 0 for s in self.sigma_data), "sigma_data entries must be >= 0")
        need(self.finetune_sigma_data >= 0, "finetune_sigma_data must be >= 0")
        need(self.measurement_mode in ("kalman", "assign"), "measurement_mode must be kalman or assign")
        need(self.cross_cov in ("diagonal", "full"), "cross_cov must be diagonal or full")
        need(self.epsilon > 0, "epsilon must be positive")
        need(self.input_var is None or self.input_var >= 0, "input_var must be >= 0")
        need(all(w >= 2 * ModelConfig().d for w in self.hidden_widths) and len(self.hidden_widths) >= 1,
             f"hidden widths must be >= {2 * ModelConfig().d}")
        for pre in ("nominal", "shifted"):
            for k in ("m_c", "m_p", "l_p"):
                need(getattr(self, f"{pre}_{k}") > 0, f"{pre}_{k} must be positive")
        need(self.dt > 0, "dt must be positive")
        need(len(self.lqr_q_diag) == 4 and min(self.lqr_q_diag) >= 0 and self.lqr_r > 0,
             "lqr_q_diag needs 4 entries >= 0 and lqr_r must be positive")
        need(len(self.sampler_low) == 4 and len(self.sampler_high) == 4
             and all(lo <= hi for lo, hi in zip(self.sampler_low, self.sampler_high)),
             "sampler bounds need 4 entries each with low <= high")
        need(self.success_steps >= 1 and min(self.theta_limit, self.x_limit, self.theta_final) > 0,
             "success thresholds must be positive")
        need(self.n_bins >= 2 and self.u_max > 0, "tokenizer needs n_bins >= 2 and u_max > 0")
        need(self.pretrain_samples >= 1 and self.pretrain_epochs >= 0, "bad pretraining size")
        need(self.pretrain_step_size >= 0 and self.pretrain_batch_size >= 1, "bad pretraining step")
        need(self.uq_iterations >= 1 and self.uq_window >= 1 and self.uq_probes >= 1, "bad uq sizes")
        need(self.uq_noise in ("target", "action"), "uq_noise must be target or action")
        need(0 <= self.uq_window_start and (self.uq_window_end == 0 or self.uq_window_end > self.uq_window_start),
             "uq window must satisfy 0 <= start < end")

    # -- derived objects ----------------------------------------------------

    @property
    def nominal(self) -> PendulumParams:
        return PendulumParams(m_c=self.nominal_m_c, m_p=self.nominal_m_p, l_p=self.nominal_l_p, dt=self.dt)

    @property
    def shifted(self) -> PendulumParams:
        return PendulumParams(m_c=self.shifted_m_c, m_p=self.shifted_m_p, l_p=self.shifted_l_p, dt=self.dt)

    @property
    def sampler(self) -> StateSampler:
        return StateSampler(low=self.sampler_low, high=self.sampler_high)

    @property
    def criterion(self) -> SuccessCriterion:
        return SuccessCriterion(n_steps=self.success_steps, theta_limit=self.theta_limit, x_limit=self.x_limit,
                                theta_final=self.theta_final)

    def lqr(self, params: PendulumParams) -> LqrGain:
        return design_lqr(params, np.diag(self.lqr_q_diag), np.array([[self.lqr_r]]))

    @property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(n_bins=self.n_bins, u_max=self.u_max)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_world=self.n_bins + 1)

    def head_config(self) -> HeadConfig:
        return HeadConfig(d=ModelConfig().d, widths=self.hidden_widths + (self.n_bins + 1,), epsilon=self.epsilon,
                          input_var=self.input_var)

    def rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, *stream]))

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(raw: str, default):
    if default is None:
        # optional floats; empty or "none" keeps the default
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment, lists are comma-separated."""
    defaults = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(raw, getattr(defaults, key))
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    """Read a config file; I/O problems surface as ``OSError``, content problems as ``ConfigError``."""
    text = Path(path).read_text()
    return parse_config(text, source=str(path))


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if v is None:
            v = "none"
        elif isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# metrics rows and CSV
# --------------------------------------------------------------------------


@dataclass
class MetricsRow:
    """One evaluation point. Optional quantities are ``None`` where not measured."""

    method: str
    trial: int
    samples_seen: int
    success_rate: float | None = None
    time_per_sample_s: float | None = None
    mean_pred_variance: float | None = None
    sigma_data: float | None = None

    def __post_init__(self):
        if self.success_rate is not None and not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success_rate {self.success_rate} outside [0, 1]")
        if self.time_per_sample_s is not None and self.time_per_sample_s < 0:
            raise ValueError("time_per_sample_s must be >= 0")
        if self.samples_seen < 0:
            raise ValueError("samples_seen must be >= 0")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_metrics_csv(path, rows: Iterable[MetricsRow]) -> int:
    """Write rows under the versioned header; returns the row count."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([SCHEMA, r.method, r.trial, r.samples_seen, _fmt(r.success_rate),
                        _fmt(r.time_per_sample_s), _fmt(r.mean_pred_variance), _fmt(r.sigma_data)])
            n += 1
    return n


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise SchemaError(f"{path}: header {header} does not match {CSV_COLUMNS}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != len(CSV_COLUMNS) or rec[0] != SCHEMA:
                raise SchemaError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields tagged {SCHEMA}")

            def opt(s):
                return float(s) if s != "" else None

            try:
                rows.append(MetricsRow(rec[1], int(rec[2]), int(rec[3]), opt(rec[4]), opt(rec[5]),
                                       opt(rec[6]), opt(rec[7])))
            except ValueError as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from None
    return rows


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------


class SampleBuffer:
    """FIFO store of raw (state, action token) pairs that records its peak occupancy."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items = []
        self.max_held = 0

    def push(self, item) -> None:
        if len(self.items) >= self.capacity:
            raise OverflowError("buffer is full")
        self.items.append(item)
        self.max_held = max(self.max_held, len(self.items))

    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def clear(self) -> None:
        self.items = []

    def __len__(self):
        return len(self.items)


def pretrain_model(config: ExperimentConfig):
    """Fit a fresh transformer to nominal LQR data. Returns ``(model, losses)``."""
    tk = config.tokenizer
    data = generate_samples(config.lqr(config.nominal), config.pretrain_samples, state_sampler=config.sampler,
                            rng=config.rng(_STREAM_PRETRAIN_DATA))
    model = TransformerModel(config.model_config(), rng=config.rng(_STREAM_PRETRAIN_INIT))
    return pretrain(model, data.states, tk.tokenize(data.actions), epochs=config.pretrain_epochs,
                    step_size=config.pretrain_step_size, batch_size=config.pretrain_batch_size,
                    optimizer="sgd", rng=config.rng(_STREAM_PRETRAIN_DATA, 1))


def load_pretrained(config: ExperimentConfig, path=None) -> TransformerModel:
    path = path or config.checkpoint
    if not path:
        raise FileNotFoundError("no checkpoint given (set 'checkpoint' in the config or pass --checkpoint)")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return TransformerModel.load(path)


def _features(model: TransformerModel, states) -> np.ndarray:
    states = np.atleast_2d(states)
    return model.t1_batch(states, np.full((len(states), 1), SOS))[:, 0]


def _decode(tk: Tokenizer, probs: np.ndarray) -> np.ndarray:
    # argmax over action tokens only; SOS is never an action
    return tk.detokenize(np.asarray(probs)[:, 1:].argmax(axis=1) + 1)


def model_policy(model: TransformerModel, tk: Tokenizer):
    """Batched policy of the plain pretrained transformer."""
    def policy(xs):
        return _decode(tk, model.probs(xs, np.full((len(xs), 1), SOS))[:, 0])
    return policy


def bayes_policy(model: TransformerModel, weights: WeightState, head: HeadConfig, tk: Tokenizer):
    """Batched policy decoding the Bayesian head's predictive mean."""
    def policy(xs):
        return _decode(tk, predict_mean(weights, _features(model, xs), head))
    return policy


def mean_head_policy(model: TransformerModel, weights: WeightState, head: HeadConfig, tk: Tokenizer):
    """Batched policy of the head evaluated at its weight means."""
    def policy(xs):
        return _decode(tk, deterministic_forward(weights, _features(model, xs), head))
    return policy


def evaluate_model(config: ExperimentConfig, model: TransformerModel, n_heldout: int = 2000) -> dict:
    """Held-out nominal token accuracy and success rates on both plants."""
    tk = config.tokenizer
    held = generate_samples(config.lqr(config.nominal), n_heldout, state_sampler=config.sampler,
                            rng=config.rng(_STREAM_HELDOUT))
    pol = model_policy(model, tk)
    return {
        "token_accuracy": token_accuracy(model, held.states, tk.tokenize(held.actions)),
        "nominal_success": success_rate(config.nominal, pol, config.criterion, batched=True),
        "shifted_success": success_rate(config.shifted, pol, config.criterion, batched=True),
    }


def _shifted_stream(config: ExperimentConfig, trial: int, n: int, noise_var: float = 0.0, stream=_STREAM_FINETUNE,
                    extra: int = 0):
    data = generate_samples(config.lqr(config.shifted), n, state_sampler=config.sampler,
                            rng=config.rng(stream, trial, extra), action_noise_var=noise_var)
    return data.states, config.tokenizer.tokenize(data.actions)


def _eval_points(config: ExperimentConfig) -> set:
    pts = set(range(config.eval_every, config.n_samples + 1, config.eval_every))
    pts.add(config.n_samples)
    return pts


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def run_proposed(config: ExperimentConfig, model: TransformerModel | None = None, trial: int = 0,
                 params: PendulumParams | None = None, buffer: SampleBuffer | None = None) -> Iterator[MetricsRow]:
    """Sequential Bayesian fine-tuning on a stream of shifted-plant samples.

    Each sample is preprocessed, absorbed by one ``sequential_update`` and
    dropped. Rows are emitted at samples_seen = 0 and every ``eval_every``
    samples; ``time_per_sample_s`` averages the update time since the last row.
    ``params`` overrides the plant used for data and evaluation.
    """
    model = model if model is not None else load_pretrained(config)
    tk, head = config.tokenizer, config.head_config()
    plant = params or config.shifted
    data = generate_samples(config.lqr(plant), config.n_samples, state_sampler=config.sampler,
                            rng=config.rng(_STREAM_FINETUNE, trial))
    tokens = tk.tokenize(data.actions)
    weights = init_head(head, model.W_O)
    buffer = buffer if buffer is not None else SampleBuffer(1)
    method = "proposed"

    def rate():
        return success_rate(plant, bayes_policy(model, weights, head, tk), config.criterion, batched=True)

    yield MetricsRow(method, trial, 0, rate(), None, None, config.finetune_sigma_data)
    points, spent, since = _eval_points(config), 0.0, 0
    for k in range(config.n_samples):
        t0 = time.perf_counter()
        buffer.push((data.states[k], tokens[k]))
        x, tok = buffer.items[0]
        batch = preprocess_pair(model, x, [SOS, tok])
        try:
            weights = sequential_update(weights, batch.H_hat, batch.Y_hat, head,
                                        sigma_data=config.finetune_sigma_data, mode=config.measurement_mode,
                                        cross_cov=config.cross_cov)
        except NumericalBreakdown as e:
            raise SampleBreakdown(k, e) from e
        buffer.clear()
        spent += time.perf_counter() - t0
        since += 1
        if k + 1 in points:
            yield MetricsRow(method, trial, k + 1, rate(), spent / since if config.timing else None,
                             None, config.finetune_sigma_data)
            spent, since = 0.0, 0


def retrain_head(weights: WeightState, H, targets, head: HeadConfig, epochs: int, step_size: float) -> WeightState:
    """Full-batch gradient descent on the head's weight means, starting from ``weights``."""
    out = weights.copy()
    for _ in range(epochs):
        _, grads = deterministic_loss_and_grads(out, H, targets, head)
        for m, g in zip(out.means, grads):
            m -= step_size * g
    return out


def run_baseline(config: ExperimentConfig, capacity: int, model: TransformerModel | None = None, trial: int = 0,
                 buffer: SampleBuffer | None = None) -> Iterator[MetricsRow]:
    """Warm-started gradient retraining of the head with a bounded FIFO memory.

    Samples accumulate in a buffer of ``capacity`` raw pairs; when it fills,
    the head is retrained for ``baseline_epochs`` epochs on the buffer and the
    buffer is emptied. Same data stream and cadence as :func:`run_proposed`.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    model = model if model is not None else load_pretrained(config)
    tk, head = config.tokenizer, config.head_config()
    plant = config.shifted
    data = generate_samples(config.lqr(plant), config.n_samples, state_sampler=config.sampler,
                            rng=config.rng(_STREAM_FINETUNE, trial))
    tokens = tk.tokenize(data.actions)
    weights = init_head(head, model.W_O)
    buffer = buffer if buffer is not None else SampleBuffer(capacity)
    method = f"baseline-c{capacity}"
    retrainings = 0

    def rate():
        return success_rate(plant, mean_head_policy(model, weights, head, tk), config.criterion, batched=True)

    yield MetricsRow(method, trial, 0, rate(), None, None, None)
    points, spent, since = _eval_points(config), 0.0, 0
    for k in range(config.n_samples):
        t0 = time.perf_counter()
        buffer.push((data.states[k], tokens[k]))
        if buffer.full():
            X = np.array([s for s, _ in buffer.items])
            T = np.array([t for _, t in buffer.items])
            weights = retrain_head(weights, _features(model, X), T, head,
                                   config.baseline_epochs, config.baseline_step_size)
            buffer.clear()
            retrainings += 1
        spent += time.perf_counter() - t0
        since += 1
        if k + 1 in points:
            yield MetricsRow(method, trial, k + 1, rate(), spent / since if config.timing else None, None, None)
            spent, since = 0.0, 0
    logger.debug("%s trial %d: %d retrainings", method, trial, retrainings)


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over ``window`` points; output length ``len(x) - window + 1``."""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(x) < window:
        return np.empty(0)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def probe_states(config: ExperimentConfig) -> np.ndarray:
    return config.sampler(config.uq_probes, np.random.default_rng(config.uq_probe_seed))


def run_uq(config: ExperimentConfig, model: TransformerModel | None = None, trial: int = 0) -> Iterator[MetricsRow]:
    """Predicted-variance traces of the proposed method under noisy targets.

    For each sigma in ``config.sigma_data`` the update uses Sigma_data =
    sigma * I and the targets carry matching noise: with ``uq_noise="target"``
    Gaussian noise of covariance sigma * I is added to each one-hot target,
    with ``"action"`` the action gets noise of variance sigma before
    tokenization. Emits method ``uq-raw`` (one row per iteration inside the
    window) and ``uq-ma`` (its ``uq_window``-point moving average).
    """
    model = model if model is not None else load_pretrained(config)
    head = config.head_config()
    H_probe = _features(model, probe_states(config))
    start = config.uq_window_start
    end = config.uq_window_end or config.uq_iterations
    on_targets = config.uq_noise == "target"
    for j, sigma in enumerate(config.sigma_data):
        states, tokens = _shifted_stream(config, trial, config.uq_iterations, noise_var=0.0 if on_targets else sigma,
                                         stream=_STREAM_UQ, extra=j)
        noise = config.rng(_STREAM_UQ, trial, j, 1)
        weights = init_head(head, model.W_O)
        raw = []
        for k in range(config.uq_iterations):
            t0 = time.perf_counter()
            batch = preprocess_pair(model, states[k], [SOS, tokens[k]])
            Y = batch.Y_hat
            if on_targets and sigma > 0:
                Y = Y + np.sqrt(sigma) * noise.standard_normal(Y.shape)
            try:
                weights = sequential_update(weights, batch.H_hat, Y, head, sigma_data=sigma,
                                            mode=config.measurement_mode, cross_cov=config.cross_cov,
                                            one_hot=not on_targets)
            except NumericalBreakdown as e:
                raise SampleBreakdown(k, e) from e
            dt = time.perf_counter() - t0
            if start <= k + 1 <= end:
                raw.append((k + 1, mean_predicted_variance(weights, H_probe, head), dt))
        for it, v, dt in raw:
            yield MetricsRow("uq-raw", trial, it, None, dt if config.timing else None, v, sigma)
        ma = moving_average([v for _, v, _ in raw], config.uq_window)
        for (it, _, _), v in zip(raw[config.uq_window - 1:], ma):
            yield MetricsRow("uq-ma", trial, it, None, None, float(v), sigma)


def converged_variance(rows: Iterable[MetricsRow], trial: int | None = None) -> dict:
    """Last moving-average value per sigma (optionally for one trial)."""
    out = {}
    for r in rows:
        if r.method == "uq-ma" and (trial is None or r.trial == trial):
            out[r.sigma_data] = r.mean_pred_variance
    return out


# --------------------------------------------------------------------------
# parallel trials
# --------------------------------------------------------------------------


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def _trial_job(args):
    kind, config, trial, extra = args
    model = load_pretrained(config)
    if kind == "proposed":
        return list(run_proposed(config, model, trial))
    if kind == "baseline":
        return list(run_baseline(config, extra, model, trial))
    return list(run_uq(config, model, trial))


def run_trials(config: ExperimentConfig, kind: str, extras=(None,), workers: int | None = None) -> list[MetricsRow]:
    """Run every (extra, trial) job, in parallel when ``workers > 1``; rows come back in job order."""
    jobs = [(kind, config, t, e) for e in extras for t in range(config.trials)]
    workers = worker_count() if workers is None else workers
    if workers == 1:
        return [r for job in jobs for r in _trial_job(job)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return [r for rows in ex.map(_trial_job, jobs) for r in rows]


# --------------------------------------------------------------------------
# analysis helpers
# --------------------------------------------------------------------------


def series(rows: Iterable[MetricsRow], method: str, trial: int) -> list[MetricsRow]:
    return sorted((r for r in rows if r.method == method and r.trial == trial), key=lambda r: r.samples_seen)


def no_forgetting(rates, threshold: float = 0.5, max_drop: float = 0.1) -> bool:
    """True if, once the series first exceeds ``threshold``, no step drops by more than ``max_drop``."""
    armed = False
    for prev, cur in zip(rates, rates[1:]):
        armed = armed or prev > threshold
        if armed and prev - cur > max_drop + 1e-12:
            return False
    return True


def max_drop(rates) -> float:
    return max((a - b for a, b in zip(rates, rates[1:])), default=0.0)


def time_slope(samples_seen, times) -> tuple[float, float]:
    """Least-squares slope of per-sample time against sample index, and the mean time."""
    x = np.asarray(samples_seen, dtype=float)
    y = np.asarray(times, dtype=float)
    slope = np.polyfit(x, y, 1)[0] if len(x) > 1 else 0.0
    return float(slope), float(y.mean())


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG_IO = 2
EXIT_CONFIG_SCHEMA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERICAL = 5
EXIT_USAGE = 64


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    p = _ArgParser(prog="kbtransformer", description="Kalman Bayesian transformer experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgParser)
    for name, text in [("pretrain", "pretrain on nominal data and save a checkpoint"),
                       ("finetune", "sequential Bayesian fine-tuning on the shifted plant"),
                       ("baseline", "bounded-memory gradient retraining baseline"),
                       ("uq", "predicted-variance study under noisy targets"),
                       ("evaluate", "success rates of a checkpoint on both plants")]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", help="CSV output path")
        s.add_argument("--checkpoint", help="model checkpoint path (overrides the config)")
        if name == "baseline":
            s.add_argument("--capacity", type=int, action="append",
                           help="memory capacity; repeatable, defaults to the config list")
    return p


def _load_cli_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.checkpoint:
        over["checkpoint"] = args.checkpoint
    return config.replace(**over) if over else config


def _cmd_pretrain(config: ExperimentConfig, args) -> list[MetricsRow]:
    path = config.checkpoint or "pretrained.ckpt"
    t0 = time.perf_counter()
    model, losses = pretrain_model(config)
    elapsed = time.perf_counter() - t0
    model.save(path)
    ev = evaluate_model(config, model)
    print(f"saved {path}; final loss {losses[-1]:.4f}; held-out accuracy {ev['token_accuracy']:.3f}; "
          f"nominal success {ev['nominal_success']:.2f}; shifted success {ev['shifted_success']:.2f}")
    per = elapsed / config.pretrain_samples if config.timing else None
    return [MetricsRow("pretrained-nominal", 0, 0, ev["nominal_success"], per),
            MetricsRow("pretrained-shifted", 0, 0, ev["shifted_success"], per)]


def _cmd_evaluate(config: ExperimentConfig, args) -> list[MetricsRow]:
    model = load_pretrained(config)
    ev = evaluate_model(config, model)
    print(f"nominal success_rate {ev['nominal_success']:.3f}")
    print(f"shifted success_rate {ev['shifted_success']:.3f}")
    print(f"nominal token_accuracy {ev['token_accuracy']:.3f}")
    return [MetricsRow("evaluate-nominal", 0, 0, ev["nominal_success"]),
            MetricsRow("evaluate-shifted", 0, 0, ev["shifted_success"])]


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("KBT_LOGLEVEL", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = _load_cli_config(args)
    except OSError as e:
        print(f"error: cannot read config {args.config}: {e.strerror or e}", file=sys.stderr)
        return EXIT_CONFIG_IO
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG_SCHEMA
    try:
        if args.command == "pretrain":
            rows = _cmd_pretrain(config, args)
        elif args.command == "evaluate":
            rows = _cmd_evaluate(config, args)
        else:
            load_pretrained(config)  # fail fast before spawning work
            if args.command == "finetune":
                rows = run_trials(config, "proposed")
            elif args.command == "baseline":
                rows = run_trials(config, "baseline", extras=tuple(args.capacity or config.memory_capacities))
            else:
                rows = run_trials(config, "uq")
        if args.out:
            n = write_metrics_csv(args.out, rows)
            print(f"wrote {n} rows to {args.out}")
    except (FileNotFoundError, checkpoint.CheckpointError) as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG_SCHEMA
    except NumericalBreakdown as e:
        print(f"error: numerical breakdown: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
