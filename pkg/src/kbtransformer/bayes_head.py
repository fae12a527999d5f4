"""Bayesian MLP head that replaces the transformer's final linear layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .moments import (
    GaussianState,
    augment_bias,
    linear_forward_moments,
    relu_cov_matrix,
    relu_mean,
    relu_moments,
    repair_cov,
    softmax_blocks,
    softmax_moments,
)


@dataclass(frozen=True)
class HeadConfig:
    """Shape of the head.

    ``widths`` lists n_1..n_L; the last entry is the output dimension.
    ``epsilon`` is the initial weight variance and ``input_var`` the variance
    given to deterministic inputs (defaults to ``epsilon``).
    """

    d: int
    widths: tuple
    epsilon: float = 1e-12
    input_var: float | None = None
    output: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1:
            raise ValueError("need at least one layer")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.output not in ("softmax", "identity"):
            raise ValueError(f"unknown output {self.output!r}")

    @classmethod
    def default(cls, d: int, d_o: int, **kw) -> "HeadConfig":
        return cls(d=d, widths=(2 * d, d_o), **kw)

    @property
    def L(self) -> int:
        return len(self.widths)

    @property
    def d_o(self) -> int:
        return self.widths[-1]

    @property
    def in_widths(self) -> tuple:
        return (self.d,) + self.widths[:-1]

    @property
    def z0_var(self) -> float:
        return self.epsilon if self.input_var is None else self.input_var

    def weight_dim(self, i: int) -> int:
        """Length of layer ``i``'s (1-based) weight vector."""
        return self.widths[i - 1] * (self.in_widths[i - 1] + 1)

    def validate_for_init(self):
        if self.L < 2:
            raise ValueError("identity-preserving initialization needs L >= 2")
        for n in self.widths[:-1]:
            if n < 2 * self.d:
                raise ValueError(f"hidden width {n} < 2d = {2 * self.d}")


@dataclass
class WeightState:
    """Per-layer weight means and dense covariances (layer index 0 = first layer)."""

    means: list
    covs: list

    def __post_init__(self):
        if len(self.means) != len(self.covs):
            raise ValueError("means and covs must have the same layer count")
        for mu, S in zip(self.means, self.covs):
            if S.shape != (mu.size, mu.size):
                raise ValueError("covariance shape does not match weight vector")

    def layer(self, i: int) -> GaussianState:
        return GaussianState(self.means[i - 1], self.covs[i - 1])

    def copy(self) -> "WeightState":
        return WeightState([m.copy() for m in self.means], [c.copy() for c in self.covs])

    def matrix(self, i: int, config: HeadConfig) -> np.ndarray:
        """Mean weights of layer ``i`` as an (n_in+1, n_out) matrix, bias row last."""
        n = config.widths[i - 1]
        return self.means[i - 1].reshape(n, -1).T

    def save(self, path, config: HeadConfig) -> None:
        tensors = {}
        for i, (m, c) in enumerate(zip(self.means, self.covs), 1):
            tensors[f"layer{i}.mean"] = m
            tensors[f"layer{i}.cov"] = c
        meta = {"d": config.d, "widths": ",".join(map(str, config.widths)),
                "epsilon": repr(config.epsilon), "output": config.output}
        checkpoint.save(path, "weight-state", tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["WeightState", HeadConfig]:
        def required(meta):
            L = len(meta.get("widths", "").split(","))
            return [f"layer{i}.{k}" for i in range(1, L + 1) for k in ("mean", "cov")]

        tensors, meta = checkpoint.load(path, kind="weight-state", required=required)
        try:
            widths = tuple(int(w) for w in meta["widths"].split(","))
            config = HeadConfig(d=int(meta["d"]), widths=widths, epsilon=float(meta["epsilon"]),
                                output=meta.get("output", "softmax"))
        except (KeyError, ValueError) as e:
            raise checkpoint.CheckpointError(f"bad weight-state metadata: {e}") from None
        means = [tensors[f"layer{i}.mean"] for i in range(1, len(widths) + 1)]
        covs = [tensors[f"layer{i}.cov"] for i in range(1, len(widths) + 1)]
        return cls(means, covs), config


@dataclass
class LayerTrace:
    """Forward-pass moments kept for the backward pass.

    ``z[0]`` is the input; ``u[i-1]``/``z[i]`` belong to layer i. ``uz_cross_diag[i-1]``
    is the diagonal of Cov(u^i, z^i) for hidden layers and ``None`` for the output layer,
    whose cross-covariance is ``up_cross``.
    """

    z: list
    u: list
    uz_cross_diag: list
    up_cross: np.ndarray
    n_tokens: int
    widths: tuple

    @property
    def output(self) -> GaussianState:
        return self.z[-1]


def _stack_to_vector(M: np.ndarray) -> np.ndarray:
    """(n_in+1, n_out) weight matrix -> neuron-major weight vector."""
    return np.ascontiguousarray(M.T).reshape(-1)


def init_head(config: HeadConfig, W_O) -> WeightState:
    """Weights that make the head reproduce ``softmax([h, 1] @ W_O)``.

    Hidden layers carry a positive and a negative copy of the input through
    the ReLUs; each following layer recombines the pair and the last one
    applies ``W_O``. All weight covariances start at ``epsilon * I``.
    """
    config.validate_for_init()
    d, L = config.d, config.L
    W_O = np.asarray(W_O, dtype=float)
    if W_O.shape != (d + 1, config.d_o):
        raise ValueError(f"W_O has shape {W_O.shape}, expected {(d + 1, config.d_o)}")
    I = np.eye(d)

    def split(n_out):
        S = np.zeros((d, n_out))
        S[:, :d] = I
        S[:, n_out - d:] = -I
        return S

    def merge(n_in):
        Mg = np.zeros((n_in + 1, d))
        Mg[:d] = I
        Mg[n_in - d:n_in] = -I
        return Mg

    mats = []
    first = np.zeros((d + 1, config.widths[0]))
    first[:d] = split(config.widths[0])
    mats.append(first)
    for i in range(2, L):
        mats.append(merge(config.widths[i - 2]) @ split(config.widths[i - 1]))
    n_last_in = config.widths[L - 2]
    last = np.zeros((n_last_in + 1, d + 1))
    last[:, :d] = merge(n_last_in)
    last[n_last_in, d] = 1.0
    mats.append(last @ W_O)

    means = [_stack_to_vector(M) for M in mats]
    covs = [config.epsilon * np.eye(m.size) for m in means]
    return WeightState(means, covs)


def forward(weights: WeightState, z0: GaussianState, config: HeadConfig, check: bool = True) -> LayerTrace:
    """Propagate input moments through every layer of the head."""
    if z0.dim % config.d:
        raise ValueError(f"input dim {z0.dim} is not a multiple of d={config.d}")
    if len(weights.means) != config.L:
        raise ValueError("weight state and config disagree on layer count")
    y = z0.dim // config.d
    zs, us, uz = [z0], [], []
    up = None
    z = z0
    for i in range(1, config.L + 1):
        n = config.widths[i - 1]
        u = linear_forward_moments(weights.layer(i), augment_bias(z, y), n, y)
        if check:
            u.cov = repair_cov(u.cov, name=f"u{i}", layer=i)
        us.append(u)
        if i < config.L:
            z, cross = relu_moments(u)
            if check:
                z.cov = repair_cov(z.cov, name=f"z{i}", layer=i)
            uz.append(cross)
        elif config.output == "softmax":
            p, p_cov, up = softmax_moments(u, n)
            z = GaussianState(p, p_cov)
            uz.append(None)
        else:
            z = GaussianState(u.mean.copy(), u.cov.copy())
            up = u.cov.copy()
            uz.append(None)
        zs.append(z)
    return LayerTrace(z=zs, u=us, uz_cross_diag=uz, up_cross=up, n_tokens=y, widths=config.widths)


def deterministic_forward(weights: WeightState, H, config: HeadConfig) -> np.ndarray:
    """Plain network evaluation at the weight means, rows = tokens."""
    z = np.asarray(H, dtype=float)
    for i in range(1, config.L + 1):
        W = weights.matrix(i, config)
        u = np.hstack([z, np.ones((z.shape[0], 1))]) @ W
        if i < config.L:
            z = np.maximum(u, 0.0)
        elif config.output == "softmax":
            z = softmax_blocks(u, config.d_o).reshape(u.shape)
        else:
            z = u
    return z


def predict(weights: WeightState, H, config: HeadConfig):
    """Predictive output moments for a deterministic representation matrix ``H`` (y x d)."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if not np.all(np.isfinite(H)):
        raise ValueError("H must be finite")
    z0 = GaussianState.deterministic(H.reshape(-1), config.z0_var)
    out = forward(weights, z0, config).output
    return out.mean.reshape(H.shape[0], config.d_o), out.cov


def predict_batch(weights: WeightState, H, config: HeadConfig):
    """Per-row predictions ``(means (N, d_o), covs (N, d_o, d_o))``, each row its own sequence.

    Equivalent to calling :func:`predict` on every row, with the rows pushed
    through the layers together.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if not np.all(np.isfinite(H)):
        raise ValueError("H must be finite")
    if H.shape[1] != config.d:
        raise ValueError(f"H has width {H.shape[1]}, expected {config.d}")
    B = H.shape[0]
    mean = H
    cov = np.broadcast_to(config.z0_var * np.eye(config.d), (B, config.d, config.d))
    for i in range(1, config.L + 1):
        n = config.widths[i - 1]
        m = mean.shape[1] + 1
        M = weights.means[i - 1].reshape(n, m)
        Sw = weights.covs[i - 1].reshape(n, m, n, m)
        Za = np.hstack([mean, np.ones((B, 1))])
        Sz = np.zeros((B, m, m))
        Sz[:, :-1, :-1] = cov
        mean = Za @ M.T
        cov = (np.einsum("am,bmk,ck->bac", M, Sz, M, optimize=True)
               + np.einsum("bm,amck,bk->bac", Za, Sw, Za, optimize=True)
               + np.einsum("bmk,amck->bac", Sz, Sw, optimize=True))
        cov = 0.5 * (cov + cov.transpose(0, 2, 1))
        if i < config.L:
            var = np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0)
            mean, cov = relu_mean(mean, var), relu_cov_matrix(mean, cov)
        elif config.output == "softmax":
            p = softmax_blocks(mean, n).reshape(B, n)
            J = np.einsum("ba,ac->bac", p, np.eye(n)) - p[:, :, None] * p[:, None, :]
            mean, cov = p, J @ cov @ J.transpose(0, 2, 1)
    return mean, cov


def predict_mean(weights: WeightState, H, config: HeadConfig) -> np.ndarray:
    """Predictive mean for each row of ``H`` treated as its own sequence.

    Same value as ``predict_batch(...)[0]``. For two-layer heads only the
    diagonal of the hidden pre-activation covariance enters the mean, so it is
    computed directly; deeper heads fall back to the full batched pass.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if config.L != 2:
        return predict_batch(weights, H, config)[0]
    d, n1 = config.d, config.widths[0]
    v = config.z0_var
    Za = np.hstack([H, np.ones((H.shape[0], 1))])
    M1 = weights.means[0].reshape(n1, d + 1)
    S1 = weights.covs[0].reshape(n1, d + 1, n1, d + 1)
    Sdiag = S1[np.arange(n1), :, np.arange(n1), :]  # (n1, m, m) per-neuron blocks
    var = (v * (M1[:, :d] ** 2).sum(1)[None, :]
           + np.einsum("bm,amk,bk->ba", Za, Sdiag, Za)
           + v * np.trace(Sdiag[:, :d, :d], axis1=1, axis2=2)[None, :])
    z1 = relu_mean(Za @ M1.T, var)
    M2 = weights.means[1].reshape(config.d_o, n1 + 1)
    u2 = np.hstack([z1, np.ones((H.shape[0], 1))]) @ M2.T
    if config.output == "softmax":
        return softmax_blocks(u2, config.d_o).reshape(u2.shape)
    return u2


def mean_predicted_variance(weights: WeightState, H, config: HeadConfig) -> float:
    """Average diagonal of the predictive output covariance over the rows of ``H``."""
    _, covs = predict_batch(weights, H, config)
    return float(np.mean(np.diagonal(covs, axis1=1, axis2=2)))


def deterministic_loss_and_grads(weights: WeightState, H, targets, config: HeadConfig):
    """Mean cross-entropy of the mean-weight head on token ``targets`` and its weight gradients.

    Gradients come back in the neuron-major vector layout of ``weights.means``.
    """
    if config.output != "softmax":
        raise ValueError("cross-entropy needs a softmax head")
    z = np.atleast_2d(np.asarray(H, dtype=float))
    targets = np.asarray(targets, dtype=int).reshape(-1)
    B = z.shape[0]
    acts, pre = [], []
    for i in range(1, config.L + 1):
        za = np.hstack([z, np.ones((B, 1))])
        acts.append(za)
        u = za @ weights.matrix(i, config)
        pre.append(u)
        z = np.maximum(u, 0.0) if i < config.L else u
    u = z - z.max(axis=1, keepdims=True)
    logp = u - np.log(np.exp(u).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), targets].mean()
    delta = np.exp(logp)
    delta[np.arange(B), targets] -= 1.0
    delta /= B
    grads = [None] * config.L
    for i in range(config.L, 0, -1):
        grads[i - 1] = _stack_to_vector(acts[i - 1].T @ delta)
        if i > 1:
            delta = (delta @ weights.matrix(i, config)[:-1].T) * (pre[i - 2] > 0)
    return float(loss), grads
