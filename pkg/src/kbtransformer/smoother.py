"""Backward pass: measurement injection and layer-wise RTS updates.

One call to :func:`sequential_update` conditions the weight distribution on a
single preprocessed training pair: forward pass, output measurement, then RTS
updates of (u, w, z) from the last layer down to the first. Only the weight
moments survive between calls.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .bayes_head import HeadConfig, LayerTrace, WeightState, forward
from .moments import (
    GaussianState,
    NumericalBreakdown,
    augment_bias,
    bias_free_index,
    linear_cross_cov_wu,
    linear_cross_cov_zu,
    relu_cross_cov_full,
    repair_cov,
)

logger = logging.getLogger(__name__)

DATA_JITTER = 1e-9
_COND_LIMIT = 1e12
_JITTER_STEPS = (1e-9, 1e-6)
CROSS_COV_MODES = ("diagonal", "full")


@dataclass
class MeasurementModel:
    """One-hot targets and their observation covariance.

    ``mode="assign"`` sets the output posterior to (targets, sigma_data)
    verbatim. ``mode="kalman"`` treats the targets as a noisy observation of
    the output with covariance sigma_data and conditions on it; the two agree
    as sigma_data -> 0. ``one_hot=False`` admits real-valued targets, such as
    one-hot vectors with additive observation noise.
    """

    y_target: np.ndarray
    sigma_data: np.ndarray | float = 0.0
    block_size: int | None = None
    mode: str = "kalman"
    one_hot: bool = True

    def __post_init__(self):
        self.y_target = np.asarray(self.y_target, dtype=float).reshape(-1)
        if self.mode not in ("assign", "kalman"):
            raise ValueError(f"unknown measurement mode {self.mode!r}")
        if not np.all(np.isfinite(self.y_target)):
            raise ValueError("targets must be finite")
        if self.block_size is not None and self.one_hot:
            blocks = self.y_target.reshape(-1, self.block_size)
            if not np.all((blocks == 0) | (blocks == 1)) or not np.allclose(blocks.sum(axis=1), 1):
                raise ValueError("targets must be one-hot per block")
        if np.ndim(self.sigma_data) == 0:
            if float(self.sigma_data) < 0:
                raise ValueError("sigma_data must be non-negative")
        else:
            S = np.asarray(self.sigma_data, dtype=float)
            n = self.y_target.size
            if S.shape != (n, n):
                raise ValueError(f"sigma_data shape {S.shape} does not match target dim {n}")
            if np.linalg.eigvalsh(0.5 * (S + S.T))[0] < -1e-12 * max(1.0, np.trace(S)):
                raise ValueError("sigma_data must be PSD")

    @property
    def dim(self) -> int:
        return self.y_target.size

    def covariance(self) -> np.ndarray:
        if np.ndim(self.sigma_data) == 0:
            s = float(self.sigma_data)
            return (s if s > 0 else DATA_JITTER) * np.eye(self.dim)
        S = np.asarray(self.sigma_data, dtype=float)
        return 0.5 * (S + S.T) + (DATA_JITTER * np.eye(self.dim) if not np.any(S) else 0.0)


def spd_solve(A: np.ndarray, B: np.ndarray, layer=None, name="matrix") -> np.ndarray:
    """Solve ``A X = B`` for symmetric PSD ``A`` with diagonal jitter escalation.

    Jitter ``1e-9 * trace/n`` is added up front when the condition number
    exceeds 1e12, escalating to ``1e-6 * trace/n`` if Cholesky still fails.
    """
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    scale = max(np.trace(A) / n, np.finfo(float).tiny)
    lam = np.linalg.eigvalsh(A)
    cond = np.inf if lam[0] <= 0 else lam[-1] / lam[0]
    steps = (0.0,) + _JITTER_STEPS if cond <= _COND_LIMIT else _JITTER_STEPS
    for jit in steps:
        Aj = A.copy()
        Aj.flat[::n + 1] += jit * scale
        try:
            c = cho_factor(Aj, lower=True, check_finite=False)
        except LinAlgError:
            continue
        if jit > _JITTER_STEPS[0]:
            logger.info("%s: regularized with jitter %.0e", name, jit)
        return cho_solve(c, B, check_finite=False)
    raise NumericalBreakdown(f"{name} is singular despite regularization", layer)


def gain(cross: np.ndarray, cov: np.ndarray, layer=None, name="gain") -> np.ndarray:
    """``cross @ inv(cov)`` through a symmetric solve."""
    return spd_solve(cov, cross.T, layer=layer, name=name).T


def inject_measurement(trace: LayerTrace, m: MeasurementModel) -> GaussianState:
    """Posterior of the network output after seeing the targets."""
    out = trace.output
    if out.dim != m.dim:
        raise ValueError(f"target dim {m.dim} does not match output dim {out.dim}")
    R = m.covariance()
    if m.mode == "assign":
        return GaussianState(m.y_target.copy(), R)
    S = out.cov
    K = gain(S, S + R, layer=len(trace.u), name="innovation covariance")
    mean = out.mean + K @ (m.y_target - out.mean)
    cov = S - K @ S
    return GaussianState(mean, repair_cov(cov, name="output posterior", layer=len(trace.u)))


@dataclass
class LayerPosterior:
    u: GaussianState
    w: GaussianState
    z_prev: GaussianState


def rts_layer_update(trace: LayerTrace, i: int, weights: WeightState, z_post: GaussianState,
                     full_check: bool = False, cross_cov: str = "full") -> LayerPosterior:
    """RTS step for layer ``i`` (1-based) given the updated posterior of z^i.

    u^i is updated through Cov(u, z), then w^i and z^{i-1} through their
    cross-covariances with u^i. The weight covariance update is PSD by
    construction, so by default only its diagonal is checked.

    At ReLU layers ``cross_cov="diagonal"`` keeps only the diagonal of
    Cov(u, z); ``"full"`` restores the off-diagonal entries, which keeps the
    joint (u, z) covariance PSD and with it the u posterior.
    """
    if cross_cov not in CROSS_COV_MODES:
        raise ValueError(f"unknown cross_cov mode {cross_cov!r}")
    L = len(trace.u)
    u, z = trace.u[i - 1], trace.z[i]
    y = trace.n_tokens
    n = trace.widths[i - 1]
    w = weights.layer(i)
    if z_post.dim != z.dim:
        raise ValueError(f"layer {i}: posterior dim {z_post.dim} != {z.dim}")

    if i == L:
        Cuz = trace.up_cross
    else:
        d = trace.uz_cross_diag[i - 1]
        Cuz = np.diag(d) if cross_cov == "diagonal" else relu_cross_cov_full(u.cov, d)
    K_u = gain(Cuz, z.cov, layer=i, name=f"Sigma_z{i}")
    u_mean = u.mean + K_u @ (z_post.mean - z.mean)
    u_cov = u.cov + K_u @ (z_post.cov - z.cov) @ K_u.T
    u_cov = repair_cov(u_cov, name=f"u{i} posterior", layer=i)

    z_prev_aug = augment_bias(trace.z[i - 1], y)
    du_mean = u_mean - u.mean
    du_cov = u_cov - u.cov

    Cwu = linear_cross_cov_wu(w, z_prev_aug.mean, n, y)
    K_w = gain(Cwu, u.cov, layer=i, name=f"Sigma_u{i}")
    w_mean = w.mean + K_w @ du_mean
    w_cov = repair_cov(w.cov + K_w @ du_cov @ K_w.T, name=f"w{i} posterior", layer=i, full=full_check)

    zp = trace.z[i - 1]
    keep = bias_free_index(y, zp.dim // y)
    Czu = linear_cross_cov_zu(z_prev_aug, w.mean, n, y)[keep]
    K_z = gain(Czu, u.cov, layer=i, name=f"Sigma_u{i}")
    zp_mean = zp.mean + K_z @ du_mean
    zp_cov = zp.cov + K_z @ du_cov @ K_z.T
    if i > 1:
        zp_cov = repair_cov(zp_cov, name=f"z{i - 1} posterior", layer=i)
    else:
        zp_cov = 0.5 * (zp_cov + zp_cov.T)
    return LayerPosterior(GaussianState(u_mean, u_cov), GaussianState(w_mean, w_cov), GaussianState(zp_mean, zp_cov))


def sequential_update(weights: WeightState, H, Y, config: HeadConfig, sigma_data=0.0,
                      mode: str = "kalman", full_check: bool = False,
                      cross_cov: str = "full", one_hot: bool = True) -> WeightState:
    """Condition the weights on one preprocessed pair (rows of ``H`` and one-hot ``Y``).

    Returns a new :class:`WeightState`; ``weights`` is not modified.
    ``full_check`` factorizes every posterior weight covariance to verify it
    is PSD, which dominates the cost for wide heads. ``cross_cov`` is passed
    to :func:`rts_layer_update`; ``one_hot=False`` accepts real-valued ``Y``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if H.shape[0] != Y.shape[0]:
        raise ValueError("H and Y must have the same number of rows")
    if H.shape[1] != config.d or Y.shape[1] != config.d_o:
        raise ValueError("H/Y widths do not match the head config")
    z0 = GaussianState.deterministic(H.reshape(-1), config.z0_var)
    trace = forward(weights, z0, config)
    block = config.d_o if config.output == "softmax" else None
    m = MeasurementModel(Y.reshape(-1), sigma_data, block_size=block, mode=mode, one_hot=one_hot)
    return update_from_trace(weights, trace, m, full_check=full_check, cross_cov=cross_cov)


def update_from_trace(weights: WeightState, trace: LayerTrace, m: MeasurementModel,
                      full_check: bool = False, cross_cov: str = "full") -> WeightState:
    L = len(trace.u)
    means, covs = [None] * L, [None] * L
    z_post = inject_measurement(trace, m)
    for i in range(L, 0, -1):
        post = rts_layer_update(trace, i, weights, z_post, full_check=full_check, cross_cov=cross_cov)
        means[i - 1] = post.w.mean
        covs[i - 1] = post.w.cov
        z_post = post.z_prev
    return WeightState(means, covs)
