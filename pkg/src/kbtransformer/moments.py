"""Closed-form moment propagation kernels.

Every kernel maps Gaussian moments (mean, covariance) of its input to the
moments of its output, plus the cross-covariances the smoother needs:

* linear maps with random, input-independent weights,
* the ReLU (exact mean, second-order covariance expansion),
* the blockwise softmax (first-order Taylor expansion).

Vectors stacking several tokens follow the token-major layout
``[u_1; u_2; ...; u_y]`` and layer weights the neuron-major layout
``[w_1; w_2; ...; w_n]`` where each ``w_a`` carries the bias as its last entry.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

JITTER = 1e-18
ABS_TOL = 1e-15
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class NumericalBreakdown(ArithmeticError):
    """A covariance could not be repaired or inverted."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


def norm_cdf(t):
    return ndtr(t)


def norm_pdf(t):
    t = np.asarray(t, dtype=float)
    # log-space keeps the far tails from underflowing through exp(-t^2/2) twice
    return np.exp(-0.5 * t * t - _LOG_SQRT_2PI)


# --------------------------------------------------------------------------
# containers and covariance hygiene
# --------------------------------------------------------------------------


@dataclass
class GaussianState:
    """Mean vector and covariance matrix of a random vector."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(f"mean has dim {n} but cov has shape {self.cov.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @classmethod
    def deterministic(cls, mean, var: float = 0.0) -> "GaussianState":
        mean = np.asarray(mean, dtype=float).reshape(-1)
        return cls(mean, var * np.eye(mean.shape[0]))

    def check(self, **kw) -> None:
        check_cov(self.cov, **kw)


def cov_violation(cov: np.ndarray) -> tuple[float, float]:
    """Return (asymmetry, most negative eigenvalue) scaled by the tolerances.

    Values above 1 mean the covariance invariant is broken.
    """
    n = cov.shape[0]
    if n == 0:
        return 0.0, 0.0
    scale = np.max(np.abs(cov))
    asym = np.max(np.abs(cov - cov.T))
    asym_ratio = asym / (1e-10 * scale) if scale > 0 else 0.0
    tr = np.trace(cov)
    lam_min = np.linalg.eigvalsh(0.5 * (cov + cov.T))[0]
    floor = 1e-8 * abs(tr) / n
    if lam_min >= 0:
        neg_ratio = 0.0
    elif floor == 0:
        neg_ratio = np.inf
    else:
        neg_ratio = -lam_min / floor
    return float(asym_ratio), float(neg_ratio)


def check_cov(cov: np.ndarray, name: str = "cov") -> None:
    asym, neg = cov_violation(cov)
    if asym > 1 or neg > 1:
        raise AssertionError(f"{name} violates symmetry/PSD invariant (asym={asym:.3g}, neg={neg:.3g})")


def repair_cov(cov: np.ndarray, name: str = "cov", hard_floor: float = 1e-4, layer=None,
               full: bool = True) -> np.ndarray:
    """Symmetrize, and clip slightly negative eigenvalues only if the PSD check fails.

    Raises :class:`NumericalBreakdown` when an eigenvalue lies below
    ``-hard_floor * trace - ABS_TOL``; such a matrix is not a rounding
    artefact. ``ABS_TOL`` absorbs noise in near-zero matrices, e.g. the
    covariance of ReLU units that are off with certainty. With
    ``full=False`` only the diagonal is checked, which costs O(n^2) instead of
    a factorization; use it where PSD holds by construction.
    """
    cov = 0.5 * (cov + cov.T)
    n = cov.shape[0]
    if n == 0:
        return cov
    tr = float(np.trace(cov))
    floor = 1e-8 * abs(tr) / n
    hard = hard_floor * abs(tr) + ABS_TOL
    if not full:
        dmin = float(np.min(np.diagonal(cov)))
        if dmin < -hard or tr < -ABS_TOL or not np.isfinite(tr):
            raise NumericalBreakdown(f"{name}: diagonal entry {dmin:.3e} below hard floor (trace {tr:.3e})", layer)
        return cov
    if tr > 0:
        # a Cholesky of cov + floor*I succeeding proves lambda_min > -floor
        shifted = cov.copy()
        shifted.flat[::n + 1] += floor
        try:
            np.linalg.cholesky(shifted)
            return cov
        except np.linalg.LinAlgError:
            pass
    lam, vec = np.linalg.eigh(cov)
    if lam[0] >= -floor:
        return cov
    if lam[0] < -hard or not np.isfinite(tr):
        raise NumericalBreakdown(f"{name}: eigenvalue {lam[0]:.3e} below hard floor (trace {tr:.3e})", layer)
    logger.info("repairing %s: clipping eigenvalues down to %.3e", name, lam[0])
    lam = np.clip(lam, 0.0, None)
    out = (vec * lam) @ vec.T
    return 0.5 * (out + out.T)


# --------------------------------------------------------------------------
# ReLU
# --------------------------------------------------------------------------


def _std(var):
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    return np.sqrt(np.maximum(var, JITTER))


def relu_mean(mu, var):
    """E[max(0, u)] for u ~ N(mu, var).

    Variances below the jitter floor are clamped, which recovers
    ``max(0, mu)`` in the deterministic limit.
    """
    mu = np.asarray(mu, dtype=float)
    s = _std(var)
    t = mu / s
    out = mu * norm_cdf(t) + s * norm_pdf(t)
    return out if out.ndim else float(out)


def relu_var(mu, var):
    """Exact Var[max(0, u)]; used for truncation bounds and checks."""
    mu = np.asarray(mu, dtype=float)
    s = _std(var)
    t = mu / s
    m = mu * norm_cdf(t) + s * norm_pdf(t)
    out = (mu * mu + s * s) * norm_cdf(t) + mu * s * norm_pdf(t) - m * m
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def relu_cov_entry(mu_j, mu_k, var_j, var_k, cov_jk):
    """Second-order expansion of Cov(max(0,u_j), max(0,u_k)).

    ``Phi_j Phi_k C + phi_j phi_k C^2 / (2 s_j s_k)`` with ``C = cov_jk``; the
    expansion is the first two terms of the Hermite series of the ReLU.
    """
    var_j = np.asarray(var_j, dtype=float)
    var_k = np.asarray(var_k, dtype=float)
    if np.any(var_j <= 0) or np.any(var_k <= 0):
        raise ValueError("variances must be positive")
    sj, sk = _std(var_j), _std(var_k)
    tj, tk = np.asarray(mu_j) / sj, np.asarray(mu_k) / sk
    c = np.asarray(cov_jk, dtype=float)
    out = norm_cdf(tj) * norm_cdf(tk) * c + norm_pdf(tj) * norm_pdf(tk) * c * c / (2.0 * sj * sk)
    return out if out.ndim else float(out)


def relu_cov_truncation_bound(mu_j, mu_k, var_j, var_k, cov_jk):
    """Upper bound on |exact covariance - relu_cov_entry|.

    With normalized Hermite coefficients ``a_n`` of each ReLU output, the exact
    covariance is ``s_j s_k sum_n rho^n a_n^j a_n^k``; the expansion keeps
    n = 1, 2, and Cauchy-Schwarz bounds the tail by
    ``s_j s_k |rho|^3 sqrt(r_j r_k)`` where ``r = Var/s^2 - a_1^2 - a_2^2``.
    """
    sj, sk = _std(var_j), _std(var_k)
    rho = np.clip(np.asarray(cov_jk, dtype=float) / (sj * sk), -1.0, 1.0)

    def tail(mu, s):
        t = np.asarray(mu, dtype=float) / s
        r = relu_var(mu, s * s) / (s * s) - norm_cdf(t) ** 2 - 0.5 * norm_pdf(t) ** 2
        return np.maximum(r, 0.0)

    out = sj * sk * np.abs(rho) ** 3 * np.sqrt(tail(mu_j, sj) * tail(mu_k, sk))
    return out if np.ndim(out) else float(out)


def relu_cross_cov_diag(mu, var, mu_z):
    """Cov(u, max(0, u)) for u ~ N(mu, var) given ``mu_z = E[max(0, u)]``.

    Evaluates ``(mu^2 + var) Phi(t) + mu var N(0; mu, var) - mu mu_z``, which
    collapses to ``var Phi(t)`` for a consistent ``mu_z``; the collapsed form is
    used (plus the ``mu_z`` mismatch term) to avoid cancellation when var is tiny.
    """
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    mu = np.asarray(mu, dtype=float)
    s = _std(var)
    t = mu / s
    consistent = mu * norm_cdf(t) + s * norm_pdf(t)
    out = s * s * norm_cdf(t) + mu * (consistent - np.asarray(mu_z, dtype=float))
    return out if out.ndim else float(out)


def relu_cov_matrix(mu, cov) -> np.ndarray:
    """Covariance of max(0, u) from the second-order expansion, exact on the diagonal.

    Works on stacked inputs: ``mu`` (..., n) and ``cov`` (..., n, n).
    """
    mu = np.asarray(mu, dtype=float)
    C = np.asarray(cov, dtype=float)
    var = np.maximum(np.diagonal(C, axis1=-2, axis2=-1), JITTER)
    s = np.sqrt(var)
    t = mu / s
    Phi, phi = norm_cdf(t), norm_pdf(t)
    a = phi / s
    out = (Phi[..., :, None] * Phi[..., None, :]) * C + 0.5 * (a[..., :, None] * a[..., None, :]) * (C * C)
    # the expansion is exact only to second order; keep the diagonal exact
    idx = np.arange(mu.shape[-1])
    out[..., idx, idx] = relu_var(mu, var)
    return out


def relu_moments(u: GaussianState) -> tuple[GaussianState, np.ndarray]:
    """Push a Gaussian through an elementwise ReLU.

    Returns the output state and the diagonal of Cov(u, z).
    """
    mu = u.mean
    var = np.maximum(np.diag(u.cov), JITTER)
    z_mean = relu_mean(mu, var)
    uz_diag = relu_cross_cov_diag(mu, var, z_mean)
    return GaussianState(np.atleast_1d(z_mean), relu_cov_matrix(mu, u.cov)), np.atleast_1d(uz_diag)


def relu_cross_cov_full(u_cov: np.ndarray, uz_diag: np.ndarray) -> np.ndarray:
    """Full Cov(u, relu(u)) rebuilt from its diagonal.

    Stein's lemma gives Cov(u, z) = Sigma_u diag(Phi(mu/s)), and the diagonal
    equals var * Phi, so the column scales are ``uz_diag / var``.
    """
    var = np.maximum(np.diag(u_cov), JITTER)
    out = u_cov * (uz_diag / var)[None, :]
    np.fill_diagonal(out, uz_diag)
    return out


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------


def softmax_blocks(x, block_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, block_size)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(-1)


def softmax_jacobian(p, block_size: int) -> np.ndarray:
    """Block-diagonal Jacobian ``diag(p) - p p^T`` of the blockwise softmax."""
    p = np.asarray(p, dtype=float).reshape(-1, block_size)
    n = p.size
    J = np.zeros((n, n))
    for b, pb in enumerate(p):
        sl = slice(b * block_size, (b + 1) * block_size)
        J[sl, sl] = np.diag(pb) - np.outer(pb, pb)
    return J


def softmax_moments(u: GaussianState, block_size: int):
    """First-order Taylor moments of a softmax applied per consecutive block.

    Returns ``(p_mean, p_cov, up_cross)`` where ``up_cross = Cov(u, p)``.
    """
    if block_size <= 0 or u.dim % block_size:
        raise ValueError(f"dimension {u.dim} is not a multiple of block size {block_size}")
    p = softmax_blocks(u.mean, block_size)
    J = softmax_jacobian(p, block_size)
    up = u.cov @ J.T
    p_cov = J @ up
    return p, 0.5 * (p_cov + p_cov.T), up


# --------------------------------------------------------------------------
# linear layer with random weights
# --------------------------------------------------------------------------


def _split(w: GaussianState, z: GaussianState, n_out: int, n_tokens: int):
    m = z.dim // n_tokens
    if z.dim != n_tokens * m:
        raise ValueError(f"input dim {z.dim} is not divisible by {n_tokens} tokens")
    if w.dim != n_out * m:
        raise ValueError(f"weight dim {w.dim} != n_out*m = {n_out}*{m}")
    return m


def linear_forward_moments(w: GaussianState, z: GaussianState, n_out: int, n_tokens: int) -> GaussianState:
    """Moments of ``u[t, a] = w_a . z_t`` with weights independent of the input.

    ``z`` holds ``n_tokens`` stacked input vectors of equal width m (already
    bias-augmented if a bias is wanted), ``w`` holds ``n_out`` stacked weight
    vectors of width m. The block-diagonal weight matrix is never formed.
    """
    m = _split(w, z, n_out, n_tokens)
    y, n = n_tokens, n_out
    M = w.mean.reshape(n, m)
    Z = z.mean.reshape(y, m)
    Sz = z.cov.reshape(y, m, y, m)
    Sw = w.cov.reshape(n, m, n, m)

    mean = (Z @ M.T).reshape(-1)
    # Cov = M Sz M^T + Z Sw Z^T + tr(Sz Sw), all indexed [t, a, s, c]
    t1 = np.einsum("am,tmsk,ck->tasc", M, Sz, M, optimize=True)
    t2 = np.einsum("tm,amck,sk->tasc", Z, Sw, Z, optimize=True)
    t3 = (Sz.transpose(0, 2, 1, 3).reshape(y * y, m * m)
          @ Sw.transpose(0, 2, 1, 3).reshape(n * n, m * m).T)
    t3 = t3.reshape(y, y, n, n).transpose(0, 2, 1, 3)
    cov = (t1 + t2 + t3).reshape(y * n, y * n)
    return GaussianState(mean, 0.5 * (cov + cov.T))


def linear_cross_cov_wu(w: GaussianState, z_mean, n_out: int, n_tokens: int) -> np.ndarray:
    """Cov(w, u) = Sigma_ww Zbar^T, shape (n_out*m, n_tokens*n_out)."""
    z_mean = np.asarray(z_mean, dtype=float).reshape(-1)
    m = z_mean.size // n_tokens
    if w.dim != n_out * m or z_mean.size != n_tokens * m:
        raise ValueError("dimension mismatch between weights and input mean")
    Z = z_mean.reshape(n_tokens, m)
    Sw = w.cov.reshape(n_out * m, n_out, m)
    return np.einsum("pam,tm->pta", Sw, Z).reshape(n_out * m, n_tokens * n_out)


def linear_cross_cov_zu(z: GaussianState, w_mean, n_out: int, n_tokens: int) -> np.ndarray:
    """Cov(z, u) = Sigma_zz Mbar^T, shape (n_tokens*m, n_tokens*n_out)."""
    w_mean = np.asarray(w_mean, dtype=float).reshape(-1)
    m = z.dim // n_tokens
    if z.dim != n_tokens * m or w_mean.size != n_out * m:
        raise ValueError("dimension mismatch between input and weight mean")
    M = w_mean.reshape(n_out, m)
    Sz = z.cov.reshape(n_tokens * m, n_tokens, m)
    return np.einsum("ptm,am->pta", Sz, M).reshape(n_tokens * m, n_tokens * n_out)


def augment_bias(z: GaussianState, n_tokens: int) -> GaussianState:
    """Append a deterministic 1 to every token's vector (zero variance)."""
    n = z.dim // n_tokens
    m = n + 1
    idx = (np.arange(n_tokens)[:, None] * m + np.arange(n)[None, :]).reshape(-1)
    mean = np.ones(n_tokens * m)
    mean[idx] = z.mean
    cov = np.zeros((n_tokens * m, n_tokens * m))
    cov[np.ix_(idx, idx)] = z.cov
    return GaussianState(mean, cov)


def bias_free_index(n_tokens: int, n_in: int) -> np.ndarray:
    """Positions of the non-bias entries inside a bias-augmented stacked vector."""
    m = n_in + 1
    return (np.arange(n_tokens)[:, None] * m + np.arange(n_in)[None, :]).reshape(-1)
