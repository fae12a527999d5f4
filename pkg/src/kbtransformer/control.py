"""Cart-pole plant, linearization, discrete LQR and i.i.d. sample generation.

Dynamics are the frictionless cart-pole with the pole modelled as a point mass
at distance ``l_p`` from the pivot. The angle is measured from upright, so the
origin is the (unstable) equilibrium the controllers stabilize.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PendulumParams:
    m_c: float = 1.0
    m_p: float = 0.1
    l_p: float = 0.5
    g: float = 9.81
    dt: float = 0.02

    def __post_init__(self):
        if min(self.m_c, self.m_p, self.l_p) <= 0:
            raise ValueError("masses and pole length must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


NOMINAL = PendulumParams(m_c=1.0, m_p=0.1, l_p=0.5)
SHIFTED = PendulumParams(m_c=1.0, m_p=1.0, l_p=5.0)


@dataclass(frozen=True)
class PendulumState:
    x_c: float = 0.0
    v_c: float = 0.0
    theta_p: float = 0.0
    omega_p: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x_c, self.v_c, self.theta_p, self.omega_p])

    @classmethod
    def from_array(cls, x) -> "PendulumState":
        x = np.asarray(x, dtype=float)
        return cls(*map(float, x))


@dataclass
class LqrGain:
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray | None = None
    iterations: int = 0

    def action(self, x) -> np.ndarray:
        """Feedback ``u = -K x`` for one state or a stack of states."""
        x = np.asarray(x, dtype=float)
        return -(x @ self.K.T)[..., 0]


@dataclass(frozen=True)
class SuccessCriterion:
    """Rollout thresholds used to decide whether a policy stabilized the plant."""

    n_steps: int = 500
    theta_limit: float = 0.5
    x_limit: float = 5.0
    theta_final: float = 0.05
    n_conditions: int = 20
    theta0_max: float = 0.1


def _derivative(p: PendulumParams, s: np.ndarray, u) -> np.ndarray:
    v, th, om = s[..., 1], s[..., 2], s[..., 3]
    sin, cos = np.sin(th), np.cos(th)
    acc = (u + p.m_p * p.l_p * om**2 * sin - p.m_p * p.g * sin * cos) / (
        p.m_c + p.m_p * sin**2
    )
    alpha = (p.g * sin - acc * cos) / p.l_p
    return np.stack([v, acc, om, alpha], axis=-1)


def _rk4(params: PendulumParams, x: np.ndarray, u) -> np.ndarray:
    dt = params.dt
    k1 = _derivative(params, x, u)
    k2 = _derivative(params, x + 0.5 * dt * k1, u)
    k3 = _derivative(params, x + 0.5 * dt * k2, u)
    k4 = _derivative(params, x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_array(params: PendulumParams, x: np.ndarray, u) -> np.ndarray:
    """One RK4 step of the nonlinear plant on a raw state vector (or a stack of them)."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = _rk4(params, np.asarray(x, dtype=float), np.asarray(u, dtype=float))
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state after step from {x} with u={u}")
    return out


def step(params: PendulumParams, state: PendulumState, u: float) -> PendulumState:
    if not np.isfinite(u):
        raise DivergenceError(f"non-finite force {u}")
    return PendulumState.from_array(step_array(params, state.as_array(), float(u)))


def energy(params: PendulumParams, x) -> float:
    """Total mechanical energy (kinetic + potential) of the unforced plant."""
    _, v, th, om = np.asarray(x, dtype=float)
    kin = 0.5 * (params.m_c + params.m_p) * v**2
    kin += params.m_p * params.l_p * v * om * np.cos(th)
    kin += 0.5 * params.m_p * params.l_p**2 * om**2
    return float(kin + params.m_p * params.g * params.l_p * np.cos(th))


def continuous_jacobians(params: PendulumParams) -> tuple[np.ndarray, np.ndarray]:
    m_c, m_p, l, g = params.m_c, params.m_p, params.l_p, params.g
    A = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, -m_p * g / m_c, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, g * (m_c + m_p) / (m_c * l), 0.0],
        ]
    )
    B = np.array([[0.0], [1.0 / m_c], [0.0], [-1.0 / (m_c * l)]])
    return A, B


def linearize(params: PendulumParams) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of the upright linearization.

    Returns ``(A, B)`` with ``A`` 4x4 and ``B`` 4x1.
    """
    Ac, Bc = continuous_jacobians(params)
    aug = np.zeros((5, 5))
    aug[:4, :4] = Ac
    aug[:4, 4:] = Bc
    E = expm(aug * params.dt)
    return E[:4, :4], E[:4, 4:]


def lqr_gain(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000) -> LqrGain:
    """Discrete LQR by fixed-point iteration of the Riccati recursion.

    Iterates ``P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA`` from ``P = Q`` until
    the Riccati residual of the iterate is at most ``tol``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for it in range(1, max_iter + 1):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ G
        P = 0.5 * (P + P.T)
        if riccati_residual(A, B, Q, R, P) <= tol:
            break
    else:
        raise RuntimeError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return LqrGain(K=K, Q=Q, R=R, P=P, iterations=it)


def riccati_residual(A, B, Q, R, P) -> float:
    A, B, Q, R, P = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R, P))
    rhs = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A) + Q
    return float(np.max(np.abs(P - rhs)))


DEFAULT_Q = np.diag([1.0, 1.0, 10.0, 1.0])
DEFAULT_R = np.array([[0.1]])


def design_lqr(params: PendulumParams, Q=None, R=None) -> LqrGain:
    A, B = linearize(params)
    return lqr_gain(A, B, DEFAULT_Q if Q is None else Q, DEFAULT_R if R is None else R)


@dataclass(frozen=True)
class StateSampler:
    """Uniform box sampler over ``[x_c, v_c, theta_p, omega_p]``."""

    low: tuple = (-1.0, -1.0, -0.2, -1.0)
    high: tuple = (1.0, 1.0, 0.2, 1.0)

    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, 4))


@dataclass
class Dataset:
    states: np.ndarray
    actions: np.ndarray
    tokens: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


def generate_samples(
    gain: LqrGain,
    n: int,
    state_sampler=None,
    rng: np.random.Generator | None = None,
    action_noise_var: float = 0.0,
) -> Dataset:
    """Draw ``n`` i.i.d. states and label them with the LQR action ``-K x``.

    States are sampled independently (not along closed-loop trajectories).
    ``action_noise_var`` adds zero-mean Gaussian noise of that variance to
    every action.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sampler = StateSampler() if state_sampler is None else state_sampler
    rng = np.random.default_rng() if rng is None else rng
    states = sampler(n, rng)
    actions = gain.action(states)
    if action_noise_var > 0:
        actions = actions + rng.normal(0.0, np.sqrt(action_noise_var), size=n)
    return Dataset(states=states, actions=actions)


def initial_conditions(criterion: SuccessCriterion = SuccessCriterion()) -> np.ndarray:
    """Fixed grid of initial states: cart at rest, angle spread over +-theta0_max."""
    thetas = np.linspace(-criterion.theta0_max, criterion.theta0_max, criterion.n_conditions)
    ics = np.zeros((criterion.n_conditions, 4))
    ics[:, 2] = thetas
    return ics


def rollout(params: PendulumParams, policy, x0, n_steps: int) -> np.ndarray:
    """Simulate ``n_steps`` under ``policy(x) -> force`` from one initial state.

    Returns the (n_steps+1, 4) path, truncated if the state diverges.
    """
    path = [np.asarray(x0, dtype=float)]
    x = path[0]
    for _ in range(n_steps):
        try:
            x = step_array(params, x, float(policy(x)))
        except DivergenceError:
            break
        path.append(x)
    return np.array(path)


def is_stabilized(path: np.ndarray, criterion: SuccessCriterion) -> bool:
    if len(path) < criterion.n_steps + 1:
        return False
    if np.any(np.abs(path[:, 2]) > criterion.theta_limit):
        return False
    if np.any(np.abs(path[:, 0]) > criterion.x_limit):
        return False
    return bool(abs(path[-1, 2]) <= criterion.theta_final)


def batch_success_flags(params: PendulumParams, batch_policy, x0s, criterion: SuccessCriterion) -> np.ndarray:
    """Roll out every row of ``x0s`` in lock-step under ``batch_policy((B,4)) -> (B,)``.

    A row fails as soon as it leaves the angle or cart bounds; survivors must
    end within ``theta_final``.
    """
    x = np.array(x0s, dtype=float)
    alive = np.ones(len(x), dtype=bool)
    alive &= (np.abs(x[:, 2]) <= criterion.theta_limit) & (np.abs(x[:, 0]) <= criterion.x_limit)
    for _ in range(criterion.n_steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        u = np.asarray(batch_policy(x[idx]), dtype=float).reshape(-1)
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = _rk4(params, x[idx], u)
        ok = np.all(np.isfinite(nxt), axis=1)
        ok &= (np.abs(nxt[:, 2]) <= criterion.theta_limit) & (np.abs(nxt[:, 0]) <= criterion.x_limit)
        x[idx] = np.where(ok[:, None], nxt, x[idx])
        alive[idx] = ok
    return alive & (np.abs(x[:, 2]) <= criterion.theta_final)


def success_flags(params: PendulumParams, policy, criterion: SuccessCriterion = SuccessCriterion(),
                  batched: bool = False) -> np.ndarray:
    """Per-initial-condition stabilization flags on the fixed grid.

    ``policy`` maps one state to a force, or a (B, 4) stack to B forces when
    ``batched`` is true.
    """
    if not batched:
        def batch_policy(xs):
            return np.array([float(policy(x)) for x in xs])
    else:
        batch_policy = policy
    return batch_success_flags(params, batch_policy, initial_conditions(criterion), criterion)


def success_rate(params: PendulumParams, policy, criterion: SuccessCriterion = SuccessCriterion(),
                 batched: bool = False) -> float:
    """Fraction of the fixed initial-condition grid that ``policy`` stabilizes."""
    return float(np.mean(success_flags(params, policy, criterion, batched=batched)))
