"""Cart-pole plant, RK4 integration and the quadratic running cost.

State layout is ``[phi, phi_dot, q, q_dot]`` with ``phi`` measured from the
upright position (``phi = 0`` is balanced, ``phi = pi`` hangs down).  All
functions accept either a single state of shape ``(4,)`` or a batch of shape
``(K, 4)`` so that MPPI rollouts can be evaluated in one vectorized pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PHI, PHI_DOT, Q, Q_DOT = range(4)

# Running cost weights for phi, phi_dot, q, q_dot.
COST_WEIGHTS = np.array([500.0, 1.0, 5.0, 10.0])


class DivergedRolloutError(RuntimeError):
    """A rollout produced a non-finite state."""

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"rollout diverged at step {index}")


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.25  # half-length of the pole
    gravity: float = 9.81
    force_limit: float | None = 50.0
    dt: float = 0.03

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "gravity", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.force_limit is not None and not self.force_limit > 0:
            raise ValueError("force_limit must be positive or None")


@dataclass(frozen=True)
class LinearSystem:
    """Linear prediction ``x' = A x + B u`` with cost ``0.5 x'^T Q x'``.

    ``A`` may be non-square when ``x'`` stacks several future states.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim < 2:
            B = B.reshape(A.shape[0], -1)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        m = A.shape[0]
        if B.shape[0] != m or Q.shape != (m, m):
            raise ValueError("inconsistent A, B, Q dimensions")
        if not np.allclose(Q, Q.T, atol=1e-10, rtol=0):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", Q)

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def Q_tilde(self) -> np.ndarray:
        return self.Q / self.lam


def wrap_angle(phi):
    """Wrap angles to (-pi, pi]."""
    wrapped = np.mod(np.asarray(phi, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def clamp_force(force, p: CartpoleParams):
    if p.force_limit is None:
        return np.asarray(force, dtype=float)
    return np.clip(force, -p.force_limit, p.force_limit)


def cartpole_derivative(s, force, p: CartpoleParams) -> np.ndarray:
    """Time derivative of the frictionless cart-pole with a uniform rod.

    Returns ``(phi_dot, phi_ddot, q_dot, q_ddot)`` with the same leading shape
    as ``s``.
    """
    s = np.asarray(s, dtype=float)
    force = np.asarray(force, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(force))):
        raise ValueError("non-finite state or force")
    return _deriv_unchecked(s, force, p)


def _deriv_unchecked(s, force, p):
    phi, phi_dot, q_dot = s[..., PHI], s[..., PHI_DOT], s[..., Q_DOT]
    total = p.cart_mass + p.pole_mass
    ml = p.pole_mass * p.pole_length
    sin, cos = np.sin(phi), np.cos(phi)
    tmp = (force + ml * phi_dot**2 * sin) / total
    phi_ddot = (p.gravity * sin - cos * tmp) / (
        p.pole_length * (4.0 / 3.0 - p.pole_mass * cos**2 / total)
    )
    q_ddot = tmp - ml * phi_ddot * cos / total
    return np.stack([phi_dot, phi_ddot, q_dot, q_ddot], axis=-1)


def step_rk4(s, force, p: CartpoleParams, dt: float | None = None) -> np.ndarray:
    """Advance by one zero-order-hold step with classical RK4."""
    s = np.asarray(s, dtype=float)
    force = np.asarray(force, dtype=float)
    if not np.all(np.isfinite(s)):
        raise DivergedRolloutError(0, "non-finite state passed to step_rk4")
    out = _rk4(s, force, p, p.dt if dt is None else dt)
    if not np.all(np.isfinite(out)):
        raise DivergedRolloutError(1)
    return out


def running_cost(s) -> np.ndarray | float:
    """``500 phi^2 + phi_dot^2 + 10 q_dot^2 + 5 q^2`` with phi wrapped to (-pi, pi]."""
    s = np.asarray(s, dtype=float)
    x = s.copy()
    x[..., PHI] = wrap_angle(s[..., PHI])
    out = (x**2) @ COST_WEIGHTS
    return float(out) if out.ndim == 0 else out


def mechanical_energy(s, p: CartpoleParams):
    """Total energy, with potential measured from the hanging position."""
    s = np.asarray(s, dtype=float)
    phi, phi_dot, q_dot = s[..., PHI], s[..., PHI_DOT], s[..., Q_DOT]
    m, l = p.pole_mass, p.pole_length
    kinetic = (
        0.5 * (p.cart_mass + m) * q_dot**2
        + m * l * q_dot * phi_dot * np.cos(phi)
        + (2.0 / 3.0) * m * l**2 * phi_dot**2
    )
    return kinetic + m * p.gravity * l * (1.0 + np.cos(phi))


@dataclass(frozen=True)
class Rollout:
    states: np.ndarray  # (T+1, 4) or (K, T+1, 4)
    controls: np.ndarray  # (T,) or (K, T), after clamping
    step_costs: np.ndarray  # L(x_{t+1}) for t = 0..T-1
    suffix_costs: np.ndarray  # length T+1, last entry 0

    @property
    def total_cost(self):
        return self.suffix_costs[..., 0]


def suffix_sums(step_costs: np.ndarray) -> np.ndarray:
    """Cost-to-go ``sum_{tau >= t} c_tau`` along the last axis, padded with a terminal 0."""
    step_costs = np.asarray(step_costs, dtype=float)
    rev = np.cumsum(step_costs[..., ::-1], axis=-1)[..., ::-1]
    pad = np.zeros(step_costs.shape[:-1] + (1,))
    return np.concatenate([rev, pad], axis=-1)


def simulate(s0, controls, p: CartpoleParams, clamp: bool = True):
    """Like :func:`rollout` but never raises; diverged rows carry non-finite values."""
    controls = np.asarray(controls, dtype=float)
    if clamp:
        controls = clamp_force(controls, p)
    T = controls.shape[-1]
    s = np.broadcast_to(np.asarray(s0, dtype=float), controls.shape[:-1] + (4,)).copy()
    states = np.empty(controls.shape[:-1] + (T + 1, 4))
    states[..., 0, :] = s
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            s = _rk4(s, controls[..., t], p, p.dt)
            states[..., t + 1, :] = s
        step_costs = np.asarray(running_cost(states[..., 1:, :]))
    return Rollout(states, controls, step_costs, suffix_sums(step_costs))


def rollout(s0, controls, p: CartpoleParams, clamp: bool = True) -> Rollout:
    """Simulate a control sequence (or a batch of them) from ``s0``.

    ``controls`` has shape ``(T,)`` or ``(K, T)``.  Raises
    :class:`DivergedRolloutError` carrying the first non-finite step index.
    """
    controls = np.asarray(controls, dtype=float)
    if not np.all(np.isfinite(controls)):
        raise ValueError("controls must be finite")
    r = simulate(s0, controls, p, clamp)
    finite = np.all(np.isfinite(r.states), axis=-1)
    if not np.all(finite):
        bad = np.where(~finite.reshape(-1, finite.shape[-1]).all(axis=0))[0]
        raise DivergedRolloutError(int(bad[0]))
    return r


def _rk4(s, force, p, h):
    k1 = _deriv_unchecked(s, force, p)
    k2 = _deriv_unchecked(s + 0.5 * h * k1, force, p)
    k3 = _deriv_unchecked(s + 0.5 * h * k2, force, p)
    k4 = _deriv_unchecked(s + h * k3, force, p)
    return s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def linearized_upright(p: CartpoleParams, lam: float = 1.0, Q: np.ndarray | None = None) -> LinearSystem:
    """Exact zero-order-hold discretization of the upright linearization.

    The cost matrix defaults to ``2 * diag(500, 1, 5, 10)`` so that
    ``0.5 x'Qx`` equals the running cost.
    """
    from scipy.linalg import expm

    total = p.cart_mass + p.pole_mass
    l, m = p.pole_length, p.pole_mass
    denom = l * (4.0 / 3.0 - m / total)
    # phi_ddot = a_phi * phi + b_phi * F ; q_ddot = a_q * phi + b_q * F
    a_phi = p.gravity / denom
    b_phi = -1.0 / (total * denom)
    a_q = -m * l * a_phi / total
    b_q = 1.0 / total - m * l * b_phi / total
    Ac = np.array(
        [[0.0, 1.0, 0.0, 0.0], [a_phi, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [a_q, 0.0, 0.0, 0.0]]
    )
    Bc = np.array([[0.0], [b_phi], [0.0], [b_q]])
    M = np.zeros((5, 5))
    M[:4, :4] = Ac
    M[:4, 4:] = Bc
    E = expm(M * p.dt)
    if Q is None:
        Q = 2.0 * np.diag(COST_WEIGHTS)
    return LinearSystem(E[:4, :4], E[:4, 4:], Q, lam)
