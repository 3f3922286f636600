"""Gaussian counterpart: LQR covariance algebra and the Gaussian IB iteration.

For a linear prediction ``x' = A x + B u`` with cost ``0.5 x'^T Q x'`` and
Gaussian priors ``N(0, Sx)``, ``N(0, Su)``, the path-integral weighting turns
the prior into a joint Gaussian over ``(x, u)`` with precision

    [[A^T Qt A + Sx^-1,  A^T Qt B        ],
     [B^T Qt A,          B^T Qt B + Su^-1]],     Qt = Q / lambda.

The bottleneck ``y = C x + xi`` is then found with the fixed-point iteration
over ``(C, Sxi)`` of the Gaussian IB.

The marginals of this joint differ from the priors ``Sx``, ``Su``.  The IB
iteration and the recovery of ``S_{u|y}`` use the joint's marginals, so that
every covariance involved comes from one distribution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cartpole import LinearSystem
from .probability import NumericalDomainError, logdet_pd

log = logging.getLogger(__name__)

MAX_AUGMENTED_DIM = 4096
COLLAPSED_INFO = 1e-9


class ModelInconsistencyError(NumericalDomainError):
    """The assembled joint precision is not positive definite."""


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_pd(m, name: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(m, m.T, atol=1e-10 * max(1.0, np.abs(m).max()), rtol=0):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError(f"{name} is not positive definite") from exc
    return _sym(m)


def inv_pd(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric PD matrix via Cholesky, with one jittered retry."""
    m = _sym(np.asarray(m, dtype=float))
    n = m.shape[0]
    eye = np.eye(n)
    try:
        L = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(m) / n
        log.warning("%s not PD, retrying with jitter %.3g (cond %.3g)", name, jitter, np.linalg.cond(m))
        try:
            L = np.linalg.cholesky(m + jitter * eye)
        except np.linalg.LinAlgError as exc:
            raise NumericalDomainError(
                f"{name} is not positive definite (cond {np.linalg.cond(m):.3g})"
            ) from exc
    Linv = np.linalg.solve(L, eye)
    return _sym(Linv.T @ Linv)


# -- setup ---------------------------------------------------------------------


def augment_horizon(system: LinearSystem, T: int, max_dim: int = MAX_AUGMENTED_DIM) -> LinearSystem:
    """Stack ``T`` predictions: ``[x_1; ...; x_T] = A_aug x_0 + B_aug [u_0; ...; u_{T-1}]``.

    ``Q_aug`` is block diagonal so that the stacked quadratic form equals the
    sum of the per-step costs.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if T == 1:
        return system
    A, B = system.A, system.B
    n, m = A.shape[0], B.shape[1]
    if A.shape != (n, n):
        raise ValueError("augment_horizon needs a square A")
    if T * max(n, m) > max_dim:
        raise ValueError(f"augmented dimension {T * max(n, m)} exceeds {max_dim}")
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    A_aug = np.vstack(powers[1:])
    B_aug = np.zeros((T * n, T * m))
    for i in range(T):
        for j in range(i + 1):
            B_aug[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j] @ B
    Q_aug = np.kron(np.eye(T), system.Q)
    return LinearSystem(A_aug, B_aug, Q_aug, system.lam)


@dataclass(frozen=True)
class LQGSetup:
    system: LinearSystem
    sigma_x: np.ndarray
    sigma_u: np.ndarray
    horizon: int = 1

    def __post_init__(self):
        sx = _check_pd(self.sigma_x, "sigma_x")
        su = _check_pd(self.sigma_u, "sigma_u")
        if sx.shape[0] != self.system.n_x:
            raise ValueError("sigma_x does not match the state dimension")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        aug = augment_horizon(self.system, self.horizon)
        if su.shape[0] != aug.n_u:
            raise ValueError("sigma_u does not match the (stacked) control dimension")
        object.__setattr__(self, "sigma_x", sx)
        object.__setattr__(self, "sigma_u", su)
        object.__setattr__(self, "_aug", aug)

    @property
    def effective(self) -> LinearSystem:
        """The system after stacking ``horizon`` steps."""
        return self._aug

    @property
    def Q_tilde(self) -> np.ndarray:
        return self.effective.Q_tilde

    def precision(self) -> np.ndarray:
        s = self.effective
        Qt = s.Q_tilde
        pxx = s.A.T @ Qt @ s.A + inv_pd(self.sigma_x, "sigma_x")
        pxu = s.A.T @ Qt @ s.B
        puu = s.B.T @ Qt @ s.B + inv_pd(self.sigma_u, "sigma_u")
        return _sym(np.block([[pxx, pxu], [pxu.T, puu]]))


def conditional_covariances(setup: LQGSetup):
    """``(S_{x|u}, S_{u|x}) = ((A^T Qt A + Sx^-1)^-1, (B^T Qt B + Su^-1)^-1)``."""
    s = setup.effective
    Qt = s.Q_tilde
    sxu = inv_pd(s.A.T @ Qt @ s.A + inv_pd(setup.sigma_x), "A^T Qt A + Sx^-1")
    sux = inv_pd(s.B.T @ Qt @ s.B + inv_pd(setup.sigma_u), "B^T Qt B + Su^-1")
    return sxu, sux


@dataclass(frozen=True)
class JointBlocks:
    sigma_x_given_u: np.ndarray
    sigma_u_given_x: np.ndarray
    sigma_xu: np.ndarray
    sigma_ux: np.ndarray
    sigma_x_marg: np.ndarray
    sigma_u_marg: np.ndarray
    precision: np.ndarray
    closed_form_discrepancy: float | None = None

    def covariance(self) -> np.ndarray:
        return np.block([[self.sigma_x_marg, self.sigma_xu], [self.sigma_ux, self.sigma_u_marg]])

    @property
    def i_xu(self) -> float:
        return 0.5 * (logdet_pd(self.sigma_x_marg) - logdet_pd(self.sigma_x_given_u))


def joint_covariance(setup: LQGSetup) -> JointBlocks:
    """Invert the joint precision blockwise with Schur complements."""
    P = setup.precision()
    n = setup.system.n_x
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise ModelInconsistencyError("joint precision is not positive definite") from exc
    pxx, pxu, puu = P[:n, :n], P[:n, n:], P[n:, n:]
    sxu = inv_pd(pxx, "P_xx")  # S_{x|u}
    sux = inv_pd(puu, "P_uu")  # S_{u|x}
    su_marg = inv_pd(puu - pxu.T @ sxu @ pxu, "Schur complement of P_xx")
    cross = -sxu @ pxu @ su_marg  # S_xu
    sx_marg = _sym(sxu + sxu @ pxu @ su_marg @ pxu.T @ sxu)

    discrepancy = None
    s = setup.effective
    if s.A.shape[0] == s.A.shape[1] and np.linalg.cond(s.A) < 1e12:
        # closed form -A^-1 B Su, kept only as a diagnostic
        closed = -np.linalg.solve(s.A, s.B @ setup.sigma_u)
        scale = max(np.abs(cross).max(), 1e-300)
        discrepancy = float(np.abs(closed - cross).max() / scale)
        if discrepancy > 1e-6:
            log.info("closed-form cross-covariance differs from block inversion by %.3g (relative)",
                     discrepancy)
    return JointBlocks(sxu, sux, cross, cross.T.copy(), sx_marg, su_marg, P, discrepancy)


@dataclass(frozen=True)
class EntropyCheck:
    holds: bool
    det_conditional_precision: float  # det(B^T Qt B + Su^-1)
    det_prior_precision: float  # det(Su^-1)


def entropy_inequality_check(setup: LQGSetup) -> EntropyCheck:
    """``det(B^T Qt B + Su^-1) >= det(Su^-1)``, compared in log space."""
    s = setup.effective
    su_inv = inv_pd(setup.sigma_u)
    lhs = s.B.T @ s.Q_tilde @ s.B + su_inv
    l1, l2 = logdet_pd(lhs), logdet_pd(su_inv)
    return EntropyCheck(bool(l1 >= l2 - 1e-12 * max(1.0, abs(l2))), float(np.exp(l1)), float(np.exp(l2)))


# -- Gaussian IB -------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianIBState:
    C: np.ndarray
    sigma_xi: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "sigma_xi", _check_pd(self.sigma_xi, "sigma_xi"))


@dataclass(frozen=True)
class BottleneckCollapse:
    """``beta S_{y|u}^-1 - (beta-1) S_y^-1`` lost definiteness: the channel collapses."""

    beta: float
    min_eigenvalue: float


def gib_iterate(state: GaussianIBState, beta: float, sigma_x, sigma_x_given_u):
    """One application of the four update equations.

    Returns the next :class:`GaussianIBState`, or :class:`BottleneckCollapse`
    when the noise update is not positive definite.
    """
    C, sxi = state.C, state.sigma_xi
    sigma_x = np.asarray(sigma_x, dtype=float)
    sxu = np.asarray(sigma_x_given_u, dtype=float)
    sy = _sym(C @ sigma_x @ C.T + sxi)
    syu = _sym(C @ sxu @ C.T + sxi)
    syu_inv = inv_pd(syu, "S_{y|u}")
    m = _sym(beta * syu_inv - (beta - 1.0) * inv_pd(sy, "S_y"))
    ev = np.linalg.eigvalsh(m)
    if ev.min() <= 0:
        return BottleneckCollapse(float(beta), float(ev.min()))
    sxi_new = inv_pd(m, "noise precision")
    n = C.shape[1]
    C_new = beta * sxi_new @ syu_inv @ C @ (np.eye(n) - sxu @ inv_pd(sigma_x, "S_x"))
    return GaussianIBState(C_new, sxi_new)


def gib_information(state: GaussianIBState, sigma_x, sigma_x_given_u):
    """``(I(X;Y), I(Y;U))`` in nats."""
    C, sxi = state.C, state.sigma_xi
    ld_y = logdet_pd(_sym(C @ sigma_x @ C.T + sxi))
    ld_yu = logdet_pd(_sym(C @ sigma_x_given_u @ C.T + sxi))
    return max(0.5 * (ld_y - logdet_pd(sxi)), 0.0), max(0.5 * (ld_y - ld_yu), 0.0)


@dataclass(frozen=True)
class GIBResult:
    state: GaussianIBState
    beta: float
    i_xy: float
    i_yu: float
    collapsed: bool
    converged: bool
    iterations: int
    f_history: tuple = field(default=(), repr=False)

    @property
    def f_ib(self) -> float:
        return self.i_xy - self.beta * self.i_yu


def gib_solve(setup: LQGSetup, beta: float, init: GaussianIBState | None = None,
              tol: float = 1e-10, max_iter: int = 20000, collapse_tol: float = 1e-12,
              blocks: JointBlocks | None = None) -> GIBResult:
    """Iterate the Gaussian IB until ``(C, S_xi)`` stop moving.

    Uses the joint's ``S_x,marg`` and ``S_{x|u}``.  ``collapsed`` is set when
    the noise update loses definiteness, ``C`` falls below ``collapse_tol`` or
    the final ``I(X;Y)`` is at most ``COLLAPSED_INFO``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    blocks = blocks or joint_covariance(setup)
    sx, sxu = blocks.sigma_x_marg, blocks.sigma_x_given_u
    n = sx.shape[0]
    state = init or GaussianIBState(np.eye(n), np.eye(n))
    history = []
    collapsed = converged = False
    k = 0
    for k in range(1, max_iter + 1):
        nxt = gib_iterate(state, beta, sx, sxu)
        if isinstance(nxt, BottleneckCollapse):
            collapsed = converged = True
            state = GaussianIBState(np.zeros_like(state.C), state.sigma_xi)
            break
        i_xy, i_yu = gib_information(nxt, sx, sxu)
        history.append(i_xy - beta * i_yu)
        change = max(np.abs(nxt.C - state.C).max(), np.abs(nxt.sigma_xi - state.sigma_xi).max())
        state = nxt
        if np.abs(state.C).max() < collapse_tol:
            collapsed = converged = True
            state = GaussianIBState(np.zeros_like(state.C), state.sigma_xi)
            break
        if change < tol:
            converged = True
            break
    i_xy, i_yu = gib_information(state, sx, sxu)
    collapsed = collapsed or i_xy <= COLLAPSED_INFO
    return GIBResult(state, float(beta), i_xy, i_yu, collapsed, converged, k, tuple(history))


def recover_control_covariance(state: GaussianIBState, blocks: JointBlocks) -> np.ndarray:
    """``S_{u|y} = (Su^-1 + Su^-1 S_uy S_{y|u}^-1 S_yu Su^-1)^-1`` with ``S_uy = S_ux C^T``.

    ``Su`` here is the u-marginal of the joint, which makes the expression the
    exact Gaussian conditional covariance of u given y.
    """
    C = state.C
    su = blocks.sigma_u_marg
    su_inv = inv_pd(su, "S_u,marg")
    s_uy = blocks.sigma_ux @ C.T
    syu = _sym(C @ blocks.sigma_x_given_u @ C.T + state.sigma_xi)
    inner = su_inv + su_inv @ s_uy @ inv_pd(syu, "S_{y|u}") @ s_uy.T @ su_inv
    return inv_pd(inner, "S_{u|y} precision")


# -- curve -----------------------------------------------------------------------------


def default_beta_grid(n: int = 25) -> np.ndarray:
    return np.geomspace(1.01, 100.0, n)


@dataclass(frozen=True)
class GaussianCurveRow:
    beta: float
    i_xy: float
    i_yu: float
    f_ib: float
    det_sigma_u_given_y: float
    collapsed: bool
    converged: bool


def gaussian_curve(setup: LQGSetup, betas=None, **solve_kw) -> list[GaussianCurveRow]:
    blocks = joint_covariance(setup)
    rows = []
    for b in default_beta_grid() if betas is None else betas:
        r = gib_solve(setup, float(b), blocks=blocks, **solve_kw)
        suy = recover_control_covariance(r.state, blocks)
        rows.append(GaussianCurveRow(float(b), r.i_xy, r.i_yu, r.f_ib, float(np.linalg.det(suy)),
                                     r.collapsed, r.converged))
    return rows
