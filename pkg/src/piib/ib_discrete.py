"""Discrete Information Bottleneck with uniform priors on X and U.

One iteration, with ``p(u|x) = psi*(x, u) / M``:

    p'(y|x)  = p(y|x) / sum_x p(y|x)
    psi(y,u) = sum_x p'(y|x) psi*(x, u)          (so p(u|y) = psi / M)
    p(y|x)  <- p(y) / Z(beta, x) * exp(-beta * KL[p(u|x) || p(u|y)])
    p(y)    <- mean_x p(y|x)
    p(u|y)  <- psi(y, u) / M, rebuilt from the updated p(y|x)

Everything is vectorized over a leading batch axis so that a whole beta grid
can be iterated at once; :func:`ib_iterate` and :func:`ib_solve` are the
single-problem entry points.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .probability import mutual_information, row_kl, xlogx

log = logging.getLogger(__name__)

DEAD_Y = 1e-15
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 5000


class IBNumericalError(FloatingPointError):
    pass


class ProblemTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteIBProblem:
    """``psi_star`` is ``M * p(u|x)`` (shape ``N x M``)."""

    psi_star: np.ndarray
    beta: float
    y_card: int | None = None

    def __post_init__(self):
        psi = np.asarray(self.psi_star, dtype=float)
        if psi.ndim != 2:
            raise ValueError("psi_star must be an N x M table")
        if np.any(psi < 0):
            raise ValueError("psi_star must be non-negative")
        rows = psi / psi.shape[1]
        if np.max(np.abs(rows.sum(axis=1) - 1)) > 1e-9:
            raise ValueError("rows of psi_star / M must sum to 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        object.__setattr__(self, "psi_star", psi)
        if self.y_card is None:
            object.__setattr__(self, "y_card", psi.shape[0])
        elif self.y_card < 1:
            raise ValueError("y_card must be positive")

    @classmethod
    def from_conditional(cls, p_u_given_x, beta: float, y_card: int | None = None):
        p = np.asarray(p_u_given_x, dtype=float)
        return cls(p * p.shape[1], beta, y_card)

    @property
    def n_x(self) -> int:
        return self.psi_star.shape[0]

    @property
    def n_u(self) -> int:
        return self.psi_star.shape[1]

    @property
    def p_u_given_x(self) -> np.ndarray:
        return self.psi_star / self.n_u

    @property
    def joint_xu(self) -> np.ndarray:
        return self.p_u_given_x / self.n_x

    def i_xu(self) -> float:
        return mutual_information(self.joint_xu)


@dataclass(frozen=True)
class IBState:
    p_y_given_x: np.ndarray  # (N, Y)
    p_y: np.ndarray  # (Y,)
    p_u_given_y: np.ndarray  # (Y, M)


@dataclass(frozen=True)
class IBSolution:
    p_y_given_x: np.ndarray
    p_y: np.ndarray
    p_u_given_y: np.ndarray
    beta: float
    i_xy: float
    i_yu: float
    f_ib: float
    kl_per_condition: np.ndarray
    iterations_used: int
    converged: bool
    residual: float

    @property
    def state(self) -> IBState:
        return IBState(self.p_y_given_x, self.p_y, self.p_u_given_y)


# -- batched kernels ---------------------------------------------------------

# log q is floored here; an unsupported bin then costs ~708 nats per unit of
# p(u|x) mass instead of +inf, which keeps rows with tiny masses finite.
LOG_FLOOR = float(np.log(np.finfo(float).tiny))


def _support(p_ux: np.ndarray) -> np.ndarray:
    """Columns of U carrying mass under some condition."""
    return np.flatnonzero(p_ux.sum(axis=0) > 0)


def _decoder(p_yx: np.ndarray, p_ux: np.ndarray, prev=None):
    """``p(u|y) = sum_x p'(y|x) p(u|x)`` for a batch ``p_yx`` of shape (B, N, Y)."""
    colsum = p_yx.sum(axis=1)  # (B, Y)
    live = colsum > 0
    p_prime = np.divide(p_yx, colsum[:, None, :], out=np.zeros_like(p_yx), where=live[:, None, :])
    q = np.swapaxes(p_prime, 1, 2) @ p_ux
    if prev is not None and not live.all():
        q = np.where(live[:, :, None], q, prev)
    return q


def _log_floor(q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(q), LOG_FLOOR)


def _kl_matrix(p_ux: np.ndarray, logq: np.ndarray, negent: np.ndarray) -> np.ndarray:
    """``KL[p(u|x) || q(u|y)]`` for every (x, y); shape (B, N, Y)."""
    cross = p_ux @ np.swapaxes(logq, 1, 2)
    return np.maximum(negent[None, :, None] - cross, 0.0)


def _channel_update(p_y: np.ndarray, kl: np.ndarray, beta: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logits = np.log(p_y)[:, None, :] - beta[:, None, None] * kl
    shift = logits.max(axis=2, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise IBNumericalError("non-finite exponent in channel update")
    w = np.exp(logits - shift)
    return w / w.sum(axis=2, keepdims=True)


def _kill_dead(p_yx: np.ndarray, p_y: np.ndarray):
    dead = p_y < DEAD_Y
    if dead.any():
        p_yx = np.where(dead[:, None, :], 0.0, p_yx)
        p_yx = p_yx / p_yx.sum(axis=2, keepdims=True)
        p_y = p_yx.mean(axis=1)
    return p_yx, p_y


def _step(p_yx, p_y, q, p_ux, negent, h_u, beta):
    """Update a consistent batch ``(p_yx, p_y, q)``.

    Returns the next triple and the objective of the input triple, which is
    cheap here because ``log q`` is needed anyway and p(u) is the fixed
    marginal of the table.
    """
    logq = _log_floor(q)
    N = p_yx.shape[1]
    i_xy = -xlogx(p_y).sum(axis=1) + xlogx(p_yx).sum(axis=(1, 2)) / N
    i_yu = h_u + np.einsum("by,by->b", p_y, (q * logq).sum(axis=2))
    f = i_xy - beta * i_yu
    new_yx = _channel_update(p_y, _kl_matrix(p_ux, logq, negent), beta)
    new_y = new_yx.mean(axis=1)
    new_yx, new_y = _kill_dead(new_yx, new_y)
    return new_yx, new_y, _decoder(new_yx, p_ux, q), f


def iterate_batch(p_yx, p_y, q_prev, p_ux, negent, beta):
    """One full iteration; the decoder is first rebuilt from ``p_yx``."""
    q = _decoder(p_yx, p_ux, q_prev)
    h_u = -xlogx(p_ux.mean(axis=0)).sum()
    new_yx, new_y, new_q, _ = _step(p_yx, p_y, q, p_ux, negent, h_u, beta)
    return new_yx, new_y, new_q


# -- information quantities ----------------------------------------------------


def channel_information(p_yx: np.ndarray, p_y: np.ndarray, q: np.ndarray, M: int):
    """``(i_xy, i_yu, kl_per_condition)`` for a batch, uniform p(x) and p(u) = 1/M.

    ``q`` may be restricted to the U support; columns outside it carry no mass.
    """
    N = p_yx.shape[1]
    h_y = -xlogx(p_y).sum(axis=-1)
    h_y_given_x = -xlogx(p_yx).sum(axis=(-2, -1)) / N
    i_xy = np.maximum(h_y - h_y_given_x, 0.0)
    p_u = np.einsum("by,bym->bm", p_y, q)
    h_u = -xlogx(p_u).sum(axis=-1)
    h_u_given_y = -np.einsum("by,by->b", p_y, xlogx(q).sum(axis=-1))
    i_yu = np.maximum(h_u - h_u_given_y, 0.0)
    # KL[p(u|y) || uniform] = log M - H(p(u|y))
    kl_y = np.log(M) + xlogx(q).sum(axis=-1)
    kl_x = np.einsum("bny,by->bn", p_yx, np.maximum(kl_y, 0.0))
    return i_xy, i_yu, kl_x


def _info_single(prob: DiscreteIBProblem, p_yx, p_y, q_full):
    i_xy, i_yu, kl = channel_information(p_yx[None], p_y[None], q_full[None], prob.n_u)
    return float(i_xy[0]), float(i_yu[0]), kl[0]


def f_ib(prob: DiscreteIBProblem, p_y_given_x) -> float:
    """``I(X;Y) - beta I(Y;U)`` with p(y), p(u|y) obtained by marginalization."""
    p_yx = np.asarray(p_y_given_x, dtype=float)
    p_ux = prob.p_u_given_x
    q = _decoder(p_yx[None], p_ux)[0]
    i_xy, i_yu, _ = _info_single(prob, p_yx, p_yx.mean(axis=0), q)
    return i_xy - prob.beta * i_yu


# -- single-problem API --------------------------------------------------------


def initial_state(prob: DiscreteIBProblem, confidence: float = 0.99) -> IBState:
    """Softened identity channel, ``p(y) = 1/N`` and ``p(u|y) = p(u|x)``."""
    N, Y = prob.n_x, prob.y_card
    p_yx = np.zeros((N, Y))
    if Y == 1:
        p_yx[:] = 1.0
    else:
        p_yx[:] = (1.0 - confidence) / (Y - 1)
        p_yx[np.arange(N), np.arange(N) % Y] = confidence
    if Y == N:
        p_y = np.full(Y, 1.0 / N)
        q = prob.p_u_given_x.copy()
    else:
        p_y = p_yx.mean(axis=0)
        q = _decoder(p_yx[None], prob.p_u_given_x)[0]
    return IBState(p_yx, p_y, q)


def ib_iterate(prob: DiscreteIBProblem, cur: IBState) -> IBState:
    p_ux = prob.p_u_given_x
    negent = xlogx(p_ux).sum(axis=1)
    yx, y, q = iterate_batch(
        cur.p_y_given_x[None], cur.p_y[None], cur.p_u_given_y[None], p_ux, negent,
        np.array([float(prob.beta)]),
    )
    return IBState(yx[0], y[0], q[0])


def make_solution(prob: DiscreteIBProblem, state: IBState, iterations: int, converged: bool) -> IBSolution:
    i_xy, i_yu, kl = _info_single(prob, state.p_y_given_x, state.p_y, state.p_u_given_y)
    return IBSolution(
        state.p_y_given_x, state.p_y, state.p_u_given_y, float(prob.beta),
        i_xy, i_yu, i_xy - prob.beta * i_yu, kl, iterations, converged,
        fixed_point_residual(prob, state),
    )


def ib_solve(prob: DiscreteIBProblem, init: IBState | None = None, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, monitor: bool = True) -> IBSolution:
    """Iterate to a stationary point of ``I(X;Y) - beta I(Y;U)``.

    Stops once the largest change of any ``p(y|x)`` entry drops below ``tol``.
    An exhausted ``max_iter`` returns the last iterate with ``converged=False``.
    The objective is checked for descent every step unless ``monitor`` is off;
    an increase beyond 1e-9 raises :class:`IBNumericalError`.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    sol = solve_batch(prob.psi_star / prob.n_u, [prob.beta], prob.y_card, init=init, tol=tol,
                      max_iter=max_iter, monitor=monitor)
    return sol[0]


def solve_batch(p_u_given_x, betas, y_card: int | None = None, init: IBState | None = None,
                tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                monitor: bool = True) -> list[IBSolution]:
    """Solve the same ground truth for several betas at once.

    Converged problems leave the active batch, so each result matches solving
    it alone up to rounding.
    """
    p_full = np.asarray(p_u_given_x, dtype=float)
    betas = np.asarray(betas, dtype=float)
    probs = [DiscreteIBProblem(p_full * p_full.shape[1], float(b), y_card) for b in betas]
    if not probs:
        return []
    N, M = p_full.shape
    cols = _support(p_full)
    p_ux = p_full[:, cols]
    negent = xlogx(p_ux).sum(axis=1)

    init = init or initial_state(probs[0])
    B = len(betas)
    yx = np.repeat(init.p_y_given_x[None], B, axis=0)
    y = np.repeat(np.asarray(init.p_y, dtype=float)[None], B, axis=0)
    q = np.repeat(np.asarray(init.p_u_given_y, dtype=float)[:, cols][None], B, axis=0)

    q = _decoder(yx, p_ux, q)
    h_u = -xlogx(p_ux.mean(axis=0)).sum()
    done = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    prev_f = np.full(B, np.inf)
    for k in range(1, max_iter + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        try:
            nyx, ny, nq, f = _step(yx[act], y[act], q[act], p_ux, negent, h_u, betas[act])
        except IBNumericalError as exc:
            raise IBNumericalError(f"iteration {k}: {exc}") from exc
        # f belongs to the iterate entering step k
        if monitor and k > 1 and np.any(f > prev_f[act] + 1e-9):
            j = int(np.argmax(f - prev_f[act]))
            raise IBNumericalError(
                f"objective increased at iteration {k - 1} for beta={betas[act[j]]!r}: "
                f"{prev_f[act[j]]!r} -> {f[j]!r}"
            )
        prev_f[act] = f
        change = np.abs(nyx - yx[act]).max(axis=(1, 2))
        yx[act], y[act], q[act] = nyx, ny, nq
        iters[act] = k
        done[act[change < tol]] = True

    out = []
    for b, prob in enumerate(probs):
        q_full = np.zeros((prob.y_card, M))
        q_full[:, cols] = q[b]
        state = IBState(yx[b], y[b], q_full)
        out.append(make_solution(prob, state, int(iters[b]), bool(done[b])))
    return out


def fixed_point_residual(prob: DiscreteIBProblem, sol) -> float:
    """Largest violation of the three self-consistent equations at ``sol``."""
    p_yx = np.asarray(sol.p_y_given_x, dtype=float)
    p_y = np.asarray(sol.p_y, dtype=float)
    q = np.asarray(sol.p_u_given_y, dtype=float)
    p_ux = prob.p_u_given_x
    N = prob.n_x
    negent = xlogx(p_ux).sum(axis=1)

    live = p_y > 0
    kl = _kl_matrix(p_ux, _log_floor(q[None]), negent)[0]
    with np.errstate(divide="ignore"):
        logits = np.log(p_y)[None, :] - prob.beta * kl
    predicted = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    r1 = np.max(np.abs(predicted - p_yx))
    r2 = np.max(np.abs(p_y - p_yx.sum(axis=0) / N))
    joint_xu = p_ux / N
    decoded = (p_yx.T @ joint_xu)[live] / p_y[live, None]
    r3 = np.max(np.abs(decoded - q[live])) if live.any() else 0.0
    return float(max(r1, r2, r3))


# -- exhaustive oracle -----------------------------------------------------------


def simplex_grid(dim: int, step: float) -> np.ndarray:
    """All points of the probability simplex in ``dim`` coordinates on a ``step`` lattice."""
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError("1/step must be an integer")
    pts = [c for c in itertools.product(range(n + 1), repeat=dim - 1) if sum(c) <= n]
    arr = np.array([list(c) + [n - sum(c)] for c in pts], dtype=float)
    return arr / n


@dataclass(frozen=True)
class BruteForceResult:
    f_ib: float
    p_y_given_x: np.ndarray
    grid_slack: float


def brute_force_ib(prob: DiscreteIBProblem, grid_step: float = 0.05, max_size: int = 3,
                   chunk: int = 200_000) -> BruteForceResult:
    """Minimize the IB objective over every channel on the simplex lattice.

    ``grid_slack`` is the largest objective gap between the best lattice
    channel and any single-row lattice neighbour of it, an empirical bound on
    how much a finer grid could still gain around the reported optimum.
    """
    N, Y, M = prob.n_x, prob.y_card, prob.n_u
    if max(N, Y, M) > max_size:
        raise ProblemTooLargeError(f"N, |Y|, M must be at most {max_size}")
    rows = simplex_grid(Y, grid_step)
    R = rows.shape[0]
    p_ux = prob.p_u_given_x
    beta = prob.beta

    def objective(idx: np.ndarray) -> np.ndarray:
        ch = rows[idx]  # (B, N, Y)
        p_y = ch.mean(axis=1)
        q = np.einsum("bny,nm->bym", ch, p_ux) / N
        joint_yu = q  # p(y, u)
        h_y = -xlogx(p_y).sum(axis=1)
        i_xy = h_y + xlogx(ch).sum(axis=(1, 2)) / N
        p_u = joint_yu.sum(axis=1)
        i_yu = (xlogx(joint_yu).sum(axis=(1, 2)) - xlogx(p_y).sum(axis=1) - xlogx(p_u).sum(axis=1))
        return i_xy - beta * i_yu

    # the objective is invariant under relabelling y, so the first row may be
    # taken with non-increasing coordinates
    first = np.flatnonzero(np.all(np.diff(rows, axis=1) <= 1e-12, axis=1))
    best_f, best_idx = np.inf, None
    total = first.size * R ** (N - 1)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.stack(np.unravel_index(flat, (first.size,) + (R,) * (N - 1)), axis=1)
        idx[:, 0] = first[idx[:, 0]]
        f = objective(idx)
        j = int(np.argmin(f))
        if f[j] < best_f - 1e-15:
            best_f, best_idx = float(f[j]), idx[j]

    # neighbours: change one row to an adjacent lattice point
    dist = np.abs(rows[:, None, :] - rows[None, :, :]).sum(axis=2)
    adjacent = np.isclose(dist, 2 * grid_step)
    neigh = []
    for i in range(N):
        for r in np.flatnonzero(adjacent[best_idx[i]]):
            cand = best_idx.copy()
            cand[i] = r
            neigh.append(cand)
    slack = float(np.max(np.abs(objective(np.array(neigh)) - best_f))) if neigh else 0.0
    return BruteForceResult(best_f, rows[best_idx], slack)
