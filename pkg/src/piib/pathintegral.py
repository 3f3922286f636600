"""Path-integral weighting, MPPI swing-up, variation sampling and ground-truth tables.

The ground truth for timestep ``t`` is the empirical version of

    p(u_t | x) ∝ exp(-L(x_{t+1}) / lam) * W(u_t),

where the value factor ``W`` is realized on the sampled support by each
sample's own cost-to-go from ``t``.  Conditions ``x`` are initial angles.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cartpole import CartpoleParams, Rollout, rollout, simulate, step_rk4, wrap_angle

log = logging.getLogger(__name__)

MPPI_STREAM = 0
SAMPLING_STREAM = 1


class NoViableRolloutError(RuntimeError):
    pass


class SwingUpFailure(RuntimeError):
    """MPPI did not bring the pole to the balance point within the retry budget."""

    def __init__(self, initial_angle: float, best: Rollout, final_angle: float):
        self.initial_angle = initial_angle
        self.best = best
        self.final_angle = final_angle
        super().__init__(
            f"swing-up from {initial_angle} deg failed: |phi_T| = {abs(final_angle):.3f} rad"
        )


class SamplingStarvedError(RuntimeError):
    pass


class BinningError(ValueError):
    pass


class MissingConditionError(ValueError):
    pass


def initial_state(angle_deg: float) -> np.ndarray:
    return np.array([math.radians(angle_deg), 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class PiWeights:
    weights: np.ndarray
    lam: float


def pi_weights(costs, lam: float) -> PiWeights:
    """Normalized ``exp(-S / lam)``, min-shifted so the largest weight is ``exp(0)``."""
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("empty cost vector")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite")
    w = np.exp(-(costs - costs.min()) / lam)
    return PiWeights(w / w.sum(), lam)


@dataclass(frozen=True)
class MppiConfig:
    k_rollouts: int = 512
    horizon: int = 30  # planning steps
    steps: int = 30  # executed control steps T
    noise_std: float = 5.0
    lam: float = 10.0
    warm_start_iters: int = 50
    iters_per_step: int = 3
    success_tol: float = 0.15
    max_attempts: int = 8


def mppi_step(nominal, state, k_rollouts: int, noise_std: float, lam: float,
              p: CartpoleParams, rng: np.random.Generator) -> np.ndarray:
    """One MPPI update: perturb, roll out, and PI-average the perturbed sequences."""
    if k_rollouts < 2:
        raise ValueError("k_rollouts must be at least 2")
    if not noise_std > 0:
        raise ValueError("noise_std must be positive")
    nominal = np.asarray(nominal, dtype=float)
    eps = noise_std * rng.standard_normal((k_rollouts, nominal.size))
    U = nominal + eps
    r = simulate(state, U, p)
    costs = r.total_cost
    ok = np.isfinite(costs)
    if not ok.any():
        raise NoViableRolloutError("all MPPI rollouts diverged")
    w = pi_weights(costs[ok], lam).weights
    return w @ r.controls[ok]


@dataclass(frozen=True)
class MppiResult:
    initial_angle: float
    controls: np.ndarray
    trajectory: Rollout
    attempts: int

    @property
    def final_angle(self) -> float:
        return float(wrap_angle(self.trajectory.states[-1, 0]))


def _mppi_attempt(s0, cfg: MppiConfig, p: CartpoleParams, rng) -> Rollout:
    nominal = np.zeros(cfg.horizon)
    s = s0.copy()
    for _ in range(cfg.warm_start_iters):
        nominal = mppi_step(nominal, s, cfg.k_rollouts, cfg.noise_std, cfg.lam, p, rng)
    applied = np.empty(cfg.steps)
    for t in range(cfg.steps):
        for _ in range(cfg.iters_per_step):
            nominal = mppi_step(nominal, s, cfg.k_rollouts, cfg.noise_std, cfg.lam, p, rng)
        applied[t] = nominal[0]
        s = step_rk4(s, applied[t], p)
        nominal = np.append(nominal[1:], 0.0)
    return rollout(s0, applied, p)


def mppi_solve(initial_angle: float, cfg: MppiConfig = MppiConfig(),
               p: CartpoleParams = CartpoleParams(), seed: int = 0) -> MppiResult:
    """Receding-horizon MPPI from rest at ``initial_angle`` degrees.

    Each attempt uses its own stream ``(seed, MPPI_STREAM, attempt)``; the first
    attempt whose final wrapped angle is within ``success_tol`` wins.
    """
    s0 = initial_state(initial_angle)
    best = None
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([seed, MPPI_STREAM, attempt])
        traj = _mppi_attempt(s0, cfg, p, rng)
        final = float(wrap_angle(traj.states[-1, 0]))
        if abs(final) < cfg.success_tol:
            return MppiResult(initial_angle, traj.controls, traj, attempt + 1)
        log.info("angle %s attempt %d missed: phi_T=%.3f", initial_angle, attempt, final)
        if best is None or abs(final) < abs(float(wrap_angle(best.states[-1, 0]))):
            best = traj
    raise SwingUpFailure(initial_angle, best, float(wrap_angle(best.states[-1, 0])))


@dataclass(frozen=True)
class TrajectoryBundle:
    """Viable control sequences for one initial condition; row 0 is the base."""

    initial_angle: float
    controls: np.ndarray  # (S, T)
    states: np.ndarray  # (S, T+1, 4)
    suffix_costs: np.ndarray  # (S, T+1), terminal entry 0
    base_cost: float
    acceptance_ratio: float
    attempts: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.controls.shape[0]

    @property
    def horizon(self) -> int:
        return self.controls.shape[1]

    @property
    def total_costs(self) -> np.ndarray:
        return self.suffix_costs[:, 0]

    @property
    def step_costs(self) -> np.ndarray:
        """``L(x_{t+1})`` per sample and timestep."""
        return self.suffix_costs[:, :-1] - self.suffix_costs[:, 1:]


def sample_variations(base, s0, n_target: int, noise_std: float, acceptance_ratio: float,
                      p: CartpoleParams, rng: np.random.Generator,
                      attempt_budget: int | None = None, batch_size: int = 256,
                      initial_angle: float | None = None) -> TrajectoryBundle:
    """Perturb ``base`` with i.i.d. Gaussian noise and keep variations with
    ``S <= acceptance_ratio * S_base``.

    Candidates are drawn in fixed-size batches, so for a given generator state
    the candidate stream does not depend on ``acceptance_ratio``.
    """
    if not acceptance_ratio > 1:
        raise ValueError("acceptance_ratio must exceed 1")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    base = np.asarray(base, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    if attempt_budget is None:
        attempt_budget = max(100 * n_target, 10_000)
    ref = rollout(s0, base, p)
    threshold = acceptance_ratio * ref.total_cost

    kept_u, kept_x, kept_s = [ref.controls[None]], [ref.states[None]], [ref.suffix_costs[None]]
    n_kept, tried = 1, 0
    while n_kept < n_target and tried < attempt_budget:
        m = min(batch_size, attempt_budget - tried)
        cand = base + noise_std * rng.standard_normal((m, base.size))
        tried += m
        r = simulate(s0, cand, p)
        ok = np.isfinite(r.total_cost) & (r.total_cost <= threshold)
        idx = np.flatnonzero(ok)[: n_target - n_kept]
        if idx.size:
            kept_u.append(r.controls[idx])
            kept_x.append(r.states[idx])
            kept_s.append(r.suffix_costs[idx])
            n_kept += idx.size

    accepted = n_kept - 1
    if n_kept < n_target:
        if tried and accepted / tried < 1e-3:
            raise SamplingStarvedError(
                f"accepted {accepted} of {tried} variations; noise_std={noise_std} is likely too large"
            )
        log.warning("attempt budget exhausted with %d/%d samples", n_kept, n_target)
    return TrajectoryBundle(
        initial_angle=float(initial_angle if initial_angle is not None else math.degrees(s0[0])),
        controls=np.concatenate(kept_u),
        states=np.concatenate(kept_x),
        suffix_costs=np.concatenate(kept_s),
        base_cost=float(ref.total_cost),
        acceptance_ratio=acceptance_ratio,
        attempts=tried,
    )


def control_bounds(bundles) -> tuple[float, float]:
    bundles = list(bundles)
    if not bundles:
        raise ValueError("need at least one bundle")
    lo = min(float(np.min(b.controls)) for b in bundles)
    hi = max(float(np.max(b.controls)) for b in bundles)
    return lo, hi


def n_bins(u_min: float, u_max: float, increment: float) -> int:
    if not increment > 0:
        raise ValueError("increment must be positive")
    if u_max < u_min:
        raise ValueError("u_max < u_min")
    return max(1, int(math.ceil(round((u_max - u_min) / increment, 9))))


def bin_edges(u_min: float, u_max: float, increment: float) -> np.ndarray:
    return u_min + increment * np.arange(n_bins(u_min, u_max, increment) + 1)


def discretize_controls(controls, u_min: float, u_max: float, increment: float) -> np.ndarray:
    """Map controls to bins ``(edge_k, edge_{k+1}]``; ``u_min`` itself goes to bin 0."""
    controls = np.asarray(controls, dtype=float)
    M = n_bins(u_min, u_max, increment)
    if np.any(controls < u_min) or np.any(controls > u_max):
        raise BinningError("control value outside [u_min, u_max]")
    pos = np.round((controls - u_min) / increment, 9)
    return np.clip(np.ceil(pos).astype(np.int64) - 1, 0, M - 1)


@dataclass(frozen=True)
class GroundTruthTables:
    bin_edges: np.ndarray  # (M+1,)
    tables: np.ndarray  # (T, N, M); tables[t, i] = p(u_t | x = i)

    def __post_init__(self):
        t = np.asarray(self.tables, dtype=float)
        if t.ndim != 3:
            raise ValueError("tables must have shape (T, N, M)")
        if t.shape[2] != len(self.bin_edges) - 1:
            raise ValueError("bin_edges must have M+1 entries")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=2) - 1)) > 1e-12:
            raise ValueError("every table row must be a pmf")

    @property
    def n_conditions(self) -> int:
        return self.tables.shape[1]

    @property
    def n_bins(self) -> int:
        return self.tables.shape[2]

    @property
    def horizon(self) -> int:
        return self.tables.shape[0]


def ground_truth_tables(bins, suffix_costs, lam: float, M: int, edges=None) -> GroundTruthTables:
    """Per-timestep ``p(u_t | x)`` from binned bundles.

    ``bins[i]`` is the ``(S_i, T)`` bin-index array of condition ``i`` and
    ``suffix_costs[i]`` the matching ``(S_i, T+1)`` cost-to-go array.  Bin ``b``
    of row ``(t, i)`` receives ``sum_s exp(-suffix_t^(s) / lam)`` over samples
    whose ``u_t`` falls in ``b``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    N = len(bins)
    if N == 0 or len(suffix_costs) != N:
        raise MissingConditionError("need bins and suffix costs for every condition")
    T = np.asarray(bins[0]).shape[1]
    tables = np.zeros((T, N, M))
    for i, (b, s) in enumerate(zip(bins, suffix_costs)):
        b = np.asarray(b)
        s = np.asarray(s, dtype=float)
        if b.shape[0] == 0:
            raise MissingConditionError(f"condition {i} has no samples")
        if b.shape[1] != T or s.shape != (b.shape[0], T + 1):
            raise ValueError(f"condition {i}: inconsistent bundle shapes")
        if b.min() < 0 or b.max() >= M:
            raise BinningError(f"condition {i}: bin index outside [0, {M})")
        for t in range(T):
            c = s[:, t]
            w = np.exp(-(c - c.min()) / lam)
            row = np.bincount(b[:, t], weights=w, minlength=M)
            tables[t, i] = row / row.sum()
    if edges is None:
        edges = np.arange(M + 1, dtype=float)
    return GroundTruthTables(np.asarray(edges, dtype=float), tables)
