"""Beta sweep over per-timestep IB problems and tradeoff aggregation.

Each timestep ``t`` has its own IB problem built from the ground-truth table
``p(u_t | x)``; the joint problem over the whole control sequence is never
formed.  For every beta on the grid all ``T`` problems are solved and two
numbers are recorded per initial condition:

* compute cost: time average of ``E_{p(y|x)} KL[p(u|y) || 1/M]``;
* control cost: sum over t of the expected successor running cost under
  ``p(u_t | y)``, using per-bin means from the sampled bundle.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cartpole import CartpoleParams, simulate
from .ib_discrete import DEFAULT_MAX_ITER, DEFAULT_TOL, DiscreteIBProblem, solve_batch
from .pathintegral import GroundTruthTables, initial_state

log = logging.getLogger(__name__)

REGIONS = ("Balancing", "SwingUpA", "SwingUpB")


class EvaluationSupportError(ValueError):
    """No occupied bin of a condition is reachable from its decoded controls."""


class NormalizationError(ValueError):
    pass


class CoverageError(ValueError):
    pass


def region_of(angle: float) -> str:
    if not 0 < angle <= 180:
        raise ValueError(f"angle {angle} outside (0, 180]")
    if angle <= 60:
        return "Balancing"
    if angle <= 120:
        return "SwingUpA"
    return "SwingUpB"


def default_angles() -> tuple[float, ...]:
    return tuple(float(a) for a in range(5, 181, 5))


@dataclass(frozen=True)
class SweepConfig:
    beta_min: float = 0.9
    beta_max: float = 1.0
    beta_step: float = 0.002
    lam: float = 0.2
    horizon: int = 30
    angles: tuple = field(default_factory=default_angles)

    def __post_init__(self):
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        if self.beta_min < 0:
            raise ValueError("beta must be non-negative")
        if not self.beta_step > 0:
            raise ValueError("beta_step must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))

    def betas(self) -> np.ndarray:
        n = int(math.floor(round((self.beta_max - self.beta_min) / self.beta_step, 9)))
        return np.round(self.beta_min + self.beta_step * np.arange(n + 1), 12)


@dataclass(frozen=True)
class TradeoffPoint:
    beta: float
    compute_cost: float
    control_cost: float
    converged: bool = True


@dataclass(frozen=True)
class TradeoffCurve:
    initial_angle: float
    points: tuple
    region: str = ""

    def __post_init__(self):
        if not self.region:
            object.__setattr__(self, "region", region_of(self.initial_angle))
        object.__setattr__(self, "points", tuple(sorted(self.points, key=lambda p: p.beta)))

    @property
    def betas(self) -> np.ndarray:
        return np.array([p.beta for p in self.points])

    @property
    def compute_costs(self) -> np.ndarray:
        return np.array([p.compute_cost for p in self.points])

    @property
    def control_costs(self) -> np.ndarray:
        return np.array([p.control_cost for p in self.points])


# -- per-condition costs -------------------------------------------------------


def per_timestep_problems(tables: GroundTruthTables, beta: float, y_card: int | None = None):
    M = tables.n_bins
    return [DiscreteIBProblem(tables.tables[t] * M, float(beta), y_card) for t in range(tables.horizon)]


def compute_cost_per_condition(solutions) -> np.ndarray:
    sols = list(solutions)
    if not sols:
        raise ValueError("need at least one solution")
    return np.mean([s.kl_per_condition for s in sols], axis=0)


def successor_cost_table(bins, step_costs, M: int) -> np.ndarray:
    """Mean of ``L(x_{t+1})`` per (t, condition, bin); NaN where a bin is empty.

    ``bins[i]`` and ``step_costs[i]`` are ``(S_i, T)`` arrays for condition i.
    """
    N = len(bins)
    T = np.asarray(bins[0]).shape[1]
    out = np.full((T, N, M), np.nan)
    for i, (b, c) in enumerate(zip(bins, step_costs)):
        b = np.asarray(b)
        c = np.asarray(c, dtype=float)
        for t in range(T):
            count = np.bincount(b[:, t], minlength=M)
            total = np.bincount(b[:, t], weights=c[:, t], minlength=M)
            occ = count > 0
            out[t, i, occ] = total[occ] / count[occ]
    return out


def timestep_control_cost(p_y_given_x, p_u_given_y, m_t) -> np.ndarray:
    """Expected successor cost for every condition at one timestep.

    ``m_t`` is the ``(N, M)`` slice of :func:`successor_cost_table`.  For each
    y the decoded bin distribution is restricted to bins that condition i
    actually visited and renormalized; y values whose decoder misses all of
    them are dropped and the y weights renormalized.
    """
    occ = np.isfinite(m_t)
    m0 = np.where(occ, m_t, 0.0)
    q = np.asarray(p_u_given_y, dtype=float)
    num = q @ m0.T  # (Y, N)
    den = q @ occ.T.astype(float)
    ok = den > 0
    per_y = np.divide(num, den, out=np.zeros_like(num), where=ok)
    w = np.asarray(p_y_given_x, dtype=float).T * ok  # (Y, N)
    wsum = w.sum(axis=0)
    if np.any(wsum <= 0):
        bad = np.flatnonzero(wsum <= 0)
        raise EvaluationSupportError(f"conditions {bad.tolist()} have no evaluable bin")
    return (w * per_y).sum(axis=0) / wsum


def control_cost_per_condition(solutions, successor_costs) -> np.ndarray:
    sols = list(solutions)
    m = np.asarray(successor_costs, dtype=float)
    if len(sols) != m.shape[0]:
        raise ValueError("need one solution per timestep")
    total = np.zeros(m.shape[1])
    for t, s in enumerate(sols):
        try:
            total += timestep_control_cost(s.p_y_given_x, s.p_u_given_y, m[t])
        except EvaluationSupportError as exc:
            raise EvaluationSupportError(f"timestep {t}: {exc}") from exc
    return total


def expected_controls(solutions, bin_centers) -> np.ndarray:
    """``E[u_t | x = i]`` under the bottlenecked channel, shape (N, T)."""
    c = np.asarray(bin_centers, dtype=float)
    return np.stack([s.p_y_given_x @ (s.p_u_given_y @ c) for s in solutions], axis=1)


def control_cost_of_mean_signal(mean_controls, angles, p: CartpoleParams) -> np.ndarray:
    """Roll out the expected control sequence of every condition; alternative estimator."""
    mean_controls = np.asarray(mean_controls, dtype=float)
    out = np.empty(len(angles))
    for i, a in enumerate(angles):
        r = simulate(initial_state(a), mean_controls[i][None], p)
        out[i] = r.total_cost[0]
    return out


# -- sweep ---------------------------------------------------------------------


def beta_sweep(tables: GroundTruthTables, successor_costs, sweep: SweepConfig,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               y_card: int | None = None, control_estimator: str = "expected_cost",
               physics: CartpoleParams | None = None, on_solution=None) -> list[TradeoffCurve]:
    """Solve every (timestep, beta) problem and collect one curve per condition.

    ``on_solution(t, solution)`` is called for each solve, e.g. to dump it.
    ``control_estimator`` is ``"expected_cost"`` (per-bin successor costs) or
    ``"mean_signal"`` (roll out the expected control sequence).
    """
    if control_estimator not in ("expected_cost", "mean_signal"):
        raise ValueError(f"unknown control estimator {control_estimator!r}")
    if len(sweep.angles) != tables.n_conditions:
        raise ValueError("sweep.angles must list one angle per table condition")
    if tables.horizon != sweep.horizon:
        raise ValueError(f"tables have T={tables.horizon}, sweep expects {sweep.horizon}")
    betas = sweep.betas()
    B, N, T = betas.size, tables.n_conditions, tables.horizon
    m = np.asarray(successor_costs, dtype=float)
    edges = np.asarray(tables.bin_edges)
    centers = 0.5 * (edges[:-1] + edges[1:])

    compute = np.zeros((B, N))
    control = np.zeros((B, N))
    mean_u = np.zeros((B, N, T))
    converged = np.ones((B, N), dtype=bool)
    for t in range(T):
        sols = solve_batch(tables.tables[t], betas, y_card, tol=tol, max_iter=max_iter)
        for k, s in enumerate(sols):
            compute[k] += s.kl_per_condition / T
            if control_estimator == "expected_cost":
                try:
                    control[k] += timestep_control_cost(s.p_y_given_x, s.p_u_given_y, m[t])
                except EvaluationSupportError as exc:
                    raise EvaluationSupportError(f"timestep {t}, beta {s.beta}: {exc}") from exc
            else:
                mean_u[k, :, t] = s.p_y_given_x @ (s.p_u_given_y @ centers)
            converged[k] &= s.converged
            if on_solution is not None:
                on_solution(t, s)
        n_bad = sum(not s.converged for s in sols)
        log.info("timestep %d: %d/%d betas converged", t, B - n_bad, B)

    if control_estimator == "mean_signal":
        p = physics or CartpoleParams()
        for k in range(B):
            control[k] = control_cost_of_mean_signal(mean_u[k], sweep.angles, p)

    curves = []
    for i, a in enumerate(sweep.angles):
        pts = [
            TradeoffPoint(float(betas[k]), float(compute[k, i]), float(control[k, i]), bool(converged[k, i]))
            for k in range(B)
        ]
        curves.append(TradeoffCurve(a, tuple(pts)))
    return curves


# -- curve analysis --------------------------------------------------------------


def optimal_compute_cost(curve: TradeoffCurve) -> tuple[float, float]:
    """``(compute_cost, beta)`` of the point with least control cost.

    Ties go to the smaller compute cost, then the smaller beta.
    """
    if not curve.points:
        raise ValueError("empty curve")
    best = min(curve.points, key=lambda p: (p.control_cost, p.compute_cost, p.beta))
    return best.compute_cost, best.beta


def normalize_curve(curve: TradeoffCurve) -> TradeoffCurve:
    """Map control cost affinely onto [0, 100] within the curve."""
    c = curve.control_costs
    lo, hi = float(c.min()), float(c.max())
    if not hi > lo:
        raise NormalizationError(f"constant control cost on curve {curve.initial_angle}")
    pts = []
    for p in curve.points:
        if p.control_cost == lo:
            v = 0.0
        elif p.control_cost == hi:
            v = 100.0
        else:
            v = 100.0 * (p.control_cost - lo) / (hi - lo)
        pts.append(replace(p, control_cost=v))
    return TradeoffCurve(curve.initial_angle, tuple(pts), curve.region)


def control_vs_compute(curve: TradeoffCurve):
    """Control cost as a piecewise-linear function of compute cost.

    Points sharing a compute cost are merged by averaging their control cost.
    Returns the sorted knots ``(compute, control)``.
    """
    x = curve.compute_costs
    y = curve.control_costs
    knots, inv = np.unique(x, return_inverse=True)
    vals = np.bincount(inv, weights=y) / np.bincount(inv)
    return knots, vals


def quartile_drops(curve: TradeoffCurve) -> tuple[float, float]:
    """Control-cost drop over the first and over the last quarter of the compute range."""
    x, y = control_vs_compute(curve)
    lo, hi = x[0], x[-1]
    if not hi > lo:
        return 0.0, 0.0
    q1, q3 = lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)
    g = lambda c: float(np.interp(c, x, y))  # noqa: E731
    return g(lo) - g(q1), g(q3) - g(hi)


@dataclass(frozen=True)
class ConditionSummary:
    initial_angle: float
    region: str
    optimal_beta: float
    optimal_compute_cost: float
    control_at_beta_min: float
    max_control_cost: float
    min_control_cost: float

    @property
    def cost_gap(self) -> float:
        return self.max_control_cost - self.min_control_cost


@dataclass(frozen=True)
class RegionSummary:
    region: str
    n: int
    mean_optimal_compute: float
    min_optimal_compute: float
    max_optimal_compute: float
    mean_cost_gap: float


def summarize_condition(curve: TradeoffCurve) -> ConditionSummary:
    cc, beta = optimal_compute_cost(curve)
    c = curve.control_costs
    return ConditionSummary(
        curve.initial_angle, curve.region, beta, cc, float(c[0]), float(c.max()), float(c.min())
    )


def region_aggregate(curves, expected_angles=None, partial: bool = False):
    """Per-condition summaries plus per-region statistics of the optimal compute cost.

    With ``partial`` an empty region is skipped instead of raising.
    """
    curves = list(curves)
    if expected_angles is not None:
        have = {c.initial_angle for c in curves}
        missing = sorted(set(float(a) for a in expected_angles) - have)
        if missing:
            raise CoverageError(f"missing curves for angles {missing}")
    conds = [summarize_condition(c) for c in curves]
    regions = []
    for name in REGIONS:
        members = [s for s in conds if s.region == name]
        if not members:
            if partial:
                continue
            raise CoverageError(f"region {name} has no curves")
        opt = np.array([s.optimal_compute_cost for s in members])
        gaps = np.array([s.cost_gap for s in members])
        regions.append(RegionSummary(name, len(members), float(opt.mean()), float(opt.min()),
                                     float(opt.max()), float(gaps.mean())))
    return conds, regions


# -- CSV ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


TRADEOFF_HEADER = ("angle_deg", "region", "beta", "compute_cost_nats", "control_cost", "converged")


def tradeoff_csv(curves) -> str:
    rows = (
        (c.initial_angle, c.region, p.beta, p.compute_cost, p.control_cost, p.converged)
        for c in sorted(curves, key=lambda c: c.initial_angle)
        for p in c.points
    )
    return _csv(TRADEOFF_HEADER, rows)


def read_tradeoff_csv(text: str) -> list[TradeoffCurve]:
    by_angle: dict[float, list] = {}
    regions = {}
    for row in csv.DictReader(io.StringIO(text)):
        a = float(row["angle_deg"])
        regions[a] = row["region"]
        by_angle.setdefault(a, []).append(
            TradeoffPoint(float(row["beta"]), float(row["compute_cost_nats"]),
                          float(row["control_cost"]), row["converged"] == "true")
        )
    return [TradeoffCurve(a, tuple(p), regions[a]) for a, p in sorted(by_angle.items())]


def optimal_csv(conditions) -> str:
    header = ("angle_deg", "region", "optimal_beta", "optimal_compute_cost_nats",
              "control_cost_at_beta_min", "max_control_cost", "min_control_cost", "cost_gap")
    rows = (
        (s.initial_angle, s.region, s.optimal_beta, s.optimal_compute_cost,
         s.control_at_beta_min, s.max_control_cost, s.min_control_cost, s.cost_gap)
        for s in conditions
    )
    return _csv(header, rows)


def regions_csv(regions) -> str:
    header = ("region", "n", "mean_optimal_compute_nats", "min_optimal_compute_nats",
              "max_optimal_compute_nats", "mean_cost_gap")
    rows = (
        (r.region, r.n, r.mean_optimal_compute, r.min_optimal_compute, r.max_optimal_compute,
         r.mean_cost_gap)
        for r in regions
    )
    return _csv(header, rows)
