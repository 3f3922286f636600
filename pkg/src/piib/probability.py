"""Finite-distribution and Gaussian information measures (all in nats)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUM_TOL = 1e-12
RENORM_TOL = 1e-9


class ValidationError(ValueError):
    """A table is not a valid probability distribution."""


class DimensionError(ValueError):
    pass


class DivergenceInfiniteError(ValueError):
    """KL divergence is infinite (q puts mass where p has none)."""


class NumericalDomainError(ValueError):
    pass


class InconsistentMomentsError(ValueError):
    pass


def _normalized(arr: np.ndarray, axis=None) -> np.ndarray:
    """Validate non-negativity and unit sums; absorb float drift up to RENORM_TOL."""
    if not np.all(np.isfinite(arr)):
        raise ValidationError("probabilities must be finite")
    if np.any(arr < 0):
        raise ValidationError("probabilities must be non-negative")
    sums = arr.sum(axis=axis, keepdims=axis is not None)
    drift = np.max(np.abs(sums - 1.0))
    if drift > RENORM_TOL:
        raise ValidationError(f"probabilities sum to 1 +/- {drift:.3g}")
    if drift > SUM_TOL:
        arr = arr / sums
    return arr


@dataclass(frozen=True)
class Pmf:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("Pmf must be a non-empty vector")
        p = _normalized(p)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def support_size(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, n: int) -> "Pmf":
        return cls(np.full(n, 1.0 / n))


@dataclass(frozen=True)
class ConditionalPmf:
    """Row-stochastic table; row ``i`` is the distribution given condition ``i``."""

    rows: np.ndarray

    def __post_init__(self):
        r = np.array(self.rows, dtype=float)
        if r.ndim != 2 or r.size == 0:
            raise ValidationError("ConditionalPmf must be a non-empty matrix")
        r = _normalized(r, axis=1)
        r.setflags(write=False)
        object.__setattr__(self, "rows", r)

    @property
    def n_conditions(self) -> int:
        return self.rows.shape[0]

    @property
    def support_size(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class JointPmf:
    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2 or t.size == 0:
            raise ValidationError("JointPmf must be a non-empty matrix")
        t = _normalized(t)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def marginal_a(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def marginal_b(self) -> np.ndarray:
        return self.table.sum(axis=0)


def _as_pmf(p) -> np.ndarray:
    return p.probs if isinstance(p, Pmf) else Pmf(p).probs


def _as_joint(j) -> np.ndarray:
    return j.table if isinstance(j, JointPmf) else JointPmf(j).table


def xlogx(p: np.ndarray) -> np.ndarray:
    """Elementwise ``p log p`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(p) -> float:
    """Shannon entropy ``-sum p log p``."""
    return float(max(-xlogx(_as_pmf(p)).sum(), 0.0))


def kl_divergence(q, p) -> float:
    """``sum q log(q/p)``; raises if ``q`` is not absolutely continuous w.r.t. ``p``."""
    q, p = _as_pmf(q), _as_pmf(p)
    if q.shape != p.shape:
        raise DimensionError(f"support sizes differ: {q.size} vs {p.size}")
    pos = q > 0
    if np.any(p[pos] == 0):
        raise DivergenceInfiniteError("q > 0 where p = 0")
    return float(max(np.sum(q[pos] * (np.log(q[pos]) - np.log(p[pos]))), 0.0))


def row_kl(q_rows: np.ndarray, p: np.ndarray) -> np.ndarray:
    """KL of every row of ``q_rows`` against a common reference ``p`` (unchecked)."""
    q_rows = np.asarray(q_rows, dtype=float)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    terms = np.where(q_rows > 0, q_rows * (np.log(np.where(q_rows > 0, q_rows, 1.0)) - logp), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def conditional_entropy(joint) -> float:
    """``H(B|A) = -sum p(a,b) log p(b|a)`` for a joint table indexed ``[a, b]``."""
    j = _as_joint(joint)
    return float(max(-(xlogx(j).sum() - xlogx(j.sum(axis=1)).sum()), 0.0))


def mutual_information(joint) -> float:
    """``I(A;B) = H(B) - H(B|A)``."""
    j = _as_joint(joint)
    h_b = -xlogx(j.sum(axis=0)).sum()
    h_b_given_a = -(xlogx(j).sum() - xlogx(j.sum(axis=1)).sum())
    return float(max(h_b - h_b_given_a, 0.0))


@dataclass(frozen=True)
class GaussianMoments:
    cov: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.array(self.cov, dtype=float))
        if c.shape[0] != c.shape[1]:
            raise DimensionError("covariance must be square")
        if not np.allclose(c, c.T, atol=1e-10, rtol=0):
            raise NumericalDomainError("covariance must be symmetric")
        c = 0.5 * (c + c.T)
        if np.linalg.eigvalsh(c).min() <= 0:
            raise NumericalDomainError("covariance must be positive definite")
        c.setflags(write=False)
        object.__setattr__(self, "cov", c)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]


def logdet_pd(cov) -> float:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() <= 0:
        raise NumericalDomainError("matrix is not positive definite")
    return float(logdet)


def gaussian_entropy(g) -> float:
    """Differential entropy ``0.5 log((2 pi e)^d det cov)``."""
    g = g if isinstance(g, GaussianMoments) else GaussianMoments(g)
    return 0.5 * (g.dim * np.log(2 * np.pi * np.e) + logdet_pd(g.cov))


def gaussian_mutual_information(marginal_cov, conditional_cov, tol: float = 1e-9) -> float:
    """``0.5 log(det marginal / det conditional)``."""
    m = np.atleast_2d(np.asarray(marginal_cov, dtype=float))
    c = np.atleast_2d(np.asarray(conditional_cov, dtype=float))
    if m.shape != c.shape:
        raise DimensionError("covariances must have the same shape")
    value = 0.5 * (logdet_pd(m) - logdet_pd(c))
    if value < -tol:
        raise InconsistentMomentsError(
            f"det(conditional) exceeds det(marginal): log-ratio {2 * value:.3g}"
        )
    return max(value, 0.0)
