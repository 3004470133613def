"""
Exact mutual information and KL computations used to check the neural estimators.

All quantities are in nats. Zero-probability cells contribute nothing (0 * ln 0 := 0).
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

logger = logging.getLogger(__name__)

TOLERANCE = 1e-9

# finite stand-in for ln(0) in critic tables
LOG_ZERO = -50.0


class InvalidDistributionError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteJoint:
    """A joint probability table p(x, y) of size |X| x |Y|."""
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 2 or table.size == 0:
            raise InvalidDistributionError(f"Joint table must be a non-empty matrix, got shape {table.shape}")
        if not np.all(np.isfinite(table)):
            raise InvalidDistributionError("Joint table contains non-finite entries")
        if np.any(table < 0):
            raise InvalidDistributionError("Joint table contains negative entries")
        total = table.sum()
        if abs(total - 1.0) > TOLERANCE:
            raise InvalidDistributionError(f"Joint table sums to {total!r}, not 1")
        object.__setattr__(self, "table", table)

    @property
    def p_x(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def p_y(self) -> np.ndarray:
        return self.table.sum(axis=0)

    @property
    def product_of_marginals(self) -> np.ndarray:
        return np.outer(self.p_x, self.p_y)


@dataclass(frozen=True)
class GaussianPairSpec:
    """dim independent pairs (x_k, y_k), each standard bivariate normal with correlation rho"""
    rho: float
    dim: int = 1

    def __post_init__(self):
        if not np.isfinite(self.rho) or abs(self.rho) >= 1:
            raise DomainError(f"Correlation must lie in (-1, 1), got {self.rho}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError(f"Dimension must be a positive integer, got {self.dim}")


def _probability_vector(values, name: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise InvalidDistributionError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(vector)) or np.any(vector < 0):
        raise InvalidDistributionError(f"{name} contains negative or non-finite entries")
    if abs(vector.sum() - 1.0) > TOLERANCE:
        raise InvalidDistributionError(f"{name} sums to {vector.sum()!r}, not 1")
    return vector


def mutual_information_discrete(joint: DiscreteJoint) -> float:
    """
    I(X;Y) = sum p(x,y) ln(p(x,y) / (p(x)p(y)))
    :param joint: a validated joint table
    :return: mutual information in nats
    """
    p = joint.table
    q = joint.product_of_marginals
    support = p > 0
    # q > 0 wherever p > 0, since the marginals dominate the joint
    value = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    # rounding can produce -1e-17 on product tables
    return max(value, 0.0)


def kl_divergence_discrete(p, q) -> float:
    """
    D_KL(p || q) = sum p ln(p / q)
    :param p: probability vector
    :param q: probability vector of the same length, q > 0 wherever p > 0
    :return: divergence in nats
    """
    p = _probability_vector(p, "p")
    q = _probability_vector(q, "q")
    if p.shape != q.shape:
        raise InvalidDistributionError(f"Length mismatch: {p.size} vs {q.size}")
    if np.any((p > 0) & (q == 0)):
        raise DomainError("p puts mass where q has none, the divergence is infinite")
    support = p > 0
    value = float(np.sum(xlogy(p[support], p[support]) - xlogy(p[support], q[support])))
    return max(value, 0.0)


def gaussian_mi_analytic(spec: GaussianPairSpec) -> float:
    return spec.dim * (-0.5 * float(np.log1p(-spec.rho ** 2)))


def dv_bound_exact(joint: DiscreteJoint, t) -> float:
    """
    Donsker-Varadhan bound E_p[t] - ln E_{p(x)p(y)}[e^t] for a fixed critic table.
    Never exceeds mutual_information_discrete(joint).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != joint.table.shape:
        raise InvalidDistributionError(f"Critic shape {t.shape} does not match joint shape {joint.table.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidDistributionError("Critic table must be finite")
    q = joint.product_of_marginals
    support = q > 0
    # max-shifted log-sum-exp keeps large critics finite
    log_partition = logsumexp(t[support], b=q[support])
    return float(np.sum(joint.table * t) - log_partition)


def optimal_critic(joint: DiscreteJoint) -> np.ndarray:
    p = joint.table
    q = joint.product_of_marginals
    critic = np.full(p.shape, LOG_ZERO)
    support = p > 0
    critic[support] = np.log(p[support]) - np.log(q[support])
    return critic


def maximize_dv_bound(joint: DiscreteJoint, steps: int = 5000, learning_rate: float = 1.0, t0=None):
    """
    Gradient ascent on the exact DV bound over a free critic table.
    The gradient of the bound is p(x,y) - q(x,y) e^t / E_q[e^t] with q = p(x)p(y).
    :return: (final critic table, array with the bound at every iterate including the start)
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    q = joint.product_of_marginals
    t = np.zeros_like(q) if t0 is None else np.array(t0, dtype=np.float64)
    bounds = np.empty(steps + 1)
    bounds[0] = dv_bound_exact(joint, t)
    for step in range(steps):
        weights = q * np.exp(t - t.max())
        gradient = joint.table - weights / weights.sum()
        t = t + learning_rate * gradient
        bounds[step + 1] = dv_bound_exact(joint, t)
    logger.debug(f"DV ascent finished after {steps} steps at {bounds[-1]:.6f} nats")
    return t, bounds


def empirical_joint(x, y, bins: int = 16, value_range=(0.0, 1.0)) -> DiscreteJoint:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size == 0:
        raise ValueError(f"Need equally many paired samples, got {x.size} and {y.size}")
    counts, _, _ = np.histogram2d(x, y, bins=bins, range=[value_range, value_range])
    return DiscreteJoint(counts / counts.sum())


def binned_mutual_information(x, y, bins: int = 16) -> float:
    """Plug-in MI of two [0, 1]-valued signals discretized into equal-width bins."""
    return mutual_information_discrete(empirical_joint(x, y, bins=bins))
