"""Integration against the Normal random-effect density φ(v; 0, σ²).

Gauss-Hermite rules do the production work; adaptive Simpson is the
independent reference used to check them.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy import special

from .errors import (
    InvalidNodeCountError,
    InvalidVarianceError,
    MaxDepthExceededError,
    NonFiniteIntegrandError,
)

DEFAULT_NODES = 30
SIMPSON_HALF_WIDTH = 10.0


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    sigma2: float

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def targets(self, sigma2: float, atol: float = 1e-12) -> bool:
        return abs(self.sigma2 - sigma2) <= atol * max(1.0, abs(sigma2))


@lru_cache(maxsize=64)
def _hermite_roots(K: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = special.roots_hermite(K)
    return x, w


def gauss_hermite_rule(K: int = DEFAULT_NODES, sigma2: float = 1.0) -> QuadratureRule:
    """Nodes and weights for E[h(V)], V ~ N(0, sigma2).

    Physicists' Hermite nodes are rescaled by sqrt(2 * sigma2) and the weights
    divided by sqrt(pi); the rule is exact for polynomials of degree 2K - 1.

    Args:
        K: Number of nodes.
        sigma2: Variance of the Normal density.

    Returns:
        QuadratureRule; a single node at 0 with weight 1 when ``sigma2`` is 0.
    """
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K < 1:
        raise InvalidNodeCountError(f"node count must be a positive integer, got {K!r}")
    sigma2 = float(sigma2)
    if not math.isfinite(sigma2) or sigma2 < 0:
        raise InvalidVarianceError(f"variance must be finite and non-negative, got {sigma2}")
    if sigma2 == 0.0:
        return QuadratureRule(np.zeros(1), np.ones(1), 0.0)
    x, w = _hermite_roots(int(K))
    return QuadratureRule(math.sqrt(2.0 * sigma2) * x, w / math.sqrt(math.pi), sigma2)


def _evaluate(h: Callable, points: np.ndarray) -> np.ndarray:
    try:
        values = np.asarray(h(points), dtype=float)
    except (TypeError, ValueError):
        values = None
    if values is None or values.shape != points.shape:
        values = np.array([float(h(float(v))) for v in points])
    return values


def integrate(rule: QuadratureRule, h: Callable) -> float:
    """Quadrature sum Σ_k w_k h(v_k).

    ``h`` may be vectorized over a numpy array of nodes; scalar callables are
    evaluated node by node.
    """
    values = _evaluate(h, rule.nodes)
    if not np.all(np.isfinite(values)):
        raise NonFiniteIntegrandError("integrand is not finite at every quadrature node")
    return float(rule.weights @ values)


def adaptive_simpson(
    h: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-10,
    max_depth: int = 50,
) -> float:
    """Adaptive Simpson quadrature with Richardson correction.

    Raises:
        ValueError: ``lo >= hi`` or ``tol <= 0``.
        MaxDepthExceededError: an interval needed more than ``max_depth`` splits.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if tol <= 0:
        raise ValueError("tolerance must be positive")

    def simpson(a, fa, b, fb):
        m = 0.5 * (a + b)
        fm = float(h(m))
        return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, b, fb, m, fm, whole, eps, depth):
        lm, flm, left = simpson(a, fa, m, fm)
        rm, frm, right = simpson(m, fm, b, fb)
        delta = left + right - whole
        if abs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        if depth >= max_depth:
            raise MaxDepthExceededError(
                f"adaptive Simpson exceeded depth {max_depth} on [{a}, {b}]"
            )
        return recurse(a, fa, m, fm, lm, flm, left, 0.5 * eps, depth + 1) + recurse(
            m, fm, b, fb, rm, frm, right, 0.5 * eps, depth + 1
        )

    # a single top-level panel can hide a narrow integrand; start from 8
    panels = np.linspace(lo, hi, 9)
    total = 0.0
    for a, b in zip(panels[:-1], panels[1:]):
        fa, fb = float(h(a)), float(h(b))
        m, fm, whole = simpson(a, fa, b, fb)
        total += recurse(a, fa, b, fb, m, fm, whole, tol / 8.0, 1)
    return total


def simpson_normal_expectation(h: Callable[[float], float], sigma2: float, tol: float = 1e-12) -> float:
    """E[h(V)] for V ~ N(0, sigma2) by adaptive Simpson on ±10 standard deviations."""
    if sigma2 == 0:
        return float(h(0.0))
    sd = math.sqrt(sigma2)
    norm_const = 1.0 / math.sqrt(2.0 * math.pi * sigma2)
    return adaptive_simpson(
        lambda v: h(v) * norm_const * math.exp(-0.5 * v * v / sigma2),
        -SIMPSON_HALF_WIDTH * sd,
        SIMPSON_HALF_WIDTH * sd,
        tol,
    )
