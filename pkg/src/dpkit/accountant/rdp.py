"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

All sums over binomial terms are carried out in the log domain; the
``exp(k(k-1) / 2 sigma^2)`` factors overflow double precision long before
the orders of interest run out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from dpkit.errors import InfinitePrivacyLoss

DEFAULT_ORDERS = tuple(range(2, 257))


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values must have the same length")
        orders = np.asarray(self.orders, dtype=float)
        if np.any(orders <= 1):
            raise ValueError("invalid order: every RDP order must exceed 1")
        if np.any(np.diff(orders) <= 0):
            raise ValueError("orders must be strictly increasing")
        if np.any(np.asarray(self.values, dtype=float) < 0):
            raise ValueError("RDP values must be nonnegative")

    @classmethod
    def from_arrays(cls, orders, values) -> "RdpCurve":
        return cls(tuple(float(a) for a in orders), tuple(float(v) for v in values))

    def __len__(self):
        return len(self.orders)


def _check_sigma(sigma):
    if sigma < 0 or math.isnan(sigma):
        raise ValueError(f"noise multiplier must be nonnegative, got {sigma}")
    if sigma == 0:
        raise InfinitePrivacyLoss("sigma = 0: the Gaussian mechanism has infinite privacy loss")


def rdp_gaussian(order: float, sigma: float) -> float:
    """RDP of the (non-subsampled) Gaussian mechanism with unit sensitivity."""
    if not order > 1:
        raise ValueError(f"invalid order {order}: RDP orders must exceed 1")
    _check_sigma(sigma)
    return order / (2.0 * sigma**2)


def _log_binomial_terms(order: int, q: float, sigma: float) -> np.ndarray:
    k = np.arange(order + 1, dtype=float)
    log_binom = gammaln(order + 1) - gammaln(k + 1) - gammaln(order - k + 1)
    with np.errstate(divide="ignore"):
        log_q = math.log(q)
        log_1mq = math.log1p(-q) if q < 1 else -math.inf
    # 0 * -inf would give nan for the k = order / k = 0 endpoints
    t_keep = np.where(order - k > 0, (order - k) * log_1mq, 0.0)
    t_samp = np.where(k > 0, k * log_q, 0.0)
    return log_binom + t_keep + t_samp + k * (k - 1) / (2.0 * sigma**2)


def rdp_subsampled_gaussian(order: int, q: float, sigma: float) -> float:
    """Integer-order RDP of one Poisson-subsampled Gaussian step.

    Evaluates ``log(sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2))) / (a-1)``.
    """
    if int(order) != order or order < 2:
        raise ValueError(f"invalid order {order}: need an integer >= 2")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"invalid sampling rate {q}: must lie in [0, 1]")
    _check_sigma(sigma)
    order = int(order)
    if q == 0:
        return 0.0
    if q == 1:
        return rdp_gaussian(order, sigma)
    value = float(logsumexp(_log_binomial_terms(order, q, sigma))) / (order - 1)
    # the exact value is >= 0; rounding can leave a -1e-17 residue
    return max(value, 0.0)


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP of the subsampled Gaussian over a grid of integer orders.

    Same sum as ``rdp_subsampled_gaussian``, evaluated for all orders at once
    on an [orders, k] grid with the terms k > order masked out.
    """
    a = np.asarray(orders, dtype=float)
    if np.any(a != np.round(a)) or np.any(a < 2):
        raise ValueError("invalid order: need integers >= 2")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"invalid sampling rate {q}: must lie in [0, 1]")
    _check_sigma(sigma)
    if q == 0:
        return RdpCurve.from_arrays(a, np.zeros(len(a)))
    if q == 1:
        return RdpCurve.from_arrays(a, a / (2.0 * sigma**2))
    k = np.arange(int(a.max()) + 1, dtype=float)[None, :]
    A = a[:, None]
    valid = k <= A
    kk = np.where(valid, k, 0.0)
    log_binom = gammaln(A + 1) - gammaln(kk + 1) - gammaln(np.maximum(A - kk, 0.0) + 1)
    terms = (log_binom + (A - kk) * math.log1p(-q) + kk * math.log(q)
             + kk * (kk - 1) / (2.0 * sigma**2))
    terms = np.where(valid, terms, -np.inf)
    values = logsumexp(terms, axis=1) / (a - 1)
    return RdpCurve.from_arrays(a, np.maximum(values, 0.0))


def compose(per_step: RdpCurve, steps: int) -> RdpCurve:
    if steps < 1 or int(steps) != steps:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    return RdpCurve(per_step.orders, tuple(v * steps for v in per_step.values))


def rdp_to_epsilon(curve: RdpCurve, delta: float, mode: str = "improved") -> tuple[float, float]:
    """Convert an RDP curve to (epsilon, best order) at the given delta.

    ``mode="improved"`` uses the tighter conversion
    ``rdp + log((a-1)/a) - (log(delta) + log(a)) / (a-1)``;
    ``mode="classic"`` uses ``rdp + log(1/delta) / (a-1)``.
    """
    if len(curve) == 0:
        raise ValueError("invalid input: empty RDP curve")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(curve.orders, dtype=float)
    rdp = np.asarray(curve.values, dtype=float)
    if mode == "improved":
        eps = rdp + np.log1p(-1.0 / orders) - (math.log(delta) + np.log(orders)) / (orders - 1)
    elif mode == "classic":
        eps = rdp + math.log(1.0 / delta) / (orders - 1)
    else:
        raise ValueError(f"unknown conversion mode {mode!r}")
    idx = int(np.nanargmin(eps))
    return max(float(eps[idx]), 0.0), float(orders[idx])


def rdp_epsilon(sigma: float, q: float, steps: int, delta: float,
                orders=DEFAULT_ORDERS, mode: str = "improved") -> float:
    """RDP-based epsilon after ``steps`` compositions of the subsampled Gaussian."""
    curve = compose(rdp_curve(q, sigma, orders), steps)
    return rdp_to_epsilon(curve, delta, mode)[0]
