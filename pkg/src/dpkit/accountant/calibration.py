"""Privacy budgets, sampling schedules, and noise calibration."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

from dpkit.accountant.prv import prv_epsilon
from dpkit.accountant.rdp import rdp_epsilon
from dpkit.errors import CalibrationError

log = logging.getLogger(__name__)

CIFAR10_TRAIN_SIZE = 50_000
SIGMA_MIN = 1e-3
SIGMA_MAX = 1e4
ACCOUNTANTS = ("prv", "rdp")


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class SubsampleSchedule:
    sample_rate: float
    steps: int

    def __post_init__(self):
        if not 0 <= self.sample_rate <= 1:
            raise ValueError(f"invalid sampling rate {self.sample_rate}: must lie in [0, 1]")
        if self.steps < 1 or int(self.steps) != self.steps:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @classmethod
    def from_training(cls, batch_size: int, epochs: int,
                      dataset_size: int = CIFAR10_TRAIN_SIZE) -> "SubsampleSchedule":
        """q = batch / N, T = epochs * ceil(N / batch)."""
        if batch_size < 1 or dataset_size < 1 or epochs < 1:
            raise ValueError("batch_size, epochs and dataset_size must be positive")
        if batch_size > dataset_size:
            raise ValueError("batch_size cannot exceed dataset_size")
        return cls(batch_size / dataset_size, epochs * math.ceil(dataset_size / batch_size))

    def steps_per_epoch(self) -> int:
        return math.ceil(1 / self.sample_rate) if self.sample_rate > 0 else self.steps


@dataclass(frozen=True)
class NoiseMultiplier:
    sigma: float
    achieved_epsilon: float = math.nan

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def __float__(self):
        return float(self.sigma)


@functools.lru_cache(maxsize=4096)
def _epsilon_cached(sigma, q, steps, delta, accountant, eps_error):
    if accountant == "prv":
        return prv_epsilon(sigma, q, steps, delta, eps_error=eps_error)
    if accountant == "rdp":
        return rdp_epsilon(sigma, q, steps, delta, mode="improved")
    if accountant == "rdp-classic":
        return rdp_epsilon(sigma, q, steps, delta, mode="classic")
    raise ValueError(f"unknown accountant {accountant!r}")


def epsilon_of(sigma: float, schedule: SubsampleSchedule, delta: float,
               accountant: str = "prv", eps_error: float = 0.01) -> float:
    """Epsilon spent by ``schedule.steps`` noisy steps at noise multiplier ``sigma``.

    ``accountant="prv"`` (default) composes the privacy loss distribution
    numerically and returns a certified upper bound; ``"rdp"`` uses the
    integer-order Renyi bound with the improved conversion.
    """
    return _epsilon_cached(float(sigma), float(schedule.sample_rate), int(schedule.steps),
                           float(delta), accountant, float(eps_error))


def _bracket(ok, hint):
    """Find lo < hi with ``ok(hi)`` and not ``ok(lo)`` around ``hint``."""
    hi = min(max(hint, SIGMA_MIN), SIGMA_MAX)
    while not ok(hi):
        if hi >= SIGMA_MAX:
            raise CalibrationError(f"target epsilon not reachable with sigma <= {SIGMA_MAX:g}")
        hi = min(hi * 2.0, SIGMA_MAX)
    lo = max(hi * 0.8, SIGMA_MIN)
    while ok(lo):
        hi = lo
        if lo <= SIGMA_MIN:
            return None, hi
        lo = max(lo * 0.5, SIGMA_MIN)
    return lo, hi


def _solve(eps_fn, target, lo, hi, tol):
    """Bracketed root search (Illinois false position) on a decreasing eps_fn.

    Keeps ``eps_fn(lo) > target >= eps_fn(hi)`` and stops when the bracket is
    narrower than ``tol``; returns the conservative end ``hi``.
    """
    f_lo = eps_fn(lo) - target
    f_hi = eps_fn(hi) - target
    side = 0
    while hi - lo > tol:
        width = hi - lo
        x = hi - f_hi * (hi - lo) / (f_hi - f_lo) if f_lo != f_hi else 0.5 * (lo + hi)
        if not lo < x < hi:
            x = 0.5 * (lo + hi)
        # never probe closer than tol/3 to an end, so the bracket keeps shrinking
        x = min(max(x, lo + tol / 3), hi - tol / 3) if width > tol else 0.5 * (lo + hi)
        fx = eps_fn(x) - target
        if fx <= 0:
            hi, f_hi = x, fx
            if side == 1:
                f_lo *= 0.5
            side = 1
        else:
            lo, f_lo = x, fx
            if side == -1:
                f_hi *= 0.5
            side = -1
    return hi


def calibrate_noise(target: PrivacySpec, schedule: SubsampleSchedule,
                    accountant: str = "prv", tol: float = 1e-4) -> NoiseMultiplier:
    """Smallest noise multiplier (to within ``tol``) whose epsilon stays within budget.

    The search is seeded from the integer-order RDP solution, which upper
    bounds the PRV one, and the returned sigma always satisfies
    ``epsilon_of(sigma) <= target.epsilon``.
    """
    eps_fn = functools.partial(_eps_for, schedule=schedule, delta=target.delta,
                               accountant=accountant)
    if schedule.sample_rate == 0:
        return NoiseMultiplier(SIGMA_MIN, 0.0)

    def ok_rdp(s):
        return rdp_epsilon(s, schedule.sample_rate, schedule.steps, target.delta) <= target.epsilon

    if accountant == "prv":
        lo, hi = _bracket(lambda s: eps_fn(s) <= target.epsilon, _rdp_sigma(ok_rdp))
    else:
        ok = ok_rdp if accountant == "rdp" else (lambda s: eps_fn(s) <= target.epsilon)
        lo, hi = _bracket(ok, 1.0)
    if lo is None:
        return NoiseMultiplier(hi, eps_fn(hi))
    sigma = _solve(eps_fn, target.epsilon, lo, hi, tol)
    achieved = eps_fn(sigma)
    log.debug("calibrated sigma=%.5f eps=%.5f (target %.3f)", sigma, achieved, target.epsilon)
    return NoiseMultiplier(sigma, achieved)


def _eps_for(sigma, schedule, delta, accountant):
    return epsilon_of(sigma, schedule, delta, accountant)


def _rdp_sigma(ok):
    """Coarse RDP-calibrated sigma used to seed the PRV search."""
    lo, hi = SIGMA_MIN, SIGMA_MAX
    if not ok(hi):
        raise CalibrationError(f"target epsilon not reachable with sigma <= {SIGMA_MAX:g}")
    if ok(lo):
        return lo
    while hi / lo > 1.001:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
