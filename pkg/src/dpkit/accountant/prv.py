"""Numerical (epsilon, delta) accounting via the privacy loss random variable.

The privacy loss of one Poisson-subsampled Gaussian step is

    Y = log(1 - q + q * exp((2X - 1) / (2 sigma^2))),
    X ~ (1 - q) N(0, sigma^2) + q N(1, sigma^2).

Its distribution is discretized onto a uniform grid with mean preservation,
self-composed ``T`` times with one FFT power, and converted to epsilon.  The
result is an upper bound: every source of approximation (grid rounding,
truncated tails, wrap-around of the circular convolution) is charged either
to delta or added to epsilon.

The rounding charge uses Hoeffding's inequality: after the mean-preserving
shift each step's rounding error is zero-mean and lies in ``[-h, h]`` for mesh
``h``, so the composed error exceeds ``h * sqrt(2 T log(1/delta_err))`` with
probability at most ``delta_err``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy import integrate
from scipy.special import log_ndtr, ndtr

from dpkit.accountant.rdp import DEFAULT_ORDERS, rdp_curve, compose, rdp_to_epsilon
from dpkit.errors import InfinitePrivacyLoss

MAX_GRID = 1 << 23


@dataclass(frozen=True)
class PrvBounds:
    lower: float
    estimate: float
    upper: float
    mesh: float
    grid_size: int


class SubsampledGaussianPrv:
    """Privacy loss random variable of one subsampled Gaussian step."""

    def __init__(self, q: float, sigma: float):
        if not 0.0 < q <= 1.0:
            raise ValueError(f"invalid sampling rate {q}")
        if sigma <= 0:
            raise InfinitePrivacyLoss("sigma must be positive")
        self.q = q
        self.sigma = sigma
        self.t_min = math.log1p(-q) if q < 1 else -math.inf

    def loss(self, x):
        """Privacy loss at output ``x``."""
        z = (2.0 * np.asarray(x, dtype=float) - 1.0) / (2.0 * self.sigma**2)
        if self.q == 1:
            return z
        # log((1-q) + q e^z) computed without overflow for large z
        return np.logaddexp(math.log1p(-self.q), math.log(self.q) + z)

    def inverse_loss(self, t):
        """Output ``x`` at which the loss equals ``t`` (``-inf`` below the support)."""
        t = np.asarray(t, dtype=float)
        s2 = self.sigma**2
        if self.q == 1:
            return s2 * t + 0.5
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            # log(e^t - (1 - q)) without cancellation near t_min
            inner = np.where(
                t > 0,
                t + np.log1p(-(1.0 - self.q) * np.exp(-np.maximum(t, 0.0))),
                np.log(np.expm1(t) + self.q),
            )
            x = s2 * (inner - math.log(self.q)) + 0.5
        return np.where(t > self.t_min, x, -np.inf)

    def _x_cdf(self, x):
        s = self.sigma
        return (1.0 - self.q) * ndtr(x / s) + self.q * ndtr((x - 1.0) / s)

    def _x_sf(self, x):
        s = self.sigma
        return (1.0 - self.q) * ndtr(-x / s) + self.q * ndtr((1.0 - x) / s)

    def cdf(self, t):
        return self._x_cdf(self.inverse_loss(t))

    def sf(self, t):
        return self._x_sf(self.inverse_loss(t))

    def log_sf(self, t):
        x = self.inverse_loss(t)
        s = self.sigma
        a = math.log1p(-self.q) + log_ndtr(-x / s) if self.q < 1 else -np.inf
        b = math.log(self.q) + log_ndtr((1.0 - x) / s)
        return np.logaddexp(a, b)

    def _x_pdf(self, x):
        s = self.sigma
        c = 1.0 / (s * math.sqrt(2.0 * math.pi))
        return c * ((1.0 - self.q) * np.exp(-0.5 * (x / s) ** 2)
                    + self.q * np.exp(-0.5 * ((x - 1.0) / s) ** 2))

    def truncated_moment(self, t_lo, t_hi, power=1, center=0.0):
        """``E[(Y - center)^power ; t_lo < Y <= t_hi]`` by adaptive quadrature."""
        x_lo = float(self.inverse_loss(t_lo))
        x_hi = float(self.inverse_loss(t_hi))
        s = self.sigma
        x_lo = max(x_lo, -40.0 * s)
        x_hi = min(x_hi, 1.0 + 40.0 * s)
        if x_hi <= x_lo:
            return 0.0

        def f(x):
            return (float(self.loss(x)) - center) ** power * float(self._x_pdf(x))

        pts = [p for p in (0.0, 0.5, 1.0) if x_lo < p < x_hi]
        edges = [x_lo, *pts, x_hi]
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(f, a, b, limit=400, epsabs=1e-15, epsrel=1e-13)
            total += val
        return total


def _left_tail_bound(prv, steps, log_tail):
    """Lower edge below which the composed loss lies with log-probability <= ``log_tail``.

    Uses Maurer's one-sided bound for sums of nonnegative variables applied
    to ``Y - t_min``.
    """
    if prv.q == 1:
        mu = steps / (2.0 * prv.sigma**2)
        sd = math.sqrt(steps) / prv.sigma
        return mu - sd * math.sqrt(-2.0 * log_tail)
    a = prv.t_min
    mean = prv.truncated_moment(a, np.inf)
    m2 = prv.truncated_moment(a, np.inf, power=2, center=a)
    if not np.isfinite(m2):
        m2 = 1.0
    return max(steps * mean - math.sqrt(-2.0 * log_tail * steps * m2), steps * a)


def _discretize(prv, lo, mesh, n, log_cut):
    """Bin masses on ``[lo + j*mesh - mesh/2, lo + j*mesh + mesh/2)`` and the mean shift.

    Bins are filled only up to the point where the single-step survival
    probability drops below ``exp(log_cut)``.  Returns ``(pmf, shift,
    tail_above)``; ``tail_above`` is the probability beyond the filled bins,
    which the caller charges to delta.
    """
    t_cut = _survival_cutoff(prv, log_cut, lo + n * mesh)
    m = int(min(n, max(2, math.ceil((t_cut - lo) / mesh) + 1)))
    edges = lo + (np.arange(m + 1) - 0.5) * mesh
    x = prv.inverse_loss(edges)
    cdf = prv._x_cdf(x)
    sf = prv._x_sf(x)
    # difference whichever tail keeps the subtraction well conditioned
    use_sf = cdf[:-1] > 0.5
    pmf = np.zeros(n)
    head = np.where(use_sf, sf[:-1] - sf[1:], cdf[1:] - cdf[:-1])
    np.maximum(head, 0.0, out=head)
    below = float(cdf[0])
    tail_above = float(sf[-1])
    head[0] += below
    pmf[:m] = head

    grid_mean = float(np.dot(lo + np.arange(m) * mesh, head))
    true_mean = prv.truncated_moment(edges[0], edges[-1])
    # mass folded into bin 0 sits at the bin value on both sides
    true_mean += below * lo
    shift = (true_mean - grid_mean) / max(head.sum(), 1e-300)
    return pmf, shift, tail_above


def _survival_cutoff(prv, log_cut, t_max):
    """Smallest loss (up to t_max) whose survival log-probability is below ``log_cut``."""
    if float(prv.log_sf(t_max)) > log_cut:
        return t_max
    a = prv.t_min + 1e-12 if np.isfinite(prv.t_min) else -t_max
    b = t_max
    for _ in range(60):
        mid = 0.5 * (a + b)
        if float(prv.log_sf(mid)) > log_cut:
            a = mid
        else:
            b = mid
    return b


def _epsilons_from_sorted(values, pmf, deltas):
    """Smallest epsilon >= 0 with ``sum_{y>eps} p (1 - e^(eps - y)) <= delta``, per delta.

    ``values`` must be increasing.
    """
    pos = values > 0
    if not np.any(pos):
        return [0.0 for _ in deltas]
    first = int(np.argmax(pos))
    y = values[first:][::-1]
    p = pmf[first:][::-1]
    # delta(eps) on [y[k+1], y[k]] is A_k - e^eps B_k with A, B summed over y[:k+1]
    a = np.cumsum(p)
    with np.errstate(divide="ignore"):
        log_b = np.logaddexp.accumulate(np.log(p) - y)
    nxt = np.append(y[1:], 0.0)
    out = []
    for delta in deltas:
        if a[-1] <= delta:
            out.append(0.0)
            continue
        k0 = int(np.searchsorted(a, delta, side="right"))
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = np.log(a[k0:] - delta) - log_b[k0:]
        hit = np.flatnonzero(cand >= nxt[k0:] - 1e-12)
        if hit.size == 0:
            out.append(0.0)
            continue
        k = int(hit[0])
        out.append(max(min(float(cand[k]), float(y[k0 + k])), 0.0))
    return out


def prv_epsilon_bounds(sigma: float, q: float, steps: int, delta: float,
                       eps_error: float = 0.01, delta_error: float | None = None,
                       max_grid: int = MAX_GRID) -> PrvBounds:
    """Lower/estimate/upper epsilon for ``steps`` subsampled Gaussian steps."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"invalid sampling rate {q}: must lie in [0, 1]")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if sigma < 0:
        raise ValueError(f"noise multiplier must be nonnegative, got {sigma}")
    if sigma == 0:
        if q == 0:
            return PrvBounds(0.0, 0.0, 0.0, 0.0, 0)
        raise InfinitePrivacyLoss("sigma = 0: the Gaussian mechanism has infinite privacy loss")
    if q == 0:
        return PrvBounds(0.0, 0.0, 0.0, 0.0, 0)
    if delta_error is None:
        delta_error = delta * 1e-3
    tail = delta * 1e-3
    log_tail = math.log(tail)

    prv = SubsampledGaussianPrv(q, sigma)
    hi = rdp_to_epsilon(compose(rdp_curve(q, sigma, DEFAULT_ORDERS), steps), tail,
                        mode="classic")[0]
    lo = min(_left_tail_bound(prv, steps, log_tail), 0.0)
    lo = math.floor(lo) - 1.0
    hi = max(math.ceil(hi) + 1.0, lo + 2.0)

    spread = math.sqrt(2.0 * steps * math.log(1.0 / delta_error))
    mesh = eps_error / spread
    n = int(math.ceil((hi - lo) / mesh))
    if n > max_grid:
        n = max_grid
        mesh = (hi - lo) / n
    n = sp_fft.next_fast_len(n, real=True)
    coupling = mesh * spread

    # single-step grid starts just below the loss support; the composed
    # window [lo, lo + n*mesh) is recovered by index arithmetic mod n
    start = math.floor(prv.t_min / mesh) if np.isfinite(prv.t_min) else math.floor(lo / mesh)
    log_cut = math.log(tail * 1e-3 / steps)
    pmf, shift, tail_above = _discretize(prv, start * mesh, mesh, n, log_cut)
    if abs(shift) > mesh:
        raise ArithmeticError(f"mean-preserving shift {shift:g} exceeds mesh {mesh:g}")

    spec = sp_fft.rfft(pmf)
    composed = sp_fft.irfft(spec**steps, n)
    np.maximum(composed, 0.0, out=composed)

    # composed offset lies in [lo_idx, lo_idx + n); rotating puts it in order
    lo_idx = math.floor(lo / mesh)
    first = (lo_idx - steps * start) % n
    composed = np.roll(composed, -first)
    values = (lo_idx + np.arange(n)) * mesh + steps * shift

    # charged to delta: single-step tail beyond the grid (union bound) and
    # composed mass past the upper edge that wrapped to low losses
    slack = min(1.0, steps * tail_above) + tail
    upper_delta = delta - delta_error - slack
    if upper_delta <= 0:
        raise ArithmeticError("delta too small for the requested numerical error budget")
    est, upper, lower = _epsilons_from_sorted(
        values, composed, [delta, upper_delta, delta + delta_error])
    return PrvBounds(max(lower - coupling, 0.0), est, upper + coupling, mesh, n)


def prv_epsilon(sigma: float, q: float, steps: int, delta: float, eps_error: float = 0.01) -> float:
    """Upper bound on epsilon from the numerical PRV composition."""
    return prv_epsilon_bounds(sigma, q, steps, delta, eps_error=eps_error).upper
