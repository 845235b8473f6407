"""Closed-form safety-probability bounds and their Monte-Carlo checks.

The central object is the K-step exit bound for a stochastic closed loop
whose barrier value decays no faster than a factor ``kappa`` per step in
conditional expectation, with a bounded expectation gap ``delta`` and a
bounded conditional standard deviation ``sigma``. The companion helpers give
the two constants that feed that bound for a Lipschitz, bounded barrier and a
noise-Lipschitz closed-loop map, plus a Monte-Carlo verifier for the
Jensen-style lower bound on the expected barrier value after one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .streams import RandomStream


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name}: non-finite value {v!r}")


@dataclass(frozen=True)
class ExitBoundInputs:
    """Inputs of the K-step exit probability bound."""

    kappa: float
    K: int
    h0: float
    delta: float
    sigma: float

    def __post_init__(self):
        _require_finite("ExitBoundInputs", self.kappa, self.h0, self.delta, self.sigma)
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must be in [0,1], got {self.kappa}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.delta <= 0.0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class PropositionConstants:
    """Constants bounding the one-step barrier statistics.

    L_h: global Lipschitz constant of the barrier.
    C_h: bound on |h|.
    L_f: Lipschitz constant of the closed-loop map in the noise argument.
    sigma_d_sq: bound on the trace of the conditional noise covariance.
    """

    L_h: float
    C_h: float
    L_f: float
    sigma_d_sq: float

    def __post_init__(self):
        for name in ("L_h", "C_h", "L_f", "sigma_d_sq"):
            v = getattr(self, name)
            _require_finite("PropositionConstants", v)
            if v < 0.0:
                raise ValueError(f"{name} must be nonnegative, got {v}")


def t_function(lam: float, xi: float) -> float:
    """Evaluate (xi^2/(lam+xi^2))^(lam+xi^2) * exp(lam).

    Computed in log space so large xi (which grows like sqrt(K)/delta) does
    not overflow. Exactly 1 when lam == 0.
    """
    _require_finite("t_function", lam, xi)
    if lam < 0.0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if xi <= 0.0:
        raise ValueError(f"xi must be > 0, got {xi}")
    if lam == 0.0:
        return 1.0
    # log T = -(lam + xi^2) log(1 + lam/xi^2) + lam; log1p keeps the xi >> 1
    # regime accurate where the direct difference of logarithms cancels
    s = lam + xi * xi
    log_t = -s * math.log1p(lam / (xi * xi)) + lam
    return math.exp(log_t)


def exit_probability_bound(inp: ExitBoundInputs) -> float:
    """Upper bound on the probability of leaving the safe set within K steps.

    Returns min(1, T(kappa^K h0 / delta, sigma sqrt(K) / delta)). A
    nonpositive initial barrier value makes the bound vacuous, so 1 is
    returned in that case. Values above 1 are clipped: a probability bound
    above 1 carries no information but is not an error.
    """
    if inp.h0 <= 0.0:
        return 1.0
    lam = inp.kappa**inp.K * inp.h0 / inp.delta
    xi = inp.sigma * math.sqrt(inp.K) / inp.delta
    return min(1.0, t_function(lam, xi))


def expectation_gap_bound(c: PropositionConstants) -> float:
    """Bound on E[h(s_k) | F_{k-1}] - h(s_k) for a barrier bounded by C_h."""
    return 2.0 * c.C_h


def variance_bound(c: PropositionConstants) -> float:
    """Bound on Var(h(s_{k+1}) | F_k): L_h^2 L_f^2 sigma_d^2."""
    return c.L_h**2 * c.L_f**2 * c.sigma_d_sq


def mc_check_prop2(
    h,
    lipschitz: float,
    mean: np.ndarray,
    cov_trace: float,
    stream: RandomStream,
    n_samples: int = 100_000,
):
    """Monte-Carlo check of E[h(s')] >= h(E[s']) - L_h sqrt(tr Cov).

    ``h`` maps a (B, n) batch of states to (B,) values. The next-state
    distribution is Gaussian with the given mean and an isotropic diagonal
    covariance of the given trace. Returns (lhs, rhs, holds) where lhs is the
    sample mean of h, rhs the closed-form lower bound, and holds allows three
    standard errors of sampling slack. cov_trace == 0 degenerates to a
    deterministic equality check.
    """
    if n_samples < 1_000:
        raise ValueError(f"n_samples must be >= 1000, got {n_samples}")
    if cov_trace < 0.0:
        raise ValueError(f"cov_trace must be >= 0, got {cov_trace}")
    mean = np.asarray(mean, dtype=np.float64)
    dim = mean.shape[-1]
    rhs = float(h(mean[None, :])[0]) - lipschitz * math.sqrt(cov_trace)
    if cov_trace == 0.0:
        lhs = float(h(mean[None, :])[0])
        return lhs, rhs, lhs >= rhs
    std = math.sqrt(cov_trace / dim)
    draws = mean[None, :] + std * stream.normal(size=(n_samples, dim))
    values = np.asarray(h(draws), dtype=np.float64)
    lhs = float(values.mean())
    se = float(values.std(ddof=1)) / math.sqrt(n_samples)
    return lhs, rhs, lhs >= rhs - 3.0 * se
