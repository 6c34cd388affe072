"""Continuous-time score SDE: schedule, perturbation, DSM loss, PC sampler.

The forward process is variance exploding with zero drift,
``x_tau = x_0 + sigma(tau) z``, where
``sigma(tau)^2 = 1 - exp(-B(tau))`` and
``B(tau) = a_min tau + (a_max - a_min) tau^2 / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, NumericFailure

# score_fn(x [n, d], tau: float | array [n], cond [n, c] | None) -> [n, d]
ScoreFn = Callable[[np.ndarray, object, Optional[np.ndarray]], np.ndarray]


def _check_tau(tau):
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ContractViolation(f"noise level outside [0, 1]: {tau}")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_min: float = 0.1
    alpha_max: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.alpha_min <= self.alpha_max):
            raise ContractViolation("schedule needs 0 < alpha_min <= alpha_max")

    def exponent(self, tau):
        t = _check_tau(tau)
        return self.alpha_min * t + 0.5 * (self.alpha_max - self.alpha_min) * t * t

    def sigma(self, tau):
        return np.sqrt(-np.expm1(-self.exponent(tau)))

    def g2(self, tau):
        """d sigma^2 / d tau."""
        t = _check_tau(tau)
        return np.exp(-self.exponent(t)) * (self.alpha_min + (self.alpha_max - self.alpha_min) * t)

    def g(self, tau):
        return np.sqrt(self.g2(tau))


DEFAULT_SCHEDULE = NoiseSchedule()


def sigma(tau, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    return schedule.sigma(tau)


def perturb(x0, tau, z, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise ContractViolation(f"data shape {x0.shape} and noise shape {z.shape} differ")
    s = schedule.sigma(tau)
    if np.ndim(s) == 1 and x0.ndim == 2:
        s = s[:, None]
    return x0 + s * z


def sample_tau(rng, n, tau_floor=1e-3):
    if not tau_floor > 0.0:
        raise ContractViolation("tau_floor must be positive; sigma(0) = 0")
    return rng.uniform(tau_floor, 1.0, size=n)


def dsm_loss(score_fn: ScoreFn, x0, cond, rng, schedule: NoiseSchedule = DEFAULT_SCHEDULE, tau_floor=1e-3):
    """Monte-Carlo denoising score-matching loss with weight sigma^2.

    Uses the algebraically equal form ``||sigma q + z||^2`` so that no
    division by a small sigma happens.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if len(x0) == 0:
        raise ContractViolation("empty batch")
    tau = sample_tau(rng, len(x0), tau_floor)
    z = rng.standard_normal(x0.shape)
    sig = schedule.sigma(tau)[:, None]
    q = score_fn(x0 + sig * z, tau, cond)
    r = sig * q + z
    return float(np.mean(np.sum(r * r, axis=1)))


def gaussian_score(mean, var, schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> ScoreFn:
    """Exact score of ``N(mean, var I)`` convolved with the forward kernel."""
    mean = np.asarray(mean, dtype=np.float64)

    def score(x, tau, cond=None):
        s2 = schedule.sigma(tau) ** 2
        if np.ndim(s2) == 1:
            s2 = s2[:, None]
        return -(x - mean) / (var + s2)

    return score


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 500
    corrector_steps: int = 1
    snr: float = 0.16
    terminal_prior_std: Optional[float] = None

    def __post_init__(self):
        if self.K < 1:
            raise ContractViolation("K must be >= 1")
        if not self.snr > 0:
            raise ContractViolation("corrector snr must be positive")
        if self.corrector_steps < 0:
            raise ContractViolation("corrector_steps must be >= 0")

    def prior_std(self, schedule: NoiseSchedule) -> float:
        if self.terminal_prior_std is not None:
            return float(self.terminal_prior_std)
        return float(schedule.sigma(1.0))


def _corrector_step(q, xi, snr):
    # norms averaged over the finite chains of the block; a per-chain ratio
    # explodes for chains sitting at a mode where ||q|| -> 0
    finite = np.all(np.isfinite(q), axis=1)
    if not finite.any():
        return 0.0
    qn = float(np.mean(np.linalg.norm(q[finite], axis=1)))
    xn = float(np.mean(np.linalg.norm(xi[finite], axis=1)))
    if qn == 0.0:
        return 0.0
    return 2.0 * (snr * xn / qn) ** 2


def pc_chains(score_fn: ScoreFn, x, cond, config: SamplerConfig, schedule: NoiseSchedule, rng):
    """Run the reverse predictor-corrector chains from initial states ``x``.

    Rows share only the corrector step size, which is set from the block's
    mean score and noise norms. Returns ``(x0, ok, fail_step)`` where
    ``ok`` flags rows that stayed finite and ``fail_step`` holds the first
    step index ``k`` at which a row went non-finite (0 if it never did).
    """
    x = np.array(x, dtype=np.float64)
    n = len(x)
    K = config.K
    fail_step = np.zeros(n, dtype=np.int64)
    with np.errstate(all="ignore"):
        for k in range(K, 0, -1):
            t = k / K
            t_prev = (k - 1) / K
            g2 = float(schedule.g2(t))
            q = score_fn(x, t, cond)
            # dtau = -1/K, so -g^2 q dtau = +g^2 q / K
            x = x + (g2 / K) * q
            if k > 1:
                x = x + math.sqrt(g2 / K) * rng.standard_normal(x.shape)
            # no corrector at tau = 0 where the score is undefined
            if t_prev > 0.0:
                for _ in range(config.corrector_steps):
                    q = score_fn(x, t_prev, cond)
                    xi = rng.standard_normal(x.shape)
                    eta = _corrector_step(q, xi, config.snr)
                    x = x + eta * q + math.sqrt(2.0 * eta) * xi
            bad = ~np.all(np.isfinite(x), axis=1)
            newly = bad & (fail_step == 0)
            fail_step[newly] = k
    ok = fail_step == 0
    return x, ok, fail_step


def pc_sample(score_fn: ScoreFn, dim: int, cond, config: SamplerConfig, schedule: NoiseSchedule, rng,
              n: Optional[int] = None):
    """Draw samples by reverse-time predictor-corrector integration.

    Starts from ``N(0, prior_std^2 I)``. The final predictor step injects no
    noise, so the returned point is denoised. With ``n=None`` a single
    vector is returned, otherwise an ``[n, dim]`` matrix.
    """
    rows = 1 if n is None else int(n)
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if len(cond) == 1 and rows > 1:
            cond = np.repeat(cond, rows, axis=0)
        if len(cond) != rows:
            raise ContractViolation(f"{len(cond)} conditioning rows for {rows} chains")
    x = config.prior_std(schedule) * rng.standard_normal((rows, dim))
    out, ok, fail_step = pc_chains(score_fn, x, cond, config, schedule, rng)
    if not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        raise NumericFailure(f"sampler state became non-finite at step {fail_step[i]}", index=int(fail_step[i]))
    return out[0] if n is None else out
