"""Linear-Gaussian source/target domains with known dynamics.

The shipped domains are a damped 2-D point mass (position and velocity,
force actions) whose source and target versions differ either in a constant
drift ``c`` or in one entry of ``A``. Rewards are a quadratic cost mapped
affinely to ``[0, r_max]`` and clipped there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .datasets import ORIGIN_CODE, TransitionDataset
from .errors import ContractViolation


@dataclass(frozen=True)
class LinearGaussianDomain:
    name: str
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    noise_std: np.ndarray  # square root of the diagonal noise covariance
    Q_cost: np.ndarray
    R_cost: np.ndarray
    goal: np.ndarray
    horizon: int = 50
    cost_scale: float = 5.0
    r_max: float = 1.0
    init_mean: Optional[np.ndarray] = None
    init_std: float = 0.3
    action_bound: Optional[float] = None
    random_action_scale: float = 1.0

    def __post_init__(self):
        for name in ("A", "B", "c", "noise_std", "Q_cost", "R_cost", "goal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        ds, da = self.B.shape
        if self.A.shape != (ds, ds) or self.c.shape != (ds,) or self.goal.shape != (ds,):
            raise ContractViolation("inconsistent domain shapes")
        if self.noise_std.shape != (ds,) or np.any(self.noise_std < 0):
            raise ContractViolation("noise std must be a non-negative vector of length d_s")
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        init = np.zeros(ds) if self.init_mean is None else np.asarray(self.init_mean, dtype=np.float64)
        object.__setattr__(self, "init_mean", init)

    @property
    def state_dim(self):
        return self.B.shape[0]

    @property
    def action_dim(self):
        return self.B.shape[1]

    def mean_next(self, s, a):
        """Exact conditional mean of ``s'`` given ``(s, a)``."""
        return np.asarray(s) @ self.A.T + np.asarray(a) @ self.B.T + self.c

    def cost(self, s, a):
        e = np.asarray(s) - self.goal
        a = np.asarray(a)
        return np.einsum("...i,ij,...j->...", e, self.Q_cost, e) + np.einsum("...i,ij,...j->...", a, self.R_cost, a)

    def reward(self, s, a):
        return np.clip(self.r_max * (1.0 - self.cost(s, a) / self.cost_scale), 0.0, self.r_max)

    def clip_action(self, a):
        if self.action_bound is None:
            return a
        return np.clip(a, -self.action_bound, self.action_bound)

    def reset(self, rng, n=1):
        return self.init_mean + self.init_std * rng.standard_normal((n, self.state_dim))

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


def step(domain: LinearGaussianDomain, s, a, rng, t: int = 0):
    """One transition; ``done`` is raised at the last step of the horizon."""
    s = np.asarray(s, dtype=np.float64)
    a = domain.clip_action(np.asarray(a, dtype=np.float64))
    r = domain.reward(s, a)
    s_next = domain.mean_next(s, a) + domain.noise_std * rng.standard_normal(s.shape)
    return s_next, r, t + 1 >= domain.horizon


# ---------------------------------------------------------------------------
# Policies

@dataclass(frozen=True)
class LinearFeedbackPolicy:
    """``a = gains[t] s + offsets[t] + noise_std * eps`` (last gain reused past the end)."""

    gains: np.ndarray  # [T, d_a, d_s]
    offsets: np.ndarray  # [T, d_a]
    noise_std: float = 0.0
    tier: str = "custom"

    def act(self, s, t, rng):
        i = min(t, len(self.gains) - 1)
        a = s @ self.gains[i].T + self.offsets[i]
        if self.noise_std > 0:
            a = a + self.noise_std * rng.standard_normal(a.shape)
        return a

    def with_noise(self, noise_std, tier="custom"):
        return replace(self, noise_std=float(noise_std), tier=tier)


@dataclass(frozen=True)
class UniformRandomPolicy:
    scale: float
    action_dim: int
    tier: str = "random"

    def act(self, s, t, rng):
        return rng.uniform(-self.scale, self.scale, size=(len(s), self.action_dim))


def riccati_policy(domain: LinearGaussianDomain, noise_std: float = 0.0, tier: str = "expert",
                   horizon: Optional[int] = None) -> LinearFeedbackPolicy:
    """Finite-horizon optimal affine feedback for the quadratic cost.

    The drift is folded into an augmented state ``[s - goal, 1]``.
    """
    H = horizon or domain.horizon
    ds, da = domain.state_dim, domain.action_dim
    d = domain.A @ domain.goal + domain.c - domain.goal
    Aa = np.zeros((ds + 1, ds + 1))
    Aa[:ds, :ds] = domain.A
    Aa[:ds, ds] = d
    Aa[ds, ds] = 1.0
    Ba = np.vstack([domain.B, np.zeros((1, da))])
    Qa = np.zeros((ds + 1, ds + 1))
    Qa[:ds, :ds] = domain.Q_cost
    P = np.zeros((ds + 1, ds + 1))
    gains = np.zeros((H, da, ds))
    offsets = np.zeros((H, da))
    for t in range(H - 1, -1, -1):
        # least squares keeps the degenerate zero-cost case (any action optimal) defined
        K = np.linalg.lstsq(domain.R_cost + Ba.T @ P @ Ba, Ba.T @ P @ Aa, rcond=None)[0]
        P = Qa + Aa.T @ P @ (Aa - Ba @ K)
        P = 0.5 * (P + P.T)
        # a = -K [s - goal; 1]
        gains[t] = -K[:, :ds]
        offsets[t] = K[:, :ds] @ domain.goal - K[:, ds]
    return LinearFeedbackPolicy(gains, offsets, float(noise_std), tier)


TIER_NOISE = {"expert": 0.05, "medium": 0.5}


def behavior_policy(domain: LinearGaussianDomain, tier: str = "medium"):
    if tier == "random":
        return UniformRandomPolicy(domain.random_action_scale, domain.action_dim)
    if tier not in TIER_NOISE:
        raise ContractViolation(f"unknown behavior tier {tier!r}")
    return riccati_policy(domain, TIER_NOISE[tier], tier)


# ---------------------------------------------------------------------------
# Rollouts

def rollout(domain: LinearGaussianDomain, policy, n_episodes: int, rng, horizon: Optional[int] = None):
    """Vectorized episodes; returns arrays shaped ``[episodes, T, ...]``."""
    H = horizon or domain.horizon
    s = domain.reset(rng, n_episodes)
    S = np.zeros((n_episodes, H, domain.state_dim))
    Aout = np.zeros((n_episodes, H, domain.action_dim))
    R = np.zeros((n_episodes, H))
    SN = np.zeros_like(S)
    for t in range(H):
        a = domain.clip_action(policy.act(s, t, rng))
        s_next, r, _ = step(domain, s, a, rng, t)
        S[:, t], Aout[:, t], R[:, t], SN[:, t] = s, a, r, s_next
        s = s_next
    return S, Aout, R, SN


def collect(domain: LinearGaussianDomain, policy, n_transitions: int, rng, origin: str = "target",
            horizon: Optional[int] = None, timeout_is_terminal: bool = False) -> TransitionDataset:
    """Roll out whole episodes and keep the first ``n_transitions`` rows.

    The horizon is a time limit, not a terminal state, so the stored
    ``done`` flag stays false unless ``timeout_is_terminal`` is set; the
    episode length is kept in the metadata.
    """
    H = horizon or domain.horizon
    md = {"domain": domain.name, "tier": getattr(policy, "tier", "custom"), "horizon": H,
          "timeout_is_terminal": timeout_is_terminal}
    if n_transitions <= 0:
        return TransitionDataset.empty(domain.state_dim, domain.action_dim, md)
    n_ep = math.ceil(n_transitions / H)
    S, A, R, SN = rollout(domain, policy, n_ep, rng, H)
    done = np.zeros((n_ep, H), bool)
    done[:, -1] = timeout_is_terminal
    k = n_transitions
    return TransitionDataset(
        S.reshape(-1, domain.state_dim)[:k], A.reshape(-1, domain.action_dim)[:k], R.reshape(-1)[:k],
        SN.reshape(-1, domain.state_dim)[:k], done.reshape(-1)[:k], np.full(k, ORIGIN_CODE[origin], np.int8),
        metadata=md,
    )


def episode_returns(domain, policy, n_episodes, rng, horizon=None):
    _, _, R, _ = rollout(domain, policy, n_episodes, rng, horizon)
    return R.sum(axis=1)


def stationary_moments(domain: LinearGaussianDomain, gain, offset, action_noise_std: float = 0.0):
    """Mean and covariance of the stationary state law under ``a = gain s + offset + noise``."""
    F = domain.A + domain.B @ gain
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1.0:
        raise ContractViolation("closed loop is not stable")
    mean = np.linalg.solve(np.eye(domain.state_dim) - F, domain.B @ offset + domain.c)
    W = np.diag(domain.noise_std ** 2) + action_noise_std ** 2 * domain.B @ domain.B.T
    return mean, solve_discrete_lyapunov(F, W)


# ---------------------------------------------------------------------------
# Source/target pairs

@dataclass(frozen=True)
class DomainPair:
    name: str
    source: LinearGaussianDomain
    target: LinearGaussianDomain
    shift_kind: str
    shift_magnitude: float

    def __post_init__(self):
        s, t = self.source, self.target
        if (s.state_dim, s.action_dim) != (t.state_dim, t.action_dim):
            raise ContractViolation("source and target must share state and action dims")
        if not (np.array_equal(s.Q_cost, t.Q_cost) and np.array_equal(s.R_cost, t.R_cost)
                and np.array_equal(s.goal, t.goal) and s.cost_scale == t.cost_scale):
            raise ContractViolation("source and target must share the reward")


def point_mass(name="point-mass", dt=0.2, pos_decay=0.99, vel_decay=0.9, noise=0.02, horizon=50, **overrides):
    A = np.array([
        [pos_decay, 0, dt, 0],
        [0, pos_decay, 0, dt],
        [0, 0, vel_decay, 0],
        [0, 0, 0, vel_decay],
    ])
    B = np.array([[0.5 * dt * dt, 0], [0, 0.5 * dt * dt], [dt, 0], [0, dt]])
    base = dict(
        name=name, A=A, B=B, c=np.array([0.0, 0.0, 0.0, -0.1]), noise_std=np.full(4, noise),
        Q_cost=np.diag([1.0, 1.0, 0.1, 0.1]), R_cost=0.01 * np.eye(2), goal=np.zeros(4), horizon=horizon,
        cost_scale=5.0, init_mean=np.array([1.5, 1.0, 0.0, 0.0]), init_std=1.0,
    )
    base.update(overrides)
    return LinearGaussianDomain(**base)


SHIPPED_PAIRS = ("drift-small", "drift-large", "structure")


def make_pair(name: str, **overrides) -> DomainPair:
    """Build a shipped pair; ``overrides`` apply to both domains."""
    target = point_mass(name=f"{name}/target", **overrides)
    if name in ("drift-small", "drift-large"):
        mag = 0.2 if name == "drift-small" else 1.0
        shift = np.array([0.0, 0.0, 0.0, mag])
        source = replace(target, name=f"{name}/source", c=target.c + shift)
        return DomainPair(name, source, target, "drift", mag)
    if name == "structure":
        A = target.A.copy()
        A[2, 2] *= 1.1
        source = replace(target, name=f"{name}/source", A=A)
        return DomainPair(name, source, target, "structure", 0.1)
    raise ContractViolation(f"unknown domain pair {name!r}; shipped: {SHIPPED_PAIRS}")


def reference_returns(pair: DomainPair, rng, episodes: int = 100):
    """``(J_r, J_e)``: uniform-random and noiseless Riccati returns in the target."""
    tgt = pair.target
    seeds = rng.integers(0, 2**63 - 1, size=2)
    J_r = episode_returns(tgt, behavior_policy(tgt, "random"), episodes, np.random.default_rng(seeds[0])).mean()
    J_e = episode_returns(tgt, riccati_policy(tgt, 0.0), episodes, np.random.default_rng(seeds[1])).mean()
    return float(J_r), float(J_e)


def error_report(gen: TransitionDataset, target_domain: LinearGaussianDomain, tgt_holdout=None,
                 inverse_fn=None) -> dict:
    """Action, reward and transition errors of a generated set (mean and std).

    Transition error is exact: ``||s' - (A s + B a + c)||`` with the known
    target dynamics. Action error needs the inverse model and a held-out
    target set.
    """
    def ms(x):
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            return {"mean": None, "std": None, "n": 0}
        return {"mean": float(x.mean()), "std": float(x.std()), "n": int(x.size)}

    report = {}
    if tgt_holdout is not None and inverse_fn is not None and len(tgt_holdout):
        pred = inverse_fn(tgt_holdout.s, tgt_holdout.s_next)
        report["action_err"] = ms(np.linalg.norm(pred - tgt_holdout.a, axis=1))
    else:
        report["action_err"] = ms([])
    if len(gen):
        trans = np.linalg.norm(gen.s_next - target_domain.mean_next(gen.s, gen.a), axis=1)
        rew = np.abs(gen.r - target_domain.reward(gen.s, gen.a))
    else:
        trans = rew = []
    report["reward_err"] = ms(rew)
    report["transition_err"] = ms(trans)
    return report
