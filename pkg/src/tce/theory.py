"""Exact finite-MDP computations for the mixture-vs-target performance bounds.

Conventions: ``rho`` is the normalized discounted state-action occupancy,
``eta = E_rho[r]`` the normalized return and ``J = mu0 @ V`` the discounted
return, so ``eta = (1 - gamma) J``. The telescoping identity
``J_1 - J_2 = gamma / (1 - gamma) E_rho1[G]`` holds for ``J``; the bound
constants are the ones that identity yields, so gaps are reported on ``J``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericFailure

ROW_TOL = 1e-12


@dataclass(frozen=True)
class TabularMDP:
    P: np.ndarray  # [S, A, S]
    r: np.ndarray  # [S, A]
    gamma: float
    mu0: np.ndarray  # [S]
    r_max: float = 1.0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        mu0 = np.asarray(self.mu0, dtype=np.float64)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "mu0", mu0)
        S, A = r.shape
        if P.shape != (S, A, S) or mu0.shape != (S,):
            raise ContractViolation("inconsistent MDP array shapes")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ContractViolation("transition rows must be probability vectors")
        if np.any(r < 0) or np.any(r > self.r_max):
            raise ContractViolation("rewards must lie in [0, r_max]")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must lie in [0, 1)")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > ROW_TOL:
            raise ContractViolation("initial distribution must be on the simplex")

    @property
    def n_states(self):
        return self.r.shape[0]

    @property
    def n_actions(self):
        return self.r.shape[1]

    def with_kernel(self, P) -> "TabularMDP":
        return TabularMDP(P, self.r, self.gamma, self.mu0, self.r_max)


def check_policy(mdp: TabularMDP, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ContractViolation(f"policy shape {pi.shape} does not match MDP")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > ROW_TOL:
        raise ContractViolation("policy rows must be probability vectors")
    return pi


def _policy_kernel(mdp, pi):
    return np.einsum("sa,sat->st", pi, mdp.P), np.sum(pi * mdp.r, axis=1)


def _solve(M, b):
    try:
        return np.linalg.solve(M, b)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"singular linear system: {exc}") from exc


def occupancy(mdp: TabularMDP, pi) -> np.ndarray:
    """Normalized discounted occupancy ``rho(s, a)`` (sums to one)."""
    pi = check_policy(mdp, pi)
    P_pi, _ = _policy_kernel(mdp, pi)
    S = mdp.n_states
    d = (1.0 - mdp.gamma) * _solve(np.eye(S) - mdp.gamma * P_pi.T, mdp.mu0)
    return d[:, None] * pi


def value(mdp: TabularMDP, pi) -> np.ndarray:
    """``V = r_pi + gamma P_pi V`` by direct solve."""
    pi = check_policy(mdp, pi)
    P_pi, r_pi = _policy_kernel(mdp, pi)
    return _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def eta(mdp: TabularMDP, pi) -> float:
    return float(np.sum(occupancy(mdp, pi) * mdp.r))


def discounted_return(mdp: TabularMDP, pi) -> float:
    return float(mdp.mu0 @ value(mdp, pi))


def tv(P, Q) -> np.ndarray:
    """Per-(s, a) total variation between two kernels ``[S, A, S]``."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ContractViolation("kernels have different shapes")
    return 0.5 * np.sum(np.abs(P - Q), axis=-1)


def mix(P_src, P_hat, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"mixture weight {lam} outside [0, 1]")
    P_src = np.asarray(P_src, dtype=np.float64)
    P_hat = np.asarray(P_hat, dtype=np.float64)
    if lam == 1.0:
        return P_src.copy()
    if lam == 0.0:
        return P_hat.copy()
    # exact when P_src == P_hat
    return P_hat + lam * (P_src - P_hat)


def tv_bound(P_src, P_hat, P_tar, lam, pi, r_max, gamma, mu0, r=None) -> float:
    """Total-variation bound on the mixture-vs-target return gap.

    ``2 gamma r_max / (1 - gamma)^2 * E_rho_mix[lam TV(src, tar) + (1 - lam) TV(hat, tar)]``.
    The occupancy depends only on kernel, policy and ``mu0``; ``r`` is
    accepted for signature symmetry and ignored.
    """
    S, A = np.asarray(pi).shape
    dummy = np.zeros((S, A)) if r is None else r
    mdp_mix = TabularMDP(mix(P_src, P_hat, lam), dummy, gamma, mu0, r_max)
    rho = occupancy(mdp_mix, pi)
    per_sa = lam * tv(P_src, P_tar) + (1.0 - lam) * tv(P_hat, P_tar)
    return float(2.0 * gamma * r_max / (1.0 - gamma) ** 2 * np.sum(rho * per_sa))


def value_bound(P_src, P_hat, P_tar, lam, pi, r, gamma, mu0, r_max=1.0) -> float:
    """Value-discrepancy bound using the exact target value function."""
    mdp_tar = TabularMDP(P_tar, r, gamma, mu0, r_max)
    V = value(mdp_tar, pi)
    rho = occupancy(mdp_tar.with_kernel(mix(P_src, P_hat, lam)), pi)
    ev_tar = np.asarray(P_tar) @ V
    per_sa = lam * np.abs(np.asarray(P_src) @ V - ev_tar) + (1.0 - lam) * np.abs(np.asarray(P_hat) @ V - ev_tar)
    return float(gamma / (1.0 - gamma) * np.sum(rho * per_sa))


def value_discrepancy(mdp1: TabularMDP, mdp2: TabularMDP, pi) -> np.ndarray:
    """``G(s, a) = E_{P1}[V2(s')] - E_{P2}[V2(s')]``."""
    V2 = value(mdp2, pi)
    return mdp1.P @ V2 - mdp2.P @ V2


def telescoping_check(mdp1: TabularMDP, mdp2: TabularMDP, pi) -> float:
    """Absolute residual of ``J1 - J2 = gamma/(1-gamma) E_rho1[G]``."""
    lhs = discounted_return(mdp1, pi) - discounted_return(mdp2, pi)
    rhs = mdp1.gamma / (1.0 - mdp1.gamma) * float(np.sum(occupancy(mdp1, pi) * value_discrepancy(mdp1, mdp2, pi)))
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# Random instances and the verification campaign

def _dirichlet_rows(rng, shape, k):
    return rng.dirichlet(np.ones(k), size=shape)


def random_instance(rng, max_states=5, max_actions=3):
    """Source, model and target MDPs sharing rewards, plus a policy and lambda."""
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    gamma = float(rng.uniform(0.5, 0.95))
    r = rng.uniform(0.0, 1.0, size=(S, A))
    mu0 = rng.dirichlet(np.ones(S))
    tar = TabularMDP(_dirichlet_rows(rng, (S, A), S), r, gamma, mu0)
    P_src = _dirichlet_rows(rng, (S, A), S)
    P_hat = _dirichlet_rows(rng, (S, A), S)
    pi = _dirichlet_rows(rng, (S,), A)
    lam = float(rng.uniform(0.0, 1.0))
    return tar, P_src, P_hat, pi, lam


def check_instance(tar: TabularMDP, P_src, P_hat, pi, lam) -> dict:
    mdp_mix = tar.with_kernel(mix(P_src, P_hat, lam))
    J_gap = discounted_return(mdp_mix, pi) - discounted_return(tar, pi)
    eta_gap = eta(mdp_mix, pi) - eta(tar, pi)
    tvb = tv_bound(P_src, P_hat, tar.P, lam, pi, tar.r_max, tar.gamma, tar.mu0)
    vb = value_bound(P_src, P_hat, tar.P, lam, pi, tar.r, tar.gamma, tar.mu0, tar.r_max)
    return {
        "n_states": tar.n_states, "n_actions": tar.n_actions, "gamma": tar.gamma, "lam": lam,
        "gap": J_gap, "eta_gap": eta_gap, "value_bound": vb, "tv_bound": tvb,
        "telescoping_residual": telescoping_check(mdp_mix, tar, pi),
    }


def verify_bounds(instances: int = 100, seed: int = 0, max_states=5, max_actions=3, tol=1e-12) -> dict:
    """Run the bound checks on seeded random instances and summarize.

    An inequality counts as violated only when it fails by more than ``tol``
    (absolute), which absorbs round-off in Dirichlet rows that sum to
    ``1 - 1e-16``.
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    rows = [check_instance(*random_instance(rng, max_states, max_actions)) for _ in range(instances)]
    elapsed = time.perf_counter() - start
    gaps = np.array([r["gap"] for r in rows])
    tvb = np.array([r["tv_bound"] for r in rows])
    vb = np.array([r["value_bound"] for r in rows])
    res = np.array([r["telescoping_residual"] for r in rows])
    ratio = np.where(tvb > 0, gaps / np.where(tvb > 0, tvb, 1.0), 0.0)
    return {
        "instances": instances,
        "seed": seed,
        "tolerance": tol,
        "tv_violations": int(np.sum(gaps > tvb + tol)),
        "value_violations": int(np.sum(gaps > vb + tol)),
        "chain_violations": int(np.sum(vb > tvb + tol)),
        "max_gap_to_bound_ratio": float(ratio.max()) if len(rows) else 0.0,
        "max_telescoping_residual": float(res.max()) if len(rows) else 0.0,
        "elapsed_seconds": elapsed,
        "rows": rows,
    }
