"""Implicit Q-learning with a KL pull toward the target behavior policy.

Value ``V`` regresses an upper expectile of a target critic, ``Q`` fits a
one-step TD target through ``V`` and the actor maximizes advantage-weighted
log-likelihood minus ``beta * KL(pi_b || pi)`` on target states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import netcore as nc
from .datasets import ORIGIN_CODE, Scaler, TransitionDataset, fit_scaler_states
from .errors import ContractViolation, NumericFailure

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class IqlConfig:
    tau_v: float = 0.7
    kappa: float = 3.0
    beta: float = 0.001
    gamma: float = 0.99
    polyak: float = 0.005
    adv_weight_clip: float = 100.0
    steps: int = 1_000_000
    bc_steps: int = 10_000
    batch_target: int = 128
    batch_other: int = 128
    lr: float = 3e-4
    hidden: int = 256
    blocks: int = 2
    eval_every: int = 0
    eval_episodes: int = 10

    def __post_init__(self):
        if not 0.0 < self.tau_v < 1.0:
            raise ContractViolation("tau_v must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ContractViolation("gamma must lie in (0, 1)")
        if self.beta < 0 or not 0.0 <= self.polyak <= 1.0 or self.adv_weight_clip <= 0:
            raise ContractViolation("invalid IQL coefficients")
        if min(self.batch_target, self.hidden) < 1 or self.batch_other < 0 or self.steps < 0:
            raise ContractViolation("invalid IQL sizes")


def expectile_loss(u, tau_v: float):
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau_v - (u < 0)) * u * u


def polyak_update(target, online, p: float):
    return tuple((1.0 - p) * t + p * o for t, o in zip(target, online))


def gaussian_kl(mu_p, log_std_p, mu_q, log_std_q):
    """``KL(N(mu_p, s_p^2) || N(mu_q, s_q^2))`` per row, summed over dims."""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    return np.sum(log_std_q - log_std_p + (var_p + (mu_p - mu_q) ** 2) / (2.0 * var_q) - 0.5, axis=-1)


# ---------------------------------------------------------------------------
# Gaussian actor

@dataclass(frozen=True)
class GaussianActor:
    spec: nc.MlpSpec
    params: tuple
    log_std: np.ndarray
    action_bound: Optional[float] = None

    @property
    def squashed(self):
        return self.action_bound is not None

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, sn):
        return nc.forward(self.spec, self.params, sn)

    def pre_squash(self, a):
        if not self.squashed:
            return a
        y = np.clip(a / self.action_bound, -1.0 + 1e-6, 1.0 - 1e-6)
        return np.arctanh(y)

    def act(self, sn, rng=None):
        mu = self.mean(sn)
        if rng is not None:
            mu = mu + np.exp(self.clamped_log_std()) * rng.standard_normal(mu.shape)
        return self.action_bound * np.tanh(mu) if self.squashed else mu

    def log_prob(self, sn, a):
        mu = self.mean(sn)
        return _log_prob(mu, self.clamped_log_std(), self.pre_squash(a), self.action_bound)


def _log_prob(mu, log_std, u, bound):
    lp = -np.sum(0.5 * ((u - mu) / np.exp(log_std)) ** 2 + log_std + _HALF_LOG_2PI, axis=1)
    if bound is not None:
        y = np.tanh(u)
        lp = lp - np.sum(np.log(bound * (1.0 - y * y) + 1e-12), axis=1)
    return lp


def init_actor(state_dim, action_dim, cfg: IqlConfig, rng, action_bound=None) -> GaussianActor:
    spec = nc.MlpSpec(state_dim, cfg.hidden, cfg.blocks, action_dim)
    return GaussianActor(spec, nc.init_params(spec, rng), np.zeros(action_dim), action_bound)


def actor_loss_and_grad(actor: GaussianActor, sn, a, weights, kl_rows: int = 0, beta: float = 0.0,
                        bc: Optional[GaussianActor] = None):
    """``mean(-w log pi(a|s)) + beta * mean_{first kl_rows}(KL(pi_b || pi))``.

    Returns ``(loss, awr_loss, kl, param_grads, log_std_grad)``. The KL term
    is skipped entirely when ``beta == 0`` so that the result is exactly the
    advantage-weighted regression loss.
    """
    n = len(sn)
    mu, cache = nc.forward_with_cache(actor.spec, actor.params, sn)
    raw = actor.log_std
    ls = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * ls)
    u = actor.pre_squash(a)
    lp = _log_prob(mu, ls, u, actor.action_bound)
    awr = float(np.mean(-weights * lp))
    diff = u - mu
    w = weights[:, None] / n
    dmu = -w * diff * inv_var
    dls = np.sum(w * (1.0 - diff * diff * inv_var), axis=0)
    loss, kl = awr, 0.0
    if beta > 0.0 and kl_rows > 0:
        mu_b = bc.mean(sn[:kl_rows])
        ls_b = bc.clamped_log_std()
        kl_rows_val = gaussian_kl(mu_b, ls_b, mu[:kl_rows], ls)
        kl = float(np.mean(kl_rows_val))
        loss = awr + beta * kl
        var_b = np.exp(2.0 * ls_b)
        c = beta / kl_rows
        dmu[:kl_rows] += -c * (mu_b - mu[:kl_rows]) * inv_var
        dls = dls + c * np.sum(1.0 - (var_b + (mu_b - mu[:kl_rows]) ** 2) * inv_var, axis=0)
    grads = nc.backward(actor.spec, actor.params, cache, dmu)
    dls = np.where((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX), dls, 0.0)
    return loss, awr, kl, grads, dls


# ---------------------------------------------------------------------------
# Critic and value

def value_loss_and_grad(spec, params, sn, q_target_vals, tau_v):
    v, cache = nc.forward_with_cache(spec, params, sn)
    u = q_target_vals - v[:, 0]
    wt = np.abs(tau_v - (u < 0))
    loss = float(np.mean(wt * u * u))
    dout = (-2.0 * wt * u / len(u))[:, None]
    return loss, nc.backward(spec, params, cache, dout)


@dataclass
class PolicyModel:
    """Mutable training state; the parameter tuples themselves are immutable."""

    actor: GaussianActor
    q_spec: nc.MlpSpec
    q_params: tuple
    q_target: tuple
    v_spec: nc.MlpSpec
    v_params: tuple
    bc: GaussianActor
    scaler: Scaler
    opt: dict = field(default_factory=dict)
    step: int = 0

    def norm(self, s):
        return self.scaler.apply(np.atleast_2d(s))

    def q_values(self, sn, a, target=False):
        p = self.q_target if target else self.q_params
        return nc.forward(self.q_spec, p, np.concatenate([sn, a], axis=1))[:, 0]

    def v_values(self, sn):
        return nc.forward(self.v_spec, self.v_params, sn)[:, 0]

    def act(self, s, rng=None):
        """Deterministic mean action unless ``rng`` is given."""
        return self.actor.act(self.norm(s), rng)


def init_policy_model(state_dim, action_dim, cfg: IqlConfig, rng, scaler: Scaler, bc: GaussianActor,
                      action_bound=None) -> PolicyModel:
    actor = init_actor(state_dim, action_dim, cfg, rng, action_bound)
    q_spec = nc.MlpSpec(state_dim + action_dim, cfg.hidden, cfg.blocks, 1)
    v_spec = nc.MlpSpec(state_dim, cfg.hidden, cfg.blocks, 1)
    q = nc.init_params(q_spec, rng)
    v = nc.init_params(v_spec, rng)
    opt = {
        "actor": nc.adam_init(actor.params + (actor.log_std,), lr=cfg.lr),
        "q": nc.adam_init(q, lr=cfg.lr),
        "v": nc.adam_init(v, lr=cfg.lr),
    }
    return PolicyModel(actor, q_spec, q, tuple(p.copy() for p in q), v_spec, v, bc, scaler, opt)


def value_step(model: PolicyModel, batch: dict, cfg: IqlConfig) -> float:
    qt = model.q_values(batch["sn"], batch["a"], target=True)
    loss, grads = value_loss_and_grad(model.v_spec, model.v_params, batch["sn"], qt, cfg.tau_v)
    model.v_params, model.opt["v"] = nc.adam_step(model.opt["v"], model.v_params, grads)
    return loss


def td_targets(model: PolicyModel, batch: dict, gamma: float):
    v_next = model.v_values(batch["sn_next"])
    y = batch["r"] + gamma * (1.0 - batch["done"]) * v_next
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        i = int(bad[0])
        raise NumericFailure(f"non-finite TD target at batch row {i}: r={batch['r'][i]}, V(s')={v_next[i]}", index=i)
    return y


def q_step(model: PolicyModel, batch: dict, cfg: IqlConfig) -> float:
    y = td_targets(model, batch, cfg.gamma)
    inputs = np.concatenate([batch["sn"], batch["a"]], axis=1)
    loss, grads = nc.loss_and_grad(model.q_spec, model.q_params, {"inputs": inputs, "targets": y})
    model.q_params, model.opt["q"] = nc.adam_step(model.opt["q"], model.q_params, grads)
    model.q_target = polyak_update(model.q_target, model.q_params, cfg.polyak)
    return loss


def advantage_weights(q_vals, v_vals, kappa, clip):
    return np.minimum(np.exp(kappa * (q_vals - v_vals)), clip)


def policy_step(model: PolicyModel, batch: dict, cfg: IqlConfig) -> dict:
    """Advantage-weighted actor update; the KL term covers the target half of the batch."""
    w = advantage_weights(model.q_values(batch["sn"], batch["a"], target=True), model.v_values(batch["sn"]),
                          cfg.kappa, cfg.adv_weight_clip)
    loss, awr, kl, grads, dls = actor_loss_and_grad(model.actor, batch["sn"], batch["a"], w,
                                                    batch["n_target"], cfg.beta, model.bc)
    params = model.actor.params + (model.actor.log_std,)
    new, model.opt["actor"] = nc.adam_step(model.opt["actor"], params, grads + (dls,))
    model.actor = replace(model.actor, params=new[:-1], log_std=new[-1])
    return {"pi_loss": loss, "awr_loss": awr, "kl": kl}


# ---------------------------------------------------------------------------
# Behavior cloning

def behavior_clone(tgt: TransitionDataset, cfg: IqlConfig, rng, scaler: Optional[Scaler] = None,
                   action_bound=None, steps: Optional[int] = None):
    """Maximum-likelihood Gaussian policy on target rows; returns ``(actor, nll_curve)``."""
    if len(tgt) == 0:
        raise ContractViolation("behavior cloning needs target rows")
    scaler = scaler or fit_scaler_states(tgt.s)
    sn_all = scaler.apply(tgt.s)
    actor = init_actor(tgt.state_dim, tgt.action_dim, cfg, rng, action_bound)
    opt = nc.adam_init(actor.params + (actor.log_std,), lr=cfg.lr)
    steps = cfg.bc_steps if steps is None else steps
    bs = min(cfg.batch_target, len(tgt))
    curve = np.empty(steps)
    for t in range(steps):
        idx = rng.integers(0, len(tgt), size=bs)
        loss, _, _, grads, dls = actor_loss_and_grad(actor, sn_all[idx], tgt.a[idx], np.ones(bs))
        new, opt = nc.adam_step(opt, actor.params + (actor.log_std,), grads + (dls,))
        actor = replace(actor, params=new[:-1], log_std=new[-1])
        curve[t] = loss
    return actor, curve


# ---------------------------------------------------------------------------
# Training loop

class BatchSampler:
    """Draws ``batch_target`` target rows plus ``batch_other`` rows from the rest.

    When the training set has no non-target rows the second half is drawn
    from the target rows too.
    """

    def __init__(self, data: TransitionDataset, scaler: Scaler, cfg: IqlConfig):
        is_t = data.origin == ORIGIN_CODE["target"]
        self.t_idx = np.flatnonzero(is_t)
        self.o_idx = np.flatnonzero(~is_t)
        if self.t_idx.size == 0:
            raise ContractViolation("training set has no target rows")
        if self.o_idx.size == 0:
            self.o_idx = self.t_idx
        self.sn = scaler.apply(data.s)
        self.sn_next = scaler.apply(data.s_next)
        self.data = data
        self.cfg = cfg

    def sample(self, rng) -> dict:
        it = self.t_idx[rng.integers(0, self.t_idx.size, size=self.cfg.batch_target)]
        io = self.o_idx[rng.integers(0, self.o_idx.size, size=self.cfg.batch_other)]
        idx = np.concatenate([it, io])
        d = self.data
        return {
            "sn": self.sn[idx], "a": d.a[idx], "r": d.r[idx], "sn_next": self.sn_next[idx],
            "done": d.done[idx].astype(np.float64), "n_target": len(it),
        }


def train_policy(train_set: TransitionDataset, tgt: TransitionDataset, cfg: IqlConfig, seed: int,
                 action_bound=None, evaluator: Optional[Callable] = None,
                 on_metrics: Optional[Callable[[dict], None]] = None) -> PolicyModel:
    """Behavior-clone on target rows, then run ``cfg.steps`` IQL updates.

    ``evaluator(model) -> dict`` runs every ``cfg.eval_every`` steps and at
    the end; every logged record goes to ``on_metrics``.
    """
    r_bc, r_init, r_batch = (np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))) for i in range(3))
    scaler = fit_scaler_states(tgt.s)
    bc, bc_curve = behavior_clone(tgt, cfg, r_bc, scaler, action_bound)
    model = init_policy_model(train_set.state_dim, train_set.action_dim, cfg, r_init, scaler, bc, action_bound)
    sampler = BatchSampler(train_set, scaler, cfg)
    emit = on_metrics or (lambda rec: None)
    if len(bc_curve):
        emit({"step": 0, "bc_nll_first": float(bc_curve[0]), "bc_nll_last": float(bc_curve[-1])})
    acc = {"v_loss": 0.0, "q_loss": 0.0, "pi_loss": 0.0, "kl": 0.0}
    since = 0
    for step in range(1, cfg.steps + 1):
        batch = sampler.sample(r_batch)
        acc["v_loss"] += value_step(model, batch, cfg)
        acc["q_loss"] += q_step(model, batch, cfg)
        pi = policy_step(model, batch, cfg)
        acc["pi_loss"] += pi["pi_loss"]
        acc["kl"] += pi["kl"]
        since += 1
        model.step = step
        if (cfg.eval_every and step % cfg.eval_every == 0) or step == cfg.steps:
            rec = {"step": step, **{k: v / since for k, v in acc.items()}}
            if evaluator is not None:
                rec.update(evaluator(model))
            emit(rec)
            acc = dict.fromkeys(acc, 0.0)
            since = 0
    return model


# ---------------------------------------------------------------------------
# Evaluation

def normalized_score(J: float, J_r: float, J_e: float) -> float:
    if J_e == J_r:
        raise ContractViolation("expert and random reference returns coincide")
    return (J - J_r) / (J_e - J_r) * 100.0


def evaluate(policy, domain, episodes: int, rng, refs) -> tuple:
    """Mean return of the deterministic policy and its normalized score.

    ``policy`` is anything with ``act(states) -> actions``; ``refs`` is
    ``(J_r, J_e)``.
    """
    from .domains import rollout

    J_r, J_e = refs
    if J_e == J_r:
        raise ContractViolation("expert and random reference returns coincide")

    class _Det:
        tier = "learned"

        def act(self, s, t, _rng):
            return policy.act(s)

    _, _, R, _ = rollout(domain, _Det(), episodes, rng)
    J = float(R.sum(axis=1).mean())
    return J, normalized_score(J, J_r, J_e)
