"""Score-model training and two-stage synthesis of target-aligned transitions.

Stage 1 samples states from a score model of the mixture ``D_src^lam_cov``
plus target states. Stage 2 samples a next state for every generated state
from a conditional score model trained on target transitions only. Actions
and rewards are labelled by an inverse-dynamics model and a reward model.

Score networks predict the noise: with output ``e`` the score is
``q = e / sigma(tau)``, so the denoising loss ``||sigma q + z||^2`` becomes
``||e + z||^2`` and stays well scaled at small ``tau``. All models work on
standardized inputs; scores are returned in the normalized coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import netcore as nc
from .datasets import ORIGIN_CODE, Scaler, TransitionDataset, concat, fit_scaler_states
from .diffusion import DEFAULT_SCHEDULE, NoiseSchedule, SamplerConfig, pc_chains, sample_tau
from .errors import ContractViolation, NumericFailure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenConfig:
    lam_cov: float = 0.2
    lam_mix: float = 0.0
    n_generate: Optional[int] = None
    mix_steps: int = 10_000
    tran_steps: int = 5_000
    aux_steps: int = 1_000
    batch_size: int = 128
    lr: float = 1e-4
    score_hidden: int = 256
    score_blocks: int = 4
    embed_width: int = 128
    aux_hidden: int = 256
    aux_blocks: int = 3
    tau_floor: float = 1e-3
    holdout_frac: float = 0.1
    reward_uses_action: bool = False
    one_stage: bool = False
    block_size: int = 1024
    max_drop_frac: float = 0.01

    def __post_init__(self):
        for name in ("lam_cov", "lam_mix", "holdout_frac", "max_drop_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name}={v} outside [0, 1]")
        if self.n_generate is not None and self.n_generate < 0:
            raise ContractViolation("n_generate must be >= 0")
        if min(self.batch_size, self.score_hidden, self.embed_width, self.aux_hidden, self.block_size) < 1:
            raise ContractViolation("sizes must be >= 1")

    def generate_count(self, n_src: int) -> int:
        if self.n_generate is not None:
            return int(self.n_generate)
        return int(round((1.0 - self.lam_mix) * n_src))


# ---------------------------------------------------------------------------
# Score models

@dataclass(frozen=True)
class ScoreModel:
    spec: nc.MlpSpec
    params: tuple
    x_scaler: Scaler
    cond_scaler: Optional[Scaler]
    schedule: NoiseSchedule
    kind: str
    provenance: dict = field(default_factory=dict)
    losses: tuple = ()

    @property
    def dim(self) -> int:
        return self.spec.output_dim

    @property
    def cond_dim(self) -> int:
        return 0 if self.cond_scaler is None else len(self.cond_scaler.mean)

    def _inputs(self, xn, tau, cn):
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1, 1), (len(xn), 1))
        parts = [xn, tau] + ([cn] if cn is not None else [])
        return np.concatenate(parts, axis=1)

    def score_normalized(self, xn, tau, cn=None):
        """Score in standardized coordinates."""
        xn = np.atleast_2d(xn)
        sig = self.schedule.sigma(tau)
        sig = np.asarray(sig, dtype=np.float64).reshape(-1, 1)
        return nc.forward(self.spec, self.params, self._inputs(xn, tau, cn)) / sig

    def score(self, x, tau, cond=None):
        """Score of the perturbed law in raw coordinates."""
        xn = self.x_scaler.apply(np.atleast_2d(x))
        cn = None if cond is None else self.cond_scaler.apply(np.atleast_2d(cond))
        return self.score_normalized(xn, tau, cn) / self.x_scaler.std

    def sampler_fn(self, cn=None):
        """Score function for the sampler with the conditioning branch precomputed."""
        spec, params = self.spec, self.params
        cond_term = 0.0 if cn is None else nc.embed_bias(spec, params, 1, cn)
        cache = {}

        def fn(x, tau, _cond=None):
            if tau not in cache:
                cache.clear()
                cache[tau] = nc.embed_bias(spec, params, 0, [[tau]]) + cond_term
            return nc.forward_trunk(spec, params, x, cache[tau]) / float(self.schedule.sigma(tau))

        return fn

    def checksum(self) -> str:
        return nc.param_checksum(self.params)


def score_spec(dim: int, cond_dim: int, cfg: GenConfig) -> nc.MlpSpec:
    e = cfg.embed_width
    embeds = [nc.EmbedSpec("time", 1, (e, e))]
    if cond_dim:
        embeds.append(nc.EmbedSpec("cond", cond_dim, (e, e)))
    return nc.MlpSpec(dim, cfg.score_hidden, cfg.score_blocks, dim, tuple(embeds))


def train_score(x, cond, steps: int, cfg: GenConfig, rng, schedule: NoiseSchedule = DEFAULT_SCHEDULE,
                kind: str = "score", x_scaler: Optional[Scaler] = None, cond_scaler: Optional[Scaler] = None,
                provenance: Optional[dict] = None) -> ScoreModel:
    """Denoising score matching with Adam on standardized data."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        raise ContractViolation(f"cannot train the {kind} score on an empty set")
    x_scaler = x_scaler or fit_scaler_states(x)
    xn = x_scaler.apply(x)
    cn = None
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if len(cond) != len(x):
            raise ContractViolation("conditioning rows do not match data rows")
        cond_scaler = cond_scaler or fit_scaler_states(cond)
        cn = cond_scaler.apply(cond)
    spec = score_spec(x.shape[1], 0 if cn is None else cn.shape[1], cfg)
    params = nc.init_params(spec, rng)
    state = nc.adam_init(params, lr=cfg.lr)
    bs = min(cfg.batch_size, len(x))
    losses = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, len(x), size=bs)
        tau = sample_tau(rng, bs, cfg.tau_floor)
        z = rng.standard_normal((bs, x.shape[1]))
        sig = schedule.sigma(tau)[:, None]
        inputs = [xn[idx] + sig * z, tau[:, None]] + ([cn[idx]] if cn is not None else [])
        batch = {"inputs": np.concatenate(inputs, axis=1), "noise": z, "sigma": sig, "scale": 1.0 / sig}
        loss, grads = nc.loss_and_grad(spec, params, batch, "dsm")
        params, state = nc.adam_step(state, params, grads)
        losses[step] = loss
    if steps:
        log.info("%s score: %d steps, loss %.4f -> %.4f", kind, steps, losses[: max(1, steps // 10)].mean(),
                 losses[-max(1, steps // 10):].mean())
    return ScoreModel(spec, params, x_scaler, cond_scaler if cn is not None else None, schedule, kind,
                      dict(provenance or {}), tuple(losses.tolist()))


def _require_target(tgt: TransitionDataset, what: str):
    if len(tgt) == 0:
        raise ContractViolation(f"{what}: target set is empty")
    codes = np.unique(tgt.origin)
    if codes.size and not np.all(codes == ORIGIN_CODE["target"]):
        raise ContractViolation(f"{what} must be trained on target rows only")


def train_mixture_score(states_src_sel, tgt: TransitionDataset, cfg: GenConfig, rng,
                        schedule: NoiseSchedule = DEFAULT_SCHEDULE) -> ScoreModel:
    """Unconditional state score on ``D_src^lam_cov`` states plus target states."""
    sel = np.zeros((0, tgt.state_dim)) if states_src_sel is None else np.atleast_2d(states_src_sel)
    x = np.concatenate([sel.reshape(-1, tgt.state_dim), tgt.s], axis=0)
    prov = {"source_rows": int(len(sel)), "target_rows": int(len(tgt))}
    return train_score(x, None, cfg.mix_steps, cfg, rng, schedule, "mix", provenance=prov)


def train_transition_score(tgt: TransitionDataset, cfg: GenConfig, rng,
                           schedule: NoiseSchedule = DEFAULT_SCHEDULE, scaler: Optional[Scaler] = None) -> ScoreModel:
    """Next-state score conditioned on the current state, target rows only."""
    _require_target(tgt, "transition score")
    sc = scaler or fit_scaler_states(tgt.s)
    prov = {"source_rows": 0, "target_rows": int(len(tgt))}
    return train_score(tgt.s_next, tgt.s, cfg.tran_steps, cfg, rng, schedule, "tran", sc, sc, prov)


# ---------------------------------------------------------------------------
# Auxiliary regressors

@dataclass(frozen=True)
class Regressor:
    spec: nc.MlpSpec
    params: tuple
    in_scaler: Scaler
    losses: tuple = ()

    def __call__(self, *cols):
        x = np.concatenate([np.atleast_2d(c) for c in cols], axis=1)
        return nc.forward(self.spec, self.params, self.in_scaler.apply(x))

    def checksum(self) -> str:
        return nc.param_checksum(self.params)


def train_regressor(x, y, steps, cfg: GenConfig, rng) -> Regressor:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    if len(x) == 0:
        raise ContractViolation("cannot train a regressor on an empty set")
    sc = fit_scaler_states(x)
    spec = nc.MlpSpec(x.shape[1], cfg.aux_hidden, cfg.aux_blocks, y.shape[1])
    # training starts from the mean predictor: zero output weights, bias at the target mean
    params = nc.init_params(spec, rng)[:-2] + (np.zeros((cfg.aux_hidden, y.shape[1])), y.mean(axis=0))
    params, losses = nc.train_mse(spec, params, sc.apply(x), y, steps, rng, cfg.batch_size, cfg.lr)
    return Regressor(spec, params, sc, tuple(losses))


def holdout_split(n: int, frac: float, rng):
    """Shuffled ``(train_idx, holdout_idx)``; at least one training row is kept."""
    perm = rng.permutation(n)
    k = min(n - 1, int(round(frac * n))) if n > 1 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def train_aux(tgt_train: TransitionDataset, src_sel: Optional[TransitionDataset], cfg: GenConfig, rng,
              tgt_holdout: Optional[TransitionDataset] = None):
    """Inverse dynamics on target rows; reward model on target plus selected source.

    Returns ``(inv, rew, report)`` where the report holds held-out errors.
    """
    _require_target(tgt_train, "inverse dynamics")
    inv = train_regressor(np.concatenate([tgt_train.s, tgt_train.s_next], 1), tgt_train.a, cfg.aux_steps, cfg, rng)
    rew_rows = tgt_train if src_sel is None or len(src_sel) == 0 else concat([src_sel, tgt_train])
    cols = [rew_rows.s, rew_rows.s_next] + ([rew_rows.a] if cfg.reward_uses_action else [])
    rew = train_regressor(np.concatenate(cols, 1), rew_rows.r, cfg.aux_steps, cfg, rng)
    report = {"inv_train_rows": len(tgt_train), "rew_train_rows": len(rew_rows)}
    if tgt_holdout is not None and len(tgt_holdout):
        pa = inv(tgt_holdout.s, tgt_holdout.s_next)
        hc = [tgt_holdout.s, tgt_holdout.s_next] + ([tgt_holdout.a] if cfg.reward_uses_action else [])
        pr = rew(*hc)[:, 0]
        report.update({
            "holdout_rows": len(tgt_holdout),
            "inv_holdout_mse": float(np.mean(np.sum((pa - tgt_holdout.a) ** 2, axis=1))),
            "inv_holdout_err": float(np.mean(np.linalg.norm(pa - tgt_holdout.a, axis=1))),
            "rew_holdout_mse": float(np.mean((pr - tgt_holdout.r) ** 2)),
        })
    return inv, rew, report


# ---------------------------------------------------------------------------
# Full model bundle

@dataclass(frozen=True)
class TceModels:
    q_mix: ScoreModel
    q_tran: ScoreModel
    inv: Optional[Regressor]
    rew: Regressor
    state_dim: int
    action_dim: int
    one_stage: bool = False
    reward_uses_action: bool = False
    aux_report: dict = field(default_factory=dict)

    def checksums(self) -> dict:
        out = {"q_mix": self.q_mix.checksum(), "q_tran": self.q_tran.checksum(), "rew": self.rew.checksum()}
        if self.inv is not None:
            out["inv"] = self.inv.checksum()
        return out


def train_models(src_sel: Optional[TransitionDataset], tgt_train: TransitionDataset, cfg: GenConfig, seed: int,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE, tgt_holdout: Optional[TransitionDataset] = None,
                 ) -> TceModels:
    """Train every network; each gets its own seeded stream."""
    r_mix, r_tran, r_aux = (np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))) for i in range(3))
    ds, da = tgt_train.state_dim, tgt_train.action_dim
    has_src = src_sel is not None and len(src_sel) > 0
    if cfg.one_stage:
        # joint (s, a) mixture, then s' given (s, a) on target rows
        sa_t = np.concatenate([tgt_train.s, tgt_train.a], 1)
        sa = sa_t if not has_src else np.concatenate([np.concatenate([src_sel.s, src_sel.a], 1), sa_t])
        prov = {"source_rows": len(src_sel) if has_src else 0, "target_rows": len(tgt_train)}
        q_mix = train_score(sa, None, cfg.mix_steps, cfg, r_mix, schedule, "mix-sa", provenance=prov)
        _require_target(tgt_train, "transition score")
        q_tran = train_score(tgt_train.s_next, sa_t, cfg.tran_steps, cfg, r_tran, schedule, "tran-sa",
                             fit_scaler_states(tgt_train.s), fit_scaler_states(sa_t),
                             {"source_rows": 0, "target_rows": len(tgt_train)})
        _, rew, report = train_aux(tgt_train, src_sel, cfg, r_aux, tgt_holdout)
        inv = None
    else:
        q_mix = train_mixture_score(src_sel.s if has_src else None, tgt_train, cfg, r_mix, schedule)
        q_tran = train_transition_score(tgt_train, cfg, r_tran, schedule)
        inv, rew, report = train_aux(tgt_train, src_sel, cfg, r_aux, tgt_holdout)
    if q_tran.provenance.get("source_rows", 0):
        raise ContractViolation("transition score saw source rows")
    return TceModels(q_mix, q_tran, inv, rew, ds, da, cfg.one_stage, cfg.reward_uses_action, report)


# ---------------------------------------------------------------------------
# Synthesis

def _block_rng(seed: int, block: int, attempt: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block, attempt)))


def _sample_stage(model: ScoreModel, n: int, cn, sampler: SamplerConfig, rng):
    prior = sampler.prior_std(model.schedule)
    x0 = prior * rng.standard_normal((n, model.dim))
    x, ok, _ = pc_chains(model.sampler_fn(cn), x0, None, sampler, model.schedule, rng)
    return x, ok


def _sample_with_retry(model: ScoreModel, n, cn, sampler, seed, block, stage):
    """Chains that fail are retried once on a fresh stream; returns ``(x, ok)``."""
    x, ok = _sample_stage(model, n, cn, sampler, _block_rng(seed, block, 2 * stage))
    bad = np.flatnonzero(~ok)
    if bad.size:
        log.warning("block %d stage %d: retrying %d failed chains", block, stage, bad.size)
        sub = None if cn is None else cn[bad]
        x2, ok2 = _sample_stage(model, bad.size, sub, sampler, _block_rng(seed, block, 2 * stage + 1))
        x[bad] = x2
        ok[bad] = ok2
    return x, ok


def synthesize(models: TceModels, sampler: SamplerConfig, cfg: GenConfig, seed: int, n_src: int,
               metadata: Optional[dict] = None) -> TransitionDataset:
    """Generate ``cfg.generate_count(n_src)`` labelled transitions.

    Chains run in fixed-size blocks with their own seeded streams, so the
    output does not depend on block execution order. A chain that fails in
    either stage is retried once, then dropped; more than
    ``cfg.max_drop_frac`` dropped rows is a hard failure.
    """
    n = cfg.generate_count(n_src)
    ds, da = models.state_dim, models.action_dim
    md = {
        "lam_cov": cfg.lam_cov, "lam_mix": cfg.lam_mix, "seed": int(seed), "K": sampler.K,
        "one_stage": models.one_stage, "model_checksums": models.checksums(), "dropped": 0,
    }
    md.update(metadata or {})
    if n == 0:
        return TransitionDataset.empty(ds, da, md)
    S, A, SN = [], [], []
    dropped = 0
    for b, lo in enumerate(range(0, n, cfg.block_size)):
        m = min(cfg.block_size, n - lo)
        x1, ok1 = _sample_with_retry(models.q_mix, m, None, sampler, seed, b, 0)
        # failed stage-1 rows are conditioned on a placeholder and dropped below
        cn = models.q_tran.cond_scaler.apply(models.q_mix.x_scaler.invert(np.where(ok1[:, None], x1, 0.0)))
        x2, ok2 = _sample_with_retry(models.q_tran, m, cn, sampler, seed, b, 1)
        ok = ok1 & ok2
        dropped += int(m - ok.sum())
        first = models.q_mix.x_scaler.invert(x1[ok])
        s_next = models.q_tran.x_scaler.invert(x2[ok])
        if models.one_stage:
            S.append(first[:, :ds])
            A.append(first[:, ds:])
        else:
            S.append(first)
        SN.append(s_next)
    if dropped:
        log.warning("dropped %d of %d generated chains", dropped, n)
    if dropped > cfg.max_drop_frac * n:
        raise NumericFailure(f"{dropped} of {n} sampler chains failed after retry", index=dropped)
    s = np.concatenate(S)
    sn = np.concatenate(SN)
    a = np.concatenate(A) if models.one_stage else models.inv(s, sn)
    rcols = [s, sn] + ([a] if models.reward_uses_action else [])
    r = models.rew(*rcols)[:, 0]
    md["dropped"] = dropped
    return TransitionDataset(s, a, r, sn, np.zeros(len(s), bool), np.full(len(s), ORIGIN_CODE["generated"], np.int8),
                             metadata=md)
