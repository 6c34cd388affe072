"""Staged experiment runner: collect, select, train models, generate, build, train policy, evaluate.

Every stage reads its inputs from the run directory and writes its outputs
there, so any stage can be rerun in isolation and reproduces downstream
results bit for bit. Each stage draws randomness from its own stream keyed
by the run seed and the stage index.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import datasets as dsio
from . import netcore as nc
from .config import ExperimentConfig, save as save_config
from .datasets import Scaler, TransitionDataset, build_training_set, concat
from .diffusion import NoiseSchedule
from .domains import (DomainPair, behavior_policy, collect, error_report, make_pair, reference_returns)
from .errors import ContractViolation, NumericFailure, FormatError
from .generator import Regressor, ScoreModel, TceModels, holdout_split, synthesize, train_models
from .policy import GaussianActor, PolicyModel, evaluate, train_policy
from .selection import SelectionResult, select

log = logging.getLogger(__name__)

STAGES = ("collect", "select", "train-models", "generate", "build", "train-policy", "evaluate")
REPORT_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STAGES.index(stage),)))


def stage_seed(seed: int, stage: str) -> int:
    return int(stage_rng(seed, stage).integers(0, 2**63 - 1))


def domain_pair(cfg: ExperimentConfig) -> DomainPair:
    return make_pair(cfg.domain.pair, **cfg.domain.overrides())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Model persistence

def save_score(path, model: ScoreModel) -> None:
    extra = {
        "kind": model.kind,
        "x_scaler": model.x_scaler.to_dict(),
        "cond_scaler": None if model.cond_scaler is None else model.cond_scaler.to_dict(),
        "schedule": {"alpha_min": model.schedule.alpha_min, "alpha_max": model.schedule.alpha_max},
        "provenance": model.provenance,
        "losses": list(model.losses),
    }
    nc.save_checkpoint(path, model.spec, model.params, step=len(model.losses), extra=extra)


def load_score(path) -> ScoreModel:
    spec, params, header = nc.load_checkpoint(path)
    e = header["extra"]
    cs = None if e["cond_scaler"] is None else Scaler.from_dict(e["cond_scaler"])
    return ScoreModel(spec, params, Scaler.from_dict(e["x_scaler"]), cs, NoiseSchedule(**e["schedule"]), e["kind"],
                      e["provenance"], tuple(e["losses"]))


def save_regressor(path, reg: Regressor) -> None:
    nc.save_checkpoint(path, reg.spec, reg.params, step=len(reg.losses),
                       extra={"in_scaler": reg.in_scaler.to_dict(), "losses": list(reg.losses)})


def load_regressor(path) -> Regressor:
    spec, params, header = nc.load_checkpoint(path)
    e = header["extra"]
    return Regressor(spec, params, Scaler.from_dict(e["in_scaler"]), tuple(e["losses"]))


def save_models(d: Path, m: TceModels) -> None:
    d.mkdir(parents=True, exist_ok=True)
    save_score(d / "q_mix.ckpt", m.q_mix)
    save_score(d / "q_tran.ckpt", m.q_tran)
    save_regressor(d / "rew.ckpt", m.rew)
    if m.inv is not None:
        save_regressor(d / "inv.ckpt", m.inv)
    _write_json(d / "models.json", {
        "state_dim": m.state_dim, "action_dim": m.action_dim, "one_stage": m.one_stage,
        "reward_uses_action": m.reward_uses_action, "aux_report": m.aux_report, "checksums": m.checksums(),
    })


def load_models(d: Path) -> TceModels:
    meta = _read_json(d / "models.json")
    inv = load_regressor(d / "inv.ckpt") if (d / "inv.ckpt").exists() else None
    return TceModels(load_score(d / "q_mix.ckpt"), load_score(d / "q_tran.ckpt"), inv, load_regressor(d / "rew.ckpt"),
                     meta["state_dim"], meta["action_dim"], meta["one_stage"], meta["reward_uses_action"],
                     meta["aux_report"])


def save_actor(path, actor: GaussianActor, scaler: Scaler, extra: Optional[dict] = None) -> None:
    e = {"log_std": actor.log_std.tolist(), "action_bound": actor.action_bound, "scaler": scaler.to_dict()}
    e.update(extra or {})
    nc.save_checkpoint(path, actor.spec, actor.params, extra=e)


class LoadedPolicy:
    def __init__(self, actor: GaussianActor, scaler: Scaler):
        self.actor = actor
        self.scaler = scaler

    def act(self, s, rng=None):
        return self.actor.act(self.scaler.apply(np.atleast_2d(s)), rng)


def load_actor(path) -> LoadedPolicy:
    spec, params, header = nc.load_checkpoint(path)
    e = header["extra"]
    actor = GaussianActor(spec, params, np.asarray(e["log_std"], dtype=np.float64), e["action_bound"])
    return LoadedPolicy(actor, Scaler.from_dict(e["scaler"]))


# ---------------------------------------------------------------------------
# Stages

class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.seed = cfg.run.seed
        self._pair = None
        self.timings: dict = {}

    @property
    def pair(self) -> DomainPair:
        if self._pair is None:
            self._pair = domain_pair(self.cfg)
        return self._pair

    def path(self, name) -> Path:
        return self.out / name

    # -- collect -----------------------------------------------------------
    def collect(self):
        cfg, pair = self.cfg, self.pair
        rng = stage_rng(self.seed, "collect")
        r_src, r_tgt, r_ref = (np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, size=3))
        src = collect(pair.source, behavior_policy(pair.source, cfg.data.source_tier), cfg.data.n_source, r_src, "source")
        tgt = collect(pair.target, behavior_policy(pair.target, cfg.data.target_tier), cfg.data.n_target, r_tgt, "target")
        src = src.with_metadata(seed=self.seed, config=cfg.digest())
        tgt = tgt.with_metadata(seed=self.seed, config=cfg.digest())
        dsio.write(src, self.path("source.tced"))
        dsio.write(tgt, self.path("target.tced"))
        J_r, J_e = reference_returns(pair, r_ref, cfg.eval.ref_episodes)
        _write_json(self.path("references.json"), {"J_r": J_r, "J_e": J_e, "pair": pair.name,
                                                   "shift_kind": pair.shift_kind,
                                                   "shift_magnitude": pair.shift_magnitude})

    def _data(self):
        return dsio.read(self.path("source.tced")), dsio.read(self.path("target.tced"))

    # -- select --------------------------------------------------------------
    def select(self):
        cfg = self.cfg
        src, tgt = self._data()
        rng = stage_rng(self.seed, "select")
        tr, ho = holdout_split(len(tgt), cfg.gen.holdout_frac, rng)
        _write_json(self.path("split.json"), {"train": tr.tolist(), "holdout": ho.tolist()})
        for tag, lam in (("cov", cfg.tce.lam_cov), ("mix", cfg.tce.lam_mix)):
            res = select(src, tgt, lam, cfg.selection.normalize, method=cfg.selection.method)
            _write_json(self.path(f"selection_{tag}.json"), res.to_json())

    def _selection(self, tag) -> SelectionResult:
        d = _read_json(self.path(f"selection_{tag}.json"))
        thr = -np.inf if d["threshold"] is None else d["threshold"]
        return SelectionResult(np.asarray(d["indices"], dtype=np.int64), thr, np.zeros(0), d["lam"])

    def _split(self, tgt):
        d = _read_json(self.path("split.json"))
        return tgt.subset(np.asarray(d["train"], dtype=np.int64)), tgt.subset(np.asarray(d["holdout"], dtype=np.int64))

    @property
    def uses_generator(self) -> bool:
        return self.cfg.variant != "TargetOnly"

    # -- train models --------------------------------------------------------
    def train_models(self):
        if not self.uses_generator:
            return
        src, tgt = self._data()
        tgt_tr, tgt_ho = self._split(tgt)
        sel = src.subset(self._selection("cov").indices)
        models = train_models(sel, tgt_tr, self.cfg.gen_config(), stage_seed(self.seed, "train-models"),
                              self.cfg.schedule, tgt_ho)
        save_models(self.path("models"), models)

    # -- generate ------------------------------------------------------------
    def generate(self):
        if not self.uses_generator:
            return
        models = load_models(self.path("models"))
        n_src = self.cfg.data.n_source
        gen = synthesize(models, self.cfg.sampler, self.cfg.gen_config(), stage_seed(self.seed, "generate"), n_src,
                         {"config": self.cfg.digest()})
        dsio.write(gen, self.path("generated.tced"))

    # -- build ---------------------------------------------------------------
    def build(self):
        src, tgt = self._data()
        spec = self.cfg.variant_spec()
        if spec is None:
            train = concat([tgt], scaler=tgt.scaler, metadata={"variant": "TargetOnly"})
        else:
            gen = dsio.read(self.path("generated.tced"))
            selection = self._selection("mix") if spec.variant == "SM" else None
            train = build_training_set(spec, src, tgt, gen, selection)
        dsio.write(train, self.path("train.tced"))

    # -- train policy --------------------------------------------------------
    def train_policy(self):
        cfg = self.cfg
        train = dsio.read(self.path("train.tced"))
        _, tgt = self._data()
        refs = _read_json(self.path("references.json"))
        target = self.pair.target
        metrics_path = self.path("metrics.jsonl")
        metrics_path.write_text("", encoding="utf-8")
        eval_seed = stage_seed(self.seed, "evaluate")

        def evaluator(model: PolicyModel):
            J, ns = evaluate(model, target, cfg.iql.eval_episodes, np.random.default_rng(eval_seed),
                             (refs["J_r"], refs["J_e"]))
            return {"J": J, "NS": ns}

        def emit(rec):
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

        model = train_policy(train, tgt, cfg.iql, stage_seed(self.seed, "train-policy"), target.action_bound,
                             evaluator if cfg.iql.eval_every else None, emit)
        d = self.path("policy")
        d.mkdir(exist_ok=True)
        save_actor(d / "actor.ckpt", model.actor, model.scaler, {"step": model.step})
        save_actor(d / "behavior.ckpt", model.bc, model.scaler)
        nc.save_checkpoint(d / "q.ckpt", model.q_spec, model.q_params)
        nc.save_checkpoint(d / "q_target.ckpt", model.q_spec, model.q_target)
        nc.save_checkpoint(d / "v.ckpt", model.v_spec, model.v_params)

    # -- evaluate ------------------------------------------------------------
    def evaluate(self):
        cfg = self.cfg
        refs = _read_json(self.path("references.json"))
        policy = load_actor(self.path("policy") / "actor.ckpt")
        J, ns = evaluate(policy, self.pair.target, cfg.eval.episodes,
                         np.random.default_rng(stage_seed(self.seed, "evaluate")), (refs["J_r"], refs["J_e"]))
        _, tgt = self._data()
        train = dsio.read(self.path("train.tced"))
        report = {
            "report_version": REPORT_VERSION,
            "config_digest": cfg.digest(),
            "seed": self.seed,
            "pair": cfg.domain.pair,
            "variant": cfg.variant,
            "lam_cov": cfg.tce.lam_cov,
            "lam_mix": cfg.tce.lam_mix,
            "J": J,
            "NS": ns,
            "J_r": refs["J_r"],
            "J_e": refs["J_e"],
            "train_rows": train.origin_counts(),
            "errors": None,
            "aux": None,
            "bounds": None,
        }
        if self.uses_generator:
            models = load_models(self.path("models"))
            gen = dsio.read(self.path("generated.tced"))
            _, tgt_ho = self._split(tgt)
            report["errors"] = error_report(gen, self.pair.target, tgt_ho, models.inv)
            report["aux"] = models.aux_report
            report["generated_dropped"] = gen.metadata.get("dropped", 0)
        if cfg.theory.verify:
            from .theory import verify_bounds

            b = verify_bounds(cfg.theory.instances, self.seed)
            b.pop("rows")
            b.pop("elapsed_seconds")
            report["bounds"] = b
        _write_json(self.path("report.json"), report)
        return report

    # -- driver --------------------------------------------------------------
    def run(self, start: str = "collect", stop: Optional[str] = None) -> Optional[dict]:
        if start not in STAGES or (stop is not None and stop not in STAGES):
            raise ContractViolation(f"unknown stage; choose from {STAGES}")
        self.out.mkdir(parents=True, exist_ok=True)
        save_config(self.cfg, self.path("config.txt"))
        i0 = STAGES.index(start)
        i1 = len(STAGES) - 1 if stop is None else STAGES.index(stop)
        result = None
        for name in STAGES[i0:i1 + 1]:
            t = time.perf_counter()
            try:
                result = getattr(self, name.replace("-", "_"))()
            except (ContractViolation, NumericFailure, FormatError, FileNotFoundError) as exc:
                raise StageError(name, exc) from exc
            self.timings[name] = time.perf_counter() - t
            log.info("stage %s done in %.1fs", name, self.timings[name])
        # wall-clock numbers live apart from the deterministic outputs
        _write_json(self.path("timings.json"), self.timings)
        return result


def run_pipeline(cfg: ExperimentConfig, out, start: str = "collect", stop: Optional[str] = None) -> Optional[dict]:
    return Pipeline(cfg, out).run(start, stop)


# ---------------------------------------------------------------------------
# Sweeps

SWEEP_AXES = {"lam_cov": "tce.lam_cov", "lam_mix": "tce.lam_mix", "K": "sampler.K", "target_size": "data.n_target"}


def sweep(cfg: ExperimentConfig, axis: str, values, seeds, out) -> list:
    """One pipeline run per (value, seed); writes ``sweep.csv`` and ``sweep.json``."""
    if axis not in SWEEP_AXES:
        raise ContractViolation(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = sorted(set(values))
    seeds = sorted(set(int(s) for s in seeds))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        for s in seeds:
            cell = cfg.with_values({SWEEP_AXES[axis]: v, "run.seed": s})
            rep = run_pipeline(cell, out / f"{axis}={v}" / f"seed={s}")
            err = rep.get("errors") or {}
            rows.append({
                "axis": axis, "value": v, "seed": s, "variant": rep["variant"], "J": rep["J"], "NS": rep["NS"],
                "action_err": (err.get("action_err") or {}).get("mean"),
                "reward_err": (err.get("reward_err") or {}).get("mean"),
                "transition_err": (err.get("transition_err") or {}).get("mean"),
            })
    _write_json(out / "sweep.json", rows)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["axis"])
        w.writeheader()
        w.writerows(rows)
    return rows


def report_errors(gen_path, pair_name: str, holdout_path=None, models_dir=None, **domain_overrides) -> dict:
    gen = dsio.read(gen_path)
    pair = make_pair(pair_name, **domain_overrides)
    holdout = dsio.read(holdout_path) if holdout_path else None
    inv = None
    if models_dir is not None and (Path(models_dir) / "inv.ckpt").exists():
        inv = load_regressor(Path(models_dir) / "inv.ckpt")
    rep = error_report(gen, pair.target, holdout, inv)
    return {"report_version": REPORT_VERSION, "pair": pair_name, "n_generated": len(gen), **rep}
