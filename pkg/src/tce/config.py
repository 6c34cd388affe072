"""Experiment configuration as flat ``section.key=value`` text.

Values are JSON literals, except that bare words are read as strings, so a
file can say ``domain.pair=drift-large`` as well as ``gen.n_generate=null``.
``parse(serialize(cfg)) == cfg`` holds for every valid config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .diffusion import NoiseSchedule, SamplerConfig
from .errors import ContractViolation
from .generator import GenConfig
from .policy import IqlConfig

VARIANT_CHOICES = ("auto", "SimpleAug", "OG", "SM", "TargetOnly")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    profile: str = "desk"


@dataclass(frozen=True)
class DomainSection:
    pair: str = "drift-large"
    horizon: int = 50
    noise: float = 0.02
    dt: float = 0.2
    cost_scale: float = 5.0
    action_cost: float = 0.01
    init_std: float = 1.0
    action_bound: Optional[float] = None

    def overrides(self) -> dict:
        import numpy as np

        return {"horizon": self.horizon, "noise": self.noise, "dt": self.dt, "cost_scale": self.cost_scale,
               "init_std": self.init_std, "action_bound": self.action_bound,
               "R_cost": self.action_cost * np.eye(2)}


@dataclass(frozen=True)
class DataSection:
    n_source: int = 20_000
    n_target: int = 500
    source_tier: str = "medium"
    target_tier: str = "medium"


@dataclass(frozen=True)
class TceSection:
    variant: str = "auto"
    lam_cov: float = 0.2
    lam_mix: float = 0.0


@dataclass(frozen=True)
class SelectionSection:
    normalize: bool = True
    method: str = "brute"


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 10
    ref_episodes: int = 100


@dataclass(frozen=True)
class TheorySection:
    verify: bool = False
    instances: int = 100


SECTION_TYPES = {
    "run": RunSection,
    "domain": DomainSection,
    "data": DataSection,
    "tce": TceSection,
    "selection": SelectionSection,
    "schedule": NoiseSchedule,
    "sampler": SamplerConfig,
    "gen": GenConfig,
    "iql": IqlConfig,
    "eval": EvalSection,
    "theory": TheorySection,
}

# GenConfig's coefficients are owned by the tce section
_DERIVED = {("gen", "lam_cov"), ("gen", "lam_mix")}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    domain: DomainSection = field(default_factory=DomainSection)
    data: DataSection = field(default_factory=DataSection)
    tce: TceSection = field(default_factory=TceSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def __post_init__(self):
        if self.tce.variant not in VARIANT_CHOICES:
            raise ContractViolation(f"unknown variant {self.tce.variant!r}; choose from {VARIANT_CHOICES}")
        self.variant_spec()  # validates the coefficient/variant combination
        for sec in ("data", "eval", "theory"):
            for f in fields(getattr(self, sec)):
                v = getattr(getattr(self, sec), f.name)
                if isinstance(v, int) and not isinstance(v, bool) and v < 0:
                    raise ContractViolation(f"{sec}.{f.name} must be >= 0")
        if self.data.n_target < 1:
            raise ContractViolation("data.n_target must be >= 1")

    @property
    def variant(self) -> str:
        if self.tce.variant == "auto":
            return self.variant_spec().variant
        return self.tce.variant

    def variant_spec(self):
        from .datasets import VariantSpec

        v = self.tce.variant
        if v == "TargetOnly":
            return None
        if v == "auto":
            return VariantSpec.infer(self.tce.lam_cov, self.tce.lam_mix)
        return VariantSpec(v, self.tce.lam_cov, self.tce.lam_mix)

    def gen_config(self) -> GenConfig:
        return replace(self.gen, lam_cov=self.tce.lam_cov, lam_mix=self.tce.lam_mix)

    def with_values(self, values: dict) -> "ExperimentConfig":
        """Copy with ``{"section.key": value}`` overrides (values already typed or text)."""
        grouped: dict = {}
        for key, raw in values.items():
            sec, name = _split_key(key)
            grouped.setdefault(sec, {})[name] = _coerce(SECTION_TYPES[sec], name, raw)
        kw = {sec: replace(getattr(self, sec), **vals) for sec, vals in grouped.items()}
        return replace(self, **kw)

    def items(self):
        for sec in SECTION_TYPES:
            obj = getattr(self, sec)
            for f in fields(obj):
                if (sec, f.name) in _DERIVED:
                    continue
                yield f"{sec}.{f.name}", getattr(obj, f.name)

    def to_dict(self) -> dict:
        return dict(self.items())

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()[:16]


def _split_key(key: str):
    if "." not in key:
        raise ContractViolation(f"config key {key!r} must look like section.name")
    sec, name = key.split(".", 1)
    if sec not in SECTION_TYPES:
        raise ContractViolation(f"unknown config section {sec!r}")
    names = {f.name for f in fields(SECTION_TYPES[sec])}
    if name not in names or (sec, name) in _DERIVED:
        raise ContractViolation(f"unknown config key {key!r}")
    return sec, name


def _coerce(cls, name, raw):
    hint = typing.get_type_hints(cls)[name]
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    base = next(a for a in typing.get_args(hint) if a is not type(None)) if optional else hint
    if isinstance(raw, str):
        raw = _parse_literal(raw)
    if raw is None:
        if optional:
            return None
        raise ContractViolation(f"{cls.__name__}.{name} may not be null")
    try:
        if base is bool:
            if not isinstance(raw, bool):
                raise TypeError
            return raw
        if base is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise TypeError
            return int(raw)
        if base is float:
            if isinstance(raw, bool):
                raise TypeError
            return float(raw)
        if base is str:
            return str(raw)
    except (TypeError, ValueError):
        pass
    raise ContractViolation(f"bad value {raw!r} for {cls.__name__}.{name} ({base.__name__})")


def _parse_literal(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _format(value) -> str:
    if isinstance(value, str):
        # quote only when the bare word would read back as something else
        return value if _parse_literal(value) == value and value.strip() == value and value else json.dumps(value)
    return json.dumps(value)


def serialize(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={_format(v)}\n" for k, v in cfg.items())


def parse(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return (base or ExperimentConfig()).with_values(values)


def load(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"), base)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# Profiles

PAPER_PROFILE: dict = {"run.profile": "paper"}

DESK_PROFILE: dict = {
    "run.profile": "desk",
    "sampler.K": 100,
    "gen.mix_steps": 1000,
    "gen.tran_steps": 500,
    "gen.aux_steps": 100,
    "gen.score_hidden": 64,
    "gen.score_blocks": 2,
    "gen.embed_width": 32,
    "gen.aux_hidden": 64,
    "gen.aux_blocks": 2,
    "iql.steps": 10_000,
    "iql.bc_steps": 1_000,
    "iql.hidden": 64,
    "iql.blocks": 2,
}

PROFILES = {"desk": DESK_PROFILE, "paper": PAPER_PROFILE}


def profile(name: str) -> ExperimentConfig:
    if name not in PROFILES:
        raise ContractViolation(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return ExperimentConfig().with_values(PROFILES[name])
