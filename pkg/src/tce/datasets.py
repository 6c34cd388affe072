"""Transition datasets, state standardization, variant assembly and TCED I/O.

TCED layout (all integers little-endian)::

    b"TCED" | u16 version | u32 meta_len | meta JSON (UTF-8)
    | payload: float64 rows [s, a, r, s_next, done] | u32 CRC-32(payload)

Per-row origin tags are stored run-length encoded in the metadata.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ChecksumMismatch, ContractViolation, FormatError, VersionMismatch

log = logging.getLogger(__name__)

MAGIC = b"TCED"
FORMAT_VERSION = 1
ORIGINS = ("source", "target", "generated")
ORIGIN_CODE = {name: i for i, name in enumerate(ORIGINS)}


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    origin: str


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ContractViolation("scaler std must be positive")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))


def fit_scaler_states(states) -> Scaler:
    states = np.asarray(states, dtype=np.float64)
    if len(states) == 0:
        return Scaler.identity(states.shape[1])
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    zero = std <= 0
    if zero.any():
        log.warning("zero-variance state dims %s: std clamped to 1", np.flatnonzero(zero).tolist())
        std = np.where(zero, 1.0, std)
    return Scaler(mean, std)


def _frozen(x, dtype):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    origin: np.ndarray
    scaler: Optional[Scaler] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        n = len(s)
        a = np.asarray(self.a, dtype=np.float64).reshape(n, -1) if n else np.asarray(self.a, dtype=np.float64)
        object.__setattr__(self, "s", _frozen(s, np.float64))
        object.__setattr__(self, "a", _frozen(a, np.float64))
        object.__setattr__(self, "r", _frozen(np.asarray(self.r, dtype=np.float64).reshape(n), np.float64))
        object.__setattr__(self, "s_next", _frozen(self.s_next, np.float64))
        object.__setattr__(self, "done", _frozen(np.asarray(self.done).reshape(n), bool))
        origin = np.asarray(self.origin)
        if origin.dtype.kind in "US":
            origin = np.array([ORIGIN_CODE[o] for o in origin], dtype=np.int8)
        object.__setattr__(self, "origin", _frozen(origin.reshape(n), np.int8))
        if self.s.ndim != 2 or self.s_next.shape != self.s.shape or self.a.ndim != 2 or len(self.a) != n:
            raise ContractViolation("inconsistent transition array shapes")
        for name in ("s", "a", "r", "s_next"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractViolation(f"non-finite values in field {name}")
        if self.scaler is None:
            object.__setattr__(self, "scaler", fit_scaler_states(self.s))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def empty(cls, state_dim, action_dim, metadata=None):
        return cls(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros(0), np.zeros((0, state_dim)),
                   np.zeros(0, bool), np.zeros(0, np.int8), metadata=metadata or {})

    @classmethod
    def from_transitions(cls, rows: Sequence[Transition], metadata=None):
        if not rows:
            raise ContractViolation("need at least one row; use TransitionDataset.empty")
        return cls(
            np.stack([t.s for t in rows]), np.stack([np.atleast_1d(t.a) for t in rows]),
            np.array([t.r for t in rows]), np.stack([t.s_next for t in rows]),
            np.array([t.done for t in rows]), np.array([ORIGIN_CODE[t.origin] for t in rows], np.int8),
            metadata=metadata or {},
        )

    def __len__(self):
        return len(self.s)

    @property
    def state_dim(self):
        return self.s.shape[1]

    @property
    def action_dim(self):
        return self.a.shape[1]

    def __getitem__(self, i) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]),
                          ORIGINS[self.origin[i]])

    def rows(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def origin_counts(self) -> dict:
        return {name: int(np.sum(self.origin == code)) for name, code in ORIGIN_CODE.items()}

    def subset(self, indices, metadata=None) -> "TransitionDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TransitionDataset(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx],
                                 self.origin[idx], self.scaler, dict(self.metadata if metadata is None else metadata))

    def with_metadata(self, **extra) -> "TransitionDataset":
        md = dict(self.metadata)
        md.update(extra)
        return TransitionDataset(self.s, self.a, self.r, self.s_next, self.done, self.origin, self.scaler, md)

    def with_scaler(self, scaler: Scaler) -> "TransitionDataset":
        return TransitionDataset(self.s, self.a, self.r, self.s_next, self.done, self.origin, scaler, self.metadata)

    def payload(self) -> bytes:
        cols = [self.s, self.a, self.r[:, None], self.s_next, self.done[:, None].astype(np.float64)]
        return np.concatenate(cols, axis=1).astype("<f8").tobytes()

    def checksum(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()[:16]


def concat(parts: Sequence[TransitionDataset], scaler=None, metadata=None) -> TransitionDataset:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ContractViolation("nothing to concatenate")
    ds, da = parts[0].state_dim, parts[0].action_dim
    for p in parts:
        if (p.state_dim, p.action_dim) != (ds, da):
            raise ContractViolation("datasets have different state/action dims")
    return TransitionDataset(
        np.concatenate([p.s for p in parts]), np.concatenate([p.a for p in parts]),
        np.concatenate([p.r for p in parts]), np.concatenate([p.s_next for p in parts]),
        np.concatenate([p.done for p in parts]), np.concatenate([p.origin for p in parts]),
        scaler if scaler is not None else parts[-1].scaler, metadata or {},
    )


def fit_scaler(dataset: TransitionDataset) -> Scaler:
    return fit_scaler_states(dataset.s)


def apply_scaler(dataset: TransitionDataset, scaler: Optional[Scaler] = None) -> TransitionDataset:
    """Dataset copy with standardized ``s`` and ``s_next``."""
    sc = scaler or dataset.scaler
    return TransitionDataset(sc.apply(dataset.s), dataset.a, dataset.r, sc.apply(dataset.s_next), dataset.done,
                             dataset.origin, sc, dict(dataset.metadata, normalized=True))


# ---------------------------------------------------------------------------
# Variant taxonomy and training-set assembly

VARIANTS = ("SimpleAug", "OG", "SM")


@dataclass(frozen=True)
class VariantSpec:
    variant: str
    lam_cov: float = 0.0
    lam_mix: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if not (0.0 <= self.lam_cov <= 1.0 and 0.0 <= self.lam_mix <= 1.0):
            raise ContractViolation("coefficients must lie in [0, 1]")
        if self.variant == "SimpleAug" and (self.lam_cov != 0 or self.lam_mix != 0):
            raise ContractViolation("SimpleAug requires lam_cov = lam_mix = 0")
        if self.variant == "OG" and (self.lam_mix != 0 or self.lam_cov <= 0):
            raise ContractViolation("OG requires lam_mix = 0 and lam_cov > 0")
        if self.variant == "SM" and self.lam_mix <= 0:
            raise ContractViolation("SM requires lam_mix > 0; use OG for lam_mix = 0")

    @classmethod
    def infer(cls, lam_cov: float, lam_mix: float) -> "VariantSpec":
        if lam_mix > 0:
            return cls("SM", lam_cov, lam_mix)
        if lam_cov > 0:
            return cls("OG", lam_cov, 0.0)
        return cls("SimpleAug", 0.0, 0.0)


def build_training_set(variant: VariantSpec, src, tgt, gen, selection=None) -> TransitionDataset:
    """Union of the parts named by the variant, in order source, generated, target.

    Rows are not deduplicated and origin tags are kept.
    """
    gen_cov = gen.metadata.get("lam_cov") if gen is not None else None
    if gen_cov is not None and not np.isclose(gen_cov, variant.lam_cov):
        raise ContractViolation(f"generated set built with lam_cov={gen_cov}, variant wants {variant.lam_cov}")
    parts = []
    if variant.variant == "SM":
        if selection is None or src is None:
            raise ContractViolation("SM needs the source set and a selection")
        sel_lam = getattr(selection, "lam", None)
        if sel_lam is not None and not np.isclose(sel_lam, variant.lam_mix):
            raise ContractViolation(f"selection built with lam={sel_lam}, variant wants lam_mix={variant.lam_mix}")
        indices = getattr(selection, "indices", selection)
        parts.append(src.subset(indices))
    elif selection is not None and len(getattr(selection, "indices", selection)):
        raise ContractViolation(f"{variant.variant} takes no source rows")
    if gen is not None:
        parts.append(gen)
    parts.append(tgt)
    md = {"variant": variant.variant, "lam_cov": variant.lam_cov, "lam_mix": variant.lam_mix}
    return concat(parts, scaler=tgt.scaler, metadata=md)


# ---------------------------------------------------------------------------
# TCED files

def _origin_runs(origin: np.ndarray) -> list:
    runs = []
    for code in origin.tolist():
        if runs and runs[-1][0] == ORIGINS[code]:
            runs[-1][1] += 1
        else:
            runs.append([ORIGINS[code], 1])
    return runs


def _expand_runs(runs) -> np.ndarray:
    if not runs:
        return np.zeros(0, np.int8)
    return np.concatenate([np.full(int(n), ORIGIN_CODE[name], np.int8) for name, n in runs])


def encode(dataset: TransitionDataset) -> bytes:
    meta = {
        "n_rows": len(dataset),
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "origin_runs": _origin_runs(dataset.origin),
        "scaler": dataset.scaler.to_dict(),
        "info": dataset.metadata,
    }
    mbytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = dataset.payload()
    return b"".join([
        MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(mbytes)), mbytes, payload,
        struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF),
    ])


def decode(data: bytes, source="<bytes>") -> TransitionDataset:
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}")
    if len(data) < 14:
        raise FormatError(f"{source}: truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{source}: format version {version}, reader supports {FORMAT_VERSION}")
    (mlen,) = struct.unpack_from("<I", data, 6)
    if len(data) < 14 + mlen:
        raise FormatError(f"{source}: truncated metadata")
    try:
        meta = json.loads(data[10:10 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable metadata ({exc})") from exc
    payload = data[10 + mlen:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{source}: CRC-32 mismatch")
    n, ds, da = meta["n_rows"], meta["state_dim"], meta["action_dim"]
    width = 2 * ds + da + 2
    if len(payload) != 8 * n * width:
        raise FormatError(f"{source}: payload size does not match {n} rows of width {width}")
    rows = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, width)
    return TransitionDataset(
        rows[:, :ds], rows[:, ds:ds + da], rows[:, ds + da], rows[:, ds + da + 1:2 * ds + da + 1],
        rows[:, -1] != 0.0, _expand_runs(meta["origin_runs"]), Scaler.from_dict(meta["scaler"]), meta["info"],
    )


def write(dataset: TransitionDataset, path) -> None:
    Path(path).write_bytes(encode(dataset))


def read(path) -> TransitionDataset:
    return decode(Path(path).read_bytes(), source=str(path))


def summary(dataset: TransitionDataset) -> dict:
    """Metadata plus per-field statistics, as printed by ``inspect``."""
    def stats(x):
        if len(x) == 0:
            return None
        return {"mean": np.mean(x, axis=0).tolist(), "std": np.std(x, axis=0).tolist(),
                "min": np.min(x, axis=0).tolist(), "max": np.max(x, axis=0).tolist()}

    return {
        "n_rows": len(dataset),
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "origins": dataset.origin_counts(),
        "done_fraction": float(dataset.done.mean()) if len(dataset) else 0.0,
        "metadata": dataset.metadata,
        "scaler": dataset.scaler.to_dict(),
        "stats": {"s": stats(dataset.s), "a": stats(dataset.a), "r": stats(dataset.r), "s_next": stats(dataset.s_next)},
    }
