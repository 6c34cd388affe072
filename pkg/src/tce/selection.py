"""Nearest-neighbour transition distances and quantile subset selection.

The distance of a source transition ``(s, s')`` to the target set is
``min_j ||s - s~_j|| + ||s' - s~'_j||`` with Euclidean norms. A coefficient
``lam`` keeps the ``ceil(lam * N)`` source rows with the smallest distance,
ties resolved by dataset order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation


@dataclass(frozen=True)
class SelectionResult:
    indices: np.ndarray
    threshold: float
    distances: np.ndarray
    lam: float | None = None

    def __len__(self):
        return len(self.indices)

    def to_json(self) -> dict:
        d = self.distances
        return {
            "lam": self.lam,
            "n_source": int(len(d)),
            "n_selected": int(len(self.indices)),
            "threshold": self.threshold if math.isfinite(self.threshold) else None,
            "indices": self.indices.tolist(),
            "distance_stats": None if len(d) == 0 else {
                "min": float(d.min()), "median": float(np.median(d)), "mean": float(d.mean()), "max": float(d.max()),
            },
        }


def _pair_sums(s, sn, ts, tsn):
    """``[len(s), len(ts)]`` matrix of summed Euclidean distances."""
    ds = np.sqrt(np.sum((s[:, None, :] - ts[None, :, :]) ** 2, axis=2))
    dn = np.sqrt(np.sum((sn[:, None, :] - tsn[None, :, :]) ** 2, axis=2))
    return ds + dn


def nn_distance(src_pair, target_pairs) -> float:
    """Distance from one ``(s, s')`` pair to a list of target pairs."""
    if len(target_pairs) == 0:
        raise ContractViolation("target set is empty")
    s, sn = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in src_pair)
    ts = np.array([np.atleast_1d(p[0]) for p in target_pairs], dtype=np.float64)
    tsn = np.array([np.atleast_1d(p[1]) for p in target_pairs], dtype=np.float64)
    if ts.shape[1] != s.size or tsn.shape[1] != sn.size:
        raise ContractViolation("state dims of source and target pairs differ")
    return float(_pair_sums(s[None], sn[None], ts, tsn).min())


def nn_distances(src_s, src_sn, tgt_s, tgt_sn, method="brute", chunk=1024) -> np.ndarray:
    src_s, src_sn, tgt_s, tgt_sn = (np.asarray(v, dtype=np.float64) for v in (src_s, src_sn, tgt_s, tgt_sn))
    if len(tgt_s) == 0:
        raise ContractViolation("target set is empty")
    if src_s.shape[1] != tgt_s.shape[1] or src_sn.shape[1] != tgt_sn.shape[1]:
        raise ContractViolation("state dims of source and target differ")
    n = len(src_s)
    out = np.empty(n)
    if method == "brute":
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            out[lo:hi] = _pair_sums(src_s[lo:hi], src_sn[lo:hi], tgt_s, tgt_sn).min(axis=1)
        return out
    if method != "kdtree":
        raise ContractViolation(f"unknown distance method {method!r}")
    # a + b >= sqrt(a^2 + b^2): the joint Euclidean distance lower-bounds the
    # summed distance, so every minimizer lies inside the ball whose radius is
    # the summed distance of the joint nearest neighbour.
    joint_t = np.concatenate([tgt_s, tgt_sn], axis=1)
    joint_s = np.concatenate([src_s, src_sn], axis=1)
    tree = cKDTree(joint_t)
    _, nearest = tree.query(joint_s, k=1)
    for i in range(n):
        j = nearest[i]
        ub = _pair_sums(src_s[i:i + 1], src_sn[i:i + 1], tgt_s[j:j + 1], tgt_sn[j:j + 1])[0, 0]
        cand = tree.query_ball_point(joint_s[i], r=ub * (1 + 1e-12) + 1e-300)
        cand = np.asarray(sorted(set(cand) | {int(j)}))
        out[i] = _pair_sums(src_s[i:i + 1], src_sn[i:i + 1], tgt_s[cand], tgt_sn[cand]).min()
    return out


def selection_size(lam: float, n: int) -> int:
    # round first so that e.g. 0.1 * 30 = 3.0000000000000004 does not become 4
    return min(n, int(math.ceil(round(lam * n, 9))))


def select_by_distance(distances, lam: float) -> SelectionResult:
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"selection coefficient {lam} outside [0, 1]")
    distances = np.asarray(distances, dtype=np.float64)
    k = selection_size(lam, len(distances))
    if k == 0:
        return SelectionResult(np.zeros(0, np.int64), -math.inf, distances, lam)
    order = np.argsort(distances, kind="stable")
    chosen = np.sort(order[:k])
    return SelectionResult(chosen, float(distances[order[k - 1]]), distances, lam)


def select(src, tgt, lam: float, normalize: bool = True, scaler=None, method="brute") -> SelectionResult:
    """Quantile selection of source transitions near the target set.

    With ``normalize`` the states are standardized by ``scaler`` (default:
    the target set's scaler) before distances are taken.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"selection coefficient {lam} outside [0, 1]")
    if normalize:
        sc = scaler or tgt.scaler
        parts = sc.apply(src.s), sc.apply(src.s_next), sc.apply(tgt.s), sc.apply(tgt.s_next)
    else:
        parts = src.s, src.s_next, tgt.s, tgt.s_next
    if len(src) == 0:
        return SelectionResult(np.zeros(0, np.int64), -math.inf, np.zeros(0), lam)
    return select_by_distance(nn_distances(*parts, method=method), lam)
