"""Shift mechanics at divergent positions: candidate overlap, rank provenance,
tail promotion, checkpoint evolution, and the weight-level gap ratio."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import PositionPair, collect_pairs, js_percentiles
from .dist import LN2, NO_TRUNCATION, TruncationSpec, rank_of, top_k_set
from .errors import DegenerateInput, NoQualifyingPositions
from .policies import PolicyProvider, Trajectory

DIVERGENT_JS = 0.1


def _qualifying(pairs: Sequence[PositionPair], js_thresh: float) -> list[PositionPair]:
    if not 0 < js_thresh < LN2:
        raise ValueError(f"js_thresh must lie in (0, ln 2), got {js_thresh}")
    out = [p for p in pairs if p.record.js > js_thresh]
    if not out:
        raise NoQualifyingPositions(f"no position has JS > {js_thresh}")
    return out


@dataclass(frozen=True)
class OverlapCurve:
    js_thresh: float
    overlap: list[float]  # overlap[k - 1] for k = 1..K
    count: int


def topk_overlap_curve(pairs: Sequence[PositionPair], js_thresh: float = DIVERGENT_JS, K: int = 10) -> OverlapCurve:
    """Mean |top_k(base) & top_k(rl)| / k over divergent positions."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    chosen = _qualifying(pairs, js_thresh)
    curve = []
    for k in range(1, K + 1):
        vals = [len(top_k_set(p.base, k) & top_k_set(p.rl, k)) / k for p in chosen]
        curve.append(math.fsum(vals) / len(vals))
    return OverlapCurve(js_thresh, curve, len(chosen))


@dataclass(frozen=True)
class RankProvenance:
    js_thresh: float
    count: int
    histograms: list[list[int]]  # histograms[j - 1][r - 1]: RL top-j token has base rank r


def base_rank_distribution_of_rl_topk(
    pairs: Sequence[PositionPair], js_thresh: float = DIVERGENT_JS, m: int = 3
) -> RankProvenance:
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    chosen = _qualifying(pairs, js_thresh)
    V = chosen[0].base.vocab_size
    hists = [[0] * V for _ in range(m)]
    for p in chosen:
        ranked = [t for t, _ in p.rl.ranked]
        # RL top-j beyond its support: continue in rank order over off-support ids
        if len(ranked) < m:
            on = set(ranked)
            ranked += [t for t in range(V) if t not in on][: m - len(ranked)]
        for j in range(min(m, V)):
            hists[j][rank_of(p.base, ranked[j]) - 1] += 1
    return RankProvenance(js_thresh, len(chosen), hists)


@dataclass(frozen=True)
class TailPromotion:
    js_thresh: float
    count: int
    thresholds: list[float]
    fraction_below: list[float]
    cutoff: float
    low_base_rl_probs: list[float]  # RL prob of the RL top-1 where its base prob < cutoff
    histogram_edges: list[float]
    histogram: list[int]


def tail_promotion_stats(
    pairs: Sequence[PositionPair],
    js_thresh: float = DIVERGENT_JS,
    thresholds: Sequence[float] = (1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.5),
    cutoff: float = 0.01,
    n_hist_bins: int = 10,
) -> TailPromotion:
    if any(not 0 < t < 1 for t in thresholds) or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly ascending in (0, 1)")
    chosen = _qualifying(pairs, js_thresh)
    base_probs, rl_probs = [], []
    for p in chosen:
        top1 = p.rl.ranked[0][0]
        base_probs.append(p.base.prob(top1))
        rl_probs.append(p.rl.ranked[0][1])
    n = len(chosen)
    fractions = [sum(b < tau for b in base_probs) / n for tau in thresholds]
    low = [r for b, r in zip(base_probs, rl_probs) if b < cutoff]
    edges = np.linspace(0.0, 1.0, n_hist_bins + 1).tolist()
    hist = [0] * n_hist_bins
    for r in low:
        hist[min(int(r * n_hist_bins), n_hist_bins - 1)] += 1
    return TailPromotion(js_thresh, n, list(thresholds), fractions, cutoff, low, edges, hist)


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class CheckpointStats:
    index: int
    percentiles: list[tuple[float, float]]
    divergent: frozenset  # {(seq_id, pos)} with js > threshold
    jaccard_with_final: float


def checkpoint_evolution(
    checkpoints: Sequence[PolicyProvider],
    trajectories: Sequence[Trajectory],
    percentiles: Sequence[float] = (50, 75, 90, 95, 99),
    trunc: TruncationSpec = NO_TRUNCATION,
    mode: str = "base",
    js_thresh: float = DIVERGENT_JS,
) -> list[CheckpointStats]:
    """JS percentiles per checkpoint and Jaccard of divergent sets with the final one.

    ``mode="base"`` compares every checkpoint with ``checkpoints[0]``;
    ``mode="consecutive"`` compares each with its predecessor (the first
    against itself).  ``trajectories`` should be generated by the reference
    (final) policy.
    """
    if len(checkpoints) < 2:
        raise ValueError("need at least two checkpoints")
    if mode not in ("base", "consecutive"):
        raise ValueError(f"unknown mode {mode!r}")
    per_ckpt = []
    for i, ck in enumerate(checkpoints):
        ref = checkpoints[0] if mode == "base" else checkpoints[max(i - 1, 0)]
        pairs = collect_pairs(ref, ck, trajectories, trunc)
        recs = [p.record for p in pairs]
        div = frozenset((r.seq_id, r.pos) for r in recs if r.js > js_thresh)
        per_ckpt.append((js_percentiles(recs, percentiles), div))
    final = per_ckpt[-1][1]
    return [
        CheckpointStats(i, pct, div, jaccard(set(div), set(final)))
        for i, (pct, div) in enumerate(per_ckpt)
    ]


def weight_gap_ratio(w_original: Sequence[float], w_tuned: Sequence[float]) -> float:
    """sum|w_o - w_t| / (sum|w_o| + sum|w_t|), in [0, 1]."""
    a = np.asarray(w_original, dtype=np.float64).ravel()
    b = np.asarray(w_tuned, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    denom = math.fsum(np.abs(a).tolist()) + math.fsum(np.abs(b).tolist())
    if denom == 0.0:
        raise DegenerateInput("both weight vectors are all zero")
    return min(math.fsum(np.abs(a - b).tolist()) / denom, 1.0)


def load_weight_vector(path) -> list[float]:
    """A JSON array of numbers, or raw little-endian float32 (any other extension)."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".json":
        arr = json.loads(data)
        if not isinstance(arr, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in arr):
            raise ValueError(f"{path}: expected a flat JSON array of numbers")
        return [float(x) for x in arr]
    if len(data) % 4:
        raise ValueError(f"{path}: size {len(data)} is not a multiple of 4 bytes")
    return list(struct.unpack(f"<{len(data) // 4}f", data))
