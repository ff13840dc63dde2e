"""Per-position divergence records along trajectories and their aggregates."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dist import LN2, Distribution, TruncationSpec, entropy, js_divergence, rank_of, truncate_top_p
from .errors import EmptyInput
from .policies import PolicyProvider, Trajectory


@dataclass(frozen=True)
class TokenShiftRecord:
    seq_id: str
    pos: int
    seq_len: int
    norm_pos: float
    sampled: int
    js: float
    base_entropy: float
    rl_entropy: float
    base_rank_of_sampled: int
    rl_rank_of_sampled: int


RECORD_COLUMNS = tuple(TokenShiftRecord.__dataclass_fields__)


@dataclass(frozen=True)
class PositionPair:
    """A record together with the two full (untruncated) distributions behind it."""

    record: TokenShiftRecord
    base: Distribution
    rl: Distribution


def collect_pairs(
    base: PolicyProvider,
    rl: PolicyProvider,
    trajectories: Iterable[Trajectory],
    trunc: TruncationSpec,
) -> list[PositionPair]:
    """Evaluate both policies at every generated position of every trajectory.

    JS uses the truncated distributions; entropies and ranks use the
    distributions as provided.
    """
    out = []
    for tr in trajectories:
        n = len(tr.tokens)
        for pos, tok in enumerate(tr.tokens):
            prefix = tr.prompt + tr.tokens[:pos]
            db = base.next_dist(prefix, tr.seq_id)
            dr = rl.next_dist(prefix, tr.seq_id)
            js = js_divergence(truncate_top_p(db, trunc), truncate_top_p(dr, trunc))
            rec = TokenShiftRecord(
                seq_id=tr.seq_id,
                pos=pos,
                seq_len=n,
                norm_pos=pos / n,
                sampled=tok,
                js=js,
                base_entropy=entropy(db),
                rl_entropy=entropy(dr),
                base_rank_of_sampled=rank_of(db, tok),
                rl_rank_of_sampled=rank_of(dr, tok),
            )
            out.append(PositionPair(rec, db, dr))
    return out


def analyze_pair(
    base: PolicyProvider,
    rl: PolicyProvider,
    trajectories: Iterable[Trajectory],
    trunc: TruncationSpec,
) -> list[TokenShiftRecord]:
    return [p.record for p in collect_pairs(base, rl, trajectories, trunc)]


# --------------------------------------------------------------------------
# aggregates


@dataclass(frozen=True)
class HistogramSpec:
    edges: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) < 2:
            raise ValueError("need at least two bin edges")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing")

    @classmethod
    def linear(cls, n_bins: int, lo: float = 0.0, hi: float = LN2) -> HistogramSpec:
        return cls(tuple(np.linspace(lo, hi, n_bins + 1).tolist()))

    @classmethod
    def log(cls, n_bins: int, lo: float = 1e-6, hi: float = LN2) -> HistogramSpec:
        return cls(tuple(np.geomspace(lo, hi, n_bins + 1).tolist()))


def bin_index(edges: Sequence[float], x: float) -> int:
    """Bins are [e_i, e_{i+1}); values outside the edges clamp to the end bins."""
    i = int(np.searchsorted(edges, x, side="right")) - 1
    return min(max(i, 0), len(edges) - 2)


def js_histogram(records: Sequence[TokenShiftRecord], spec: HistogramSpec) -> list[int]:
    counts = [0] * (len(spec.edges) - 1)
    for r in records:
        counts[bin_index(spec.edges, r.js)] += 1
    return counts


DEFAULT_PERCENTILES = (5, 10, 25, 50, 75, 90, 95, 99)


def _check_percentiles(percentiles: Sequence[float]) -> None:
    for q in percentiles:
        if not 0 < q < 100:
            raise ValueError(f"percentiles must lie in (0, 100), got {q}")


def per_sequence_means(records: Sequence[TokenShiftRecord]) -> list[float]:
    by_seq: dict[str, list[float]] = {}
    for r in records:
        by_seq.setdefault(r.seq_id, []).append(r.js)
    return [math.fsum(v) / len(v) for _, v in sorted(by_seq.items())]


def js_percentiles(
    records: Sequence[TokenShiftRecord],
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    mode: str = "pooled",
) -> list[tuple[float, float]]:
    """Linear-interpolation percentiles of JS over pooled tokens or per-sequence means."""
    _check_percentiles(percentiles)
    if not records:
        raise EmptyInput("no records")
    if mode == "pooled":
        values = [r.js for r in records]
    elif mode == "per-sequence":
        values = per_sequence_means(records)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    got = np.percentile(np.asarray(values, dtype=float), list(percentiles), method="linear")
    return [(float(q), float(v)) for q, v in zip(percentiles, got)]


@dataclass(frozen=True)
class PositionBin:
    lo: float
    hi: float
    count: int
    empty: bool
    mean: float | None = None
    median: float | None = None
    p5: float | None = None
    p25: float | None = None
    p75: float | None = None
    p95: float | None = None


def positional_profile(records: Sequence[TokenShiftRecord], n_bins: int) -> list[PositionBin]:
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    groups: list[list[float]] = [[] for _ in range(n_bins)]
    for r in records:
        groups[min(int(r.norm_pos * n_bins), n_bins - 1)].append(r.js)
    out = []
    for i, g in enumerate(groups):
        lo, hi = i / n_bins, (i + 1) / n_bins
        if not g:
            out.append(PositionBin(lo, hi, 0, True))
            continue
        p5, p25, p50, p75, p95 = np.percentile(g, [5, 25, 50, 75, 95], method="linear").tolist()
        out.append(PositionBin(lo, hi, len(g), False, math.fsum(g) / len(g), p50, p5, p25, p75, p95))
    return out


@dataclass(frozen=True)
class EntropyBins:
    threshold: float
    low: list[tuple[float, float]]
    high: list[tuple[float, float]]


def entropy_by_divergence_bins(records: Sequence[TokenShiftRecord], threshold: float = 0.1) -> EntropyBins:
    """(base_entropy, rl_entropy) samples split at ``threshold``; ties go low."""
    if not 0 < threshold < LN2:
        raise ValueError(f"threshold must lie in (0, ln 2), got {threshold}")
    low, high = [], []
    for r in records:
        (high if r.js > threshold else low).append((r.base_entropy, r.rl_entropy))
    return EntropyBins(threshold, low, high)


@dataclass(frozen=True)
class TokenFrequency:
    high_thresh: float
    low_thresh: float
    high_counts: dict[int, int]
    low_counts: dict[int, int]
    high_js: dict[int, list[float]]  # top-N high tokens -> js at every occurrence
    low_js: dict[int, list[float]]


def _top_tokens(counts: Counter, n: int) -> list[int]:
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def token_frequency_by_divergence(
    records: Sequence[TokenShiftRecord],
    high_thresh: float = 0.1,
    low_thresh: float = 0.01,
    top_n: int = 20,
) -> TokenFrequency:
    if not low_thresh < high_thresh:
        raise ValueError("low_thresh must be below high_thresh")
    high = Counter(r.sampled for r in records if r.js > high_thresh)
    low = Counter(r.sampled for r in records if r.js < low_thresh)
    every: dict[int, list[float]] = {}
    for r in records:
        every.setdefault(r.sampled, []).append(r.js)
    return TokenFrequency(
        high_thresh,
        low_thresh,
        dict(sorted(high.items())),
        dict(sorted(low.items())),
        {t: every[t] for t in _top_tokens(high, top_n)},
        {t: every[t] for t in _top_tokens(low, top_n)},
    )


def sparsity_fraction(records: Sequence[TokenShiftRecord], near_zero: float = 1e-3) -> float:
    """Share of positions with JS below ``near_zero``."""
    if not records:
        raise EmptyInput("no records")
    return sum(r.js < near_zero for r in records) / len(records)
