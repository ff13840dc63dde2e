"""Sparse next-token distributions and the divergences computed on them.

All logarithms are natural, so every divergence is in nats and the
Jensen-Shannon bound is ``ln 2``.  Sums go through :func:`math.fsum`.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

from .errors import AbsoluteContinuityViolation, AllZeroMass

LN2 = math.log(2.0)

# Cumulative mass may land a few ulp short of top_p (0.6 + 0.3 < 0.9 in doubles).
TOP_P_SLACK = 1e-12


@dataclass(frozen=True)
class Distribution:
    """Probability mass on a sorted, sparse support inside ``range(vocab_size)``."""

    support: tuple[int, ...]
    probs: tuple[float, ...]
    vocab_size: int

    def __post_init__(self):
        if len(self.support) != len(self.probs):
            raise ValueError("support and probs differ in length")
        if not self.support:
            raise AllZeroMass("distribution has empty support")
        prev = -1
        for t in self.support:
            if t <= prev:
                raise ValueError("support ids must be unique and strictly sorted")
            prev = t
        if self.support[0] < 0 or self.support[-1] >= self.vocab_size:
            raise ValueError(f"token id out of range for vocab_size={self.vocab_size}")
        if any(not p > 0.0 for p in self.probs):
            raise ValueError("support probabilities must be strictly positive")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total!r}, not 1")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]], vocab_size: int) -> Distribution:
        """Build from (token, weight) pairs, dropping zeros and renormalizing."""
        merged: dict[int, float] = {}
        for t, w in pairs:
            if w < 0 or math.isnan(w):
                raise ValueError(f"negative or NaN weight {w!r} for token {t}")
            if w > 0:
                merged[int(t)] = merged.get(int(t), 0.0) + float(w)
        if not merged:
            raise AllZeroMass("every entry has zero mass")
        support = tuple(sorted(merged))
        total = math.fsum(merged.values())
        return cls(support, tuple(merged[t] / total for t in support), vocab_size)

    @classmethod
    def dense(cls, probs: Sequence[float]) -> Distribution:
        return normalize(probs)

    @classmethod
    def point_mass(cls, token: int, vocab_size: int) -> Distribution:
        return cls((token,), (1.0,), vocab_size)

    @classmethod
    def uniform(cls, vocab_size: int) -> Distribution:
        return cls(tuple(range(vocab_size)), (1.0 / vocab_size,) * vocab_size, vocab_size)

    def prob(self, token: int) -> float:
        i = bisect_left(self.support, token)
        if i < len(self.support) and self.support[i] == token:
            return self.probs[i]
        return 0.0

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.support, self.probs))

    def to_dense(self) -> list[float]:
        out = [0.0] * self.vocab_size
        for t, p in zip(self.support, self.probs):
            out[t] = p
        return out

    @cached_property
    def ranked(self) -> tuple[tuple[int, float], ...]:
        """Support in descending probability, ties by ascending token id."""
        return tuple(sorted(zip(self.support, self.probs), key=lambda tp: (-tp[1], tp[0])))

    @cached_property
    def _cdf(self) -> tuple[tuple[int, ...], tuple[float, ...]]:
        tokens, cum, acc = [], [], 0.0
        for t, p in self.ranked:
            acc += p
            tokens.append(t)
            cum.append(acc)
        return tuple(tokens), tuple(cum)

    def inverse_cdf(self, u: float) -> int:
        """Map ``u`` in [0, 1) to a token by walking the ranked support."""
        tokens, cum = self._cdf
        i = bisect_right(cum, u)
        return tokens[min(i, len(tokens) - 1)]


@dataclass(frozen=True)
class TruncationSpec:
    top_p: float = 1.0
    top_k: int | None = None

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")

    @property
    def is_identity(self) -> bool:
        return self.top_p >= 1.0 and self.top_k is None


NO_TRUNCATION = TruncationSpec()


def normalize(raw: Sequence[float]) -> Distribution:
    """Dense non-negative weights to a Distribution over ``len(raw)`` tokens."""
    return Distribution.from_pairs(enumerate(raw), len(raw))


def truncate_top_p(d: Distribution, spec: TruncationSpec = NO_TRUNCATION) -> Distribution:
    """Nucleus truncation: keep the shortest ranked prefix reaching ``top_p``.

    The token whose mass crosses the threshold is kept.  ``top_k``, when
    given, is applied first.
    """
    if spec.is_identity:
        return d
    ranked = d.ranked
    if spec.top_k is not None:
        ranked = ranked[: spec.top_k]
    kept: list[tuple[int, float]] = []
    acc = 0.0
    for t, p in ranked:
        kept.append((t, p))
        acc += p
        if acc >= spec.top_p - TOP_P_SLACK:
            break
    if len(kept) == len(d.support):
        return d
    return Distribution.from_pairs(kept, d.vocab_size)


def _check_vocab(p: Distribution, q: Distribution) -> None:
    if p.vocab_size != q.vocab_size:
        raise ValueError(f"vocabulary mismatch: {p.vocab_size} vs {q.vocab_size}")


def kl_divergence(p: Distribution, q: Distribution) -> float:
    _check_vocab(p, q)
    qd = q.as_dict()
    terms = []
    for t, pt in zip(p.support, p.probs):
        qt = qd.get(t)
        if qt is None:
            raise AbsoluteContinuityViolation(
                f"token {t} has mass {pt!r} under p but zero under q"
            )
        terms.append(pt * math.log(pt / qt))
    return max(math.fsum(terms), 0.0)


def js_divergence(p: Distribution, q: Distribution) -> float:
    _check_vocab(p, q)
    pd, qd = p.as_dict(), q.as_dict()
    terms = []
    for t in pd.keys() | qd.keys():
        pt, qt = pd.get(t, 0.0), qd.get(t, 0.0)
        s = pt + qt
        if pt > 0.0:
            terms.append(pt * math.log(2.0 * pt / s))
        if qt > 0.0:
            terms.append(qt * math.log(2.0 * qt / s))
    return min(max(0.5 * math.fsum(terms), 0.0), LN2)


def skew_js_divergence(p: Distribution, q: Distribution, alpha: float) -> float:
    """alpha * KL(p || m) + (1 - alpha) * KL(q || m) with m = alpha p + (1 - alpha) q."""
    _check_vocab(p, q)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    beta = 1.0 - alpha
    pd, qd = p.as_dict(), q.as_dict()
    terms = []
    for t in pd.keys() | qd.keys():
        pt, qt = pd.get(t, 0.0), qd.get(t, 0.0)
        # one-sided tokens have m = alpha * pt (or beta * qt) exactly; the closed
        # form survives alpha so small that m underflows
        if alpha > 0.0 and pt > 0.0:
            terms.append(alpha * pt * (-math.log(alpha) if qt == 0.0 else math.log(pt / (alpha * pt + beta * qt))))
        if beta > 0.0 and qt > 0.0:
            terms.append(beta * qt * (-math.log(beta) if pt == 0.0 else math.log(qt / (alpha * pt + beta * qt))))
    return max(math.fsum(terms), 0.0)


def entropy(d: Distribution) -> float:
    return max(-math.fsum(p * math.log(p) for p in d.probs), 0.0)


def rank_of(d: Distribution, token: int) -> int:
    """1-based rank; off-support tokens follow the support in id order."""
    for i, (t, _) in enumerate(d.ranked):
        if t == token:
            return i + 1
    if not 0 <= token < d.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of size {d.vocab_size}")
    below = bisect_left(d.support, token)
    return len(d.support) + (token - below) + 1


def rank_order(d: Distribution) -> list[int]:
    """Every vocabulary id in rank order (the inverse of :func:`rank_of`)."""
    on = [t for t, _ in d.ranked]
    support = set(d.support)
    return on + [t for t in range(d.vocab_size) if t not in support]


def top_k_set(d: Distribution, k: int) -> frozenset[int]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = [t for t, _ in d.ranked[:k]]
    t = 0
    support = set(d.support)
    while len(out) < min(k, d.vocab_size):
        if t not in support:
            out.append(t)
        t += 1
    return frozenset(out)
