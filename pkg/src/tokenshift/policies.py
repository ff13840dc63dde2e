"""Next-token policies: seeded toy models, logprob-dump replay, mixed policy.

Every provider exposes ``vocab_size`` and ``next_dist(prefix, seq_id=None)``
where ``prefix`` is a tuple of token ids (prompt followed by generated
tokens).  ``seq_id`` only matters for dump replay, where many recorded
sequences share the empty prefix at position 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Callable, Iterable, Sequence

import numpy as np

from .dist import (
    NO_TRUNCATION,
    Distribution,
    TruncationSpec,
    js_divergence,
    kl_divergence,
    truncate_top_p,
)
from .errors import AbsoluteContinuityViolation, ParseError, PrefixNotRecorded, SchemaError, SpecInvalid

Prefix = tuple  # tuple[int, ...]

TOY_KINDS = ("tabular-markov", "softmax-ngram")
_STD_NORMAL = NormalDist()
_U53 = 2.0 ** -53


class PolicyProvider:
    """Base class: a deterministic map from prefix to next-token distribution."""

    vocab_size: int

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        raise NotImplementedError


@dataclass(frozen=True)
class GenerationLimits:
    t_max: int
    eos_id: int | None = None

    def __post_init__(self):
        if self.t_max < 1:
            raise SpecInvalid(f"t_max must be >= 1, got {self.t_max}")


@dataclass(frozen=True)
class Trajectory:
    """A generated response, with the prompt it was conditioned on."""

    seq_id: str
    tokens: tuple[int, ...]
    prompt: tuple[int, ...] = ()


# --------------------------------------------------------------------------
# toy policies


@dataclass(frozen=True)
class Shift:
    """Sparse logit perturbation: a ``rate`` fraction of contexts get noise of size ``scale``."""

    seed: int
    rate: float = 0.25
    scale: float = 2.0


@dataclass(frozen=True)
class ToyPolicySpec:
    vocab_size: int
    order: int = 1
    seed: int = 0
    kind: str = "tabular-markov"
    temperature: float = 1.0
    eos_id: int | None = None
    shift: Shift | None = None

    @property
    def eos(self) -> int:
        return self.vocab_size - 1 if self.eos_id is None else self.eos_id

    def validate(self) -> None:
        if self.kind not in TOY_KINDS:
            raise SpecInvalid(f"kind must be one of {TOY_KINDS}, got {self.kind!r}")
        if not 2 <= self.vocab_size <= 64:
            raise SpecInvalid(f"vocab_size must be in [2, 64], got {self.vocab_size}")
        if not 1 <= self.order <= 4:
            raise SpecInvalid(f"order must be in [1, 4], got {self.order}")
        if not 0 <= self.seed < 2**64:
            raise SpecInvalid(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise SpecInvalid(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.eos < self.vocab_size:
            raise SpecInvalid(f"eos_id {self.eos} outside vocabulary")
        if self.shift is not None:
            if not 0 <= self.shift.seed < 2**64:
                raise SpecInvalid("shift seed must be a 64-bit unsigned integer")
            if not 0.0 <= self.shift.rate <= 1.0:
                raise SpecInvalid(f"shift rate must be in [0, 1], got {self.shift.rate}")


def _normals(key: int, counter_hi: int, stream: int, n: int) -> list[float]:
    # Counter lives in the top 128 bits so distinct contexts never share blocks.
    bits = np.random.Philox(key=key, counter=(counter_hi << 192) | (stream << 128))
    raw = bits.random_raw(n)
    return [_STD_NORMAL.inv_cdf(((int(x) >> 11) + 0.5) * _U53) for x in raw]


class ToyPolicy(PolicyProvider):
    """Seeded order-n model whose logits come from a Philox stream per context."""

    def __init__(self, spec: ToyPolicySpec):
        spec.validate()
        self.spec = spec
        self.vocab_size = spec.vocab_size
        self.eos_id = spec.eos
        self._cache: dict[tuple[int, ...], Distribution] = {}

    def __getstate__(self):
        return {"spec": self.spec}

    def __setstate__(self, state):
        self.__init__(state["spec"])

    def __repr__(self) -> str:
        return f"ToyPolicy({self.spec!r})"

    def context(self, prefix: Prefix) -> tuple[int, ...]:
        n = self.spec.order
        tail = tuple(prefix[-n:]) if prefix else ()
        return (self.vocab_size,) * (n - len(tail)) + tail

    def _code(self, ctx: tuple[int, ...]) -> int:
        code = 0
        for t in ctx:
            code = code * (self.vocab_size + 1) + t
        return code

    def logits(self, ctx: tuple[int, ...]) -> list[float]:
        spec, V = self.spec, self.vocab_size
        if spec.kind == "tabular-markov":
            out = _normals(spec.seed, self._code(ctx), 0, V)
        else:
            out = [0.0] * V
            scale = 1.0 / math.sqrt(spec.order)
            for j, a in enumerate(ctx):
                w = _normals(spec.seed, j * (V + 1) + a, 1, V)
                out = [o + scale * x for o, x in zip(out, w)]
        if spec.shift is not None and spec.shift.rate > 0:
            noise = _normals(spec.shift.seed, self._code(ctx), 2, V + 1)
            gate = 0.5 * (1.0 + math.erf(noise[0] / math.sqrt(2.0)))
            if gate < spec.shift.rate:
                out = [o + spec.shift.scale * x for o, x in zip(out, noise[1:])]
        return out

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        ctx = self.context(prefix)
        d = self._cache.get(ctx)
        if d is None:
            z = np.asarray(self.logits(ctx)) / self.spec.temperature
            w = np.exp(z - z.max())
            d = Distribution.from_pairs(enumerate(w.tolist()), self.vocab_size)
            self._cache[ctx] = d
        return d


def build_toy_policy(spec: ToyPolicySpec) -> ToyPolicy:
    return ToyPolicy(spec)


def build_toy_pair(spec: ToyPolicySpec, shift: Shift) -> tuple[ToyPolicy, ToyPolicy]:
    """A base policy and a sparsely shifted copy of it (stand-in for base vs RL)."""
    base = ToyPolicy(spec)
    rl = ToyPolicy(ToyPolicySpec(**{**spec.__dict__, "shift": shift}))
    return base, rl


class CallablePolicy(PolicyProvider):
    """Wraps ``fn(prefix) -> Distribution``; used for hand-built test policies."""

    def __init__(self, vocab_size: int, fn: Callable[[Prefix], Distribution]):
        self.vocab_size = vocab_size
        self._fn = fn

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        d = self._fn(tuple(prefix))
        if d.vocab_size != self.vocab_size:
            raise ValueError("policy returned a distribution over the wrong vocabulary")
        return d


class MemorylessPolicy(PolicyProvider):
    def __init__(self, dist: Distribution):
        self.dist = dist
        self.vocab_size = dist.vocab_size

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        return self.dist


class TruncatedPolicy(PolicyProvider):
    def __init__(self, inner: PolicyProvider, trunc: TruncationSpec):
        self.inner = inner
        self.trunc = trunc
        self.vocab_size = inner.vocab_size

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        return truncate_top_p(self.inner.next_dist(prefix, seq_id), self.trunc)


# --------------------------------------------------------------------------
# mixed policy


@dataclass(frozen=True)
class SwitchingRule:
    """Switch to the intervention policy where divergence strictly exceeds ``epsilon``.

    ``divergence`` is ``"js"`` (used by the experiments) or ``"kl"``
    (KL(primary || intervention), the rule the KL bound is stated for).
    Both are evaluated on the truncated distributions.
    """

    epsilon: float
    trunc: TruncationSpec = NO_TRUNCATION
    divergence: str = "js"

    def __post_init__(self):
        if self.divergence not in ("js", "kl"):
            raise SpecInvalid(f"divergence must be 'js' or 'kl', got {self.divergence!r}")
        if not self.epsilon >= 0:
            raise SpecInvalid(f"epsilon must be >= 0, got {self.epsilon}")
        if self.divergence == "js" and self.epsilon > math.log(2) + 1e-12:
            raise SpecInvalid(f"JS threshold {self.epsilon} exceeds ln 2")

    def measure(self, prim: Distribution, intv: Distribution) -> float:
        if self.divergence == "js":
            return js_divergence(prim, intv)
        try:
            return kl_divergence(prim, intv)
        except AbsoluteContinuityViolation:
            return math.inf


@dataclass(frozen=True)
class Step:
    """One mixed-policy decision at a prefix."""

    dist: Distribution
    switched: bool
    divergence: float | None  # None when the budget was exhausted before evaluating
    primary: Distribution
    intervention: Distribution
    used: int  # switches strictly before this prefix


class MixedPolicy(PolicyProvider):
    """pi_mix: the intervention policy where the rule fires, else the primary.

    The budget caps the number of switches along a prefix (counted from the
    end of ``prompt``); once spent, no divergence is evaluated and the
    primary is used.  Returned distributions are truncated with the rule's
    truncation spec, i.e. they are the distributions actually sampled from.
    """

    def __init__(
        self,
        primary: PolicyProvider,
        intervention: PolicyProvider,
        rule: SwitchingRule,
        budget: int | None = None,
        prompt: Sequence[int] = (),
    ):
        if primary.vocab_size != intervention.vocab_size:
            raise SpecInvalid("primary and intervention vocabularies differ")
        if budget is not None and budget < 0:
            raise SpecInvalid(f"budget must be >= 0, got {budget}")
        self.primary = primary
        self.intervention = intervention
        self.rule = rule
        self.budget = budget
        self.prompt = tuple(prompt)
        self.vocab_size = primary.vocab_size
        self._steps: dict[tuple, Step] = {}

    def step(self, prefix: Prefix, seq_id: str | None = None) -> Step:
        prefix = tuple(prefix)
        key = (seq_id, prefix)
        hit = self._steps.get(key)
        if hit is not None:
            return hit
        n0 = len(self.prompt)
        if prefix[:n0] != self.prompt:
            raise ValueError("prefix does not start with the mixed policy's prompt")
        used = 0
        if len(prefix) > n0:
            parent = self.step(prefix[:-1], seq_id)
            used = parent.used + int(parent.switched)
        prim = truncate_top_p(self.primary.next_dist(prefix, seq_id), self.rule.trunc)
        intv = truncate_top_p(self.intervention.next_dist(prefix, seq_id), self.rule.trunc)
        if self.budget is not None and used >= self.budget:
            step = Step(prim, False, None, prim, intv, used)
        else:
            div = self.rule.measure(prim, intv)
            switched = div > self.rule.epsilon
            step = Step(intv if switched else prim, switched, div, prim, intv, used)
        self._steps[key] = step
        return step

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        return self.step(prefix, seq_id).dist


# --------------------------------------------------------------------------
# logprob dumps


@dataclass(frozen=True)
class DumpMeta:
    vocab_size: int
    a_name: str = "a"
    b_name: str = "b"
    top_p: float = 1.0
    temperature: float = 1.0


@dataclass(frozen=True)
class DumpRecord:
    seq_id: str
    pos: int
    sampled: int
    a_top: tuple[tuple[int, float], ...]
    b_top: tuple[tuple[int, float], ...]


@dataclass
class LogprobDump:
    meta: DumpMeta
    records: list[DumpRecord] = field(default_factory=list)

    def sequences(self) -> dict[str, list[DumpRecord]]:
        out: dict[str, list[DumpRecord]] = {}
        for r in self.records:
            out.setdefault(r.seq_id, []).append(r)
        return out


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)) and math.isfinite(x)


def _parse_top(raw, name: str, vocab_size: int, lineno: int) -> tuple[tuple[int, float], ...]:
    if not isinstance(raw, list) or not raw:
        raise ParseError(f"{name} must be a non-empty list of [id, logprob] pairs", lineno)
    out = []
    for item in raw:
        if not (isinstance(item, list) and len(item) == 2 and _is_int(item[0]) and _is_num(item[1])):
            raise ParseError(f"{name} entry {item!r} is not an [int, number] pair", lineno)
        out.append((item[0], float(item[1])))
    ids = [t for t, _ in out]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{name} repeats a token id", lineno)
    if any(not 0 <= t < vocab_size for t in ids):
        raise SchemaError(f"{name} has a token id outside [0, {vocab_size})", lineno)
    for (_, a), (_, b) in zip(out, out[1:]):
        if b > a:
            raise SchemaError(f"{name} logprobs are not non-increasing", lineno)
    mass = math.fsum(math.exp(lp) for _, lp in out)
    if mass > 1.0 + 1e-6:
        raise SchemaError(f"{name} probabilities sum to {mass!r} > 1", lineno)
    return tuple(out)


def parse_dump_lines(lines: Iterable[str]) -> LogprobDump:
    meta: DumpMeta | None = None
    records: list[DumpRecord] = []
    next_pos: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("each line must be a JSON object", lineno)
        if meta is None:
            m = obj.get("meta")
            if not isinstance(m, dict):
                raise ParseError("first line must be the {\"meta\": {...}} header", lineno)
            if not _is_int(m.get("vocab_size")) or m["vocab_size"] < 1:
                raise ParseError("meta.vocab_size must be a positive integer", lineno)
            top_p = m.get("top_p", 1.0)
            temp = m.get("temperature", 1.0)
            if not _is_num(top_p) or not 0 < top_p <= 1:
                raise SchemaError("meta.top_p must lie in (0, 1]", lineno)
            if not _is_num(temp) or temp <= 0:
                raise SchemaError("meta.temperature must be positive", lineno)
            meta = DumpMeta(
                vocab_size=m["vocab_size"],
                a_name=str(m.get("a_name", "a")),
                b_name=str(m.get("b_name", "b")),
                top_p=float(top_p),
                temperature=float(temp),
            )
            continue
        for key in ("seq_id", "pos", "sampled", "a_top", "b_top"):
            if key not in obj:
                raise ParseError(f"missing field {key!r}", lineno)
        if not isinstance(obj["seq_id"], str):
            raise ParseError("seq_id must be a string", lineno)
        if not _is_int(obj["pos"]) or not _is_int(obj["sampled"]):
            raise ParseError("pos and sampled must be integers", lineno)
        seq_id, pos, sampled = obj["seq_id"], obj["pos"], obj["sampled"]
        expected = next_pos.get(seq_id, 0)
        if pos != expected:
            raise SchemaError(f"seq {seq_id!r}: expected pos {expected}, got {pos}", lineno)
        if not 0 <= sampled < meta.vocab_size:
            raise SchemaError(f"sampled token {sampled} outside vocabulary", lineno)
        a_top = _parse_top(obj["a_top"], "a_top", meta.vocab_size, lineno)
        b_top = _parse_top(obj["b_top"], "b_top", meta.vocab_size, lineno)
        next_pos[seq_id] = pos + 1
        records.append(DumpRecord(seq_id, pos, sampled, a_top, b_top))
    if meta is None:
        raise ParseError("empty dump: no meta header", 1)
    return LogprobDump(meta, records)


def load_dump(path) -> LogprobDump:
    with open(path, encoding="utf-8") as fh:
        return parse_dump_lines(fh)


def write_dump(path, dump: LogprobDump) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": dump.meta.__dict__}) + "\n")
        for r in dump.records:
            row = {
                "seq_id": r.seq_id,
                "pos": r.pos,
                "sampled": r.sampled,
                "a_top": [list(x) for x in r.a_top],
                "b_top": [list(x) for x in r.b_top],
            }
            fh.write(json.dumps(row) + "\n")


def dump_from_policies(
    a: PolicyProvider,
    b: PolicyProvider,
    trajectories: Sequence[Trajectory],
    top_k: int | None = None,
    names: tuple[str, str] = ("a", "b"),
    top_p: float = 1.0,
) -> LogprobDump:
    """Record both policies' (optionally top-k) logprobs along trajectories."""

    def top(d: Distribution):
        ranked = d.ranked if top_k is None else d.ranked[:top_k]
        return tuple((t, math.log(p)) for t, p in ranked)

    records = []
    for tr in trajectories:
        for pos, tok in enumerate(tr.tokens):
            prefix = tr.prompt + tr.tokens[:pos]
            records.append(
                DumpRecord(tr.seq_id, pos, tok, top(a.next_dist(prefix)), top(b.next_dist(prefix)))
            )
    meta = DumpMeta(a.vocab_size, names[0], names[1], top_p, 1.0)
    return LogprobDump(meta, records)


class ReplayPolicy(PolicyProvider):
    """Replays stored top-k logprobs, renormalized; defined only on recorded prefixes."""

    def __init__(self, vocab_size: int, table: dict[tuple[str, tuple[int, ...]], Distribution], name: str = ""):
        self.vocab_size = vocab_size
        self.name = name
        self._table = table
        seqs = {s for s, _ in table}
        self._only_seq = next(iter(seqs)) if len(seqs) == 1 else None

    def next_dist(self, prefix: Prefix, seq_id: str | None = None) -> Distribution:
        if seq_id is None:
            seq_id = self._only_seq
        d = self._table.get((seq_id, tuple(prefix)))
        if d is None:
            raise PrefixNotRecorded(
                f"{self.name or 'replay'}: prefix of length {len(prefix)} in seq {seq_id!r} is not on a recorded trajectory"
            )
        return d


def dump_as_policies(dump: LogprobDump) -> tuple[ReplayPolicy, ReplayPolicy]:
    V = dump.meta.vocab_size
    a_tab: dict = {}
    b_tab: dict = {}
    for seq_id, recs in dump.sequences().items():
        tokens: list[int] = []
        for r in recs:
            key = (seq_id, tuple(tokens))
            a_tab[key] = _from_logprobs(r.a_top, V)
            b_tab[key] = _from_logprobs(r.b_top, V)
            tokens.append(r.sampled)
    return ReplayPolicy(V, a_tab, dump.meta.a_name), ReplayPolicy(V, b_tab, dump.meta.b_name)


def _from_logprobs(top: Sequence[tuple[int, float]], vocab_size: int) -> Distribution:
    return Distribution.from_pairs(((t, math.exp(lp)) for t, lp in top), vocab_size)


def dump_trajectories(dump: LogprobDump) -> list[Trajectory]:
    return [
        Trajectory(seq_id, tuple(r.sampled for r in recs))
        for seq_id, recs in dump.sequences().items()
    ]
