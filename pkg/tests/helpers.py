"""Shared fixtures-as-functions for constructing policy pairs."""

from tokenshift.cross_sampling import derive_seed
from tokenshift.dist import Distribution
from tokenshift.policies import CallablePolicy, Shift, ToyPolicySpec, build_toy_pair, build_toy_policy

KINDS = ("tabular-markov", "softmax-ngram")


def toy_pair(i, V, seed=2024, order=2):
    """Even i: base/RL pair via a sparse shift; odd i: two independent toys."""
    s = derive_seed(seed, i)
    kind = KINDS[(i // 2) % 2]
    spec = ToyPolicySpec(V, order=order, seed=s, kind=kind)
    if i % 2 == 0:
        return build_toy_pair(spec, Shift(derive_seed(s, 1), rate=0.5, scale=1.5))
    other = ToyPolicySpec(V, order=order, seed=derive_seed(s, 2), kind=kind)
    return build_toy_policy(spec), build_toy_policy(other)


def tabular(V, table, default):
    """Policy from {history: probs}, falling back to ``default``."""
    tab = {h: Distribution.dense(p) for h, p in table.items()}
    fallback = Distribution.dense(default)
    return CallablePolicy(V, lambda h: tab.get(tuple(h), fallback))


def skew_counterexample():
    """Plain JS stays below 0.22 everywhere, but skew-JS at h=(0,) is about 0.2231."""
    prim = tabular(3, {(): [0.6, 0.4, 0.0], (0,): [1.0, 0.0, 0.0]}, [0.0, 0.0, 1.0])
    intv = tabular(3, {(): [0.4, 0.6, 0.0], (0,): [0.5, 0.5, 0.0]}, [0.0, 0.0, 1.0])
    return prim, intv


def synthetic_records(n=1000, seed=0, n_seqs=37, V=16):
    """Random records with some exact ties and zero-JS positions."""
    import random

    from tokenshift.analysis import TokenShiftRecord

    rng = random.Random(seed)
    lens = {f"s{i:02d}": rng.randint(5, 60) for i in range(n_seqs)}
    out = []
    ids = sorted(lens)
    while len(out) < n:
        sid = ids[len(out) % n_seqs]
        L = lens[sid]
        pos = rng.randrange(L)
        u = rng.random()
        js = 0.0 if u < 0.3 else (0.1 if u < 0.35 else rng.random() * 0.6931)
        out.append(
            TokenShiftRecord(
                sid, pos, L, pos / L, rng.randrange(V), js,
                rng.random() * 2, rng.random() * 2, rng.randint(1, V), rng.randint(1, V),
            )
        )
    return out


def synthetic_pairs(n=1000, seed=0, V=8):
    """PositionPairs with random sparse full distributions and their true JS."""
    import random

    from tokenshift.analysis import PositionPair, TokenShiftRecord
    from tokenshift.dist import js_divergence, normalize

    rng = random.Random(seed)

    def rand_dist():
        w = [0.0 if rng.random() < 0.3 else rng.random() for _ in range(V)]
        w[rng.randrange(V)] += 0.05
        if rng.random() < 0.1:  # exact ties
            w[1] = w[0]
        return normalize(w)

    out = []
    for i in range(n):
        b, r = rand_dist(), rand_dist()
        if rng.random() < 0.2:
            r = b
        rec = TokenShiftRecord(f"s{i % 20}", i // 20, 50, (i // 20) / 50, rng.randrange(V), js_divergence(b, r), 0.0, 0.0, 1, 1)
        out.append(PositionPair(rec, b, r))
    return out
