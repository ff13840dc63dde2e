"""Command-line entry point.

Subcommands: analyze, mechanics, cross-sample, verify-bounds, weights,
selftest.  Options come from flags, optionally layered over a JSON/YAML
``--config`` file (flags win).  ``TOKENSHIFT_OUT`` overrides the output
directory of a config file but not ``--out``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error or a
failed verification.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .analysis import (
    RECORD_COLUMNS,
    HistogramSpec,
    collect_pairs,
    entropy_by_divergence_bins,
    js_histogram,
    js_percentiles,
    positional_profile,
    sparsity_fraction,
    token_frequency_by_divergence,
)
from .cross_sampling import (
    CrossSampleConfig,
    budget_sweep,
    derive_seed,
    parse_predicate,
    replacement_pair_histogram,
    run_many,
    sample_sequence,
)
from .dist import TruncationSpec
from .errors import NoQualifyingPositions, TokenShiftError
from .mechanics import (
    base_rank_distribution_of_rl_topk,
    checkpoint_evolution,
    load_weight_vector,
    tail_promotion_stats,
    topk_overlap_curve,
    weight_gap_ratio,
)
from .policies import (
    GenerationLimits,
    Shift,
    SwitchingRule,
    ToyPolicy,
    ToyPolicySpec,
    Trajectory,
    build_toy_pair,
    dump_as_policies,
    dump_trajectories,
    load_dump,
)
from .report import make_meta, sig9, write_csv, write_json, write_ndjson
from .rl_weighting import ClipParams, WeightingParams, evaluate_rows

OUT_ENV = "TOKENSHIFT_OUT"
DEFAULT_OUT = "tokenshift-out"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; usage errors are 1 here
        raise UsageError(message)


# --------------------------------------------------------------------------
# option parsing helpers


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _budgets(text: str) -> list[int | None]:
    out = []
    for x in str(text).split(","):
        x = x.strip()
        if x:
            out.append(None if x in ("inf", "none", "unlimited") else int(x))
    return out


TOY_DEFAULTS = {
    "V": 8, "T": 16, "order": 2, "seed": 0, "kind": "tabular-markov",
    "temp": 1.0, "eos": None, "shift": 0.25, "scale": 2.0, "shift_seed": None,
}


def parse_toy(text: str) -> dict:
    """``V=3,T=4,order=1,...`` into a dict of toy settings."""
    cfg = dict(TOY_DEFAULTS)
    for part in str(text).split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in TOY_DEFAULTS:
            raise UsageError(f"--toy: unknown or malformed entry {part!r}")
        if key == "kind":
            cfg[key] = val.strip()
        elif key in ("temp", "shift", "scale"):
            cfg[key] = float(val)
        else:
            cfg[key] = int(val)
    return cfg


def toy_pair(toy: dict, seed: int | None = None):
    s = toy["seed"] if seed is None else seed
    spec = ToyPolicySpec(
        vocab_size=toy["V"], order=toy["order"], seed=s, kind=toy["kind"],
        temperature=toy["temp"], eos_id=toy["eos"],
    )
    shift_seed = toy["shift_seed"] if toy["shift_seed"] is not None else derive_seed(s, 1)
    return build_toy_pair(spec, Shift(shift_seed, toy["shift"], toy["scale"]))


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"--config: file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"--config: {p} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


class Options:
    """Flag value, else config-file value, else the built-in default."""

    def __init__(self, args: argparse.Namespace, file_cfg: dict, defaults: dict):
        self.resolved: dict[str, Any] = {}
        for key, default in defaults.items():
            val = getattr(args, key, None)
            if val is None:
                val = file_cfg.get(key, default)
            self.resolved[key] = val
        env_out = os.environ.get(OUT_ENV)
        if getattr(args, "out", None) is None and env_out:
            self.resolved["out"] = env_out

    def __getattr__(self, key):
        try:
            return self.resolved[key]
        except KeyError:
            raise AttributeError(key) from None

    def config(self) -> dict:
        # the output location does not change results, keep it out of the hash
        return {k: v for k, v in sorted(self.resolved.items()) if k not in ("out", "jobs")}


def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def _outdir(opts: Options) -> Path:
    out = Path(opts.out or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _formats(opts: Options) -> list[str]:
    fmts = [f.strip() for f in str(opts.format).split(",") if f.strip()]
    bad = [f for f in fmts if f not in ("json", "csv")]
    if bad or not fmts:
        raise UsageError(f"--format: expected json and/or csv, got {opts.format!r}")
    return fmts


# --------------------------------------------------------------------------
# inputs shared by analyze and mechanics


def _sample_trajectories(policy, toy: dict, n: int, seed: int, top_p: float) -> list[Trajectory]:
    eos = toy["eos"] if toy["eos"] is not None else toy["V"] - 1
    limits = GenerationLimits(toy["T"], eos)
    trunc = TruncationSpec(top_p)
    return [
        Trajectory(f"s{i:05d}", sample_sequence(policy, limits, derive_seed(seed, i), trunc))
        for i in range(n)
    ]


def _pairs_from_inputs(opts: Options):
    if opts.input:
        dump = load_dump(_require_file(opts.input, "--input"))
        base, rl = dump_as_policies(dump)
        top_p = opts.top_p if opts.top_p is not None else dump.meta.top_p
        trajs = dump_trajectories(dump)
        source = {"input": str(opts.input)}
    elif opts.toy:
        toy = parse_toy(opts.toy)
        base, rl = toy_pair(toy)
        top_p = opts.top_p if opts.top_p is not None else 1.0
        # the reference path is generated by the RL-side policy
        trajs = _sample_trajectories(rl, toy, opts.n_seqs, opts.seed, top_p)
        source = {"toy": toy}
    else:
        raise UsageError("one of --input or --toy is required")
    trunc = TruncationSpec(top_p)
    return base, rl, trajs, trunc, source


# --------------------------------------------------------------------------
# subcommands


def cmd_analyze(opts: Options) -> int:
    base, rl, trajs, trunc, _ = _pairs_from_inputs(opts)
    pairs = collect_pairs(base, rl, trajs, trunc)
    records = [p.record for p in pairs]
    out, fmts = _outdir(opts), _formats(opts)
    meta = make_meta("analyze", opts.config(), opts.seed)
    meta["entropy"] = "truncated-entropy" if opts.input else "full-entropy"

    hist_spec = HistogramSpec.log(opts.bins) if opts.log_bins else HistogramSpec.linear(opts.bins)
    hist = js_histogram(records, hist_spec)
    pct = js_percentiles(records, _floats(opts.percentiles), opts.mode)
    prof = positional_profile(records, opts.position_bins)
    ent = entropy_by_divergence_bins(records, opts.threshold)
    freq = token_frequency_by_divergence(records, opts.threshold, opts.low_threshold)

    hist_rows = [(a, b, c) for a, b, c in zip(hist_spec.edges, hist_spec.edges[1:], hist)]
    pct_rows = [(q, sig9(v)) for q, v in pct]
    prof_rows = [
        (b.lo, b.hi, b.count, b.empty, sig9(b.mean), sig9(b.median), sig9(b.p5), sig9(b.p25), sig9(b.p75), sig9(b.p95))
        for b in prof
    ]
    ent_summary = {
        "threshold": ent.threshold,
        "low": {"count": len(ent.low), "samples": ent.low},
        "high": {"count": len(ent.high), "samples": ent.high},
    }
    summary = {
        "n_records": len(records),
        "n_sequences": len(trajs),
        "near_zero_fraction": sig9(sparsity_fraction(records)) if records else None,
    }
    if "json" in fmts:
        write_json(out / "records.json", meta, [asdict(r) for r in records])
        write_json(out / "histogram.json", meta, {"edges": list(hist_spec.edges), "counts": hist})
        write_json(out / "percentiles.json", meta, [{"percentile": q, "js": v} for q, v in pct_rows])
        write_json(out / "positional.json", meta, prof)
        write_json(out / "entropy_bins.json", meta, ent_summary)
        write_json(out / "token_frequency.json", meta, freq)
        write_json(out / "summary.json", meta, summary)
    if "csv" in fmts:
        write_csv(out / "records.csv", meta, RECORD_COLUMNS, [tuple(asdict(r).values()) for r in records])
        write_csv(out / "histogram.csv", meta, ("lo", "hi", "count"), hist_rows)
        write_csv(out / "percentiles.csv", meta, ("percentile", "js"), pct_rows)
        write_csv(
            out / "positional.csv", meta,
            ("lo", "hi", "count", "empty", "mean", "median", "p5", "p25", "p75", "p95"), prof_rows,
        )
        write_csv(
            out / "entropy_bins.csv", meta, ("bin", "base_entropy", "rl_entropy"),
            [("low", b, r) for b, r in ent.low] + [("high", b, r) for b, r in ent.high],
        )
        write_csv(
            out / "token_frequency.csv", meta, ("class", "token", "count"),
            [("high", t, c) for t, c in freq.high_counts.items()] + [("low", t, c) for t, c in freq.low_counts.items()],
        )
    print(f"analyze: {len(records)} records -> {out}")
    return 0


def cmd_mechanics(opts: Options) -> int:
    out = _outdir(opts)
    meta = make_meta("mechanics", opts.config(), opts.seed)
    data: dict[str, Any] = {}
    if opts.input or opts.toy:
        base, rl, trajs, trunc, _ = _pairs_from_inputs(opts)
        pairs = collect_pairs(base, rl, trajs, trunc)
        try:
            data["topk_overlap"] = topk_overlap_curve(pairs, opts.threshold, opts.K)
            data["rank_provenance"] = base_rank_distribution_of_rl_topk(pairs, opts.threshold, opts.m)
            data["tail_promotion"] = tail_promotion_stats(pairs, opts.threshold, _floats(opts.tail_thresholds), opts.cutoff)
        except NoQualifyingPositions as exc:
            data["no_qualifying_positions"] = str(exc)
        if opts.toy and opts.checkpoints:
            toy = parse_toy(opts.toy)
            n = int(opts.checkpoints)
            if n < 2:
                raise UsageError("--checkpoints must be >= 2")
            ckpts = [toy_pair({**toy, "scale": toy["scale"] * i / (n - 1)})[1] for i in range(n)]
            trajs_ref = _sample_trajectories(ckpts[-1], toy, opts.n_seqs, opts.seed, trunc.top_p)
            evo = checkpoint_evolution(ckpts, trajs_ref, trunc=trunc, mode=opts.evolution_mode, js_thresh=opts.threshold)
            data["checkpoint_evolution"] = [
                {
                    "index": c.index,
                    "percentiles": [{"percentile": q, "js": sig9(v)} for q, v in c.percentiles],
                    "divergent_count": len(c.divergent),
                    "jaccard_with_final": sig9(c.jaccard_with_final),
                }
                for c in evo
            ]
    if opts.weights:
        a_path, b_path = opts.weights
        a = load_weight_vector(_require_file(a_path, "--weights"))
        b = load_weight_vector(_require_file(b_path, "--weights"))
        data["weight_gap_ratio"] = weight_gap_ratio(a, b)
    if not data:
        raise UsageError("nothing to do: give --input/--toy and/or --weights")
    write_json(out / "mechanics.json", meta, data)
    print(f"mechanics -> {out / 'mechanics.json'}")
    return 0


def cmd_cross_sample(opts: Options) -> int:
    if not opts.toy:
        raise UsageError("--toy is required (cross-sampling needs policies defined off the recorded path)")
    toy = parse_toy(opts.toy)
    base, rl = toy_pair(toy)
    prim, intv = (base, rl) if opts.direction == "forward" else (rl, base)
    eos = toy["eos"] if toy["eos"] is not None else toy["V"] - 1
    rule = SwitchingRule(opts.epsilon, TruncationSpec(opts.top_p if opts.top_p is not None else 1.0))
    cfg = CrossSampleConfig(prim, intv, rule, GenerationLimits(toy["T"], eos), None, opts.seed)
    out = _outdir(opts)
    meta = make_meta("cross-sample", opts.config(), opts.seed)
    seeds = [derive_seed(opts.seed, i) for i in range(opts.n_samples)]

    if opts.budgets is not None:
        budgets = _budgets(opts.budgets)
        success = parse_predicate(opts.predicate)
        points, traces = budget_sweep(cfg, budgets, opts.n_samples, success, jobs=opts.jobs)
        flat = [t for ts in traces for t in ts]
        pairs = replacement_pair_histogram(flat) if flat else {}
        write_json(out / "sweep.json", meta, {"points": points, "replacement_pairs": pairs})
        print(f"cross-sample: {len(budgets)} budget points -> {out / 'sweep.json'}")
        return 0

    budget = None if opts.budget is None else _budgets(str(opts.budget))[0]
    traces = run_many(cfg.with_budget(budget), seeds, opts.jobs)
    write_ndjson(out / "traces.ndjson", meta, (t.to_json() for t in traces))
    summary = {
        "n_samples": len(traces),
        "mean_total": sum(t.total_count for t in traces) / len(traces),
        "mean_effective": sum(t.effective_count for t in traces) / len(traces),
        "replacement_pairs": replacement_pair_histogram(traces),
    }
    write_json(out / "cross_sample_summary.json", meta, summary)
    print(f"cross-sample: {len(traces)} traces -> {out / 'traces.ndjson'}")
    return 0


def _verify_one(toy: dict, pair_seed: int, epsilons: Sequence[float]) -> dict:
    from .errors import HypothesisViolated
    from .seq_bounds import verify_js_decomposition, verify_js_eps_bound, verify_kl_chain_rule, verify_kl_eps_bound

    base, rl = toy_pair(toy, pair_seed)
    limits = GenerationLimits(toy["T"], base.eos_id)
    kl_chain = verify_kl_chain_rule(base, rl, limits)
    js_chain = verify_js_decomposition(base, rl, limits)
    entry: dict[str, Any] = {
        "pair_seed": pair_seed,
        "kl_chain_rule": {"lhs": kl_chain.lhs, "rhs": kl_chain.rhs, "diff": kl_chain.diff, "pass": kl_chain.passed},
        "js_decomposition": {"lhs": js_chain.lhs, "rhs": js_chain.rhs, "diff": js_chain.diff, "pass": js_chain.passed},
        "kl_bound": [],
        "js_bound": [],
    }
    ok = kl_chain.passed and js_chain.passed
    for eps in epsilons:
        r = verify_kl_eps_bound(base, rl, eps, limits)
        passed = r.holds and r.identity_ok and r.kappa_bar <= eps + 1e-12
        entry["kl_bound"].append({**asdict(r), "pass": passed})
        ok = ok and passed
        try:
            j = verify_js_eps_bound(base, rl, min(eps, 0.6931471805599453), limits)
            passed = j.holds and j.identity_ok and j.j_bar <= eps + 1e-12
            entry["js_bound"].append({**asdict(j), "hypothesis_violated": False, "pass": passed})
            ok = ok and passed
        except HypothesisViolated as exc:
            entry["js_bound"].append(
                {"epsilon": eps, "hypothesis_violated": True, "violations": exc.histories, "pass": True}
            )
    entry["pass"] = ok
    return entry


def cmd_verify_bounds(opts: Options) -> int:
    toy = parse_toy(opts.toy or "V=3,T=4")
    eps = _floats(opts.epsilons)
    pair_seeds = [derive_seed(opts.seed, i) for i in range(opts.seeds)]
    if opts.jobs > 1:
        with ProcessPoolExecutor(max_workers=opts.jobs) as pool:
            entries = list(pool.map(_verify_one, [toy] * len(pair_seeds), pair_seeds, [eps] * len(pair_seeds)))
    else:
        entries = [_verify_one(toy, s, eps) for s in pair_seeds]
    all_pass = all(e["pass"] for e in entries)
    out = _outdir(opts)
    meta = make_meta("verify-bounds", opts.config(), opts.seed)
    write_json(out / "verify_bounds.json", meta, {"toy": toy, "epsilons": eps, "all_pass": all_pass, "pairs": entries})
    print(f"verify-bounds: {len(entries)} pairs, all_pass={all_pass} -> {out / 'verify_bounds.json'}")
    return 0 if all_pass else 2


def cmd_weights(opts: Options) -> int:
    path = _require_file(opts.input, "--input")
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--input: {path} is not valid JSON ({exc.msg})") from None
    if not isinstance(rows, list):
        raise UsageError(f"--input: {path} must hold a JSON array of rows")
    try:
        results = evaluate_rows(
            rows, WeightingParams(opts.s, opts.alpha), ClipParams(opts.eps_low, opts.eps_high), opts.kl_source
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out, fmts = _outdir(opts), _formats(opts)
    meta = make_meta("weights", opts.config(), opts.seed)
    if "json" in fmts:
        write_json(out / "weights.json", meta, results)
    if "csv" in fmts:
        cols = ("ratio", "advantage", "kl", "kl_source", "weight", "weighted_advantage", "k3", "surrogate")
        write_csv(out / "weights.csv", meta, cols, [tuple(asdict(r).values()) for r in results])
    print(f"weights: {len(results)} rows -> {out}")
    return 0


def cmd_selftest(opts: Options) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(seed=opts.seed) else 2


# --------------------------------------------------------------------------
# parser


COMMON = {"seed": 0, "out": None, "format": "json", "jobs": 1}

DEFAULTS = {
    "analyze": {
        **COMMON, "input": None, "toy": None, "top_p": None, "n_seqs": 32, "threshold": 0.1,
        "low_threshold": 0.01, "bins": 20, "log_bins": False, "position_bins": 10,
        "percentiles": "5,10,25,50,75,90,95,99", "mode": "pooled",
    },
    "mechanics": {
        **COMMON, "input": None, "toy": None, "top_p": None, "n_seqs": 32, "threshold": 0.1,
        "K": 10, "m": 3, "tail_thresholds": "0.0001,0.001,0.01,0.05,0.1,0.2,0.5", "cutoff": 0.01,
        "checkpoints": None, "evolution_mode": "base", "weights": None,
    },
    "cross-sample": {
        **COMMON, "toy": None, "top_p": None, "epsilon": 0.1, "budget": None, "budgets": None,
        "n_samples": 100, "predicate": "contains-token:0", "direction": "forward",
    },
    "verify-bounds": {**COMMON, "toy": None, "seeds": 20, "epsilons": "0.01,0.1,0.5"},
    "weights": {
        **COMMON, "input": None, "s": 0.3, "alpha": 1.0, "eps_low": 0.2, "eps_high": 0.28, "kl_source": "caller",
    },
    "selftest": {**COMMON},
}

HANDLERS = {
    "analyze": cmd_analyze,
    "mechanics": cmd_mechanics,
    "cross-sample": cmd_cross_sample,
    "verify-bounds": cmd_verify_bounds,
    "weights": cmd_weights,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tokenshift", description="Token-level distribution shift toolkit")
    p.add_argument("--version", action="version", version=f"tokenshift {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON or YAML file of option values; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default {DEFAULT_OUT}, env {OUT_ENV})")
        sp.add_argument("--format", help="json, csv, or json,csv")
        sp.add_argument("--jobs", type=int, help="worker processes")

    def source(sp):
        sp.add_argument("--input", help="logprob dump (NDJSON)")
        sp.add_argument("--toy", help="toy pair spec, e.g. V=8,T=16,order=2,seed=0,shift=0.25,scale=2")
        sp.add_argument("--top-p", type=float)
        sp.add_argument("--n-seqs", type=int, help="toy trajectories to sample")
        sp.add_argument("--threshold", type=float, help="JS threshold for the divergent set")

    sp = sub.add_parser("analyze", help="per-token JS / entropy records and aggregates")
    common(sp)
    source(sp)
    sp.add_argument("--low-threshold", type=float)
    sp.add_argument("--bins", type=int)
    sp.add_argument("--log-bins", action="store_const", const=True)
    sp.add_argument("--position-bins", type=int)
    sp.add_argument("--percentiles")
    sp.add_argument("--mode", choices=("pooled", "per-sequence"))

    sp = sub.add_parser("mechanics", help="top-k overlap, rank provenance, tail promotion, evolution")
    common(sp)
    source(sp)
    sp.add_argument("--K", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--tail-thresholds")
    sp.add_argument("--cutoff", type=float)
    sp.add_argument("--checkpoints", type=int, help="toy only: number of interpolated checkpoints")
    sp.add_argument("--evolution-mode", choices=("base", "consecutive"))
    sp.add_argument("--weights", nargs=2, metavar=("ORIGINAL", "TUNED"), help="weight vectors (.json or float32 LE)")

    sp = sub.add_parser("cross-sample", help="cross-sampled generations and budget sweeps")
    common(sp)
    sp.add_argument("--toy")
    sp.add_argument("--top-p", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--budget", help="intervention budget (integer or 'inf')")
    sp.add_argument("--budgets", help="comma list of budgets for a sweep")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--predicate", help="contains-token:ID | ends-with:ID[:EOS] | count-token:ID:N")
    sp.add_argument("--direction", choices=("forward", "reverse"))

    sp = sub.add_parser("verify-bounds", help="exact checks of sequence-level decompositions and bounds")
    common(sp)
    sp.add_argument("--toy")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--epsilons")

    sp = sub.add_parser("weights", help="divergence-weighted advantages for {ratio, advantage, kl} rows")
    common(sp)
    sp.add_argument("--input")
    sp.add_argument("--s", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--eps-low", type=float)
    sp.add_argument("--eps-high", type=float)
    sp.add_argument("--kl-source")

    sp = sub.add_parser("selftest", help="run the built-in oracle and property checks")
    common(sp)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        opts = Options(args, _load_config(getattr(args, "config", None)), DEFAULTS[args.command])
        if opts.jobs is None or int(opts.jobs) < 1:
            raise UsageError("--jobs must be >= 1")
        return HANDLERS[args.command](opts)
    except UsageError as exc:
        print(f"tokenshift: error: {exc}", file=sys.stderr)
        return 1
    except (TokenShiftError, FileNotFoundError) as exc:
        code = 1 if isinstance(exc, (ValueError, FileNotFoundError)) else 2
        print(f"tokenshift: error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"tokenshift: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
