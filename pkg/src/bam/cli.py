"""Command-line entry point: ``bam score | decompose | simulate | exact``.

Every command prints (or writes with ``--out``) one JSON document holding the
invocation, seed, package version and results.  Settings that only affect
how work is scheduled (``--threads``, ``--out``, ``--emit-csv``) are left out
of the recorded invocation so equal seeds give equal documents.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import __version__
from .exact import (SearchSpaceTooLarge, exact_log_marginal, exact_missing_posterior,
                    histogram_modes, marginal_histogram)
from .layout import LatentSpaceTooLarge
from .model import ModelError, PriorSpec, build_catalog_model, latent_cards, load_model, spec_to_dict
from .smc import (AllWeightsZero, SmcConfig, extract_decomposition, hoyer_sparsity, klnmf_factors,
                  run_many, summarize)
from .tensor import TensorFormatError, read_tensor, write_tensor
from .urn import simulate
from .vb import run_vb

EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_WEIGHTS = 4

_NOT_RECORDED = {"threads", "out", "emit_csv", "func", "latent_out"}


class UsageError(ValueError):
    pass


# --- helpers ----------------------------------------------------------------


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _int_range(text: str) -> list[int]:
    try:
        if ":" in text:
            lo, hi = text.split(":")
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO:HI, got {text!r}")
    if not out or out[0] < 0:
        raise argparse.ArgumentTypeError(f"empty or negative range {text!r}")
    return out


def _dims(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def catalog_for(kind: str, dims, k: int):
    """Catalog model whose visible shape is ``dims`` and latent cardinalities are ``k``."""
    dims = list(dims)
    if kind == "klnmf":
        _need(kind, dims, 2)
        return build_catalog_model(kind, (dims[0], k, dims[1]))
    if kind == "cp":
        return build_catalog_model(kind, [k] + dims)
    if kind == "tucker":
        _need(kind, dims, 3)
        return build_catalog_model(kind, dims + [k, k, k])
    if kind == "pachinko":
        _need(kind, dims, 2)
        return build_catalog_model(kind, (dims[1], k, dims[0]))
    if kind == "mmb":
        _need(kind, dims, 3)
        if dims[0] != dims[1]:
            raise UsageError("mmb needs equal first two dimensions")
        return build_catalog_model(kind, (dims[0], k, dims[2]))
    if kind == "snmf":
        _need(kind, dims, 2)
        if dims[0] != dims[1]:
            raise UsageError("snmf needs a square matrix")
        return build_catalog_model(kind, (dims[0], k))
    raise UsageError(f"unknown catalog model {kind!r}")


def _need(kind, dims, n):
    if len(dims) != n:
        raise UsageError(f"{kind} needs a {n}-way tensor, got {len(dims)} dims")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("BAM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"BAM_THREADS must be an integer, got {env!r}")
    return 1


def _models(args, dims):
    """List of (K, spec, prior) pairs described by the model flags."""
    file_prior = None
    if args.model_spec:
        base, file_prior = load_model(args.model_spec)
        ks = args.k_range or [None]
        specs = [(k, base if k is None else latent_cards(base, k)) for k in ks]
    elif args.model:
        specs = [(k, catalog_for(args.model, dims, k)) for k in (args.k_range or [2])]
    else:
        raise UsageError("one of --model or --model-spec is required")
    a = args.a if args.a is not None else (file_prior.a if file_prior else 1.0)
    b = args.b if args.b is not None else (file_prior.b if file_prior else 1.0)
    prior = PriorSpec(a, b)
    return [(k, s, prior) for k, s in specs]


def _smc_config(args) -> SmcConfig:
    schedule = "always" if args.unbiased else args.schedule
    return SmcConfig(args.particles, args.seed, args.resampling, schedule, args.ess_threshold)


def _invocation(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED}


def _emit(doc: dict, args) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _log_odds(values: dict) -> dict:
    keys = [k for k, v in values.items() if v is not None]
    if not keys:
        return {}
    arr = np.array([values[k] for k in keys])
    return {k: float(v) for k, v in zip(keys, arr - logsumexp(arr))}


# --- commands -----------------------------------------------------------------


def cmd_score(args) -> dict:
    X = read_tensor(args.tensor)
    threads = _threads(args)
    results = []
    for k, spec, prior in _models(args, X.dims):
        t0 = time.perf_counter()
        row = {"K": k}
        if args.method == "exact":
            row["log_marginal"] = _num(exact_log_marginal(X, spec, prior))
        elif args.method == "vb":
            st = run_vb(X, spec, prior, restarts=args.restarts, seed=args.seed)
            row.update(log_marginal=_num(st.elbo), elbo=_num(st.elbo), iterations=st.iterations)
        else:
            s = summarize(run_many(X, spec, prior, _smc_config(args), runs=args.runs, threads=threads))
            row.update(
                log_marginal=_num(s.log_mean_Z), mean_log_Z=_num(s.mean_log_Z),
                se_log_Z=_num(s.se_log_Z), log_se_Z=_num(s.log_se_Z),
                ess_mean=_num(s.mean_ess), ess_min=_num(s.min_ess),
                resample_events=_num(s.resample_events), log_Z_runs=[_num(v) for v in s.log_Z],
            )
        row["wall_time"] = time.perf_counter() - t0
        results.append(row)
    odds = _log_odds({i: r["log_marginal"] for i, r in enumerate(results)})
    for i, r in enumerate(results):
        r["log_odds"] = odds.get(i)
    best = max((r for r in results if r["log_marginal"] is not None),
               key=lambda r: r["log_marginal"], default=None)
    if args.emit_csv:
        _write_csv(args.emit_csv, ["K", "log_marginal", "log_odds"],
                   [[r["K"], r["log_marginal"], r["log_odds"]] for r in results])
    return {"method": args.method, "results": results, "argmax_K": best["K"] if best else None}


def _reconstruction(spec, dec, T: int) -> np.ndarray:
    """T times the visible marginal of the product of posterior-mean tables."""
    letters = [chr(ord("a") + n) for n in range(spec.n_nodes)]
    operands, subs = [], []
    for n in range(spec.n_nodes):
        operands.append(dec.tables[n])
        subs.append("".join(letters[m] for m in spec.family(n)))
    out = "".join(letters[v] for v in spec.visible)
    return T * np.einsum(",".join(subs) + "->" + out, *operands)


def cmd_decompose(args) -> dict:
    X = read_tensor(args.tensor)
    models = _models(args, X.dims)
    if len(models) != 1:
        raise UsageError("decompose needs a single K")
    k, spec, prior = models[0]
    est = run_many(X, spec, prior, _smc_config(args), runs=1, keep_particles=True)[0]
    out = {"K": k, "log_marginal": _num(est.log_Z), "model": spec_to_dict(spec)}
    for which in ("mean", "best"):
        dec = extract_decomposition(spec, prior, est, which)
        rec = _reconstruction(spec, dec, X.total)
        entry = {
            "tables": {name: t.tolist() for name, t in zip(spec.names, dec.tables)},
            "reconstruction_total": float(rec.sum()),
            "sparsity": {name: hoyer_sparsity(t) for name, t in zip(spec.names, dec.tables)},
        }
        if args.model == "klnmf":
            W, H = klnmf_factors(spec, dec, X.total)
            entry.update(W=W.tolist(), H=H.tolist(), sparsity_W=hoyer_sparsity(W), sparsity_H=hoyer_sparsity(H))
        out[which] = entry
    if args.emit_csv:
        dec = extract_decomposition(spec, prior, est, "mean")
        rows = []
        for name, t in zip(spec.names, dec.tables):
            for idx, v in np.ndenumerate(t):
                rows.append([name, " ".join(map(str, idx)), float(v)])
        _write_csv(args.emit_csv, ["node", "index", "value"], rows)
    return out


def cmd_simulate(args) -> dict:
    if args.model_spec:
        spec, file_prior = load_model(args.model_spec)
        if args.k is not None:
            spec = latent_cards(spec, args.k)
    elif args.model:
        if not args.dims:
            raise UsageError("--dims is required with --model")
        spec = catalog_for(args.model, args.dims, args.k if args.k is not None else 2)
        file_prior = None
    else:
        raise UsageError("one of --model or --model-spec is required")
    a = args.a if args.a is not None else (file_prior.a if file_prior else 1.0)
    b = args.b if args.b is not None else (file_prior.b if file_prior else 1.0)
    if args.tokens is None and not args.lambda_draw:
        raise UsageError("give --tokens T or --lambda-draw")
    S, X = simulate(spec, PriorSpec(a, b), np.random.default_rng(args.seed),
                    None if args.lambda_draw else args.tokens)
    write_tensor(X, args.tensor_out)
    if args.latent_out:
        write_tensor(S, args.latent_out)
    return {"tokens": X.total, "dims": list(X.dims), "nnz": X.nnz, "tensor": str(args.tensor_out)}


def cmd_exact(args) -> dict:
    X = read_tensor(args.tensor)
    results = []
    for k, spec, prior in _models(args, X.dims):
        row = {"K": k}
        if args.missing_posterior:
            post = exact_missing_posterior(X, spec, prior, args.missing_posterior)
            row["missing_posterior"] = {str(t): _num(v) for t, v in post.items()}
            row["mode"] = max(post, key=post.get)
        if not X.mask:
            row["log_marginal"] = _num(exact_log_marginal(X, spec, prior))
        if args.histogram:
            h = marginal_histogram(X, spec, prior, bins=args.histogram)
            row["histogram"] = {
                "edges": h.edges.tolist(), "counts": h.counts.tolist(),
                "log_mass": [_num(v) for v in h.log_mass],
                "d_ep": dict(zip(map(str, h.dep_values.tolist()), h.dep_counts.tolist())),
                "modes": histogram_modes(h).tolist(),
            }
            if args.emit_csv:
                path = Path(args.emit_csv)
                if len(args.k_range or [None]) > 1:
                    path = path.with_name(f"{path.stem}_K{k}{path.suffix}")
                _write_csv(path, ["lo", "hi", "count", "log_mass"],
                           [[lo, hi, c, m] for lo, hi, c, m in zip(h.edges[:-1], h.edges[1:], h.counts, h.log_mass)])
        results.append(row)
    return {"results": results}


# --- parser -------------------------------------------------------------------


def _model_flags(p, tensor=True):
    if tensor:
        p.add_argument("tensor", help="tensor file (text format)")
    p.add_argument("--model", choices=["klnmf", "cp", "tucker", "pachinko", "mmb", "snmf"])
    p.add_argument("--model-spec", help="JSON model specification")
    p.add_argument("--k-range", type=_int_range, help="latent cardinalities, K or LO:HI")
    p.add_argument("--a", type=float, help="equivalent sample size (default 1)")
    p.add_argument("--b", type=float, help="Gamma rate (default 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.add_argument("--emit-csv", help="also write the plot data as CSV")
    p.add_argument("--threads", type=int, help="worker threads (default $BAM_THREADS or 1)")


def _smc_flags(p):
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--resampling", default="systematic",
                   choices=["multinomial", "stratified", "systematic", "residual"])
    p.add_argument("--schedule", default="adaptive", choices=["adaptive", "always", "never"])
    p.add_argument("--ess-threshold", type=float, default=0.5)
    p.add_argument("--unbiased", action="store_true", help="resample at every step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bam", description="Bayesian allocation model toolkit")
    parser.add_argument("--version", action="version", version=f"bam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="marginal likelihood over a range of latent sizes")
    _model_flags(p)
    _smc_flags(p)
    p.add_argument("--method", choices=["smc", "vb", "exact"], default="smc")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--restarts", type=int, default=10)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("decompose", help="posterior factor tables from one SMC run")
    _model_flags(p)
    _smc_flags(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("simulate", help="draw a tensor from the generative model")
    _model_flags(p, tensor=False)
    p.add_argument("--dims", type=_dims, help="visible dimensions for a catalog model, e.g. 20,25,30")
    p.add_argument("--k", type=int, help="latent cardinality")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--tokens", type=int)
    g.add_argument("--lambda-draw", action="store_true", help="draw T from the Gamma-Poisson prior")
    p.add_argument("--tensor-out", required=True, help="output tensor file")
    p.add_argument("--latent-out", help="also write the full allocation tensor")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("exact", help="exhaustive enumeration baselines")
    _model_flags(p)
    p.add_argument("--missing-posterior", type=_int_range, help="T range, LO:HI")
    p.add_argument("--histogram", type=int, help="number of bins for the log-pi histogram")
    p.set_defaults(func=cmd_exact)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        body = args.func(args)
    except (TensorFormatError, ModelError, UsageError, FileNotFoundError) as exc:
        print(f"bam: error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (SearchSpaceTooLarge, LatentSpaceTooLarge) as exc:
        print(f"bam: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except AllWeightsZero as exc:
        print(f"bam: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    doc = {
        "command": args.command,
        "invocation": _invocation(args),
        "seed": args.seed,
        "version": __version__,
        **body,
        "wall_time": time.perf_counter() - t0,
    }
    _emit(doc, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
