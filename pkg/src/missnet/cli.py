"""Command-line entry point: ``missnet impute | synth | eval | bench``.

CSV files are laid out with one row per timestep and one column per
feature, under a header row of feature names.  Empty cells and the token
``NaN`` mark missing values.  Exit codes: 0 success, 2 input error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .core import Hyperparams, PartialSeries
from .em import fit
from .evaluation import regime_accuracy, rmse
from .synth import RNG_ALGORITHM, SynthSpec, generate_dataset, inject_missing, zscore

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MISSING_TOKENS = {"", "nan", "NaN", "NAN"}


class InputError(Exception):
    """Malformed or inconsistent user input (exit code 2)."""


class NumericError(Exception):
    """Numerical breakdown during fitting (exit code 3)."""


# ----------------------------------------------------------------------------- CSV

def read_csv(path):
    """Read a timestep-per-row CSV.

    Returns
    -------
    names : list of str
    X : array (T, C) with NaN for missing cells
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            names = next(reader)
        except StopIteration:
            raise InputError(f"{path}: file is empty") from None
        names = [n.strip() for n in names]
        if not names or any(n == "" for n in names):
            raise InputError(f"{path}, line 1: header has an empty column name")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(c.strip() == "" for c in row) and len(row) <= 1:
                continue                          # blank line
            if len(row) != len(names):
                raise InputError(f"{path}, line {line}: expected {len(names)} fields, got {len(row)}")
            vals = []
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    vals.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path}, line {line}, column {names[j]!r}: "
                                     f"cannot parse {cell!r} as a number") from None
                if not math.isfinite(v):
                    raise InputError(f"{path}, line {line}, column {names[j]!r}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return names, np.array(rows, dtype=float).reshape(len(rows), len(names))


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))


def write_csv(path, names, X):
    """Write a (T, C) array; NaN becomes an empty cell, numbers use round-trip repr."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in np.asarray(X, dtype=float):
            w.writerow([_fmt(v) for v in row])


def _write_json(path, obj):
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


# ----------------------------------------------------------------------------- exports

def _triplets(M, threshold, upper_only=True):
    N = M.shape[0]
    out = []
    for i in range(N):
        for j in range(i if upper_only else 0, N):
            if abs(M[i, j]) > threshold:
                out.append([i, j, float(M[i, j])])
    return out


def network_document(result, names, threshold=1e-6):
    """JSON-ready per-regime networks in sparse triplet form (i <= j)."""
    regimes = []
    for k in range(result.params.num_regimes):
        P = result.params.precision[k]
        S = result.latents.S[k]
        edges = [[i, j, v] for i, j, v in _triplets(S, threshold) if i != j]
        regimes.append({
            "regime": k,
            "n_timesteps": int(result.path.counts()[k]),
            "mean": [float(v) for v in result.params.mu[k]],
            "precision": {"shape": list(P.shape), "entries": _triplets(P, threshold)},
            "partial_correlation": {"shape": list(S.shape), "edges": edges},
        })
    return {"features": list(names), "threshold": threshold, "format": "triplets [i, j, value], i <= j",
            "regimes": regimes}


def network_dot(doc):
    names = doc["features"]
    lines = ["graph networks {"]
    for reg in doc["regimes"]:
        k = reg["regime"]
        lines.append(f"  subgraph cluster_{k} {{")
        lines.append(f'    label="regime {k}";')
        for i, name in enumerate(names):
            lines.append(f'    "r{k}_{i}" [label="{name}"];')
        for i, j, v in reg["partial_correlation"]["edges"]:
            color = "blue" if v > 0 else "red"
            lines.append(f'    "r{k}_{i}" -- "r{k}_{j}" [weight={abs(v):.6g}, color={color}];')
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------- commands

def _hyper(args):
    try:
        return Hyperparams(latent_dim=args.latent_dim, num_regimes=args.num_regimes, alpha=args.alpha,
                           lam=args.lam, max_iter=args.max_iter, tol=args.tol, seed=args.seed,
                           n_restarts=args.restarts, regime_init=args.regime_init)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_impute(args):
    names, X = read_csv(args.input)
    if X.shape[0] < 2:
        raise InputError(f"{args.input}: need at least two timesteps")
    hyper = _hyper(args)
    raw = PartialSeries.from_array(X.T)
    if args.no_zscore:
        series, stats = raw, None
    else:
        series, stats = zscore(raw)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        with _threads(args.threads):
            res = fit(series, hyper)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(str(exc)) from exc
    elapsed = time.perf_counter() - t0
    filled = res.imputed if stats is None else stats.inverse(res.imputed)
    filled = np.where(raw.mask, raw.values, filled)          # observed cells verbatim
    write_csv(out / "imputed.csv", names, filled.T)
    with (out / "regimes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "regime"])
        for t, k in enumerate(res.path.assignments):
            w.writerow([t, int(k)])
    doc = network_document(res, names, args.edge_threshold)
    _write_json(out / "networks.json", doc)
    if args.dot:
        (out / "networks.dot").write_text(network_dot(doc))
    report = res.report.to_dict()
    report.update({
        "hyperparams": {"latent_dim": hyper.latent_dim, "num_regimes": hyper.num_regimes,
                        "alpha": hyper.alpha, "lambda": hyper.lam, "max_iter": hyper.max_iter,
                        "tol": hyper.tol, "seed": hyper.seed, "restarts": hyper.n_restarts,
                        "regime_init": hyper.regime_init},
        "zscore": not args.no_zscore,
        "missing_rate": float(raw.missing_rate),
        "seconds": elapsed,
    })
    _write_json(out / "report.json", report)
    print(f"imputed {int((~raw.mask).sum())} cells in {res.report.iterations} iterations; "
          f"outputs in {out}")
    return EXIT_OK


def cmd_synth(args):
    try:
        spec = SynthSpec(T=args.T, N=args.N, L=args.L, switch_period=args.switch_period, seed=args.seed,
                         noise_is_variance=not args.noise_as_std, trend_time=args.trend_time)
        if not 0.0 < args.missing_rate < 1.0:
            raise ValueError("--missing-rate must lie in (0, 1)")
        data = generate_dataset(spec, args.pattern)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    obs = inject_missing(data.clean, args.missing_rate, seed=args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"f{i}" for i in range(spec.N)]
    write_csv(out / "clean.csv", names, data.clean.T)
    write_csv(out / "observed.csv", names, obs.to_nan_array().T)
    np.savetxt(out / "mask.csv", obs.mask.T.astype(int), fmt="%d", delimiter=",",
               header=",".join(names), comments="")
    with (out / "truth_regimes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "regime"])
        for t, k in enumerate(data.true_path.assignments):
            w.writerow([t, int(k)])
    meta = dict(data.metadata)
    meta.update({"missing_rate_target": args.missing_rate,
                 "missing_rate_actual": float(obs.missing_rate), "rng": RNG_ALGORITHM})
    _write_json(out / "metadata.json", meta)
    print(f"pattern {meta['pattern']}: T={spec.T} N={spec.N} missing {obs.missing_rate:.3f}; "
          f"files in {out}")
    return EXIT_OK


def _read_regimes(path):
    _, R = read_csv(path)
    if R.shape[1] == 2:
        R = R[:, 1]
    elif R.shape[1] != 1:
        raise InputError(f"{path}: expected a regime column")
    if np.isnan(R).any() or (R < 0).any() or (R != np.round(R)).any():
        raise InputError(f"{path}: regimes must be nonnegative integers")
    return R.astype(np.int64).ravel()


def cmd_eval(args):
    _, truth = read_csv(args.truth)
    _, imputed = read_csv(args.imputed)
    if truth.shape != imputed.shape:
        raise InputError(f"shape mismatch: truth {truth.shape} vs imputed {imputed.shape}")
    if args.eval_mask:
        _, m = read_csv(args.eval_mask)
        sel = m == 1
    elif args.mask:
        _, m = read_csv(args.mask)
        sel = m == 0                                         # evaluate the hidden cells
    else:
        raise InputError("give --eval-mask (1 = evaluate) or --mask (1 = observed)")
    if m.shape != truth.shape:
        raise InputError(f"shape mismatch: mask {m.shape} vs truth {truth.shape}")
    if np.isnan(truth[sel]).any() or np.isnan(imputed[sel]).any():
        raise InputError("evaluated cells must be present in both truth and imputed files")
    try:
        out = {"rmse": rmse(np.nan_to_num(truth), np.nan_to_num(imputed), sel)}
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.truth_regimes and args.est_regimes:
        a, b = _read_regimes(args.truth_regimes), _read_regimes(args.est_regimes)
        if a.shape != b.shape:
            raise InputError("regime files have different lengths")
        K = int(max(a.max(), b.max())) + 1
        out["regime_accuracy"] = regime_accuracy(a, b, K)
    print(json.dumps(out))
    return EXIT_OK


def cmd_bench(args):
    from .evaluation import scaling_benchmark
    with _threads(args.threads):
        rows = scaling_benchmark(lengths=tuple(args.lengths), n_iter=args.iters, N=args.N, L=args.L,
                                 seed=args.seed)
    base = rows[0]["median_seconds"]
    if args.json:
        print(json.dumps(rows))
    else:
        print(f"{'T':>8} {'seconds/iter':>14} {'ratio':>8}")
        for r in rows:
            print(f"{r['T']:>8d} {r['median_seconds']:>14.4f} {r['median_seconds'] / base:>8.2f}")
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="missnet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    imp = sub.add_parser("impute", help="fit the model to a CSV and write imputations and networks")
    imp.add_argument("input", help="CSV, one row per timestep, header of feature names")
    imp.add_argument("-o", "--output-dir", default="missnet_out", help="default: %(default)s")
    imp.add_argument("--num-regimes", type=int, default=1, help="K (default: %(default)s)")
    imp.add_argument("--latent-dim", type=int, default=10, help="L (default: %(default)s)")
    imp.add_argument("--alpha", type=float, default=0.5, help="network/temporal trade-off (default: %(default)s)")
    imp.add_argument("--lambda", dest="lam", type=float, default=1.0, help="sparsity weight (default: %(default)s)")
    imp.add_argument("--max-iter", type=int, default=50, help="default: %(default)s")
    imp.add_argument("--tol", type=float, default=1e-4, help="relative objective change (default: %(default)s)")
    imp.add_argument("--restarts", type=int, default=1, help="default: %(default)s")
    imp.add_argument("--seed", type=int, default=0, help="default: %(default)s")
    imp.add_argument("--threads", type=int, default=0, help="BLAS threads, 0 = library default")
    imp.add_argument("--regime-init", choices=("correlation", "contiguous"), default="correlation",
                     help="starting regime path (default: %(default)s)")
    imp.add_argument("--no-zscore", action="store_true", help="fit on raw values instead of z-scores")
    imp.add_argument("--edge-threshold", type=float, default=1e-6,
                     help="export |value| above this (default: %(default)s)")
    imp.add_argument("--dot", action="store_true", help="also write networks.dot (Graphviz)")
    imp.set_defaults(func=cmd_impute)

    syn = sub.add_parser("synth", help="generate a synthetic PatternA/PatternB dataset with missing blocks")
    syn.add_argument("--pattern", choices=("A", "B"), default="A")
    syn.add_argument("--T", type=int, default=1000)
    syn.add_argument("--N", type=int, default=50)
    syn.add_argument("--L", type=int, default=10)
    syn.add_argument("--switch-period", type=int, default=200)
    syn.add_argument("--missing-rate", type=float, default=0.2)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--noise-as-std", action="store_true", help="read the 0.3 noise level as a std")
    syn.add_argument("--trend-time", choices=("normalized", "index"), default="normalized")
    syn.add_argument("-o", "--output-dir", default="synth_out")
    syn.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="score an imputation; prints JSON")
    ev.add_argument("truth")
    ev.add_argument("imputed")
    ev.add_argument("--mask", help="observation mask CSV (1 = observed); hidden cells are scored")
    ev.add_argument("--eval-mask", help="CSV with 1 on the cells to score; overrides --mask")
    ev.add_argument("--truth-regimes")
    ev.add_argument("--est-regimes")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="per-iteration time against series length on PatternA data")
    be.add_argument("--lengths", type=int, nargs="+", default=[1000, 2000, 4000, 8000])
    be.add_argument("--iters", type=int, default=1, help="timed iterations per length (median)")
    be.add_argument("--N", type=int, default=50)
    be.add_argument("--L", type=int, default=10)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--threads", type=int, default=0)
    be.add_argument("--json", action="store_true")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
