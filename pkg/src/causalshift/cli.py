"""Command-line front end: CSV in, JSON out.

Exit codes: 0 success, 2 bad input, 3 numerical failure. JSON goes to
``--output`` (or standard output); one-line summaries and errors go to
standard error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import anm, conditional_anm, core, shift, spectral, sslbench
from .errors import CausalShiftError, InputError, NumericError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _bandwidth(text: str):
    if text == core.AUTO:
        return core.AUTO
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be 'auto' or a positive number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return value


def _anm_config(args) -> anm.AnmConfig:
    return anm.AnmConfig(bandwidth=args.bandwidth, alpha=args.alpha, permutations=args.permutations, seed=args.seed)


def _clean(obj):
    """Make a result JSON-safe: numpy scalars to Python, NaN and infinities to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- commands -------------------------------------------------------------------------


def cmd_direction(args):
    data = core.Dataset.from_csv(args.input)
    res = anm.infer_direction(data, config=_anm_config(args))
    return res.to_dict(), f"direction: {res.verdict.value}"


def cmd_fit_anm(args):
    data = core.Dataset.from_csv(args.input)
    fit = anm.fit_anm(data, anm.Direction(args.direction), _anm_config(args))
    return fit.to_dict(args.grid_points), f"fit-anm: independence p-value {fit.independence_pvalue:.4g}"


def cmd_localize(args):
    before = core.Dataset.from_csv(args.before)
    after = core.Dataset.from_csv(args.after)
    cfg = shift.AdaptConfig(anm=_anm_config(args), grid_size=args.grid_size)
    diag = shift.localize_samples(before.ys, after.ys, cfg)
    return diag.to_dict(), f"localize: {diag.verdict.value}"


def cmd_adapt(args):
    train = core.Dataset.from_csv(args.train)
    new = core.Dataset.from_csv(args.new)
    if args.scenario == "covariate-shift":
        return _covariate_shift(train, new, args)
    cfg = shift.AdaptConfig(anm=_anm_config(args), grid_size=args.grid_size)
    model = shift.adapt_output_change(train, new.ys, shift.ModelKind(args.direction), cfg)
    verdict = model.diagnosis.verdict.value if model.diagnosis is not None else "n/a"
    return model.to_dict(args.grid_points), f"adapt: {model.status.value} ({verdict})"


def _covariate_shift(train, new, args):
    # both input densities on one lattice, so the weights are a ratio of like with like
    pooled = np.concatenate([train.xs, new.xs])
    h = core.silverman_bandwidth(pooled)
    step = (float(np.ptp(pooled)) + 16 * h) / (args.grid_size - 1)
    old_d = core.estimate_density(train.xs, bandwidth=h, step=step, tails=8)
    new_d = core.estimate_density(new.xs, bandwidth=h, step=step, tails=8)
    cfg = shift.CovariateShiftConfig(bandwidth=args.bandwidth, w_max=args.w_max)
    fit = shift.covariate_shift_refit(train, new_d, old_d, cfg)
    grid = np.linspace(float(new.xs.min()), float(new.xs.max()), args.grid_points)
    out = {"scenario": "covariate-shift", **fit.to_dict(), "mechanism": {"x": grid.tolist(), "phi": fit(grid).tolist()}}
    return out, f"adapt: covariate shift, effective sample size {fit.effective_sample_size:.1f}"


def cmd_transfer(args):
    datasets = [core.Dataset.from_csv(p) for p in args.inputs]
    fit = conditional_anm.fit_shared_anm(datasets, _anm_config(args), anm.Direction(args.direction))
    out = {"shared": fit.to_dict(args.grid_points)}
    if args.x is not None:
        mean, noise = conditional_anm.transfer_predict(fit, args.target, args.x)
        out["prediction"] = {"target": args.target, "x": args.x, "mean": mean, "noise": noise.to_dict()}
    return out, f"transfer: {len(datasets)} dataset(s)"


def cmd_ssl_bench(args):
    rep = sslbench.run_benchmark(
        args.category,
        trials=args.trials,
        n_labeled=args.n_labeled,
        n_unlabeled=args.n_unlabeled,
        seed=args.seed,
        base=args.base,
        confidence_threshold=args.confidence_threshold,
        max_rounds=args.max_rounds,
    )
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(rep.to_csv())
    summary = f"ssl-bench: mean relative decrease {rep.mean_relative_decrease:.4f}, p = {rep.wilcoxon_pvalue:.4g}"
    return rep.to_dict(), summary


def cmd_invert(args):
    try:
        with open(args.input, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.input}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(payload, dict) or "columns" not in payload or "marginal" not in payload:
        raise InputError('invert input must be a JSON object with "columns" and "marginal"')
    try:
        m = core.StochasticMatrix.from_columns(payload["columns"])
        q = core.DiscreteDistribution(np.asarray(payload["marginal"], float))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"invert input: {exc}") from None
    res = spectral.invert_stochastic_matrix(m, q)
    return {"distribution": res.distribution.probs.tolist(), "residual": res.residual}, "invert: ok"


# -- parser ------------------------------------------------------------------------------


def _common(p, anm_flags=True):
    p.add_argument("--output", "-o", help="write JSON here instead of standard output")
    p.add_argument("--seed", type=int, default=0, help="master seed; every random stream derives from it")
    if anm_flags:
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--permutations", type=int, default=499)
        p.add_argument("--bandwidth", type=_bandwidth, default=core.AUTO)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalshift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = _common(sub.add_parser("direction", help="infer which column causes the other"))
    p.add_argument("input")
    p.set_defaults(func=cmd_direction)

    p = _common(sub.add_parser("fit-anm", help="fit an additive noise model in one direction"))
    p.add_argument("input")
    p.add_argument("--direction", choices=[d.value for d in anm.Direction], default=anm.Direction.X_TO_Y.value)
    p.add_argument("--grid-points", type=int, default=101)
    p.set_defaults(func=cmd_fit_anm)

    p = _common(sub.add_parser("localize", help="did the cause marginal or the noise change? (y columns)"))
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--grid-size", type=int, default=1024)
    p.set_defaults(func=cmd_localize)

    p = _common(sub.add_parser("adapt", help="update a model after a distribution shift"))
    p.add_argument("train")
    p.add_argument("new", help="CSV from the shifted distribution (y column: new outputs; x column: new inputs)")
    p.add_argument("--scenario", choices=["output-change", "covariate-shift"], default="output-change")
    p.add_argument("--direction", choices=[k.value for k in shift.ModelKind], default=shift.ModelKind.CAUSAL.value)
    p.add_argument("--grid-size", type=int, default=1024)
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--w-max", type=float, default=10.0)
    p.set_defaults(func=cmd_adapt)

    p = _common(sub.add_parser("transfer", help="one mechanism shared by several datasets"))
    p.add_argument("inputs", nargs="+")
    p.add_argument("--direction", choices=[d.value for d in anm.Direction], default=anm.Direction.X_TO_Y.value)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--x", type=float, default=None, help="predict the target dataset's conditional at this input")
    p.add_argument("--grid-points", type=int, default=101)
    p.set_defaults(func=cmd_transfer)

    p = _common(sub.add_parser("ssl-bench", help="self-training against its base classifier"), anm_flags=False)
    p.add_argument("--category", choices=[c.value for c in sslbench.Category], required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--n-labeled", type=int, default=10)
    p.add_argument("--n-unlabeled", type=int, default=500)
    p.add_argument("--base", choices=sorted(sslbench.BASES), default="generative")
    p.add_argument("--confidence-threshold", type=float, default=0.8)
    p.add_argument("--max-rounds", type=int, default=10)
    p.add_argument("--csv", help="also write the per-trial table here")
    p.set_defaults(func=cmd_ssl_bench)

    p = _common(sub.add_parser("invert", help="recover P(cause) from P(effect) and P(effect | cause)"), anm_flags=False)
    p.add_argument("input", help='JSON: {"columns": [[P(e | c=0)...], ...], "marginal": [P(e)...]}')
    p.set_defaults(func=cmd_invert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result, summary = args.func(args)
        text = json.dumps(_clean(result), indent=2, sort_keys=True, allow_nan=False) + "\n"
        if args.output:
            with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CausalShiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(summary, file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
