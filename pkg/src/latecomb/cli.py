"""Command-line interface: ``latecomb {benchmark,fit,predict,generate}``.

Exit codes: 0 on success, 1 on runtime failures (bad data, singular fits,
I/O), 2 on usage errors. Every failure prints one line to stderr of the form
``latecomb: error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import estimators as est
from .datasets import (
    SeparateDatasets,
    combine_outcome,
    combine_treatment,
    load_separate_datasets,
    read_covariates_csv,
)
from .errors import InputError, LateError
from .evaluation import BenchmarkSettings, derive_bases, emit_report, run_benchmark
from .model_selection import SearchSpace, criterion_dls, criterion_dwls, criterion_nu, random_search
from .psd import GENERAL, ONE_EXPERIMENT, fit_psd, psd_objective
from .synthetic import SHAPES, SyntheticConfig, generate_separate_datasets, save_bundle

log = logging.getLogger("latecomb")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MODEL_FORMAT = "latecomb-model"
SEED_ENV = "LATE_SEED"

DEFAULT_SHAPES = list(SHAPES)
DEFAULT_DIMS = [1, 5, 10]
DEFAULT_SIZES = [10_000, 50_000]


class UsageError(Exception):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: str, message: str) -> None:
    text = " ".join(str(message).split())
    print(f"latecomb: error[{code}]: {text}", file=sys.stderr)


# --- argument types ----------------------------------------------------------------


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return v


def _trim(text):
    v = _positive_float(text)
    if v > 0.5:
        raise argparse.ArgumentTypeError(f"trim threshold must lie in (0, 0.5], got {text}")
    return v


def _shape(text):
    if text not in SHAPES:
        raise argparse.ArgumentTypeError(f"unknown shape {text!r}; valid shapes: {', '.join(SHAPES)}")
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latecomb", description="LATE estimation from separately observed datasets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help=f"base seed (overridden by ${SEED_ENV})")

    b = sub.add_parser("benchmark", parents=[common], help="run the synthetic benchmark grid")
    b.add_argument("--shape", nargs="+", type=_shape, default=DEFAULT_SHAPES, metavar="SHAPE")
    b.add_argument("--qx", nargs="+", type=_positive_int, default=DEFAULT_DIMS, metavar="Q")
    b.add_argument("--n", nargs="+", type=_positive_int, default=DEFAULT_SIZES, metavar="N")
    b.add_argument("--gamma", nargs="+", type=float, default=[0.0], metavar="G")
    b.add_argument("--trials", type=_positive_int, default=100)
    b.add_argument("--budget", type=_positive_int, default=100)
    b.add_argument("--centers", type=_positive_int, default=100, help="kernel centers per basis")
    b.add_argument("--trim", type=_trim, default=est.DEFAULT_TRIM)
    b.add_argument("--test-n", type=_positive_int, default=10_000)
    b.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    b.add_argument("--format", choices=("csv", "json", "markdown"), default="csv")
    b.add_argument("--no-timing", action="store_true", help="omit wall-clock timings so reruns compare byte-identical")
    b.add_argument("--output", "-o", required=True, type=Path)
    b.set_defaults(func=cmd_benchmark)

    f = sub.add_parser("fit", parents=[common], help="tune and fit one estimator on CSV datasets")
    f.add_argument("--estimator", required=True, choices=est.ESTIMATORS)
    f.add_argument("--data", required=True, type=Path, help="JSON dataset config (training)")
    f.add_argument("--val-data", type=Path, help="JSON dataset config for validation; default: 50/50 split")
    f.add_argument("--trim", type=_trim, default=est.DEFAULT_TRIM)
    f.add_argument("--design", choices=(ONE_EXPERIMENT, GENERAL), default=ONE_EXPERIMENT)
    f.add_argument("--h", type=_positive_float, help="fix the bandwidth instead of searching")
    f.add_argument("--lambda", dest="lam", type=_positive_float, help="fix the regularization")
    f.add_argument("--psd-h", type=_positive_float)
    f.add_argument("--psd-lambda", type=_positive_float)
    f.add_argument("--budget", type=_positive_int, default=100)
    f.add_argument("--centers", type=_positive_int, default=100)
    f.add_argument("--output", "-o", required=True, type=Path)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="apply a fitted model to a covariate CSV")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--covariates", required=True, type=Path)
    p.add_argument("--output", "-o", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic train/validation/test bundle")
    g.add_argument("--shape", type=_shape, required=True)
    g.add_argument("--qx", type=_positive_int, required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--gamma", type=float, default=0.0)
    g.add_argument("--test-n", type=_positive_int, default=10_000)
    g.add_argument("--output", "-o", required=True, type=Path)
    g.set_defaults(func=cmd_generate)
    return parser


# --- subcommands ------------------------------------------------------------------


def cmd_benchmark(args) -> int:
    cells = [
        SyntheticConfig(shape, q, n, gamma)
        for shape, q, n, gamma in itertools.product(args.shape, args.qx, args.n, args.gamma)
    ]
    settings = BenchmarkSettings(
        trials=args.trials,
        budget=args.budget,
        seed=args.seed,
        n_centers=args.centers,
        trim=args.trim,
        test_n=args.test_n,
    )
    report = run_benchmark(cells, settings, jobs=args.jobs)
    emit_report(report, args.format, args.output, include_timing=not args.no_timing)
    log.info("wrote %s", args.output)
    return EXIT_OK


def split_halves(data: SeparateDatasets, seed: int):
    """Randomly split every sample set in two halves (train, validation).

    Both halves keep the original ``p_d_hat``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))

    def halves(n):
        if n < 2:
            raise InputError(f"cannot split a sample set of {n} row(s); pass --val-data")
        perm = rng.permutation(n)
        return perm[n // 2 :], perm[: n // 2]

    cov, ys, xs = ([], []), ([], []), ([], [])
    for k in (0, 1):
        for side, idx in enumerate(halves(data.treated_cov[k].shape[0])):
            cov[side].append(data.treated_cov[k][idx])
        for side, idx in enumerate(halves(data.outcome_y[k].shape[0])):
            ys[side].append(data.outcome_y[k][idx])
            xs[side].append(data.outcome_x[k][idx])
    return tuple(
        SeparateDatasets(tuple(cov[s]), tuple(ys[s]), tuple(xs[s]), data.p_d_hat) for s in (0, 1)
    )


def _space(h, lam, budget, seed) -> SearchSpace:
    """Search space with fixed values pinned; a fully pinned space needs one evaluation."""
    h_range = (h, h) if h is not None else (1.0, 10.0)
    lam_range = (lam, lam) if lam is not None else (1e-5, 1e5)
    if h is not None and lam is not None:
        budget = 1
    return SearchSpace(h_range=h_range, lam_range=lam_range, budget=budget, seed=seed)


def _search(fit_fn, crit_fn, space, train, val):
    res = random_search(fit_fn, crit_fn, space, train, val)
    return res.best_fit, res.best_params


def fit_from_config(args, train: SeparateDatasets, val: SeparateDatasets):
    """Tune (unless pinned) and fit the requested estimator; returns ``(fit, params)``."""
    if train.dim != val.dim:
        raise InputError(f"training data has q_x={train.dim} but validation data has q_x={val.dim}")
    tr = (combine_treatment(train), combine_outcome(train))
    va = (combine_treatment(val), combine_outcome(val))
    bases, seeds = derive_bases(tr[0].x, args.centers, args.seed)
    params = {}
    psd = None
    if args.estimator != est.DLS:
        psd, params["psd"] = _search(
            lambda d, h, lam: fit_psd(d[0], d[1], bases["psd"].with_bandwidth(h), lam, args.design),
            lambda fit, v: psd_objective(fit, v[0], v[1]),
            _space(args.psd_h, args.psd_lambda, args.budget, seeds[0]),
            tr,
            va,
        )
    space = _space(args.h, args.lam, args.budget, seeds[1])
    if args.estimator in (est.DWLS, est.IWLS):
        trim = args.trim if args.estimator == est.IWLS else None

        def fit_fn(d, h, lam):
            basis = bases["f"].with_bandwidth(h)
            if trim is None:
                return est.fit_dwls(d[0], d[1], basis, psd, lam)
            return est.fit_iwls(d[0], d[1], basis, psd, trim, lam)

        fit, params["f"] = _search(fit_fn, lambda fit, v: criterion_dwls(fit, psd, v[0], v[1]), space, tr, va)
    elif args.estimator == est.SEP:
        nu, params["nu"] = _search(
            lambda d, h, lam: est.fit_nu(d[1], bases["nu"].with_bandwidth(h), lam),
            lambda model, v: criterion_nu(model, v[1]),
            space,
            tr,
            va,
        )
        fit = est.SepFit(nu, psd, args.trim)
    else:
        fit, params["f"] = _search(
            lambda d, h, lam: est.fit_dls(
                d[0], d[1], bases["f"].with_bandwidth(h), bases["g"].with_bandwidth(h), lam, lam
            ),
            lambda fit, v: criterion_dls(fit, v[0], v[1]),
            space,
            tr,
            va,
        )
    return fit, params


def cmd_fit(args) -> int:
    data = load_separate_datasets(args.data)
    if args.val_data is not None:
        train, val = data, load_separate_datasets(args.val_data)
    else:
        train, val = split_halves(data, args.seed)
    fit, params = fit_from_config(args, train, val)
    doc = {
        "format": MODEL_FORMAT,
        "version": __version__,
        "design": args.design,
        "seed": args.seed,
        "selected": {k: {"h": v[0], "lambda": v[1]} for k, v in params.items()},
        **est.fit_to_dict(fit),
    }
    _write_text(args.output, json.dumps(doc, indent=2) + "\n")
    log.info("wrote %s", args.output)
    return EXIT_OK


def load_model(path: Path):
    if not path.is_file():
        raise InputError(f"{path}: model file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc.msg}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise InputError(f"{path}: not a {MODEL_FORMAT} file")
    try:
        return est.fit_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: incomplete model file ({exc})") from None


def cmd_predict(args) -> int:
    fit = load_model(args.model)
    q = est.model_dim(fit)
    if args.covariates.is_file() and args.covariates.stat().st_size == 0:
        x = np.zeros((0, q))
    else:
        x = read_covariates_csv(args.covariates, allow_extra=True)
    if x.shape[1] != q:
        raise InputError(
            f"{args.covariates}: covariates have q_x={x.shape[1]} but the model expects q_x={q}"
        )
    pred = fit.predict(x) if x.shape[0] else np.zeros(0)
    lines = ["prediction"] + [repr(float(v)) for v in pred]
    _write_text(args.output, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = SyntheticConfig(args.shape, args.qx, args.n, args.gamma, args.seed, args.test_n)
    save_bundle(generate_separate_datasets(config), args.output)
    log.info("wrote bundle to %s", args.output)
    return EXIT_OK


def _write_text(path: Path, text: str) -> None:
    if path.parent and not path.parent.exists():
        raise OSError(f"directory {path.parent} does not exist")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# --- entry point --------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None and hasattr(args, "seed"):
            try:
                args.seed = int(env_seed)
            except ValueError:
                raise UsageError(f"{SEED_ENV}={env_seed!r} is not an integer") from None
    except UsageError as exc:
        _fail(UsageError.code, exc)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except LateError as exc:
        _fail(exc.code, exc)
    except OSError as exc:
        _fail("io", exc)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
