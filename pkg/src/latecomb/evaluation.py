"""Scoring, paired significance tests, benchmark orchestration and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

from . import estimators as est
from .datasets import combine_outcome, combine_treatment
from .errors import InputError, LateError
from .kernel_basis import KernelBasis, select_centers
from .model_selection import (
    SearchSpace,
    criterion_dls,
    criterion_dwls,
    criterion_nu,
    random_search,
)
from .psd import ONE_EXPERIMENT, fit_psd, psd_objective
from .synthetic import SyntheticConfig, generate_separate_datasets, true_psd

log = logging.getLogger(__name__)

ESTIMATOR_ORDER = (est.DWLS, est.IWLS, est.SEP, est.DLS)
LABELS = {est.DWLS: "DWLS", est.IWLS: "IWLS", est.SEP: "SEP", est.DLS: "DLS"}
EXACT_MAX_N = 25
SIGNIFICANCE = 0.05


def mse(predictions, truth) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise InputError(f"length mismatch: {p.shape[0]} predictions vs {t.shape[0]} targets")
    if p.size == 0:
        raise InputError("mse needs at least one value")
    return float(np.mean((p - t) ** 2))


# --- Wilcoxon signed-rank --------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str
    undefined: bool = False


def _exact_p(doubled_ranks, w2) -> float:
    """Two-sided p-value of ``2 W+`` by counting all sign assignments."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    probs = counts / counts.sum()
    lower = probs[: w2 + 1].sum()
    upper = probs[w2:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def _approx_p(ranks, w_plus) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped. ``method="auto"`` uses the exact null
    distribution (midranks for ties) when at most 25 differences remain and the
    normal approximation with tie and continuity corrections otherwise.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InputError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if method not in ("auto", "exact", "approx"):
        raise InputError(f"unknown method {method!r}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "none", undefined=True)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        doubled = [int(round(2 * r)) for r in ranks]
        return WilcoxonResult(w_plus, _exact_p(doubled, int(round(2 * w_plus))), n, "exact")
    return WilcoxonResult(w_plus, _approx_p(ranks, w_plus), n, "approx")


# --- benchmark -----------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSettings:
    trials: int = 100
    budget: int = 100
    seed: int = 0
    n_centers: int = 100
    trim: float = est.DEFAULT_TRIM
    design: str = ONE_EXPERIMENT
    test_n: int = 10_000


@dataclass
class TrialResult:
    trial: int
    mse: dict
    seconds: dict
    errors: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    points: dict = None


BASIS_ROLES = ("psd", "f", "g", "nu")


def derive_bases(pooled_x, n_centers: int, seed: int):
    """Independent center draws for every basis role plus five search seeds.

    Centers come from ``pooled_x`` (the treatment-side training covariates).
    Bandwidths are placeholders; callers set them with ``with_bandwidth``.
    """
    aux = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    center_rng = np.random.default_rng(aux[0])
    bases = {role: KernelBasis(select_centers(pooled_x, n_centers, center_rng), 1.0) for role in BASIS_ROLES}
    return bases, [int(s) for s in aux[1].generate_state(5)]


def _trial_seed(base_seed: int, trial: int) -> int:
    return base_seed + trial


def run_trial(cell: SyntheticConfig, trial: int, settings: BenchmarkSettings, keep_points=False) -> TrialResult:
    """Generate data, tune every estimator on validation, score on the test set."""
    seed = _trial_seed(settings.seed, trial)
    try:
        bundle = generate_separate_datasets(
            SyntheticConfig(cell.shape, cell.q_x, cell.n, cell.gamma, seed, settings.test_n)
        )
    except LateError as exc:
        failed = {name: math.nan for name in ESTIMATOR_ORDER}
        return TrialResult(trial, failed, {}, {"data": f"{exc.code}: {exc}"})
    train = (combine_treatment(bundle.train), combine_outcome(bundle.train))
    val = (combine_treatment(bundle.validation), combine_outcome(bundle.validation))

    bases, search_seeds = derive_bases(train[0].x, settings.n_centers, seed)

    def space(i):
        return SearchSpace(budget=settings.budget, seed=int(search_seeds[i]))

    fits, mses, seconds, errors, params = {}, {}, {}, {}, {}
    trim, design = settings.trim, settings.design

    t0 = time.perf_counter()
    psd = None
    try:
        res = random_search(
            lambda tr, h, lam: fit_psd(tr[0], tr[1], bases["psd"].with_bandwidth(h), lam, design),
            lambda fit, v: psd_objective(fit, v[0], v[1]),
            space(0),
            train,
            val,
        )
        psd = res.best_fit
        params["psd"] = res.best_params
    except LateError as exc:
        errors["psd"] = f"{exc.code}: {exc}"
    seconds["psd"] = time.perf_counter() - t0

    def tune(name, i, fit_fn, crit_fn, finish=lambda f: f):
        start = time.perf_counter()
        try:
            if psd is None and name != est.DLS:
                raise InputError("PSD estimation failed")
            res = random_search(fit_fn, crit_fn, space(i), train, val)
            fits[name] = finish(res.best_fit)
            params[name] = res.best_params
        except LateError as exc:
            errors[name] = f"{exc.code}: {exc}"
        seconds[name] = time.perf_counter() - start

    tune(
        est.DWLS,
        1,
        lambda tr, h, lam: est.fit_dwls(tr[0], tr[1], bases["f"].with_bandwidth(h), psd, lam),
        lambda fit, v: criterion_dwls(fit, psd, v[0], v[1]),
    )
    tune(
        est.IWLS,
        2,
        lambda tr, h, lam: est.fit_iwls(tr[0], tr[1], bases["f"].with_bandwidth(h), psd, trim, lam),
        lambda fit, v: criterion_dwls(fit, psd, v[0], v[1]),
    )
    tune(
        est.SEP,
        3,
        lambda tr, h, lam: est.fit_nu(tr[1], bases["nu"].with_bandwidth(h), lam),
        lambda model, v: criterion_nu(model, v[1]),
        finish=lambda nu: est.SepFit(nu, psd, trim),
    )
    tune(
        est.DLS,
        4,
        lambda tr, h, lam: est.fit_dls(
            tr[0], tr[1], bases["f"].with_bandwidth(h), bases["g"].with_bandwidth(h), lam, lam
        ),
        lambda fit, v: criterion_dls(fit, v[0], v[1]),
    )

    points = None
    if keep_points:
        points = {"psd": true_psd(bundle.test_x, cell.gamma).tolist()}
    for name in ESTIMATOR_ORDER:
        if name not in fits:
            mses[name] = math.nan
            continue
        pred = fits[name].predict(bundle.test_x)
        mses[name] = mse(pred, bundle.test_mu)
        if keep_points:
            points[name] = ((pred - bundle.test_mu) ** 2).tolist()
    return TrialResult(trial, mses, seconds, errors, params, points)


@dataclass
class CellResult:
    """All trials of one grid cell. ``per_trial`` is ``trials x estimators`` (NaN = failed)."""

    config: dict
    per_trial: np.ndarray
    fit_seconds: np.ndarray
    errors: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict:
        return {name: _nanstat(np.nanmean, col) for name, col in zip(ESTIMATOR_ORDER, self.per_trial.T)}

    @property
    def std(self) -> dict:
        return {name: _nanstat(np.nanstd, col) for name, col in zip(ESTIMATOR_ORDER, self.per_trial.T)}

    @property
    def n_failed(self) -> dict:
        return {name: int(np.sum(np.isnan(col))) for name, col in zip(ESTIMATOR_ORDER, self.per_trial.T)}

    @property
    def best(self):
        means = {k: v for k, v in self.mean.items() if not math.isnan(v)}
        return min(means, key=means.get) if means else None

    @property
    def pairwise_p(self) -> dict:
        """Wilcoxon p-value of every estimator against the best, on trials where both succeeded."""
        best = self.best
        out = {}
        if best is None:
            return out
        j_best = ESTIMATOR_ORDER.index(best)
        for j, name in enumerate(ESTIMATOR_ORDER):
            a, b = self.per_trial[:, j], self.per_trial[:, j_best]
            ok = ~(np.isnan(a) | np.isnan(b))
            if name == best or not ok.any():
                out[name] = 1.0
            else:
                out[name] = wilcoxon_signed_rank(a[ok], b[ok]).p_value
        return out


def _nanstat(fn, col):
    if np.all(np.isnan(col)):
        return math.nan
    return float(fn(col))


@dataclass
class BenchmarkReport:
    settings: dict
    cells: list

    def cell(self, shape, q_x, n, gamma) -> CellResult:
        for c in self.cells:
            cfg = c.config
            if (cfg["shape"], cfg["q_x"], cfg["n"], cfg["gamma"]) == (shape, q_x, n, gamma):
                return c
        raise KeyError((shape, q_x, n, gamma))

    def to_dict(self, include_timing=True) -> dict:
        cells = []
        for c in self.cells:
            d = {
                "config": dict(c.config),
                "per_trial": _nan_to_none(c.per_trial.tolist()),
                "mean": _nan_to_none(c.mean),
                "std": _nan_to_none(c.std),
                "n_failed": c.n_failed,
                "best": c.best,
                "pairwise_p": c.pairwise_p,
                "errors": {str(k): v for k, v in c.errors.items()},
            }
            if include_timing:
                d["fit_seconds"] = c.fit_seconds.tolist()
            cells.append(d)
        return {"estimators": list(ESTIMATOR_ORDER), "settings": dict(self.settings), "cells": cells}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        cells = []
        for c in d["cells"]:
            per = np.array(_none_to_nan(c["per_trial"]), dtype=np.float64).reshape(-1, len(ESTIMATOR_ORDER))
            secs = np.array(c.get("fit_seconds", np.zeros_like(per).tolist()), dtype=np.float64).reshape(per.shape)
            errors = {int(k): v for k, v in c.get("errors", {}).items()}
            cells.append(CellResult(dict(c["config"]), per, secs, errors))
        return cls(dict(d["settings"]), cells)


def _nan_to_none(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    return obj


def _none_to_nan(obj):
    if obj is None:
        return math.nan
    if isinstance(obj, list):
        return [_none_to_nan(v) for v in obj]
    return obj


def _run_one(args):
    cell, trial, settings = args
    return run_trial(cell, trial, settings)


def run_benchmark(cells, settings: BenchmarkSettings, jobs: int = 1) -> BenchmarkReport:
    """Run ``settings.trials`` trials for every grid cell.

    Trial ``i`` of every cell uses data seed ``settings.seed + i``. Failures
    inside a trial are recorded per estimator and do not abort the run.
    """
    cells = list(cells)
    if settings.trials < 1:
        raise InputError(f"trials must be >= 1, got {settings.trials}")
    tasks = [(cell, t, settings) for cell in cells for t in range(settings.trials)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_run_one(task))
            log.info("cell %s trial %d: %s", task[0], task[1], results[-1].mse)
    out = []
    for ci, cell in enumerate(cells):
        chunk = results[ci * settings.trials : (ci + 1) * settings.trials]
        per = np.array([[r.mse[name] for name in ESTIMATOR_ORDER] for r in chunk])
        secs = np.array([[r.seconds.get(name, 0.0) for name in ESTIMATOR_ORDER] for r in chunk])
        errors = {r.trial: r.errors for r in chunk if r.errors}
        config = {"shape": cell.shape, "q_x": cell.q_x, "n": cell.n, "gamma": float(cell.gamma)}
        out.append(CellResult(config, per.reshape(len(chunk), len(ESTIMATOR_ORDER)), secs, errors))
    return BenchmarkReport(asdict(settings), out)


# --- report emission ---------------------------------------------------------------

CSV_COLUMNS = ("shape", "q_x", "n", "gamma", "trial", "estimator", "mse", "fit_seconds")


def report_csv(report: BenchmarkReport, include_timing=True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS if include_timing else CSV_COLUMNS[:-1])
    for c in report.cells:
        cfg = c.config
        for t in range(c.per_trial.shape[0]):
            for j, name in enumerate(ESTIMATOR_ORDER):
                v = c.per_trial[t, j]
                row = [cfg["shape"], cfg["q_x"], cfg["n"], repr(cfg["gamma"]), t, name, "" if math.isnan(v) else repr(float(v))]
                if include_timing:
                    row.append(f"{c.fit_seconds[t, j]:.3f}")
                w.writerow(row)
    return buf.getvalue()


def report_markdown(report: BenchmarkReport) -> str:
    head = "| Shape | n | q_x | gamma | " + " | ".join(LABELS[n] for n in ESTIMATOR_ORDER) + " |"
    sep = "|" + "---|" * (4 + len(ESTIMATOR_ORDER))
    lines = [head, sep]
    for c in report.cells:
        cfg = c.config
        mean, std, best = c.mean, c.std, c.best
        cols = []
        for name in ESTIMATOR_ORDER:
            if math.isnan(mean[name]):
                cols.append("n/a")
                continue
            cell = f"{mean[name]:.4g} ± {std[name]:.4g}"
            if c.n_failed[name]:
                cell += f" ({c.n_failed[name]} failed)"
            cols.append(f"**{cell}**" if name == best else cell)
        lines.append(f"| {cfg['shape']} | {cfg['n']} | {cfg['q_x']} | {cfg['gamma']:g} | " + " | ".join(cols) + " |")
    trials = report.settings.get("trials")
    lines.append("")
    lines.append(f"Raw (unscaled) test MSE, mean ± std over {trials} trials; bold marks the lowest mean per row.")
    return "\n".join(lines) + "\n"


def emit_report(report: BenchmarkReport, fmt: str, path, include_timing=True) -> Path:
    """Write ``report`` as csv, json or markdown. Markdown never carries timings."""
    path = Path(path)
    if fmt == "csv":
        text = report_csv(report, include_timing)
    elif fmt == "json":
        text = json.dumps(report.to_dict(include_timing), indent=2) + "\n"
    elif fmt == "markdown":
        text = report_markdown(report)
    else:
        raise InputError(f"unknown report format {fmt!r}; expected csv, json or markdown")
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not write report to {path}: {exc.strerror}") from exc
    return path


def load_report(path) -> BenchmarkReport:
    return BenchmarkReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def psd_scatter_csv(trial: TrialResult, path) -> Path:
    """Per-test-point squared error against the true PSD, for scatter plots."""
    if trial.points is None:
        raise InputError("trial was run without keep_points=True")
    names = [n for n in ESTIMATOR_ORDER if n in trial.points]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["psd"] + [f"sq_err_{n}" for n in names])
        for i, p in enumerate(trial.points["psd"]):
            w.writerow([repr(p)] + [repr(trial.points[n][i]) for n in names])
    return Path(path)
