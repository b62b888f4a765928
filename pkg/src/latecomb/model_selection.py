"""Validation criteria for each estimator and a seeded random hyperparameter search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateFitError, ExhaustedSearchError, InputError, SingularSystemError
from .estimators import DWLS, IWLS, DlsFit, WeightedFit, _row_weights
from .psd import psd_objective

# Fit failures that score +inf instead of aborting the search.
RECOVERABLE = (SingularSystemError, DegenerateFitError, FloatingPointError)


@dataclass(frozen=True)
class SearchSpace:
    """Bandwidth drawn uniformly from ``h_range``; lambda log-uniformly from ``lam_range``.

    A degenerate range (``lo == hi``) pins that hyperparameter.
    """

    h_range: tuple = (1.0, 10.0)
    lam_range: tuple = (1e-5, 1e5)
    budget: int = 100
    seed: int = 0

    def __post_init__(self):
        h_lo, h_hi = self.h_range
        l_lo, l_hi = self.lam_range
        if not (0 < h_lo <= h_hi):
            raise InputError(f"invalid bandwidth range {self.h_range}")
        if not (0 < l_lo <= l_hi):
            raise InputError(f"invalid regularization range {self.lam_range}")
        if self.budget < 1:
            raise InputError(f"search budget must be >= 1, got {self.budget}")

    def candidates(self):
        """Latin-hypercube draws: each marginal is split into ``budget`` equal
        strata and every stratum receives exactly one sample, so each candidate
        is still uniform in ``h`` and log-uniform in lambda."""
        rng = np.random.default_rng(self.seed)
        log_lo, log_hi = math.log10(self.lam_range[0]), math.log10(self.lam_range[1])
        n = self.budget
        u_h = (rng.permutation(n) + rng.uniform(size=n)) / n
        u_lam = (rng.permutation(n) + rng.uniform(size=n)) / n
        h = self.h_range[0] + u_h * (self.h_range[1] - self.h_range[0])
        lam = 10.0 ** (log_lo + u_lam * (log_hi - log_lo))
        if self.lam_range[0] == self.lam_range[1]:
            lam[:] = self.lam_range[0]
        return [(float(a), float(b)) for a, b in zip(h, lam)]


@dataclass
class SelectionResult:
    best_params: tuple
    best_criterion: float
    trace: list = field(default_factory=list)
    best_fit: object = None

    @property
    def n_failed(self) -> int:
        return sum(1 for _, c in self.trace if not math.isfinite(c))


def random_search(fit_fn: Callable, crit_fn: Callable, space: SearchSpace, train, val) -> SelectionResult:
    """Evaluate ``space.budget`` random ``(h, lam)`` candidates and keep the best.

    ``fit_fn(train, h, lam)`` returns a fitted object and ``crit_fn(fit, val)``
    scores it (lower is better). Failed fits and non-finite scores count as
    ``+inf``. Ties go to the earliest candidate.
    """
    trace = []
    best_i, best_c, best_fit = None, math.inf, None
    for i, (h, lam) in enumerate(space.candidates()):
        try:
            fit = fit_fn(train, h, lam)
            c = float(crit_fn(fit, val))
        except RECOVERABLE:
            fit, c = None, math.inf
        if not math.isfinite(c):
            c = math.inf
        trace.append(((h, lam), c))
        if c < best_c:
            best_i, best_c, best_fit = i, c, fit
    if best_i is None:
        raise ExhaustedSearchError(f"all {space.budget} candidates failed to fit")
    return SelectionResult(trace[best_i][0], best_c, trace, best_fit)


# --- criteria ----------------------------------------------------------------


def criterion_dls(fit: DlsFit, val_treat, val_outcome) -> float:
    """Empirical minimax objective ``J(f, g)`` without regularization."""
    f_t = fit.f_model.predict_on(val_treat)
    g_t = fit.g_model.predict_on(val_treat)
    g_u = fit.g_model.predict_on(val_outcome)
    rt = val_treat.weights * val_treat.values
    ru = val_outcome.weights
    return float(
        2.0 * np.mean(rt * f_t * g_t)
        - 2.0 * np.mean(ru * val_outcome.values * g_u)
        - np.mean(ru * g_u**2)
    )


def criterion_dwls(fit: WeightedFit, psd, val_treat, val_outcome) -> float:
    """Weighted objective ``mean_t(r t w f^2) - 2 mean_u(r u w f)``.

    ``w`` is the PSD for DWLS fits and the inverse trimmed PSD for IWLS fits.
    """
    if fit.mode not in (DWLS, IWLS):
        raise InputError(f"unknown weighting mode {fit.mode!r}")
    w_t = _row_weights(psd, val_treat, fit.mode, fit.trim_threshold)
    w_u = _row_weights(psd, val_outcome, fit.mode, fit.trim_threshold)
    f_t = fit.predict_on(val_treat)
    f_u = fit.predict_on(val_outcome)
    return float(
        np.mean(val_treat.weights * val_treat.values * w_t * f_t**2)
        - 2.0 * np.mean(val_outcome.weights * val_outcome.values * w_u * f_u)
    )


criterion_iwls = criterion_dwls


def criterion_nu(nu_model, val_outcome) -> float:
    """Weighted squared error of a numerator model on the outcome side."""
    resid = val_outcome.values - nu_model.predict_on(val_outcome)
    return float(np.mean(val_outcome.weights * resid**2))


def criterion_sep(nu_model, psd_objective_value: float, val_outcome):
    """Component criteria of the separate estimator: (numerator error, PSD objective)."""
    return criterion_nu(nu_model, val_outcome), float(psd_objective_value)


def criterion_psd(psd, val_treat, val_outcome) -> float:
    return psd_objective(psd, val_treat, val_outcome)
