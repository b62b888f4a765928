"""Direct, range-constrained estimation of the propensity-score difference.

The propensity-score difference (PSD) here is ``pi(x) = E[T | X = x]`` for the
signed treatment indicator of the combined dataset, so it lies in
``[-0.5, 0.5]`` (``[0, 0.5]`` for one-experiment designs where regime 0 assigns
nobody).

Both ``pi + 0.5`` and ``-pi + 0.5`` are fitted by least squares over a
nonnegative Gaussian basis, their coefficients clipped at zero, and the ratio
of the two fits is used so the estimate respects the range by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import CombinedDataset
from .errors import DegenerateFitError, InputError
from .kernel_basis import FittedModel, KernelBasis, design_matrix, solve_ridge_system

GENERAL = "general"
ONE_EXPERIMENT = "1e2rd"
MODES = (GENERAL, ONE_EXPERIMENT)

DENOMINATOR_EPS = 1e-12


def _check_mode(mode):
    if mode not in MODES:
        raise InputError(f"unknown PSD mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True, eq=False)
class PsdEstimate:
    """Fitted PSD model.

    In ``general`` mode ``plus_model`` estimates ``pi + 0.5``; in ``1e2rd`` mode
    it estimates ``pi`` itself. ``minus_model`` always estimates ``-pi + 0.5``.
    """

    mode: str
    plus_model: FittedModel
    minus_model: FittedModel
    epsilon: float = DENOMINATOR_EPS

    def __post_init__(self):
        _check_mode(self.mode)
        if self.plus_model.basis.dim != self.minus_model.basis.dim:
            raise InputError("plus and minus models must share the covariate dimension")

    @property
    def basis(self) -> KernelBasis:
        return self.plus_model.basis

    @property
    def bounds(self):
        return (-0.5, 0.5) if self.mode == GENERAL else (0.0, 0.5)

    def predict(self, x) -> np.ndarray:
        return self._from_numerators(
            design_matrix(self.plus_model.basis, x) @ self.plus_model.coefficients,
            design_matrix(self.minus_model.basis, x) @ self.minus_model.coefficients,
        )

    def predict_on(self, ds: CombinedDataset) -> np.ndarray:
        """Predictions at the rows of ``ds``, cached on the dataset."""

        def compute():
            plus = ds.design(self.plus_model.basis) @ self.plus_model.coefficients
            minus = ds.design(self.minus_model.basis) @ self.minus_model.coefficients
            return self._from_numerators(plus, minus)

        return ds.memo(self, compute)

    def _from_numerators(self, plus, minus):
        den = plus + minus
        ok = den >= self.epsilon
        safe = np.where(ok, den, 1.0)
        if self.mode == GENERAL:
            val = plus / safe - 0.5
        else:
            val = plus / (2.0 * safe)
        lo, hi = self.bounds
        return np.where(ok, np.clip(val, lo, hi), 0.0)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epsilon": self.epsilon,
            "plus": self.plus_model.to_dict(),
            "minus": self.minus_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PsdEstimate":
        return cls(
            mode=d["mode"],
            plus_model=FittedModel.from_dict(d["plus"]),
            minus_model=FittedModel.from_dict(d["minus"]),
            epsilon=float(d.get("epsilon", DENOMINATOR_EPS)),
        )


def predict_psd(est: PsdEstimate, x) -> float:
    """PSD estimate at a single covariate vector."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return float(est.predict(x[None, :])[0])


def psd_moments(treat: CombinedDataset, outcome: CombinedDataset, basis: KernelBasis):
    """Return ``(G, m_t, m_u)``: the weighted Gram matrix and the two linear moments."""
    if treat.dim != basis.dim or outcome.dim != basis.dim:
        raise InputError("basis dimension does not match the data")
    phi_u = outcome.design(basis)
    phi_t = treat.design(basis)
    G = (phi_u * outcome.weights[:, None]).T @ phi_u / outcome.n
    m_t = phi_t.T @ (treat.weights * treat.values) / treat.n
    m_u = phi_u.T @ outcome.weights / outcome.n
    return G, m_t, m_u


def _finish(mode, basis, raw_plus, raw_minus):
    plus = np.maximum(raw_plus, 0.0)
    minus = np.maximum(raw_minus, 0.0)
    if plus.sum() + minus.sum() < DENOMINATOR_EPS:
        raise DegenerateFitError("every PSD coefficient was clipped to zero")
    return PsdEstimate(mode, FittedModel(basis, plus), FittedModel(basis, minus))


def fit_psd_general(treat, outcome, basis: KernelBasis, lam: float) -> PsdEstimate:
    G, m_t, m_u = psd_moments(treat, outcome, basis)
    rhs = np.column_stack([m_t + 0.5 * m_u, -m_t + 0.5 * m_u])
    sol = solve_ridge_system(G, rhs, lam)
    return _finish(GENERAL, basis, sol[:, 0], sol[:, 1])


def fit_psd_1e2rd(treat, outcome, basis: KernelBasis, lam: float) -> PsdEstimate:
    G, m_t, m_u = psd_moments(treat, outcome, basis)
    rhs = np.column_stack([m_t, -m_t + 0.5 * m_u])
    sol = solve_ridge_system(G, rhs, lam)
    return _finish(ONE_EXPERIMENT, basis, sol[:, 0], sol[:, 1])


def fit_psd(treat, outcome, basis, lam, mode=ONE_EXPERIMENT) -> PsdEstimate:
    _check_mode(mode)
    fit = fit_psd_general if mode == GENERAL else fit_psd_1e2rd
    return fit(treat, outcome, basis, lam)


def psd_objective(est: PsdEstimate, treat: CombinedDataset, outcome: CombinedDataset) -> float:
    """Unregularized empirical least-squares objective of the PSD fit.

    General mode scores ``f = pi_hat + 0.5`` with
    ``mean_u(r f^2) - 2 mean_t(r t f) - mean_u(r f)``; 1e2rd mode scores
    ``f = pi_hat`` with the first two terms. Both equal the squared error to
    the true PSD up to an additive constant.
    """
    f_u = est.predict_on(outcome)
    f_t = est.predict_on(treat)
    rt = treat.weights * treat.values
    if est.mode == GENERAL:
        f_u = f_u + 0.5
        f_t = f_t + 0.5
        return float(
            np.mean(outcome.weights * f_u**2) - 2.0 * np.mean(rt * f_t) - np.mean(outcome.weights * f_u)
        )
    return float(np.mean(outcome.weights * f_u**2) - 2.0 * np.mean(rt * f_t))


def trim_psd(value, threshold: float, mode: str = ONE_EXPERIMENT):
    """Clamp a PSD away from zero before it is inverted.

    1e2rd: ``max(value, threshold)``. General: keep the sign (zero counts as
    positive) and clamp the magnitude to at least ``threshold``.
    """
    _check_mode(mode)
    if not (0 < threshold <= 0.5):
        raise InputError(f"trim threshold must lie in (0, 0.5], got {threshold!r}")
    v = np.asarray(value, dtype=np.float64)
    if mode == ONE_EXPERIMENT:
        out = np.maximum(v, threshold)
    else:
        out = np.where(v >= 0, 1.0, -1.0) * np.maximum(np.abs(v), threshold)
    return float(out) if out.ndim == 0 else out
