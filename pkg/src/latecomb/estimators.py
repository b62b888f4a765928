"""Closed-form LATE estimators over Gaussian kernel bases.

Four estimators are provided:

``fit_dwls``
    Weighted least squares with the estimated PSD as a (non-inverted) weight.
``fit_iwls``
    Same objective with the inverse of the trimmed PSD as the weight.
``fit_sep``
    Kernel ridge estimate of the numerator divided by the trimmed PSD.
``fit_dls``
    Ridge-regularized minimax least squares with an auxiliary model ``g``.

All of them estimate ``mu(x) = nu(x) / pi(x)``, where ``nu = E[U | X]`` and
``pi = E[T | X]`` on the combined datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .datasets import CombinedDataset
from .errors import InputError
from .kernel_basis import FittedModel, KernelBasis, solve_ridge_system
from .psd import PsdEstimate, trim_psd

DEFAULT_TRIM = 0.15

DWLS = "dwls"
IWLS = "iwls"
SEP = "sep"
DLS = "dls"
ESTIMATORS = (DWLS, IWLS, SEP, DLS)


@dataclass(frozen=True, eq=False)
class DlsFit:
    f_model: FittedModel
    g_model: FittedModel
    lam_f: float
    lam_g: float

    kind = DLS

    def predict(self, x) -> np.ndarray:
        return self.f_model.predict(x)

    def predict_on(self, ds: CombinedDataset) -> np.ndarray:
        return self.f_model.predict_on(ds)


@dataclass(frozen=True, eq=False)
class WeightedFit:
    f_model: FittedModel
    weight_source: PsdEstimate
    mode: str
    lam_f: float
    trim_threshold: Optional[float] = None

    @property
    def kind(self):
        return self.mode

    def predict(self, x) -> np.ndarray:
        return self.f_model.predict(x)

    def predict_on(self, ds: CombinedDataset) -> np.ndarray:
        return self.f_model.predict_on(ds)

    def row_weights(self, ds: CombinedDataset) -> np.ndarray:
        return _row_weights(self.weight_source, ds, self.mode, self.trim_threshold)


@dataclass(frozen=True, eq=False)
class SepFit:
    nu_model: FittedModel
    psd: PsdEstimate
    trim_threshold: float = DEFAULT_TRIM

    kind = SEP

    def predict(self, x) -> np.ndarray:
        nu = self.nu_model.predict(x)
        return nu / trim_psd(self.psd.predict(x), self.trim_threshold, self.psd.mode)


Fit = Union[DlsFit, WeightedFit, SepFit]


def predict(fit: Fit, x) -> float:
    """Estimated LATE at one covariate vector."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return float(fit.predict(x[None, :])[0])


def _check_dims(ds_list, basis):
    for ds in ds_list:
        if ds.dim != basis.dim:
            raise InputError(f"data has q_x={ds.dim} but the basis has dimension {basis.dim}")


def _row_weights(psd, ds, mode, trim):
    pi_hat = psd.predict_on(ds)
    if mode == DWLS:
        return pi_hat
    if mode == IWLS:
        return 1.0 / trim_psd(pi_hat, trim, psd.mode)
    raise InputError(f"unknown weighting mode {mode!r}")


def weighted_normal_equations(treat, outcome, basis, w_t, w_u):
    """``A~ = mean_t(r t w phi phi^T)`` and ``b~ = mean_u(r u w phi)``."""
    phi_t = treat.design(basis)
    phi_u = outcome.design(basis)
    A = (phi_t * (treat.weights * treat.values * w_t)[:, None]).T @ phi_t / treat.n
    b = phi_u.T @ (outcome.weights * outcome.values * w_u) / outcome.n
    return A, b


def _fit_weighted(treat, outcome, basis, psd, lam_f, mode, trim):
    _check_dims((treat, outcome), basis)
    if psd.basis.dim != basis.dim:
        raise InputError("PSD model and basis disagree on covariate dimension")
    w_t = _row_weights(psd, treat, mode, trim)
    w_u = _row_weights(psd, outcome, mode, trim)
    A, b = weighted_normal_equations(treat, outcome, basis, w_t, w_u)
    alpha = solve_ridge_system(A, b, lam_f)
    return WeightedFit(FittedModel(basis, alpha), psd, mode, float(lam_f), trim)


def fit_dwls(treat, outcome, basis: KernelBasis, psd: PsdEstimate, lam_f: float) -> WeightedFit:
    """Directly weighted least squares; the raw (untrimmed) PSD is the weight."""
    return _fit_weighted(treat, outcome, basis, psd, lam_f, DWLS, None)


def fit_iwls(treat, outcome, basis, psd, trim: float, lam_f: float) -> WeightedFit:
    if not trim > 0:
        raise InputError(f"trim threshold must be positive, got {trim!r}")
    return _fit_weighted(treat, outcome, basis, psd, lam_f, IWLS, float(trim))


def fit_nu(outcome: CombinedDataset, basis: KernelBasis, lam: float) -> FittedModel:
    """Weighted kernel ridge regression of the signed outcome on covariates."""
    _check_dims((outcome,), basis)
    phi = outcome.design(basis)
    G = (phi * outcome.weights[:, None]).T @ phi / outcome.n
    rhs = phi.T @ (outcome.weights * outcome.values) / outcome.n
    return FittedModel(basis, solve_ridge_system(G, rhs, lam))


def fit_sep(treat, outcome, basis_nu, psd, lam_nu, trim=DEFAULT_TRIM) -> SepFit:
    if not trim > 0:
        raise InputError(f"trim threshold must be positive, got {trim!r}")
    return SepFit(fit_nu(outcome, basis_nu, lam_nu), psd, float(trim))


def dls_matrices(treat, outcome, basis_f, basis_g):
    """``A = mean_t(r t phi psi^T)``, ``b = mean_u(r u psi)``, ``C = mean_u(r psi psi^T)``."""
    _check_dims((treat, outcome), basis_f)
    _check_dims((treat, outcome), basis_g)
    phi_t = treat.design(basis_f)
    psi_t = treat.design(basis_g)
    psi_u = outcome.design(basis_g)
    A = (phi_t * (treat.weights * treat.values)[:, None]).T @ psi_t / treat.n
    b = psi_u.T @ (outcome.weights * outcome.values) / outcome.n
    C = (psi_u * outcome.weights[:, None]).T @ psi_u / outcome.n
    return A, b, C


def fit_dls(treat, outcome, basis_f, basis_g, lam_f: float, lam_g: float) -> DlsFit:
    A, b, C = dls_matrices(treat, outcome, basis_f, basis_g)
    m_f = A.shape[0]
    inner = solve_ridge_system(C, np.column_stack([A.T, b]), lam_g)
    outer = A @ inner[:, :m_f]
    alpha = solve_ridge_system(outer, A @ inner[:, m_f], lam_f)
    beta = solve_ridge_system(C, A.T @ alpha - b, lam_g)
    return DlsFit(FittedModel(basis_f, alpha), FittedModel(basis_g, beta), float(lam_f), float(lam_g))


# --- serialization -----------------------------------------------------------


def fit_to_dict(fit: Fit) -> dict:
    if isinstance(fit, DlsFit):
        return {
            "estimator": DLS,
            "f": fit.f_model.to_dict(),
            "g": fit.g_model.to_dict(),
            "lambda_f": fit.lam_f,
            "lambda_g": fit.lam_g,
        }
    if isinstance(fit, WeightedFit):
        return {
            "estimator": fit.mode,
            "f": fit.f_model.to_dict(),
            "psd": fit.weight_source.to_dict(),
            "lambda_f": fit.lam_f,
            "trim": fit.trim_threshold,
        }
    if isinstance(fit, SepFit):
        return {
            "estimator": SEP,
            "nu": fit.nu_model.to_dict(),
            "psd": fit.psd.to_dict(),
            "trim": fit.trim_threshold,
        }
    raise InputError(f"cannot serialize {type(fit).__name__}")


def fit_from_dict(d: dict) -> Fit:
    kind = d.get("estimator")
    if kind == DLS:
        return DlsFit(
            FittedModel.from_dict(d["f"]), FittedModel.from_dict(d["g"]), d["lambda_f"], d["lambda_g"]
        )
    if kind in (DWLS, IWLS):
        return WeightedFit(
            FittedModel.from_dict(d["f"]), PsdEstimate.from_dict(d["psd"]), kind, d["lambda_f"], d.get("trim")
        )
    if kind == SEP:
        return SepFit(FittedModel.from_dict(d["nu"]), PsdEstimate.from_dict(d["psd"]), d["trim"])
    raise InputError(f"unknown estimator {kind!r} in model file")


def model_dim(fit: Fit) -> int:
    model = fit.nu_model if isinstance(fit, SepFit) else fit.f_model
    return model.basis.dim

