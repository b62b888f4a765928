"""Gaussian-kernel linear-in-parameter models.

Every estimator in the package works with functions of the form
``f(x) = coef @ phi(x)`` where ``phi_j(x) = exp(-||x - c_j||^2 / (2 h^2))``
for a set of centers ``c_j`` and a bandwidth ``h``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import InputError, SingularSystemError

JITTER_SCALE = 1e-10
RESIDUAL_TOL = 1e-8


def _as_points(points, name="points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InputError(f"{name} must be a 2-D array of covariate vectors")
    return arr


@dataclass(frozen=True, eq=False)
class KernelBasis:
    """Gaussian kernel centers plus a shared bandwidth.

    ``centers`` has shape ``(m, q_x)``. Bases produced by :meth:`with_bandwidth`
    share the same centers array, which lets combined datasets reuse cached
    squared distances across bandwidth candidates.
    """

    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        centers = self.centers
        shareable = (
            isinstance(centers, np.ndarray)
            and centers.dtype == np.float64
            and centers.ndim == 2
            and not centers.flags.writeable
        )
        if not shareable:
            centers = _as_points(centers, "centers").copy()
            centers.flags.writeable = False
        if centers.shape[0] < 1:
            raise InputError("a kernel basis needs at least one center")
        if not np.all(np.isfinite(centers)):
            raise InputError("centers must be finite")
        h = float(self.bandwidth)
        if not (h > 0 and math.isfinite(h)):
            raise InputError(f"bandwidth must be positive and finite, got {self.bandwidth!r}")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "bandwidth", h)

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def with_bandwidth(self, h: float) -> "KernelBasis":
        return KernelBasis(self.centers, h)

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelBasis":
        return cls(np.asarray(d["centers"], dtype=np.float64), float(d["bandwidth"]))


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Coefficient vector over a :class:`KernelBasis`."""

    basis: KernelBasis
    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=np.float64).reshape(-1)
        if coef.shape[0] != self.basis.size:
            raise InputError(
                f"expected {self.basis.size} coefficients, got {coef.shape[0]}"
            )
        if not np.all(np.isfinite(coef)):
            raise InputError("coefficients must be finite")
        coef.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)

    def predict(self, points) -> np.ndarray:
        return design_matrix(self.basis, points) @ self.coefficients

    def predict_on(self, ds) -> np.ndarray:
        """Predict at the rows of a combined dataset using its distance cache."""
        return ds.design(self.basis) @ self.coefficients

    def to_dict(self) -> dict:
        return {**self.basis.to_dict(), "coefficients": self.coefficients.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        return cls(KernelBasis.from_dict(d), np.asarray(d["coefficients"], dtype=np.float64))


def gaussian_kernel(x, c, h: float) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if x.shape != c.shape:
        raise InputError(f"dimension mismatch: {x.shape} vs {c.shape}")
    if not h > 0:
        raise InputError(f"bandwidth must be positive, got {h!r}")
    d = x - c
    return math.exp(-float(d @ d) / (2.0 * h * h))


def select_centers(samples, m: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``m`` kernel centers among ``samples``.

    Sampling is without replacement when ``m <= n`` and with replacement
    otherwise.
    """
    samples = _as_points(samples, "samples")
    n = samples.shape[0]
    if n == 0:
        raise InputError("cannot select centers from an empty sample set")
    if m < 1:
        raise InputError(f"number of centers must be >= 1, got {m}")
    idx = rng.choice(n, size=m, replace=m > n)
    return samples[idx].copy()


def squared_distances(points, centers) -> np.ndarray:
    points = _as_points(points)
    centers = _as_points(centers, "centers")
    if points.shape[1] != centers.shape[1]:
        raise InputError(
            f"dimension mismatch: points have {points.shape[1]} columns, "
            f"centers have {centers.shape[1]}"
        )
    if points.shape[0] == 0:
        return np.zeros((0, centers.shape[0]))
    return cdist(points, centers, metric="sqeuclidean")


def kernel_from_sq_dists(sq: np.ndarray, h: float) -> np.ndarray:
    return np.exp(sq * (-0.5 / (h * h)))


def design_matrix(basis: KernelBasis, points) -> np.ndarray:
    """Return the ``(n, m)`` matrix of kernel values ``phi_j(points[i])``."""
    return kernel_from_sq_dists(squared_distances(points, basis.centers), basis.bandwidth)


def solve_ridge_system(M, v, lam: float) -> np.ndarray:
    """Solve ``(M + lam I) w = v`` by LU factorization.

    ``M`` need not be symmetric positive definite. On failure the diagonal is
    jittered once by ``1e-10 * |trace(M)| / m``; the returned solution must
    still satisfy the original system to ``1e-8 * (1 + ||v||)``. ``v`` may be a
    vector or a matrix of right-hand sides.
    """
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError(f"M must be square, got shape {M.shape}")
    if v.shape[0] != M.shape[0]:
        raise InputError(f"v has {v.shape[0]} rows, M is {M.shape[0]}x{M.shape[0]}")
    if not lam >= 0:
        raise InputError(f"regularization must be nonnegative, got {lam!r}")
    m = M.shape[0]
    system = M + lam * np.eye(m)
    tol = RESIDUAL_TOL * (1.0 + np.linalg.norm(v))

    def attempt(a):
        if not np.all(np.isfinite(a)):
            return None
        with np.errstate(all="ignore"), warnings.catch_warnings():
            # singularity is detected below and reported as SingularSystemError
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            try:
                lu, piv = sla.lu_factor(a, check_finite=False)
            except (ValueError, np.linalg.LinAlgError):
                return None
            if np.any(np.diag(lu) == 0):
                return None
            w = sla.lu_solve((lu, piv), v, check_finite=False)
        if not np.all(np.isfinite(w)):
            return None
        if np.linalg.norm(system @ w - v) > tol:
            return None
        return w

    w = attempt(system)
    if w is None:
        jitter = JITTER_SCALE * abs(np.trace(M)) / m
        if jitter > 0:
            w = attempt(system + jitter * np.eye(m))
    if w is None:
        with np.errstate(all="ignore"):
            cond = float(np.linalg.cond(system)) if np.all(np.isfinite(system)) else math.inf
        raise SingularSystemError(
            f"(M + lam I) w = v is numerically singular (lam={lam:g}, cond={cond:.3g})",
            lam=lam,
            condition=cond,
        )
    return w
