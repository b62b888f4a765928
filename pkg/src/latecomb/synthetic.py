"""Synthetic two-regime data with known LATE.

Covariates are Gaussian with an equicorrelated covariance; with ``s = sum(x)``:

    P(D_1 = 1 | x) = sigmoid(gamma + 4 + s)      P(D_0 = 1 | x) = sigmoid(gamma + s)
    P(Z^(1) = 1 | x) = sigmoid(1 + 0.2 s)         P(Z^(0) = 1 | x) = 0
    Y'_0 = sigmoid(s) + (0.2 D_1 + 0.1 D_0) s     Y'_1 = Y'_0 + h(s, D_1, D_0)

and the LATE is ``h(s, 1, 0)``. Larger ``gamma`` pushes more mass toward a
near-zero propensity-score difference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .datasets import SeparateDatasets, save_separate_datasets, write_covariates_csv
from .errors import DegenerateDesignError, InputError

SHAPES = ("constant", "linear", "logistic")

OFF_DIAGONAL = 0.2
NOISE_COV = np.array([[0.5, 0.2], [0.2, 0.5]])

MAX_ATTEMPTS = 10_000_000
MIN_ACCEPTANCE = 1e-4
_BATCH_CAP = 1 << 18


@dataclass(frozen=True)
class SyntheticConfig:
    shape: str
    q_x: int
    n: int
    gamma: float = 0.0
    seed: int = 0
    test_n: int = 10_000

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InputError(f"unknown shape {self.shape!r}; valid shapes: {', '.join(SHAPES)}")
        if self.q_x < 1:
            raise InputError(f"q_x must be >= 1, got {self.q_x}")
        if self.n < 1:
            raise InputError(f"n must be >= 1, got {self.n}")
        if self.test_n < 1:
            raise InputError(f"test_n must be >= 1, got {self.test_n}")

    def with_seed(self, seed: int) -> "SyntheticConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True, eq=False)
class PopulationSample:
    """Draws from the population, one row per individual (structure of arrays)."""

    x: np.ndarray
    d1: np.ndarray
    d0: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    z1: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def realize(self, k: int):
        """Observed ``(z, d, y)`` under regime ``k``; regime 0 assigns nobody."""
        z = self.z1 if k == 1 else np.zeros_like(self.z1)
        d = np.where(z == 1, self.d1, self.d0)
        y = np.where(d == 1, self.y1, self.y0)
        return z, d, y


@dataclass(frozen=True, eq=False)
class SyntheticBundle:
    config: SyntheticConfig
    train: SeparateDatasets
    validation: SeparateDatasets
    test_x: np.ndarray
    test_mu: np.ndarray


def make_covariance(q_x: int) -> np.ndarray:
    if q_x < 1:
        raise InputError(f"q_x must be >= 1, got {q_x}")
    cov = np.full((q_x, q_x), OFF_DIAGONAL)
    np.fill_diagonal(cov, 1.0)
    return cov


def effect_shape(s, d1, d0, shape: str):
    """Treatment-effect function ``h`` evaluated at ``s = 1^T x``."""
    s = np.asarray(s, dtype=np.float64)
    if shape == "constant":
        return 0.2 + 0.3 * d1 + 0.1 * d0 + 0.0 * s
    if shape == "linear":
        return (0.1 + 0.15 * d1 + 0.05 * d0) * s
    if shape == "logistic":
        return expit((1.0 + 0.2 * d1 + 0.1 * d0) * s)
    raise InputError(f"unknown shape {shape!r}; valid shapes: {', '.join(SHAPES)}")


def baseline_outcome(s, d1, d0):
    s = np.asarray(s, dtype=np.float64)
    return expit(s) + (0.2 * d1 + 0.1 * d0) * s


def true_late(x, shape: str):
    """LATE ``h(x, 1, 0)``; ``x`` is one covariate vector or an ``(n, q)`` array."""
    x = np.asarray(x, dtype=np.float64)
    s = x.sum(axis=-1)
    out = effect_shape(s, 1, 0, shape)
    return float(out) if np.ndim(out) == 0 else out


def treatment_probabilities(s, gamma: float):
    """``(P(Z^(1)=1|x), P(D_1=1|x), P(D_0=1|x))`` as functions of ``s``."""
    s = np.asarray(s, dtype=np.float64)
    return expit(1.0 + 0.2 * s), expit(gamma + 4.0 + s), expit(gamma + s)


def sample_population(config: SyntheticConfig, rng: np.random.Generator, count: int) -> PopulationSample:
    """Draw ``count`` individuals.

    ``D_1`` and ``D_0`` share one uniform so ``D_1 >= D_0`` always holds.
    """
    chol = np.linalg.cholesky(make_covariance(config.q_x))
    x = rng.standard_normal((count, config.q_x)) @ chol.T
    s = x.sum(axis=1)
    p_z1, p_d1, p_d0 = treatment_probabilities(s, config.gamma)
    u = rng.uniform(size=count)
    d1 = (u < p_d1).astype(np.int8)
    d0 = (u < p_d0).astype(np.int8)
    eps = rng.standard_normal((count, 2)) @ np.linalg.cholesky(NOISE_COV).T
    y0 = baseline_outcome(s, d1, d0)
    y1 = y0 + effect_shape(s, d1, d0, config.shape)
    z1 = (rng.uniform(size=count) < p_z1).astype(np.int8)
    return PopulationSample(x=x, d1=d1, d0=d0, y1=y1 + eps[:, 1], y0=y0 + eps[:, 0], z1=z1)


def sample_treated_covariates(config, rng, k: int, n: int):
    """Rejection-sample ``n`` covariate vectors with ``D^(k) = 1``.

    Returns the covariates and the acceptance fraction, which serves as the
    estimate of ``P(D^(k) = 1)``.
    """
    batch = int(min(_BATCH_CAP, max(1024, 2 * n)))
    chunks, accepted, attempts = [], 0, 0
    while accepted < n:
        pop = sample_population(config, rng, batch)
        _, d, _ = pop.realize(k)
        idx = np.flatnonzero(d == 1)
        need = n - accepted
        if idx.size >= need:
            chunks.append(pop.x[idx[:need]])
            attempts += int(idx[need - 1]) + 1
            accepted = n
            break
        chunks.append(pop.x[idx])
        accepted += idx.size
        attempts += batch
        if attempts >= MAX_ATTEMPTS and accepted / attempts < MIN_ACCEPTANCE:
            raise DegenerateDesignError(
                f"regime {k}: acceptance rate {accepted / attempts:.2e} after {attempts} draws "
                f"(gamma={config.gamma})"
            )
    return np.vstack(chunks), n / attempts


def sample_outcomes(config, rng, k: int, n: int):
    pop = sample_population(config, rng, n)
    _, _, y = pop.realize(k)
    return y, pop.x


def _separate(config, streams) -> SeparateDatasets:
    t1, p1 = sample_treated_covariates(config, streams[0], 1, config.n)
    t0, p0 = sample_treated_covariates(config, streams[1], 0, config.n)
    y1, x1 = sample_outcomes(config, streams[2], 1, config.n)
    y0, x0 = sample_outcomes(config, streams[3], 0, config.n)
    return SeparateDatasets(treated_cov=(t0, t1), outcome_y=(y0, y1), outcome_x=(x0, x1), p_d_hat=(p0, p1))


def generate_separate_datasets(config: SyntheticConfig) -> SyntheticBundle:
    """Training and validation datasets of equal size plus a labelled test set.

    Every sample set draws from its own child stream of ``config.seed``.
    """
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(9)]
    train = _separate(config, streams[0:4])
    validation = _separate(config, streams[4:8])
    chol = np.linalg.cholesky(make_covariance(config.q_x))
    test_x = streams[8].standard_normal((config.test_n, config.q_x)) @ chol.T
    return SyntheticBundle(config, train, validation, test_x, true_late(test_x, config.shape))


def save_bundle(bundle: SyntheticBundle, directory) -> Path:
    directory = Path(directory)
    save_separate_datasets(bundle.train, directory / "train")
    save_separate_datasets(bundle.validation, directory / "validation")
    write_covariates_csv(directory / "test.csv", bundle.test_x, extra={"mu": bundle.test_mu})
    return directory


# --- exact conditional moments -------------------------------------------------


def exact_moments(x, shape: str, gamma: float):
    """Exact ``E[D^(k) | x]`` and ``E[Y^(k) | x]`` by enumerating ``(Z, D_1, D_0)``.

    Returns ``(e_d, e_y)``, each a pair indexed by regime ``k``. Noise has mean
    zero so it drops out.
    """
    x = np.asarray(x, dtype=np.float64)
    s = x.sum(axis=-1)
    p_z1, p_d1, p_d0 = treatment_probabilities(s, gamma)
    # shared-uniform coupling: (1,1) w.p. P(D_0), (1,0) w.p. P(D_1)-P(D_0), (0,0) otherwise
    types = ((1, 1, p_d0), (1, 0, p_d1 - p_d0), (0, 0, 1.0 - p_d1))
    e_d, e_y = [], []
    for k in (0, 1):
        p_z = p_z1 if k == 1 else np.zeros_like(s)
        ed = np.zeros_like(s)
        ey = np.zeros_like(s)
        for z, pz in ((1, p_z), (0, 1.0 - p_z)):
            for d1, d0, p_type in types:
                d = d1 if z == 1 else d0
                w = pz * p_type
                ed = ed + w * d
                ey = ey + w * (baseline_outcome(s, d1, d0) + d * effect_shape(s, d1, d0, shape))
        e_d.append(ed)
        e_y.append(ey)
    return tuple(e_d), tuple(e_y)


def identification_ratio(x, shape: str, gamma: float):
    """``(E[Y^(1)|x] - E[Y^(0)|x]) / (E[D^(1)|x] - E[D^(0)|x])`` from exact moments."""
    e_d, e_y = exact_moments(x, shape, gamma)
    return (e_y[1] - e_y[0]) / (e_d[1] - e_d[0])


def true_psd(x, gamma: float):
    """``E[T | x]`` for the combined dataset (half the treatment-rate difference)."""
    e_d, _ = exact_moments(x, "constant", gamma)
    return 0.5 * (e_d[1] - e_d[0])
