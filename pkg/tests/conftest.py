"""Shared fixtures: a discrete-covariate DGP with exactly known moments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from latecomb.datasets import SeparateDatasets
from latecomb.kernel_basis import FittedModel, KernelBasis
from latecomb.psd import ONE_EXPERIMENT, PsdEstimate

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


@dataclass(frozen=True)
class DiscreteDGP:
    """Covariates on a finite 1-D support with exactly known conditional moments.

    ``p_d[k][j] = P(D^(k) = 1 | X = support[j])`` and
    ``m_y[k][j] = E[Y^(k) | X = support[j]]``.
    """

    support: np.ndarray
    probs: np.ndarray
    p_d: tuple
    m_y: tuple
    noise_sd: float = 0.5

    @property
    def pi(self) -> np.ndarray:
        return 0.5 * (self.p_d[1] - self.p_d[0])

    @property
    def nu(self) -> np.ndarray:
        return 0.5 * (self.m_y[1] - self.m_y[0])

    @property
    def mu(self) -> np.ndarray:
        return self.nu / self.pi

    def p_treated(self, k: int) -> float:
        return float(np.sum(self.probs * self.p_d[k]))

    def sample(self, n: int, seed: int, exact_p: bool = True) -> SeparateDatasets:
        rng = np.random.default_rng(seed)
        treated, ys, xs, p_hat = [], [], [], []
        for k in (0, 1):
            w = self.probs * self.p_d[k]
            idx = rng.choice(self.support.size, size=n, p=w / w.sum())
            treated.append(self.support[idx][:, None])
            idx = rng.choice(self.support.size, size=n, p=self.probs)
            xs.append(self.support[idx][:, None])
            ys.append(self.m_y[k][idx] + self.noise_sd * rng.standard_normal(n))
            p_hat.append(self.p_treated(k))
        return SeparateDatasets(tuple(treated), tuple(ys), tuple(xs), tuple(p_hat))

    def indicator_basis(self, h: float = 0.05) -> KernelBasis:
        """Kernels at the support points, narrow enough to act as indicators."""
        return KernelBasis(self.support[:, None], h)


@pytest.fixture
def two_point_dgp() -> DiscreteDGP:
    return DiscreteDGP(
        support=np.array([0.0, 1.0]),
        probs=np.array([0.4, 0.6]),
        p_d=(np.array([0.2, 0.3]), np.array([0.7, 0.9])),
        m_y=(np.array([0.5, 1.0]), np.array([1.5, 2.4])),
    )


def make_five_point() -> DiscreteDGP:
    s = np.linspace(-2.0, 2.0, 5)
    p1 = 1.0 / (1.0 + np.exp(-(2.0 + s)))
    p0 = 0.2 * p1
    mu = 0.5 + 0.3 * s
    m0 = 0.2 * s + 0.4
    # E[Y^(1)] - E[Y^(0)] = (p1 - p0) * mu keeps mu = nu / pi exact
    m1 = m0 + (p1 - p0) * mu
    return DiscreteDGP(s, np.full(5, 0.2), (p0, p1), (m0, m1))


@pytest.fixture
def five_point_dgp() -> DiscreteDGP:
    return make_five_point()


def constant_psd(basis: KernelBasis, c: float, mode: str = ONE_EXPERIMENT) -> PsdEstimate:
    """A PSD model predicting exactly ``c`` wherever the kernel mass is not negligible."""
    w = np.ones(basis.size)
    if mode == ONE_EXPERIMENT:
        plus, minus = 2.0 * c * w, (1.0 - 2.0 * c) * w
    else:
        plus, minus = (c + 0.5) * w, (0.5 - c) * w
    return PsdEstimate(mode, FittedModel(basis, plus), FittedModel(basis, minus))


def random_separate(rng: np.random.Generator, q: int = 2, n_max: int = 10, n_min: int = 1) -> SeparateDatasets:
    sizes = rng.integers(n_min, n_max + 1, size=4)
    treated = tuple(rng.normal(size=(sizes[k], q)) for k in (0, 1))
    xs = tuple(rng.normal(size=(sizes[2 + k], q)) for k in (0, 1))
    ys = tuple(rng.normal(size=sizes[2 + k]) for k in (0, 1))
    p = tuple(float(v) for v in rng.uniform(0.05, 0.95, size=2))
    return SeparateDatasets(treated, ys, xs, p)


def looped_kernel(x, c, h):
    return math.exp(-sum((a - b) ** 2 for a, b in zip(x, c)) / (2.0 * h * h))
