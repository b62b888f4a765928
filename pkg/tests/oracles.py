"""Brute-force numerical oracles for the closed-form estimators.

Everything here works from per-row sums over the combined datasets and from
looped scalar kernel evaluations, never from the library's moment matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from conftest import looped_kernel, random_separate
from latecomb.datasets import combine_outcome, combine_treatment
from latecomb.kernel_basis import FittedModel, KernelBasis
from latecomb.psd import ONE_EXPERIMENT, PsdEstimate


def kernel_rows(x, basis):
    return np.array([[looped_kernel(p, c, basis.bandwidth) for c in basis.centers] for p in x])


@dataclass
class TinyInstance:
    treat: object
    outcome: object
    basis_f: KernelBasis
    basis_g: KernelBasis
    psd: PsdEstimate
    lam_f: float
    lam_g: float


def tiny_instance(seed: int) -> TinyInstance:
    """Combined datasets with n_t, n_u <= 10 and bases with m <= 3."""
    rng = np.random.default_rng(seed)
    q = int(rng.integers(1, 3))
    data = random_separate(rng, q=q, n_max=5, n_min=2)
    treat, outcome = combine_treatment(data), combine_outcome(data)
    m_f, m_g, m_p = (int(v) for v in rng.integers(1, 4, size=3))
    pool = np.vstack([treat.x, outcome.x])

    def basis(m):
        return KernelBasis(pool[rng.choice(len(pool), size=m, replace=False)], rng.uniform(0.7, 2.5))

    bp = basis(m_p)
    psd = PsdEstimate(
        ONE_EXPERIMENT,
        FittedModel(bp, rng.uniform(0.1, 1.0, size=m_p)),
        FittedModel(bp, rng.uniform(0.1, 1.0, size=m_p)),
    )
    return TinyInstance(treat, outcome, basis(m_f), basis(m_g), psd, *10 ** rng.uniform(-2, 0, size=2))


def dls_saddle_oracle(inst: TinyInstance, lam_f=None, lam_g=None):
    """Nested optimization of the regularized empirical minimax objective.

    Inner: maximize over beta by BFGS. Outer: minimize the inner optimum over
    alpha by BFGS, with the gradient taken at the inner maximizer.
    """
    lam_f = inst.lam_f if lam_f is None else lam_f
    lam_g = inst.lam_g if lam_g is None else lam_g
    t, u = inst.treat, inst.outcome
    phi_t = kernel_rows(t.x, inst.basis_f)
    psi_t = kernel_rows(t.x, inst.basis_g)
    psi_u = kernel_rows(u.x, inst.basis_g)
    rt = t.weights * t.values
    ru = u.weights

    def J(alpha, beta):
        f_t, g_t, g_u = phi_t @ alpha, psi_t @ beta, psi_u @ beta
        return (
            2 * np.mean(rt * f_t * g_t)
            - 2 * np.mean(ru * u.values * g_u)
            - np.mean(ru * g_u**2)
            + lam_f * alpha @ alpha
            - lam_g * beta @ beta
        )

    def grad_beta(alpha, beta):
        f_t, g_u = phi_t @ alpha, psi_u @ beta
        return (
            2 * np.mean((rt * f_t)[:, None] * psi_t, axis=0)
            - 2 * np.mean((ru * u.values)[:, None] * psi_u, axis=0)
            - 2 * np.mean((ru * g_u)[:, None] * psi_u, axis=0)
            - 2 * lam_g * beta
        )

    def inner(alpha):
        res = minimize(
            lambda b: -J(alpha, b),
            np.zeros(psi_t.shape[1]),
            jac=lambda b: -grad_beta(alpha, b),
            method="BFGS",
            options={"gtol": 1e-13, "maxiter": 10_000},
        )
        return res.x

    def outer_value(alpha):
        return J(alpha, inner(alpha))

    def outer_grad(alpha):
        beta = inner(alpha)
        return 2 * np.mean((rt * (psi_t @ beta))[:, None] * phi_t, axis=0) + 2 * lam_f * alpha

    res = minimize(
        outer_value,
        np.zeros(phi_t.shape[1]),
        jac=outer_grad,
        method="BFGS",
        options={"gtol": 1e-12, "maxiter": 10_000},
    )
    return res.x, inner(res.x), J


def weighted_objective(inst: TinyInstance, weight_t, weight_u, lam):
    """Q(alpha) = mean_t(r t w f^2) - 2 mean_u(r u w f) + lam |alpha|^2 and its gradient."""
    t, u = inst.treat, inst.outcome
    phi_t = kernel_rows(t.x, inst.basis_f)
    phi_u = kernel_rows(u.x, inst.basis_f)
    a_t = t.weights * t.values * weight_t
    a_u = u.weights * u.values * weight_u

    def Q(alpha):
        return np.mean(a_t * (phi_t @ alpha) ** 2) - 2 * np.mean(a_u * (phi_u @ alpha)) + lam * alpha @ alpha

    def grad(alpha):
        return (
            2 * np.mean((a_t * (phi_t @ alpha))[:, None] * phi_t, axis=0)
            - 2 * np.mean(a_u[:, None] * phi_u, axis=0)
            + 2 * lam * alpha
        )

    hess = 2 * (phi_t.T @ (a_t[:, None] * phi_t) / len(a_t) + lam * np.eye(phi_t.shape[1]))
    return Q, grad, hess


def minimize_weighted_oracle(Q, grad, m, grid_radius=3.0, grid_points=15):
    """Dense grid search followed by local BFGS refinement."""
    axis = np.linspace(-grid_radius, grid_radius, grid_points)
    grid = np.stack(np.meshgrid(*([axis] * m), indexing="ij"), axis=-1).reshape(-1, m)
    start = grid[np.argmin([Q(a) for a in grid])]
    res = minimize(Q, start, jac=grad, method="BFGS", options={"gtol": 1e-13, "maxiter": 10_000})
    return res.x


def stabilizing_lambda(inst: TinyInstance, weight_t, margin=0.1):
    """Smallest lambda (plus margin) making the weighted quadratic strictly convex."""
    _, _, hess0 = weighted_objective(inst, weight_t, np.zeros(inst.outcome.n), 0.0)
    return max(0.0, -np.linalg.eigvalsh(hess0 / 2).min()) + margin


def looped_psd_1e2rd(psd: PsdEstimate, x):
    """1e2rd PSD prediction recomputed from scalar kernel loops."""
    k = kernel_rows(x, psd.basis)
    plus = k @ psd.plus_model.coefficients
    minus = k @ psd.minus_model.coefficients
    return plus / (2 * (plus + minus))


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def enumerate_moments(s, gamma, shape):
    """Independent enumeration of E[D^(k)|x] and E[Y^(k)|x] over (Z, D_1, D_0)."""
    p_z1 = sigmoid(1 + 0.2 * s)
    p_d1, p_d0 = sigmoid(gamma + 4 + s), sigmoid(gamma + s)
    # joint law of (D_1, D_0) under a shared uniform threshold
    joint = {(1, 1): p_d0, (1, 0): p_d1 - p_d0, (0, 0): 1 - p_d1, (0, 1): 0.0}

    def h(d1, d0):
        if shape == "constant":
            return 0.2 + 0.3 * d1 + 0.1 * d0
        if shape == "linear":
            return (0.1 + 0.15 * d1 + 0.05 * d0) * s
        return sigmoid((1 + 0.2 * d1 + 0.1 * d0) * s)

    out = {}
    for k, p_z in ((1, p_z1), (0, 0.0)):
        e_d = e_y = 0.0
        for z in (0, 1):
            pz = p_z if z else 1 - p_z
            for (d1, d0), pj in joint.items():
                d = d1 if z else d0
                y0 = sigmoid(s) + (0.2 * d1 + 0.1 * d0) * s
                e_d += pz * pj * d
                e_y += pz * pj * (y0 + d * h(d1, d0))
        out[k] = (e_d, e_y)
    return out
