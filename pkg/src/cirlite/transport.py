"""Entropic optimal transport by Sinkhorn's alternating scaling.

Runs in plain numpy: the training loss treats the converged plan as a
constant (envelope-style gradient through the cost matrix only), so the
iterations never need to live on the differentiation tape. Below
`LOG_DOMAIN_EPS` the kernel exp(-C/eps) underflows long before the plan
degenerates, so the same iteration runs on log-potentials instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_DOMAIN_EPS = 0.02
# float64 exp underflows near exp(-745); keep a margin when suggesting a floor
_EXP_UNDERFLOW_SPAN = 700.0


@dataclass
class TransportPlan:
    gamma: np.ndarray          # coupling, rows ~ source, cols ~ target
    cost_matrix: np.ndarray
    transport_cost: float      # <gamma, cost>_F at convergence
    iterations: int
    marginal_violation: float


def sinkhorn(cost: np.ndarray, mu: np.ndarray, nu: np.ndarray, eps: float,
             max_iters: int = 500, tol: float = 1e-6) -> TransportPlan:
    cost = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if cost.ndim != 2 or cost.shape != (mu.size, nu.size):
        raise ValueError(
            f"cost {cost.shape} does not couple marginals of sizes {mu.size}, {nu.size}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    for name, marg in (("source", mu), ("target", nu)):
        if np.any(marg <= 0):
            raise ValueError(f"{name} marginal must be strictly positive")
        if abs(marg.sum() - 1.0) > 1e-8:
            raise ValueError(f"{name} marginal sums to {marg.sum():.12f}, expected 1")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    if eps < LOG_DOMAIN_EPS:
        gamma, iterations, violation = _sinkhorn_log(cost, mu, nu, eps, max_iters, tol)
    else:
        gamma, iterations, violation = _sinkhorn_plain(cost, mu, nu, eps, max_iters, tol)

    return TransportPlan(
        gamma=gamma,
        cost_matrix=cost,
        transport_cost=float(np.sum(gamma * cost)),
        iterations=iterations,
        marginal_violation=violation,
    )


def _violation(gamma, mu, nu) -> float:
    return float(max(np.max(np.abs(gamma.sum(axis=1) - mu)),
                     np.max(np.abs(gamma.sum(axis=0) - nu))))


def _sinkhorn_plain(cost, mu, nu, eps, max_iters, tol):
    kernel = np.exp(-cost / eps)
    if np.any(kernel.sum(axis=1) == 0.0) or np.any(kernel.sum(axis=0) == 0.0):
        floor = float(np.max(np.abs(cost))) / _EXP_UNDERFLOW_SPAN
        raise ValueError(
            f"exp(-cost/eps) underflowed at eps={eps}; "
            f"use eps >= {floor:.3e} or a smaller cost scale")
    v = np.ones_like(nu)
    gamma = None
    for it in range(1, max_iters + 1):
        u = mu / (kernel @ v)
        v = nu / (kernel.T @ u)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            floor = float(np.max(np.abs(cost))) / _EXP_UNDERFLOW_SPAN
            raise ValueError(
                f"scaling vectors overflowed at eps={eps}; "
                f"use eps >= {floor:.3e} or a smaller cost scale")
        gamma = u[:, None] * kernel * v[None, :]
        violation = _violation(gamma, mu, nu)
        if violation < tol:
            return gamma, it, violation
    return gamma, max_iters, _violation(gamma, mu, nu)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)), axis=axis)


def _sinkhorn_log(cost, mu, nu, eps, max_iters, tol):
    log_kernel = -cost / eps
    log_mu, log_nu = np.log(mu), np.log(nu)
    log_v = np.zeros_like(nu)
    gamma = None
    for it in range(1, max_iters + 1):
        log_u = log_mu - _logsumexp(log_kernel + log_v[None, :], axis=1)
        log_v = log_nu - _logsumexp(log_kernel + log_u[:, None], axis=0)
        gamma = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
        violation = _violation(gamma, mu, nu)
        if violation < tol:
            return gamma, it, violation
    return gamma, max_iters, _violation(gamma, mu, nu)


def uniform_marginal(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)
