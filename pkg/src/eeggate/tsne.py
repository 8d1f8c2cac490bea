"""Exact O(N^2) t-SNE with perplexity bisection.

Conditional affinities use a per-point Gaussian bandwidth found by
bisection so that each row's perplexity matches the target within 1e-3.
Optimization follows the standard recipe: early exaggeration x12 for the
first 250 iterations, momentum 0.5 then 0.8, learning rate 200, seeded
small-variance Gaussian init.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
P_FLOOR = 1e-12


def _row_affinities(d2_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Normalized affinities and perplexity for one row at precision beta."""
    p = np.exp(-d2_row * beta)
    s = p.sum()
    if s <= 0.0:
        return np.full_like(p, 1.0 / p.size), float(p.size)
    p /= s
    nz = p[p > 0.0]
    h = -np.sum(nz * np.log(nz))
    return p, float(np.exp(h))


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-3) -> np.ndarray:
    """Row-normalized conditional P with per-row bandwidth bisection."""
    n = x.shape[0]
    d2 = np.square(x[:, None, :] - x[None, :, :]).sum(axis=2)
    p = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(200):
            probs, perp = _row_affinities(row, beta)
            if abs(perp - perplexity) <= tol:
                break
            if perp > perplexity:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (lo + beta) / 2.0
        p[i, np.arange(n) != i] = probs
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne_project(
    features: np.ndarray,
    perplexity: float = 30.0,
    iters: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    return_trace: bool = False,
):
    """Embed (N, D) features into N x 2 points."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 3 * perplexity:
        raise DomainError(f"need N >= 3*perplexity, got N={n}, perplexity={perplexity}")
    cond = conditional_affinities(x, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, P_FLOOR)

    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    trace: list[float] = []
    for it in range(iters):
        pe = p * EXAGGERATION if it < EXAGGERATION_ITERS else p
        d2 = np.square(y[:, None, :] - y[None, :, :]).sum(axis=2)
        w = 1.0 / (1.0 + d2)
        np.fill_diagonal(w, 0.0)
        q = np.maximum(w / w.sum(), P_FLOOR)
        pq = (pe - q) * w
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = MOMENTUM_EARLY if it < EXAGGERATION_ITERS else MOMENTUM_LATE
        update = momentum * update - learning_rate * grad
        y = y + update
        y = y - y.mean(axis=0)
        trace.append(_kl(p, q))
    if return_trace:
        return y, trace
    return y
