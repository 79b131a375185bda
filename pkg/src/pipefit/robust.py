"""Huber-weighted Levenberg-Marquardt used by the ellipse, circle and cylinder fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

HUBER_K = 1.345
MAD_TO_SIGMA = 1.4826


def fast_median(x: np.ndarray) -> float:
    """Median of a 1-D float array (``np.median`` without its dispatch overhead)."""
    n = len(x)
    k = n // 2
    if n % 2:
        return float(np.partition(x, k)[k])
    part = np.partition(x, (k - 1, k))
    return 0.5 * float(part[k - 1] + part[k])


def mad_scale(residuals: np.ndarray) -> float:
    """Normalized median absolute deviation (a robust sigma estimate)."""
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        return 0.0
    return MAD_TO_SIGMA * fast_median(np.abs(r - fast_median(r)))


def huber_weights(residuals: np.ndarray, threshold: float) -> np.ndarray:
    if threshold <= 0:
        return np.ones(len(residuals))
    a = np.abs(residuals)
    return threshold / np.maximum(a, threshold)


def huber_cost(residuals: np.ndarray, threshold: float) -> float:
    a = np.abs(residuals)
    if threshold <= 0:
        return float(0.5 * (a @ a))
    m = np.minimum(a, threshold)
    # 0.5 m^2 + t (a - m) equals the Huber loss on both branches.
    return float(0.5 * (m @ m) + threshold * np.sum(a - m))


@dataclass
class LMResult:
    state: Any
    residuals: np.ndarray
    scale: float
    n_iter: int
    converged: bool


def robust_lm(
    fun: Callable[[Any], tuple[np.ndarray, np.ndarray]],
    state: Any,
    update: Callable[[Any, np.ndarray], Any] | None = None,
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
    robust: bool = True,
    scale_iters: int = 10,
    min_scale: float = 0.0,
    ftol: float = 0.0,
) -> LMResult:
    """Minimize a Huber loss of ``fun(state)[0]`` by damped Gauss-Newton.

    ``fun`` returns residuals and their Jacobian at ``state``; ``update``
    applies a parameter step and returns a new state (default: addition).
    The Huber threshold is ``HUBER_K`` times the MAD scale of the current
    residuals; the scale is refreshed during the first ``scale_iters``
    iterations and then frozen so the objective stays fixed. Convergence is
    declared when the accepted step norm drops below ``tol`` or, with
    ``ftol > 0``, once the scale is frozen and the relative cost decrease
    falls below ``ftol``.
    """
    if update is None:
        update = lambda s, delta: s + delta  # noqa: E731
    r, jac = fun(state)
    lam = 1e-3
    threshold = 0.0
    converged = False
    it = 0
    cost = None
    for it in range(1, max_iter + 1):
        if robust and it <= scale_iters:
            threshold = HUBER_K * max(mad_scale(r), min_scale)
            cost = None
        if cost is None:
            cost = huber_cost(r, threshold)
        w = huber_weights(r, threshold)
        jw = jac * w[:, None]
        a = jw.T @ jac
        g = jw.T @ r
        diag = np.diag(a).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        for _ in range(30):
            damped = a.copy()
            damped.flat[::len(diag) + 1] += lam * diag
            try:
                delta = -np.linalg.solve(damped, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = update(state, delta)
            r_new, jac_new = fun(trial)
            new_cost = huber_cost(r_new, threshold) if np.all(np.isfinite(r_new)) else np.inf
            if new_cost <= cost:
                state, r, jac = trial, r_new, jac_new
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        step = float(np.linalg.norm(delta)) if accepted else 0.0
        if not accepted or step < tol:
            converged = True
            break
        frozen = not robust or it >= scale_iters
        if ftol > 0 and frozen and cost - new_cost <= ftol * cost:
            converged = True
            break
        cost = new_cost
    return LMResult(state, r, threshold / HUBER_K if robust else 0.0, it, converged)
