"""Centralized reference solvers and convergence-rate fitting.

These are the single-machine baselines the distributed iterations are
validated against: a closed-form weighted least-squares solve, a damped
Newton method for the smoothed 1-norm cost, and a geometric-envelope fit of
error traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cost import QuadraticCost, RobustCost, SeparableCost

__all__ = [
    "CentralizedSolution",
    "RateFit",
    "solve_wls",
    "solve_newton",
    "fit_rate",
    "stacked_gradient",
    "stacked_hessian",
]


@dataclass(frozen=True)
class CentralizedSolution:
    """Reference minimizer with the achieved gradient residual."""

    x_star: np.ndarray
    j_star: float
    iterations: int
    solver: str
    grad_inf: float


def stacked_gradient(cost: SeparableCost, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of the global cost at a stacked vector."""
    A, y = cost.stacked()
    r = y - A @ x
    if isinstance(cost, QuadraticCost):
        w = _weight_apply(cost, r)
        return -(A.T @ w)
    if isinstance(cost, RobustCost):
        return -(A.T @ (r / np.sqrt(r * r + cost.nu)))
    raise TypeError(f"unsupported cost type {type(cost).__name__}")


def stacked_hessian(cost: SeparableCost, x: np.ndarray) -> np.ndarray:
    """Analytic Hessian of the global cost at a stacked vector."""
    A, y = cost.stacked()
    if isinstance(cost, QuadraticCost):
        return A.T @ _weight_matrix(cost) @ A
    if isinstance(cost, RobustCost):
        r = y - A @ x
        d = cost.nu / np.power(r * r + cost.nu, 1.5)
        return A.T @ (d[:, None] * A)
    raise TypeError(f"unsupported cost type {type(cost).__name__}")


def _weight_apply(cost: QuadraticCost, r: np.ndarray) -> np.ndarray:
    if cost._w_diag is not None:
        return cost._w_diag * r
    return _weight_matrix(cost) @ r


def _weight_matrix(cost: QuadraticCost) -> np.ndarray:
    return scipy.linalg.block_diag(*cost.W)


def solve_wls(cost: QuadraticCost) -> CentralizedSolution:
    """Closed-form weighted least-squares minimizer.

    Solves min_x 1/2 ||y - A x||^2_W through a QR-free least-squares solve of
    the whitened system sqrt(W) A x = sqrt(W) y, which avoids forming normal
    equations.
    """
    if not isinstance(cost, QuadraticCost):
        raise TypeError("solve_wls requires a quadratic cost")
    A, y = cost.stacked()
    if cost._w_diag is not None:
        s = np.sqrt(cost._w_diag)
        Aw, yw = s[:, None] * A, s * y
    else:
        L = np.linalg.cholesky(_weight_matrix(cost))
        Aw, yw = L.T @ A, L.T @ y
    x, _, rank, _ = np.linalg.lstsq(Aw, yw, rcond=None)
    if rank < A.shape[1]:
        raise ValueError(f"stacked measurement matrix is rank deficient (rank {rank} < {A.shape[1]})")
    grad = stacked_gradient(cost, x)
    return CentralizedSolution(
        x_star=x,
        j_star=cost.stacked_value(x),
        iterations=0,
        solver="closed_form",
        grad_inf=float(np.max(np.abs(grad))),
    )


def solve_newton(cost: RobustCost, x0, grad_tol=1e-10, max_iter=200) -> CentralizedSolution:
    """Damped Newton iteration on the smoothed 1-norm cost.

    Armijo backtracking with halving steps and slope parameter 1e-4; the
    Hessian is assembled analytically. Stops when the gradient infinity norm
    falls below ``grad_tol * (1 + |grad(x0)|_inf)``.
    """
    if not isinstance(cost, RobustCost):
        raise TypeError("solve_newton requires a robust cost")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (cost.graph.total_dim,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({cost.graph.total_dim},)")
    g0 = stacked_gradient(cost, x)
    tol = grad_tol * (1.0 + float(np.max(np.abs(g0))))
    f = cost.stacked_value(x)
    g = g0
    for it in range(1, max_iter + 1):
        gn = float(np.max(np.abs(g)))
        if gn <= tol:
            return CentralizedSolution(x, f, it - 1, "newton", gn)
        H = stacked_hessian(cost, x)
        p = -np.linalg.solve(H, g)
        slope = float(g @ p)
        alpha = 1.0
        while True:
            x_new = x + alpha * p
            f_new = cost.stacked_value(x_new)
            if f_new <= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
            if alpha < 1e-20:
                raise RuntimeError("Newton line search failed: no acceptable step")
        x, f = x_new, f_new
        g = stacked_gradient(cost, x)
    gn = float(np.max(np.abs(g)))
    if gn <= tol:
        return CentralizedSolution(x, f, max_iter, "newton", gn)
    raise RuntimeError(
        f"Newton did not converge in {max_iter} iterations (|grad|_inf = {gn:.3e}, tol = {tol:.3e})"
    )


@dataclass(frozen=True)
class RateFit:
    """Geometric envelope err(t) <= c * rho**t fitted to an error trace."""

    ok: bool
    c: float
    rho: float
    detail: str = ""


def fit_rate(trace_or_errors, tail_frac=0.6) -> RateFit:
    """Fit the smallest geometric envelope to a convergence error trace.

    Accepts a RunTrace (its ``err_inf`` series is used) or a raw error array.
    The slope is a least-squares fit of log err against the round index over
    the trailing ``tail_frac`` of the run, skipping the cache-settling
    transient; the constant is then inflated so the envelope covers every
    tail point. Reports failure instead of a fit when the error never
    decreases below its initial value or the fitted rate is not contractive.
    """
    err = getattr(trace_or_errors, "err_inf", trace_or_errors)
    if err is None:
        raise ValueError("trace has no error series; run with x_star to record errors")
    err = np.asarray(err, dtype=float)
    if err.ndim != 1 or err.shape[0] < 50:
        return RateFit(False, np.nan, np.nan, f"need >= 50 rounds, got {err.shape[0]}")
    if not np.all(np.isfinite(err)):
        return RateFit(False, np.nan, np.nan, "error trace contains non-finite values")
    if not np.min(err[1:]) < err[0]:
        return RateFit(False, np.nan, np.nan, "error never decreased below its initial value")
    t0 = int(np.floor((1.0 - tail_frac) * err.shape[0]))
    t = np.arange(t0, err.shape[0])
    tail = np.maximum(err[t0:], 1e-300)
    slope = np.polyfit(t, np.log(tail), 1)[0]
    rho = float(np.exp(slope))
    if not rho < 1.0:
        return RateFit(False, np.nan, rho, f"fitted rate {rho:.6f} is not contractive")
    # smallest constant such that the envelope dominates the fitted tail
    c = float(np.max(tail * np.exp(-slope * t)))
    return RateFit(True, c, rho, f"fit over rounds [{t0}, {err.shape[0] - 1}]")
