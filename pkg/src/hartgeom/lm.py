"""Levenberg-Marquardt for small dense least-squares problems.

Used by the PnP refinement (with a Huber loss on per-point reprojection
errors) and by the body fit (plain squared loss).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergedSolve


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    n_iters: int
    converged: bool
    # cost after every accepted step, starting with the initial cost
    trace: list = field(default_factory=list)


def numeric_jacobian(fun: Callable, x: np.ndarray, step: float = 1e-5, batched: bool = False) -> np.ndarray:
    """Central finite differences, one column per parameter."""
    n = len(x)
    if batched:
        offsets = np.concatenate([np.eye(n) * step, -np.eye(n) * step])
        r = fun(x[None, :] + offsets)
        return ((r[:n] - r[n:]) / (2.0 * step)).T
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        cols.append((fun(x + e) - fun(x - e)) / (2.0 * step))
    return np.stack(cols, axis=1)


def _robust(r: np.ndarray, loss: str, delta: float, group: int):
    """Return (cost, per-residual IRLS weight)."""
    if loss == "linear":
        return float(r @ r), np.ones_like(r)
    e = np.linalg.norm(r.reshape(-1, group), axis=1)
    quad = e <= delta
    cost = np.where(quad, e * e, 2.0 * delta * e - delta * delta).sum()
    w = np.where(quad, 1.0, delta / np.maximum(e, 1e-300))
    return float(cost), np.repeat(w, group)


def levenberg_marquardt(fun: Callable, x0, jac: Optional[Callable] = None, *,
                        lam0: float = 1e-3, max_iters: int = 100, rtol: float = 1e-9,
                        fd_step: float = 1e-5, batched: bool = False,
                        loss: str = "linear", huber_delta: float = 1.0, group: int = 1,
                        is_valid: Optional[Callable] = None) -> LMResult:
    """Minimise ``sum(rho(fun(x)))``.

    ``fun`` maps a parameter vector to a residual vector; with ``batched``
    it must also accept a (k, n) stack and return (k, m). ``jac`` defaults
    to central differences. Damping starts at ``lam0``, is multiplied by 10
    after a rejected step and divided by 10 after an accepted one. The solve
    stops when an accepted step lowers the cost by less than ``rtol``
    relative, or after ``max_iters`` Jacobian evaluations.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    r = fun(x)
    cost, w = _robust(r, loss, huber_delta, group)
    if not np.isfinite(cost):
        raise DivergedSolve("initial cost is not finite")
    trace = [cost]
    lam = lam0
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        if cost <= 1e-300:
            converged = True
            break
        J = jac(x) if jac is not None else numeric_jacobian(fun, x, fd_step, batched)
        A = J.T @ (J * w[:, None])
        g = J.T @ (w * r)
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(A + lam * np.diag(d), -g, rcond=None)[0]
            x_new = x + step
            if is_valid is None or is_valid(x_new):
                r_new = fun(x_new)
                cost_new, w_new = _robust(r_new, loss, huber_delta, group)
                if np.isfinite(cost_new) and cost_new < cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        decrease = cost - cost_new
        x, r, w = x_new, r_new, w_new
        cost = cost_new
        trace.append(cost)
        lam = max(lam / 10.0, 1e-15)
        if decrease < rtol * (cost + decrease):
            converged = True
            break
    if not np.isfinite(cost):
        raise DivergedSolve("cost became non-finite")
    return LMResult(x=x, cost=cost, n_iters=it, converged=converged, trace=trace)
