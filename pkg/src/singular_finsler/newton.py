"""Damped Newton iteration with backtracking on a scaled residual merit."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

TINY = 1e-300


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    history: list[float] = field(default_factory=list)


def relative_residual(G: np.ndarray, scale: np.ndarray) -> float:
    """max_i |G_i| / scale_i: a componentwise backward error."""
    if G.size == 0:
        return 0.0
    return float(np.max(np.abs(G) / np.maximum(scale, TINY)))


def damped_newton(
    residual: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    jacobian: Callable[[np.ndarray], sp.spmatrix],
    x0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200,
    project: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    mu: float = 1e-12,
    max_halvings: int = 40,
) -> NewtonResult:
    """Solve residual(x)[0] = 0.

    ``residual`` returns (G, scale) where ``scale`` holds the magnitudes of the
    terms that cancel in G; convergence is max|G|/scale <= tol.  The Jacobian
    gets a relative diagonal shift ``mu * |J_ii|``.  ``project(x, dx)`` may
    shorten the direction componentwise before the line search.
    """
    x = np.array(x0, dtype=float, copy=True)
    G, s = residual(x)
    r = relative_residual(G, s)
    hist = [r]
    best_x, best_r = x.copy(), r
    it = 0
    while r > tol and it < max_iter:
        it += 1
        J = sp.csc_matrix(jacobian(x))
        d = np.abs(J.diagonal())
        J = J + sp.diags(mu * np.where(d > 0, d, 1.0), format="csc")
        dx = spla.spsolve(J, -G)
        if not np.all(np.isfinite(dx)):
            break
        if project is not None:
            dx = project(x, dx)
        ss = np.maximum(s, TINY)
        m0 = np.linalg.norm(G / ss)
        alpha, accepted = 1.0, None
        fallback = None
        for _ in range(max_halvings):
            xt = x + alpha * dx
            Gt, st = residual(xt)
            if np.all(np.isfinite(Gt)):
                mt = np.linalg.norm(Gt / ss)
                if mt <= (1 - 1e-4 * alpha) * m0:
                    accepted = (xt, Gt, st)
                    break
                if mt < m0 and fallback is None:
                    fallback = (xt, Gt, st)
            alpha *= 0.5
        if accepted is None:
            accepted = fallback
        if accepted is None:
            break
        x, G, s = accepted
        r = relative_residual(G, s)
        hist.append(r)
        if r < best_r:
            best_x, best_r = x.copy(), r
    converged = best_r <= tol
    return NewtonResult(best_x, it, best_r, converged, hist)
