"""Levenberg-Marquardt least squares with a central-difference Jacobian.

Small and dependency-free on purpose: the lineshape and crossing fitters
need control over parameter scaling, step rejection and the covariance
estimate that a black-box optimiser hides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnfittableError


@dataclass
class LMResult:
    params: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    cost: float
    n_iter: int
    converged: bool
    message: str


def numeric_jacobian(fun, p, step):
    """Central differences, column ``i`` perturbed by ``step[i]``."""
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(p.size):
        dp = np.zeros_like(p)
        dp[i] = step[i]
        cols.append((fun(p + dp) - fun(p - dp)) / (2.0 * step[i]))
    return np.column_stack(cols)


def levenberg_marquardt(
    fun,
    p0,
    *,
    scale=None,
    rel_step: float = 1e-6,
    max_iter: int = 200,
    xtol: float = 1e-10,
    ftol: float = 1e-15,
    lam0: float = 1e-3,
    lam_max: float = 1e16,
) -> LMResult:
    """Minimise ``sum(fun(p)**2)``.

    Parameters
    ----------
    fun : callable
        Residual vector as a function of the parameter vector.
    p0 : array_like
        Starting point.
    scale : array_like, optional
        Typical magnitude of each parameter; the finite-difference step is
        ``rel_step * max(|p_i|, scale_i)``. Defaults to ones.
    max_iter, xtol, ftol :
        Stop after ``max_iter`` Jacobian evaluations, or when an accepted
        step changes the parameters by less than ``xtol`` relative, or the
        cost by less than ``ftol`` relative.
    lam0 : float
        Initial damping; multiplied by 10 on a rejected step and divided by
        10 on an accepted one.

    Returns
    -------
    LMResult
        Best iterate, with ``converged`` False when the iteration budget ran
        out first. ``covariance`` is ``s^2 (J^T J)^-1`` with
        ``s^2 = cost / (n - p)``.
    """
    p = np.array(p0, dtype=float)
    scale = np.ones_like(p) if scale is None else np.asarray(scale, dtype=float)
    r = np.asarray(fun(p), dtype=float)
    if not np.all(np.isfinite(r)):
        raise UnfittableError("residuals are not finite at the starting point")
    cost = float(r @ r)
    lam = lam0
    converged = False
    message = "iteration limit reached"
    n_iter = 0

    def jac(pp):
        step = rel_step * np.maximum(np.abs(pp), scale)
        return numeric_jacobian(fun, pp, step)

    J = jac(p)
    for n_iter in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag == 0] = 1.0
        accepted = False
        while lam <= lam_max:
            try:
                dp = -np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = p + dp
            r_new = np.asarray(fun(p_new), dtype=float)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            message = "no downhill step left (damping exhausted)"
            break
        small_step = np.linalg.norm(dp) <= xtol * (np.linalg.norm(p) + xtol)
        small_gain = cost - cost_new <= ftol * cost
        p, r, cost = p_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        J = jac(p)
        if small_step or small_gain or cost == 0.0:
            converged = True
            message = "parameter change below xtol" if small_step else "cost change below ftol"
            break

    n, m = r.size, p.size
    dof = max(n - m, 1)
    A = J.T @ J
    try:
        cov = np.linalg.inv(A) * (cost / dof)
    except np.linalg.LinAlgError:
        cov = np.full((m, m), np.nan)
    return LMResult(p, cov, r, J, cost, n_iter, converged, message)


def check_rank(J, names, rtol=1e-10):
    """Raise :class:`UnfittableError` naming the unidentifiable directions."""
    if J.size == 0:
        raise UnfittableError("no data")
    norms = np.linalg.norm(J, axis=0)
    if np.any(norms == 0):
        dead = [n for n, x in zip(names, norms) if x == 0]
        raise UnfittableError(f"data do not constrain {', '.join(dead)}")
    s = np.linalg.svd(J / norms, compute_uv=False)
    if s[-1] <= rtol * s[0]:
        raise UnfittableError("Jacobian is rank deficient; parameters are not identifiable from these data")
