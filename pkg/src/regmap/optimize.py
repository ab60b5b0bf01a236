"""Limited-memory quasi-Newton minimiser and an augmented Lagrangian wrapper."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, LineSearchFailure, NonFiniteObjective

__all__ = ["OptResult", "lbfgs", "augmented_lagrangian", "ALResult"]


@dataclass
class OptResult:
    x: np.ndarray
    f: float
    grad_norm: float
    n_iter: int
    n_eval: int
    status: str
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in ("gtol", "ftol")


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
    except NonFiniteObjective:
        return np.inf, None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return np.inf, None
    return float(f), np.asarray(g, dtype=float)


def lbfgs(
    fun,
    x0,
    gtol: float = 1e-8,
    max_iter: int = 500,
    memory: int = 10,
    c1: float = 1e-4,
    max_halvings: int = 40,
    ftol: float = 1e-13,
    raise_on_failure: bool = False,
) -> OptResult:
    """Minimise ``fun(x) -> (f, grad)`` by L-BFGS with Armijo backtracking.

    The step starts at 1 (scaled by the gradient on the first iteration) and is
    halved until sufficient decrease holds.  A failed search with a
    quasi-Newton direction is retried once along the steepest descent
    direction after clearing the memory.

    Stops when ``max|grad| <= gtol``, when the relative decrease falls below
    ``ftol`` or after ``max_iter`` iterations.

    Raises
    ------
    NonFiniteObjective
        If the objective is not finite at ``x0``.
    LineSearchFailure
        Only if ``raise_on_failure``; otherwise the best iterate is returned
        with status ``"line_search"``.
    """
    x = np.array(x0, dtype=float)
    f, g = _safe_eval(fun, x)
    n_eval = 1
    if g is None:
        raise NonFiniteObjective("objective is not finite at the initial point")
    hist = [f]
    mem: deque = deque(maxlen=memory)
    status = "max_iter"
    it = 0
    if x.size == 0:
        return OptResult(x, f, 0.0, 0, n_eval, "gtol", hist)
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= gtol:
            status = "gtol"
            it -= 1
            break
        d = _two_loop(g, mem)
        steepest = len(mem) == 0
        if g @ d >= 0:
            mem.clear()
            d = -g
            steepest = True
        t0 = min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300)) if steepest else 1.0
        accepted = False
        for attempt in range(2):
            t = t0
            slope = float(g @ d)
            for _ in range(max_halvings):
                xn = x + t * d
                fn, gn = _safe_eval(fun, xn)
                n_eval += 1
                if gn is not None and fn <= f + c1 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if accepted or steepest:
                break
            mem.clear()
            d = -g
            steepest = True
            t0 = min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        if not accepted:
            status = "line_search"
            if raise_on_failure:
                raise LineSearchFailure(f"no sufficient decrease after {max_halvings} halvings")
            break
        s = xn - x
        yv = gn - g
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            mem.append((s, yv, 1.0 / sy))
        decrease = f - fn
        x, f, g = xn, fn, gn
        hist.append(f)
        if decrease <= ftol * max(1.0, abs(f)):
            status = "ftol"
            break
    return OptResult(x, f, float(np.max(np.abs(g))), it, n_eval, status, hist)


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, rho = mem[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


@dataclass
class ALResult:
    x: np.ndarray
    f: float
    violation: float
    outer: int
    history: list
    violations: list
    multipliers: np.ndarray


def augmented_lagrangian(
    fun,
    cons,
    x0,
    tol: float = 1e-6,
    rho0: float = 10.0,
    growth: float = 10.0,
    max_outer: int = 20,
    inner_kwargs=None,
    raise_infeasible: bool = True,
) -> ALResult:
    """Minimise ``fun`` subject to ``c(x) <= 0`` with a PHR augmented Lagrangian.

    ``cons(x)`` returns the constraint values and their Jacobian (dense or
    sparse).  Each outer iteration minimises

        f(x) + 1/(2 rho) * sum(max(0, lam + rho c)^2 - lam^2)

    with :func:`lbfgs`, updates ``lam <- max(0, lam + rho c)`` and multiplies
    ``rho`` by ``growth`` when the violation did not drop below a quarter of
    its previous value.

    Raises
    ------
    Infeasible
        If the maximum violation is still above ``tol`` after ``max_outer``
        iterations.
    """
    inner_kwargs = dict(inner_kwargs or {})
    x = np.array(x0, dtype=float)
    c0, _ = cons(x)
    lam = np.zeros_like(np.asarray(c0, dtype=float))
    rho = rho0
    viol_prev = float(np.max(np.maximum(c0, 0.0), initial=0.0))
    hist, viols = [], []
    f_val = np.nan
    for outer in range(1, max_outer + 1):

        def merit(z, lam=lam, rho=rho):
            f, g = fun(z)
            c, jc = cons(z)
            shifted = np.maximum(0.0, lam + rho * c)
            val = f + (shifted @ shifted - lam @ lam) / (2.0 * rho)
            return val, g + jc.T @ shifted

        res = lbfgs(merit, x, **inner_kwargs)
        x = res.x
        c, _ = cons(x)
        f_val = float(fun(x)[0])
        viol = float(np.max(np.maximum(c, 0.0), initial=0.0))
        hist.append(f_val)
        viols.append(viol)
        lam = np.maximum(0.0, lam + rho * c)
        if viol <= tol:
            return ALResult(x, f_val, viol, outer, hist, viols, lam)
        if viol > 0.25 * viol_prev:
            rho *= growth
        viol_prev = viol
    if raise_infeasible:
        raise Infeasible(f"constraint violation {viols[-1]:.3e} above tolerance {tol:.1e} after {max_outer} iterations")
    return ALResult(x, f_val, viols[-1], max_outer, hist, viols, lam)
