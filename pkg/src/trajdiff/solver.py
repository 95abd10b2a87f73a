"""Local NLP solver used for data generation and warm-start evaluation.

Augmented Lagrangian (PHR form) over the obstacle/goal constraints, with the
duration/control box handled by the inner bound-constrained minimizer.
Termination is certified by a first-order KKT check whose multipliers come
from a nonnegative least-squares fit at the current point, so a point that
was certified once is re-certified immediately when used as a warm start.
"""

from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import Bounds, lsq_linear, minimize

from . import problems
from .exceptions import NonFiniteError
from .problems import Task


class Status(str, enum.Enum):
    LOCALLY_OPTIMAL = "locally_optimal"
    INFEASIBLE = "infeasible"
    ITER_LIMIT = "iter_limit"
    TIME_LIMIT = "time_limit"


@dataclass(frozen=True)
class SolveOptions:
    max_outer_iters: int = 30
    max_inner_iters: int = 200
    kkt_tol: float = 1e-4
    feas_tol: float = 1e-6
    penalty_init: float = 10.0
    penalty_growth: float = 5.0
    time_limit: float = 60.0
    inner: str = "lbfgsb"  # or "projected_gradient"
    active_tol: float = 1e-4

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.feas_tol <= 0 or self.active_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.penalty_init <= 0 or self.penalty_growth <= 1:
            raise ValueError("need penalty_init > 0 and penalty_growth > 1")
        if self.max_outer_iters < 0 or self.max_inner_iters < 0:
            raise ValueError("iteration limits must be >= 0")
        if self.inner not in ("lbfgsb", "projected_gradient"):
            raise ValueError(f"unknown inner solver {self.inner!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveResult:
    status: Status
    x_star: np.ndarray
    iterations: int
    wall_time: float
    final_violation: float
    final_stationarity: float
    outer_iterations: int = 0
    multipliers: dict = field(default_factory=dict, repr=False)

    @property
    def locally_optimal(self) -> bool:
        return self.status is Status.LOCALLY_OPTIMAL


class _Problem:
    """Single-instance evaluation helpers bound to ``(y, task)``."""

    def __init__(self, y, task: Task):
        self.task = task
        self.y = np.asarray(y, dtype=float).reshape(1, -1)
        self.lo, self.hi = task.x_bounds()

    def gh(self, x):
        g, h, cache = problems._constraints(x[None], self.y, self.task)
        return g[0], h[0], cache

    def weighted_grad(self, x, cache, wg, wh):
        return problems._constraints_vjp(x[None], cache, wg[None], wh[None], self.task)[0]

    def violation(self, g, h) -> float:
        return float(np.maximum(g, 0.0).sum() + np.abs(h).sum())

    def projected_residual(self, x, grad) -> float:
        return float(np.max(np.abs(x - np.clip(x - grad, self.lo, self.hi))))

    def stationarity(self, x, cache, mu, lam) -> float:
        grad = self.weighted_grad(x, cache, mu, lam)
        grad[0] += 1.0
        scale = 1.0 + max(np.max(np.abs(mu), initial=0.0), np.max(np.abs(lam), initial=0.0))
        return self.projected_residual(x, grad) / scale

    def ls_multipliers(self, x, g, active_tol):
        """Nonnegative least-squares multiplier estimate on near-active constraints."""
        task = self.task
        _, _, jg, jh = problems.constraint_jacobians(x, self.y[0], task)
        active = g >= -active_tol
        free = (x > self.lo + 1e-9) & (x < self.hi - 1e-9)
        mu = np.zeros(task.n_ineq)
        lam = np.zeros(task.n_eq)
        a = np.concatenate([jg[active], jh]).T[free]
        if a.size == 0:
            return mu, lam
        b = np.zeros(task.dim)
        b[0] = 1.0
        n_act = int(active.sum())
        lb = np.concatenate([np.zeros(n_act), np.full(task.n_eq, -np.inf)])
        sol = lsq_linear(a, -b[free], bounds=(lb, np.full(lb.size, np.inf)), method="bvls")
        mu[active] = sol.x[:n_act]
        lam[:] = sol.x[n_act:]
        return mu, lam


def _projected_gradient(fun, x, lo, hi, maxiter, gtol, memory=10):
    """Spectral projected gradient: Barzilai-Borwein steps, nonmonotone Armijo search."""
    f, grad = fun(x)
    recent = [f]
    alpha = 1.0
    nit = 0
    while nit < maxiter:
        if np.max(np.abs(x - np.clip(x - grad, lo, hi))) <= gtol:
            break
        d = np.clip(x - alpha * grad, lo, hi) - x
        slope = grad @ d
        f_ref = max(recent)
        step = 1.0
        while True:
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if f_new <= f_ref + 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        s, yv = x_new - x, g_new - grad
        sy = s @ yv
        alpha = float(np.clip(s @ s / sy, 1e-10, 1e10)) if sy > 0 else 1e10
        x, f, grad = x_new, f_new, g_new
        recent = (recent + [f])[-memory:]
        nit += 1
    return x, nit


def solve(y, task: Task, x0, opts: SolveOptions | None = None) -> SolveResult:
    """Locally solve ``min t  s.t.  g <= 0, h = 0`` from the initial guess ``x0``."""
    opts = opts or SolveOptions()
    start = time.perf_counter()
    prob = _Problem(y, task)
    lo, hi = prob.lo, prob.hi
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)

    def result(status, x, g, h, stat, iters, outer, mu, lam):
        return SolveResult(
            status=status,
            x_star=x,
            iterations=iters,
            wall_time=time.perf_counter() - start,
            final_violation=prob.violation(g, h),
            final_stationarity=stat,
            outer_iterations=outer,
            multipliers={"ineq": mu, "eq": lam},
        )

    try:
        g, h, cache = prob.gh(x)
    except NonFiniteError:
        nan = float("nan")
        return SolveResult(Status.INFEASIBLE, x, 0, time.perf_counter() - start, nan, nan)

    def certify(x, g, cache):
        # multipliers restricted to near-active constraints, so complementarity holds
        mu, lam = prob.ls_multipliers(x, g, opts.active_tol)
        return prob.stationarity(x, cache, mu, lam), mu, lam

    stat, mu_hat, lam_hat = certify(x, g, cache)
    viol = prob.violation(g, h)
    if viol <= opts.feas_tol and stat <= opts.kkt_tol:
        return result(Status.LOCALLY_OPTIMAL, x, g, h, stat, 0, 0, mu_hat, lam_hat)
    if opts.max_outer_iters == 0 or opts.max_inner_iters == 0:
        return result(Status.ITER_LIMIT, x, g, h, stat, 0, 0, mu_hat, lam_hat)

    mu, lam = mu_hat.copy(), lam_hat.copy()
    rho = opts.penalty_init
    omega = 1e-2
    iters = 0
    infeas_prev = np.inf

    for outer in range(1, opts.max_outer_iters + 1):

        def aug_lagrangian(z, mu=mu, lam=lam, rho=rho):
            gz, hz, cz = prob.gh(z)
            shifted = np.maximum(mu + rho * gz, 0.0)
            wh = lam + rho * hz
            val = z[0] + lam @ hz + 0.5 * rho * hz @ hz + (shifted @ shifted - mu @ mu) / (2 * rho)
            grad = prob.weighted_grad(z, cz, shifted, wh)
            grad[0] += 1.0
            return val, grad

        try:
            if opts.inner == "lbfgsb":
                res = minimize(
                    aug_lagrangian,
                    x,
                    jac=True,
                    method="L-BFGS-B",
                    bounds=Bounds(lo, hi),
                    options={"maxiter": opts.max_inner_iters, "gtol": omega, "ftol": 1e-15, "maxcor": 20},
                )
                x_new, nit = np.clip(res.x, lo, hi), int(res.nit)
            else:
                x_new, nit = _projected_gradient(aug_lagrangian, x, lo, hi, opts.max_inner_iters, omega)
            g, h, cache = prob.gh(x_new)
        except NonFiniteError:
            return result(Status.INFEASIBLE, x, g, h, float("nan"), iters, outer, mu, lam)
        if not np.isfinite(x_new).all():
            return result(Status.INFEASIBLE, x, g, h, float("nan"), iters, outer, mu, lam)
        x = x_new
        iters += nit

        infeas = max(np.max(np.abs(h), initial=0.0), np.max(np.abs(np.maximum(g, -mu / rho)), initial=0.0))
        lam = lam + rho * h
        mu = np.maximum(mu + rho * g, 0.0)

        viol = prob.violation(g, h)
        if viol <= opts.feas_tol:
            stat, mu_c, lam_c = certify(x, g, cache)
            if stat <= opts.kkt_tol:
                return result(Status.LOCALLY_OPTIMAL, x, g, h, stat, iters, outer, mu_c, lam_c)
        else:
            stat = prob.stationarity(x, cache, mu, lam)

        if time.perf_counter() - start > opts.time_limit:
            return result(Status.TIME_LIMIT, x, g, h, stat, iters, outer, mu, lam)
        if infeas > 0.25 * infeas_prev:
            rho *= opts.penalty_growth
        infeas_prev = infeas
        omega = max(omega * 0.1, 0.1 * opts.kkt_tol)

    status = Status.INFEASIBLE if viol > opts.feas_tol else Status.ITER_LIMIT
    return result(status, x, g, h, stat, iters, opts.max_outer_iters, mu, lam)


def warm_start(y, task: Task, x_sample, opts: SolveOptions | None = None) -> SolveResult:
    """Solve from a generated sample; same contract as :func:`solve`."""
    return solve(y, task, x_sample, opts)
