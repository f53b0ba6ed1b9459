"""L-BFGS with a strong Wolfe line search, and a central-difference gradient checker."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DivergedError, InvalidInputError

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], float]
Gradient = Callable[[np.ndarray], np.ndarray]

CURVATURE_EPS = 1e-10


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-5
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search: int = 20
    ftol: float = 0.0  # relative objective change stopping rule; 0 disables

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise InvalidInputError("need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise InvalidInputError("memory must be >= 1")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    message: str = ""


def _two_loop(g: np.ndarray, S: deque, Y: deque) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    s, y = S[-1], Y[-1]
    q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


class _LineSearch:
    def __init__(self, fun, grad, x, f0, g0, d, cfg: LbfgsConfig):
        self.fun, self.grad = fun, grad
        self.x, self.d = x, d
        self.f0, self.dphi0 = f0, float(g0 @ d)
        self.cfg = cfg
        self.evals = 0
        self.best = None  # (a, f, g) with sufficient decrease

    def _eval(self, a):
        self.evals += 1
        xa = self.x + a * self.d
        f = float(self.fun(xa))
        if not np.isfinite(f):
            return f, None, np.nan
        g = np.asarray(self.grad(xa), dtype=float)
        if self.armijo(a, f) and (self.best is None or f < self.best[1]):
            self.best = (a, f, g)
        return f, g, float(g @ self.d)

    def armijo(self, a, f):
        return f <= self.f0 + self.cfg.wolfe_c1 * a * self.dphi0

    def curvature(self, dphi):
        return abs(dphi) <= -self.cfg.wolfe_c2 * self.dphi0

    def run(self, a):
        cfg = self.cfg
        a_prev, f_prev, dphi_prev = 0.0, self.f0, self.dphi0
        while self.evals < cfg.max_line_search:
            f, g, dphi = self._eval(a)
            if not np.isfinite(f):
                a = 0.5 * (a_prev + a)
                continue
            if not self.armijo(a, f) or (a_prev > 0 and f >= f_prev):
                return self._zoom(a_prev, f_prev, dphi_prev, a, f, dphi)
            if self.curvature(dphi):
                return a, f, g
            if dphi >= 0:
                return self._zoom(a, f, dphi, a_prev, f_prev, dphi_prev)
            a_prev, f_prev, dphi_prev = a, f, dphi
            a *= 2.0
        return self._fallback()

    def _zoom(self, lo, f_lo, d_lo, hi, f_hi, d_hi):
        while self.evals < self.cfg.max_line_search:
            width = hi - lo
            a = None
            if np.isfinite(d_hi) and np.isfinite(f_hi):
                a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            # keep the trial point away from the bracket ends
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not np.isfinite(a) or not lo_b <= a <= hi_b:
                a = lo + 0.5 * width
            f, g, dphi = self._eval(a)
            if not np.isfinite(f) or not self.armijo(a, f) or f >= f_lo:
                hi, f_hi, d_hi = a, f, dphi
            else:
                if self.curvature(dphi):
                    return a, f, g
                if dphi * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = a, f, dphi
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return self._fallback()

    def _fallback(self):
        # accept the best sufficient-decrease point even without curvature
        if self.best is not None:
            return self.best
        return None


def minimize(objective: Objective, gradient: Gradient, x0, cfg: LbfgsConfig = LbfgsConfig(),
             callback=None) -> OptimizeResult:
    """Minimize ``objective`` from ``x0``; the returned objective never exceeds the start."""
    x = np.array(x0, dtype=float)
    f = float(objective(x))
    if not np.isfinite(f):
        raise DivergedError("objective is not finite at the starting point")
    g = np.asarray(gradient(x), dtype=float)
    S: deque = deque(maxlen=cfg.memory)
    Y: deque = deque(maxlen=cfg.memory)
    trace = [f]
    result = OptimizeResult(x, f, g, trace)
    if x.size == 0:
        result.converged = True
        result.message = "empty parameter vector"
        return result
    steepest_failed = False
    it = 0
    while it < cfg.max_iters:
        if np.max(np.abs(g)) < cfg.grad_tol:
            result.converged = True
            result.message = "gradient tolerance reached"
            break
        if S:
            d = _two_loop(g, S, Y)
            a0 = 1.0
        else:
            d = -g
            a0 = min(1.0, 1.0 / np.sum(np.abs(g)))
        if g @ d >= 0:
            S.clear(), Y.clear()
            d, a0 = -g, min(1.0, 1.0 / np.sum(np.abs(g)))
        found = _LineSearch(objective, gradient, x, f, g, d, cfg).run(a0)
        if found is None:
            if not S or steepest_failed:
                result.message = "line search failed"
                break
            log.debug("line search failed at iter %d; retrying along -grad", it)
            steepest_failed = True
            S.clear(), Y.clear()
            continue
        steepest_failed = False
        a, f_new, g_new = found
        s = a * d
        y = g_new - g
        if y @ s > CURVATURE_EPS:
            S.append(s)
            Y.append(y)
        f_old = f
        x, f, g = x + s, float(f_new), g_new
        trace.append(f)
        it += 1
        if callback is not None:
            callback(x, f)
        if cfg.ftol > 0 and f_old - f <= cfg.ftol * max(1.0, abs(f_old)):
            result.converged = True
            result.message = "objective change below ftol"
            break
    else:
        result.message = "iteration limit"
    result.x, result.fun, result.grad, result.n_iter = x, f, g, it
    return result


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def grad_check_report(objective: Objective, gradient: Gradient, x, step: float = 1e-5) -> GradCheckResult:
    if step <= 0:
        raise InvalidInputError("step must be positive")
    x = np.array(x, dtype=float)
    ga = np.asarray(gradient(x), dtype=float)
    fd = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        fd[i] = (objective(xp) - objective(xm)) / (2.0 * step)
    rel = np.abs(ga - fd) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(fd)))
    if rel.size == 0:
        return GradCheckResult(0.0, -1, 0.0, 0.0)
    j = int(np.argmax(rel))
    return GradCheckResult(float(rel[j]), j, float(ga[j]), float(fd[j]))


def grad_check(objective: Objective, gradient: Gradient, x, step: float = 1e-5) -> float:
    """Largest ``|analytic - fd| / max(1, |analytic|, |fd|)`` over coordinates."""
    return grad_check_report(objective, gradient, x, step).max_rel_error
