"""Limited-memory BFGS with a strong-Wolfe line search and optional box bounds.

Bounds are handled by gradient projection: coordinates sitting on a bound
with the gradient pointing outward are frozen for the iteration, and the
step length is capped so the iterate stays inside the box.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import NonFiniteObjective

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass(frozen=True)
class SolverOptions:
    learning_rate: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-5  # relative objective change
    grad_tolerance: float = 1e-7  # max-abs gradient
    window_size: int = 50
    window_overlap: int = 25
    c1: float = 1e-4
    c2: float = 0.9
    history_size: int = 10
    max_line_search: int = 25
    bound_radius: float = 1e4  # mm, box half-width around the initialisation

    def __post_init__(self):
        if not 0 < self.window_overlap < self.window_size:
            raise ValueError("need 0 < window_overlap < window_size")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_iterations < 0 or self.history_size < 1:
            raise ValueError("max_iterations must be >= 0 and history_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


class StepRecord(NamedTuple):
    """One accepted line-search step, kept so callers can audit the Wolfe conditions."""

    alpha: float
    f0: float
    dphi0: float  # directional derivative at alpha = 0
    f: float
    dphi: float  # directional derivative at the accepted alpha
    wolfe: bool  # False only for steps truncated at a bound


@dataclass
class LbfgsReport:
    iterations: int = 0
    evaluations: int = 0
    initial_value: float = float("nan")
    final_value: float = float("nan")
    converged: bool = False
    reason: str = ""
    steps: list = field(default_factory=list)


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimiser of the cubic interpolating two points and slopes, clipped to [lo, hi]."""
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    disc = d1 * d1 - g1 * g2
    if disc >= 0:
        d2 = math.sqrt(disc)
        if x1 <= x2:
            x = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
        else:
            x = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
        if math.isfinite(x):
            return min(max(x, lo), hi)
    return 0.5 * (lo + hi)


class _LineSearchResult(NamedTuple):
    ok: bool
    alpha: float
    f: float
    g: Optional[np.ndarray]
    dphi: float
    wolfe: bool


def strong_wolfe(phi, f0, dphi0, alpha0, c1, c2, alpha_max=math.inf, max_evals=25) -> _LineSearchResult:
    """Bracketing + zoom search for a step satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, g, dphi)``. On failure ``ok`` is False and no
    step should be taken.
    """
    fail = _LineSearchResult(False, 0.0, f0, None, dphi0, False)
    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = min(alpha0, alpha_max)
    evals = 0

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        nonlocal evals
        while evals < max_evals:
            width = abs(hi - lo)
            if width < 1e-14 * max(1.0, abs(lo)):
                break
            left, right = min(lo, hi), max(lo, hi)
            a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi, left, right)
            # keep away from the interval ends, else bisect
            if min(a - left, right - a) < 0.1 * width:
                a = 0.5 * (left + right)
            f, g, d = phi(a)
            evals += 1
            if f > f0 + c1 * a * dphi0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * dphi0:
                    return _LineSearchResult(True, a, f, g, d, True)
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = a, f, d
        return fail

    while evals < max_evals:
        f, g, d = phi(a)
        evals += 1
        if f > f0 + c1 * a * dphi0 or (a_prev > 0 and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, f, d)
        if abs(d) <= -c2 * dphi0:
            return _LineSearchResult(True, a, f, g, d, True)
        if d >= 0:
            return zoom(a, f, d, a_prev, f_prev, d_prev)
        if a >= alpha_max:
            # sufficient decrease holds but the bound blocks the curvature condition
            return _LineSearchResult(True, a, f, g, d, False)
        lo_ext = a + 0.01 * (a - a_prev)
        hi_ext = min(10.0 * a, alpha_max)
        a_next = _cubic_min(a_prev, f_prev, d_prev, a, f, d, lo_ext, hi_ext)
        a_prev, f_prev, d_prev = a, f, d
        a = a_next
    return fail


def lbfgs_minimize(
    objective: Objective,
    x0: np.ndarray,
    opts: SolverOptions = SolverOptions(),
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, LbfgsReport]:
    """Minimise ``objective`` (returning value and gradient) from ``x0``.

    Stops when the relative objective change falls below ``opts.tolerance``,
    the gradient max-norm falls below ``opts.grad_tolerance``, after
    ``opts.max_iterations`` iterations, or when the line search fails. The
    returned point never has a larger objective than ``x0``.
    """
    x = np.array(x0, dtype=np.float64).reshape(-1)
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, dtype=np.float64), (n,))
    upper = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, dtype=np.float64), (n,))
    x = np.clip(x, lower, upper)
    report = LbfgsReport()

    def evaluate(z):
        f, g = objective(z)
        report.evaluations += 1
        f = float(f)
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise NonFiniteObjective("objective or gradient is not finite", iterate=z.copy())
        return f, g

    f, g = evaluate(x)
    report.initial_value = report.final_value = f
    if opts.max_iterations == 0:
        report.reason = "max_iterations"
        return x, report

    history: deque = deque(maxlen=opts.history_size)
    first = True
    while True:
        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        gf = np.where(free, g, 0.0)
        if np.max(np.abs(gf), initial=0.0) <= opts.grad_tolerance:
            report.converged, report.reason = True, "gradient"
            break
        if report.iterations >= opts.max_iterations:
            report.reason = "max_iterations"
            break

        # two-loop recursion
        q = gf.copy()
        alphas = []
        for s, y, rho in reversed(history):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if history:
            s, y, _ = history[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(history, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = np.where(free, -q, 0.0)
        dphi0 = float(g @ d)
        if not dphi0 < 0:
            history.clear()
            d = -gf
            dphi0 = float(g @ d)

        with np.errstate(divide="ignore", invalid="ignore"):
            caps = np.where(d > 0, (upper - x) / d, np.where(d < 0, (lower - x) / d, np.inf))
        alpha_max = float(np.min(caps, initial=np.inf))
        alpha0 = opts.learning_rate * (min(1.0, 1.0 / np.sum(np.abs(gf))) if first else 1.0)

        def phi(alpha):
            z = np.clip(x + alpha * d, lower, upper)
            fz, gz = evaluate(z)
            return fz, gz, float(gz @ d)

        ls = strong_wolfe(phi, f, dphi0, alpha0, opts.c1, opts.c2, alpha_max, opts.max_line_search)
        if not ls.ok:
            report.reason = "line_search_failed"
            break
        report.steps.append(StepRecord(ls.alpha, f, dphi0, ls.f, ls.dphi, ls.wolfe))
        x_new = np.clip(x + ls.alpha * d, lower, upper)
        s, y = x_new - x, ls.g - g
        ys = float(s @ y)
        if ys > 1e-10 * float(y @ y):
            history.append((s, y, 1.0 / ys))
        f_old = f
        x, f, g = x_new, ls.f, ls.g
        report.iterations += 1
        first = False
        if abs(f_old - f) <= opts.tolerance * max(abs(f_old), abs(f)):
            report.converged, report.reason = True, "tolerance"
            break

    report.final_value = f
    return x, report
