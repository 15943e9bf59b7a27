"""Smooth unconstrained minimizers: damped Gauss-Newton and L-BFGS."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

STOP_REASONS = ("gradient_tol", "step_tol", "max_iter", "line_search_fail")


class OptimizerAbort(RuntimeError):
    """Raised when the objective becomes NaN/inf."""


@dataclass
class OptimizerReport:
    iterations: int
    initial_objective: float
    final_objective: float
    gradient_norm: float
    stop_reason: str
    trace: list[float] = field(default_factory=list)
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "initial_objective": self.initial_objective,
                "final_objective": self.final_objective, "gradient_norm": self.gradient_norm,
                "stop_reason": self.stop_reason, "evaluations": self.evaluations,
                "trace": list(self.trace)}


@dataclass(frozen=True)
class GaussNewtonConfig:
    max_iter: int = 50
    grad_tol: float = 1e-10
    rel_grad_tol: float = 0.0  # relative to the initial gradient norm
    step_tol: float = 1e-12
    damping_init: float = 1e-3  # first nonzero lambda, times mean(diag(H))
    damping_factor: float = 10.0
    max_damping_trials: int = 30


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 100
    grad_tol: float = 1e-8
    rel_grad_tol: float = 0.0
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 20
    curvature_eps: float = 1e-10


def _check_finite(f, where):
    if not np.isfinite(f):
        raise OptimizerAbort(f"objective is {f} at {where}")


def gauss_newton_model(model_fn, x0, cfg: GaussNewtonConfig = GaussNewtonConfig()):
    """Levenberg-damped Gauss-Newton on a quadratic model.

    ``model_fn(x)`` returns ``(f, g, H)`` with ``H`` a positive semidefinite
    Gauss-Newton approximation of the Hessian.  Steps solve
    ``(H + lam I) d = -g``; ``lam`` starts at 0, grows when a step fails to
    decrease ``f`` and shrinks again after successful steps.
    """
    x = np.array(x0, dtype=float)
    f, g, H = model_fn(x)
    _check_finite(f, "x0")
    evals = 1
    g0 = np.linalg.norm(g)
    tol = max(cfg.grad_tol, cfg.rel_grad_tol * g0)
    trace = [f]
    lam = 0.0
    stop = "max_iter"
    it = 0
    while True:
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            stop = "gradient_tol"
            break
        if it >= cfg.max_iter:
            break
        base = cfg.damping_init * max(np.mean(np.diag(H)), np.finfo(float).tiny)
        accepted = False
        for _ in range(cfg.max_damping_trials):
            try:
                step = np.linalg.solve(H + lam * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                if np.linalg.norm(step) <= cfg.step_tol:
                    break
                x_new = x + step
                f_new, g_new, H_new = model_fn(x_new)
                evals += 1
                _check_finite(f_new, "trial step")
                if f_new < f:
                    accepted = True
                    break
            lam = base if lam == 0.0 else lam * cfg.damping_factor
        if not accepted:
            stop = "step_tol"
            break
        small_step = np.linalg.norm(step) <= cfg.step_tol
        x, f, g, H = x_new, f_new, g_new, H_new
        trace.append(f)
        it += 1
        lam = lam / cfg.damping_factor if lam > base * 1e-3 else 0.0
        if small_step:
            stop = "step_tol"
            break
    report = OptimizerReport(it, trace[0], f, float(np.linalg.norm(g)), stop, trace, evals)
    log.debug("gauss-newton: %s after %d iterations, f=%g", stop, it, f)
    return x, report


def gauss_newton(residual_fn, x0, cfg: GaussNewtonConfig = GaussNewtonConfig()):
    """Minimize ``0.5 |r(x)|^2`` where ``residual_fn(x)`` returns ``(r, J)``."""

    def model(x):
        r, J = residual_fn(x)
        r = np.atleast_1d(np.asarray(r, dtype=float))
        J = np.asarray(J, dtype=float).reshape(len(r), -1)
        return 0.5 * float(r @ r), J.T @ r, J.T @ J

    return gauss_newton_model(model, x0, cfg)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb), or None."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if np.isfinite(t) else None


def strong_wolfe(phi, f0, g0, alpha0, c1=1e-4, c2=0.9, max_trials=20, alpha_max=1e10):
    """Strong-Wolfe line search (bracketing + cubic zoom).

    ``phi(alpha)`` returns ``(f, dphi, payload)``.  Returns
    ``(alpha, f, payload, trials)`` with ``alpha=None`` on failure; the best
    sufficient-decrease point seen is then returned in ``f``/``payload``.
    """
    trials = 0
    best = (None, f0, None)
    a_prev, f_prev, g_prev = 0.0, f0, g0
    alpha = alpha0

    def remember(a, f, payload):
        nonlocal best
        if f < best[1] and f <= f0 + c1 * a * g0:
            best = (a, f, payload)

    def zoom(lo, flo, glo, hi, fhi, ghi):
        nonlocal trials
        while trials < max_trials:
            t = _cubic_min(lo, flo, glo, hi, fhi, ghi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if t is None or not (left + margin <= t <= right - margin):
                t = 0.5 * (lo + hi)
            ft, gt, pt = phi(t)
            trials += 1
            if not np.isfinite(ft):
                hi, fhi, ghi = t, np.inf, 0.0
                continue
            remember(t, ft, pt)
            if ft > f0 + c1 * t * g0 or ft >= flo:
                hi, fhi, ghi = t, ft, gt
            else:
                if abs(gt) <= -c2 * g0:
                    return t, ft, pt
                if gt * (hi - lo) >= 0:
                    hi, fhi, ghi = lo, flo, glo
                lo, flo, glo = t, ft, gt
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        return None, None, None

    while trials < max_trials:
        fa, ga, pa = phi(alpha)
        trials += 1
        if not np.isfinite(fa):
            alpha = 0.5 * (a_prev + alpha)
            continue
        remember(alpha, fa, pa)
        if fa > f0 + c1 * alpha * g0 or (trials > 1 and fa >= f_prev):
            res = zoom(a_prev, f_prev, g_prev, alpha, fa, ga)
            break
        if abs(ga) <= -c2 * g0:
            return alpha, fa, pa, trials
        if ga >= 0:
            res = zoom(alpha, fa, ga, a_prev, f_prev, g_prev)
            break
        a_prev, f_prev, g_prev = alpha, fa, ga
        alpha = min(2.0 * alpha, alpha_max)
    else:
        res = (None, None, None)
    if res[0] is not None:
        return res[0], res[1], res[2], trials
    return None, best[1], best[2] if best[0] is not None else None, trials


def lbfgs(f_and_grad, x0, cfg: LbfgsConfig = LbfgsConfig(), callback=None):
    """Limited-memory BFGS (two-loop recursion) with a strong-Wolfe line search.

    ``f_and_grad(x)`` returns ``(f, g)``.  Curvature pairs with
    ``s.y <= curvature_eps |s||y|`` are skipped.  On line-search failure the
    best sufficient-decrease point found (or the current iterate) is returned.
    """
    x = np.array(x0, dtype=float)
    f, g = f_and_grad(x)
    g = np.asarray(g, dtype=float)
    _check_finite(f, "x0")
    evals = 1
    tol = max(cfg.grad_tol, cfg.rel_grad_tol * np.linalg.norm(g))
    trace = [float(f)]
    pairs: deque = deque(maxlen=cfg.memory)
    stop = "max_iter"
    it = 0
    while True:
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            stop = "gradient_tol"
            break
        if it >= cfg.max_iter:
            break
        # two-loop recursion
        q = -g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = q
        dg = float(g @ d)
        if dg >= 0:  # not a descent direction; restart from steepest descent
            pairs.clear()
            d = -g
            dg = float(g @ d)
        alpha0 = 1.0 if pairs else min(1.0, 1.0 / gnorm)

        def phi(alpha):
            nonlocal evals
            xa = x + alpha * d
            fa, ga = f_and_grad(xa)
            evals += 1
            ga = np.asarray(ga, dtype=float)
            return float(fa), float(ga @ d), (xa, ga)

        alpha, f_new, payload, _ = strong_wolfe(phi, f, dg, alpha0, cfg.c1, cfg.c2,
                                                cfg.max_line_search)
        if alpha is None:
            if payload is not None and f_new < f:
                x, g = payload
                f = f_new
                trace.append(float(f))
                it += 1
            stop = "line_search_fail"
            break
        x_new, g_new = payload
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > cfg.curvature_eps * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        _check_finite(f, f"iteration {it}")
        trace.append(float(f))
        it += 1
        if callback is not None:
            callback(x, f)
    report = OptimizerReport(it, trace[0], float(f), float(np.linalg.norm(g)), stop, trace, evals)
    log.debug("lbfgs: %s after %d iterations, f=%g", stop, it, f)
    return x, report
