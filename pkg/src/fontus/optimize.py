"""Bounded derivative-free trust-region minimizer.

The model is a diagonal quadratic interpolated on a 2n+1 stencil
(center +/- h_i along each coordinate), minimized in closed form inside the
intersection of the trust region and the bound box, with a classic
accept/shrink ratio test. Deterministic: no randomness, fixed evaluation
order, and the best-seen point is always returned.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class DfoResult:
    x: np.ndarray
    fun: float
    n_evals: int
    history: list  # best objective value after each accepted step


def minimize_dfo(
    fun: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    max_evals: int,
    initial_radius: float | np.ndarray | None = None,
    min_radius: float = 1e-4,
) -> DfoResult:
    """Minimize ``fun`` over box [lower, upper] without derivatives.

    ``initial_radius`` may be a scalar or per-coordinate array in the
    parameter's own units; defaults to 20% of the box half-width.
    """
    x0 = np.asarray(x0, dtype=np.float64).copy()
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    n = x0.size
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    x0 = np.clip(x0, lower, upper)

    half_width = np.maximum((upper - lower) / 2.0, 1e-12)
    if initial_radius is None:
        radius = 0.2 * half_width
    else:
        radius = np.broadcast_to(np.asarray(initial_radius, dtype=np.float64), (n,)).copy()
    radius = np.minimum(radius, half_width)
    radius = np.maximum(radius, min_radius)

    evals = 0

    def call(x):
        nonlocal evals
        evals += 1
        return float(fun(x))

    x_best = x0.copy()
    f_best = call(x_best)
    history = [f_best]

    stale = False  # model already built at current center and failed
    while evals + 2 * n + 1 <= max_evals and np.max(radius) > min_radius:
        h = np.minimum(radius, half_width)
        # stencil values (clipped probes double as bound handling)
        f_plus = np.empty(n)
        f_minus = np.empty(n)
        x_plus = np.empty((n, n))
        x_minus = np.empty((n, n))
        for i in range(n):
            xp = x_best.copy()
            xp[i] = min(x_best[i] + h[i], upper[i])
            xm = x_best.copy()
            xm[i] = max(x_best[i] - h[i], lower[i])
            x_plus[i], x_minus[i] = xp, xm
            f_plus[i] = call(xp)
            f_minus[i] = call(xm)

        # interpolated diagonal quadratic about x_best
        dp = x_plus[np.arange(n), np.arange(n)] - x_best
        dm = x_minus[np.arange(n), np.arange(n)] - x_best
        g = np.zeros(n)
        curv = np.zeros(n)
        for i in range(n):
            a, b = dp[i], dm[i]
            if abs(a - b) < 1e-15:
                continue
            # fit f(x_best + t) ~ f0 + g t + 0.5 c t^2 through both probes
            denom = a * b * (a - b)
            if abs(denom) < 1e-30:
                g[i] = (f_plus[i] - f_minus[i]) / max(a - b, 1e-30)
                continue
            g[i] = (b * b * (f_plus[i] - f_best) - a * a * (f_minus[i] - f_best)) / -denom
            curv[i] = 2.0 * (a * (f_minus[i] - f_best) - b * (f_plus[i] - f_best)) / -denom

        # closed-form minimizer of the separable model in the trust box
        step = np.zeros(n)
        for i in range(n):
            lo = max(lower[i] - x_best[i], -radius[i])
            hi = min(upper[i] - x_best[i], radius[i])
            if curv[i] > 1e-12:
                t = -g[i] / curv[i]
            else:
                t = -np.sign(g[i]) * radius[i]
            step[i] = np.clip(t, lo, hi)

        # fold in any stencil point that beat the center
        stencil_best = None
        fp_min_i = int(np.argmin(f_plus))
        fm_min_i = int(np.argmin(f_minus))
        f_stencil = min(f_plus[fp_min_i], f_minus[fm_min_i])
        if f_stencil < f_best:
            stencil_best = (
                x_plus[fp_min_i] if f_plus[fp_min_i] <= f_minus[fm_min_i] else x_minus[fm_min_i]
            )

        improved = False
        if np.any(step != 0.0) and evals < max_evals:
            x_trial = x_best + step
            f_trial = call(x_trial)
            if f_trial < f_best:
                predicted = -(g @ step + 0.5 * np.sum(curv * step * step))
                actual = f_best - f_trial
                x_best, f_best = x_trial, f_trial
                improved = True
                if predicted > 0 and actual > 0.5 * predicted:
                    radius = np.minimum(radius * 1.6, half_width)
                history.append(f_best)
        if not improved and stencil_best is not None:
            x_best = stencil_best.copy()
            f_best = f_stencil
            improved = True
            history.append(f_best)

        if not improved:
            if stale:
                radius *= 0.35
            else:
                radius *= 0.5
            stale = True
        else:
            stale = False

    return DfoResult(x=x_best, fun=f_best, n_evals=evals, history=history)
