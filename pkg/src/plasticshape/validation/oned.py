"""1D comparison: plastic strain fitting vs. order-r variational curve fitting.

A unit segment is attached at 0 -> 0 and 1 -> 2; landmarks ask 1/4 -> 1/4 and
1/2 -> 3/2, so the three subintervals should stretch by (1, 5, 1).  Both
problems are discretized on a uniform grid of N segments (N divisible by 4
so the landmarks sit on nodes).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize as so

LANDMARKS = ((0.25, 0.25), (0.5, 1.5))
ENDPOINTS = (0.0, 2.0)
IDEAL_SLOPES = (1.0, 5.0, 1.0)


class ResolutionError(ValueError):
    pass


@dataclass
class Variational1DCase:
    order: int = 2
    alpha: float = 1e3
    segments: int = 64
    beta: float = 1e4  # plastic model only
    smoothness: float = 1.0  # plastic model only
    landmarks: tuple = LANDMARKS

    def __post_init__(self):
        if self.segments < 64 or self.segments % 4:
            raise ResolutionError("need at least 64 segments, divisible by 4")
        if self.order not in (1, 2, 3):
            raise ValueError("order must be 1, 2 or 3")
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        for t, _ in self.landmarks:
            if abs(t * self.segments - round(t * self.segments)) > 1e-9:
                raise ResolutionError(f"landmark at {t} does not fall on a grid node")

    @property
    def h(self) -> float:
        return 1.0 / self.segments

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.segments + 1)

    def landmark_nodes(self):
        return [int(round(t * self.segments)) for t, _ in self.landmarks]


@dataclass
class Profile:
    t: np.ndarray
    x: np.ndarray
    f_p: np.ndarray | None = None
    landmarks: tuple = LANDMARKS

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.x) / np.diff(self.t)


def difference_matrix(n_nodes: int, order: int) -> np.ndarray:
    D = np.eye(n_nodes)
    for _ in range(order):
        D = np.diff(D, axis=0)
    return D


def solve_variational_1d(case: Variational1DCase) -> Profile:
    """min sum_i h (D^r x / h^r)_i^2 + alpha * landmark misfit^2, hard endpoints."""
    N, h, r = case.segments, case.h, case.order
    D = difference_matrix(N + 1, r) / h**r * np.sqrt(h)
    rows = [D]
    rhs = [np.zeros(D.shape[0])]
    for (t, y), j in zip(case.landmarks, case.landmark_nodes()):
        e = np.zeros(N + 1)
        e[j] = np.sqrt(case.alpha)
        rows.append(e[None, :])
        rhs.append(np.array([np.sqrt(case.alpha) * y]))
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    # eliminate the hard endpoints
    x = np.zeros(N + 1)
    x[0], x[-1] = ENDPOINTS
    b = b - A[:, [0, -1]] @ x[[0, -1]]
    Ai = A[:, 1:-1]
    if np.linalg.matrix_rank(Ai) < Ai.shape[1]:
        raise ResolutionError("discrete variational system is singular (add landmarks or lower the order)")
    x[1:-1] = np.linalg.lstsq(Ai, b, rcond=None)[0]
    return Profile(case.nodes, x, None, case.landmarks)


def plastic_equilibrium(f_p, h: float) -> np.ndarray:
    """Node positions minimizing sum h (xdot/f_p - 1)^2 with x(0)=0, x(1)=2.

    Stationarity makes (xdot/f - 1)/f uniform, so xdot = f + c f^2 with c fixed
    by the endpoint condition.
    """
    f = np.asarray(f_p, dtype=float)
    c = (ENDPOINTS[1] - ENDPOINTS[0] - h * f.sum()) / (h * (f * f).sum())
    slope = f + c * f * f
    return np.concatenate([[ENDPOINTS[0]], ENDPOINTS[0] + h * np.cumsum(slope)])


def _plastic_residuals(f, case: Variational1DCase):
    h = case.h
    x = plastic_equilibrium(f, h)
    slope = np.diff(x) / h
    smooth = np.sqrt(case.smoothness / h**3) * np.diff(f, 2)  # int fp''^2
    lm = np.array([np.sqrt(case.alpha) * (x[j] - y) for (t, y), j in zip(case.landmarks, case.landmark_nodes())])
    elastic = np.sqrt(case.beta * h) * (slope / f - 1.0)
    return np.concatenate([smooth, lm, elastic])


def solve_plastic_1d(case: Variational1DCase, f0=None) -> Profile:
    """Outer least-squares descent in the per-segment plastic stretch f_p."""
    N = case.segments
    f0 = np.full(N, 2.0) if f0 is None else np.asarray(f0, dtype=float)
    res = so.least_squares(
        _plastic_residuals, f0, args=(case,), bounds=(0.01, np.inf), method="trf",
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
    )
    f = res.x
    return Profile(case.nodes, plastic_equilibrium(f, case.h), f, case.landmarks)


# -- metrics ----------------------------------------------------------------------------


def landmark_error(profile: Profile) -> float:
    return max(abs(np.interp(t, profile.t, profile.x) - y) for t, y in profile.landmarks)


def ideal_slopes(t) -> np.ndarray:
    mid = 0.5 * (t[:-1] + t[1:])
    return np.where((mid > 0.25) & (mid < 0.5), IDEAL_SLOPES[1], IDEAL_SLOPES[0])


def oscillation(profile: Profile) -> float:
    """Total variation of the slope in excess of the ideal (1, 5, 1) profile's 8."""
    s = profile.slopes
    return float(np.abs(np.diff(s)).sum() - 8.0)


def subinterval_slopes(profile: Profile, margin: float = 1.0 / 16) -> np.ndarray:
    """Mean slope over each subinterval's interior (``margin`` away from its ends)."""
    mid = 0.5 * (profile.t[:-1] + profile.t[1:])
    out = []
    for a, b in ((0.0, 0.25), (0.25, 0.5), (0.5, 1.0)):
        lo = a + (margin if a > 0 else 0.0)
        hi = b - (margin if b < 1 else 0.0)
        sel = (mid > lo) & (mid < hi)
        out.append(float(profile.slopes[sel].mean()))
    return np.array(out)


def overshoot(profile: Profile) -> float:
    """How far the curve leaves the [0, 2] range of its boundary values."""
    return float(max(0.0, profile.x.max() - 2.0) + max(0.0, -profile.x.min()))


def match_alpha(order: int, target_error: float, segments: int = 64, lo: float = 1e-3, hi: float = 1e14) -> float:
    """Variational alpha whose landmark error equals ``target_error`` (bisection in log alpha)."""
    def err(la):
        return landmark_error(solve_variational_1d(Variational1DCase(order, 10.0**la, segments)))

    a, b = np.log10(lo), np.log10(hi)
    if err(b) > target_error:
        return 10.0**b
    for _ in range(100):
        m = 0.5 * (a + b)
        if err(m) > target_error:
            a = m
        else:
            b = m
    return 10.0**b


__all__ = [
    "Variational1DCase", "Profile", "ResolutionError", "solve_variational_1d", "solve_plastic_1d",
    "plastic_equilibrium", "landmark_error", "oscillation", "subinterval_slopes", "overshoot", "match_alpha",
    "difference_matrix", "ideal_slopes", "LANDMARKS", "IDEAL_SLOPES",
]
