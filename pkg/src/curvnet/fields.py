"""Analytic level-set functions and exact curvature targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class CircleSpec:
    center: tuple[float, float]
    radius: float
    form: Literal["sdf", "quadratic"] = "sdf"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.form not in ("sdf", "quadratic"):
            raise ValueError(f"unknown circle form {self.form!r}")


@dataclass(frozen=True)
class FlowerSpec:
    """Petaled curve ``r(theta) = a cos(p theta) + b``."""

    a: float
    b: float
    p: int

    def __post_init__(self):
        if not self.b > self.a >= 0:
            raise ValueError("flower needs b > a >= 0")


SMOOTH_FLOWER = FlowerSpec(a=0.05, b=0.15, p=3)
ACUTE_FLOWER = FlowerSpec(a=0.075, b=0.15, p=3)


@dataclass(frozen=True)
class CurvatureOracleResult:
    theta_star: float
    closest_point: np.ndarray
    hkappa: float = float("nan")


def eval_circle(spec: CircleSpec, x, y):
    """Circle level set; negative inside.  Accepts scalars or arrays."""
    dx = np.asarray(x, dtype=float) - spec.center[0]
    dy = np.asarray(y, dtype=float) - spec.center[1]
    if spec.form == "sdf":
        return np.sqrt(dx * dx + dy * dy) - spec.radius
    return dx * dx + dy * dy - spec.radius * spec.radius


def polar_angle(x, y):
    """atan2 mapped onto [0, 2pi)."""
    theta = np.arctan2(y, x)
    return np.where(theta < 0, theta + TWO_PI, theta)


def eval_flower(spec: FlowerSpec, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    if np.any(r == 0):
        raise ValueError("flower level set is undefined at the origin")
    theta = polar_angle(x, y)
    return r - spec.a * np.cos(spec.p * theta) - spec.b


def flower_field(spec: FlowerSpec, x, y):
    """Grid-friendly variant of :func:`eval_flower`.

    The origin lies deep inside the interface and has no polar angle; it
    is assigned ``-(a + b)`` (the value along theta = 0) instead of raising.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = polar_angle(x, y)
    return np.hypot(x, y) - spec.a * np.cos(spec.p * theta) - spec.b


def flower_radius(spec: FlowerSpec, theta):
    """r, r', r'' of the interface parametrisation at ``theta``."""
    pt = spec.p * np.asarray(theta, dtype=float)
    r = spec.a * np.cos(pt) + spec.b
    dr = -spec.a * spec.p * np.sin(pt)
    ddr = -spec.a * spec.p * spec.p * np.cos(pt)
    return r, dr, ddr


def flower_curvature(spec: FlowerSpec, theta):
    r, dr, ddr = flower_radius(spec, theta)
    return (r * r + 2.0 * dr * dr - r * ddr) / (r * r + dr * dr) ** 1.5


def flower_point(spec: FlowerSpec, theta):
    r, _, _ = flower_radius(spec, theta)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


class ProjectionError(RuntimeError):
    pass


_SCAN = 4096


def _curve_derivatives(spec: FlowerSpec, theta: float):
    # C, C', C'' of C(theta) = r(theta) (cos theta, sin theta)
    r, dr, ddr = flower_radius(spec, theta)
    c, s = np.cos(theta), np.sin(theta)
    C = np.array([r * c, r * s])
    C1 = np.array([dr * c - r * s, dr * s + r * c])
    C2 = np.array([ddr * c - 2 * dr * s - r * c, ddr * s + 2 * dr * c - r * s])
    return C, C1, C2


def flower_closest_point(spec: FlowerSpec, point, h: float | None = None) -> CurvatureOracleResult:
    """Orthogonal projection of ``point`` onto the flower curve.

    A dense angular scan picks the basin, Newton on the derivative of the
    squared distance polishes it, and bisection on a bracketing interval
    takes over if Newton leaves the basin.  When ``h`` is given the result
    carries ``h * kappa`` at the projection.
    """
    P = np.asarray(point, dtype=float)
    if np.hypot(*P) > 10 * spec.b:
        raise ValueError("point too far from the flower for projection")

    thetas = np.arange(_SCAN) * (TWO_PI / _SCAN)
    pts = flower_point(spec, thetas)
    d2 = np.sum((pts - P) ** 2, axis=1)
    k = int(np.argmin(d2))
    step = TWO_PI / _SCAN

    def grad(t):
        C, C1, C2 = _curve_derivatives(spec, t)
        diff = C - P
        return diff @ C1, C1 @ C1 + diff @ C2

    t = thetas[k]
    converged = False
    for _ in range(50):
        g, gg = grad(t)
        if gg <= 0:
            break
        dt = -g / gg
        if abs(dt) > 2 * step:
            break
        t += dt
        if abs(dt) < 1e-13:
            converged = True
            break
    if not converged:
        lo, hi = thetas[k] - step, thetas[k] + step
        glo, ghi = grad(lo)[0], grad(hi)[0]
        if glo > 0 or ghi < 0:
            raise ProjectionError(
                f"no bracketed minimum near theta={thetas[k]:.6f} for point {P.tolist()}")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if grad(mid)[0] < 0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15:
                break
        t = 0.5 * (lo + hi)

    t = float(np.mod(t, TWO_PI))
    closest = flower_point(spec, t)
    hk = float("nan") if h is None else float(h * flower_curvature(spec, t))
    return CurvatureOracleResult(theta_star=t, closest_point=closest, hkappa=hk)
