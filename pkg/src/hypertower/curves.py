"""Monotone polyline graphs: the working representation of stable and
unstable curves in chart planes and domain frames.

A stable curve is a graph v1 = g(v2), monotone in v2 and Lipschitz with
constant at most the cone width; an unstable curve is the transpose.  Cone
bounds keep boundary curves in this class, so polylines with adaptive
resampling represent them faithfully at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GraphCurve", "intersect_graphs", "CurveError"]


class CurveError(RuntimeError):
    pass


@dataclass
class GraphCurve:
    """Polyline graph over one coordinate.

    orientation 'stable': points ordered by v2, graph coordinate is v1.
    orientation 'unstable': ordered by v1, graph coordinate is v2.
    """

    orientation: str
    pts: np.ndarray

    def __post_init__(self):
        self.pts = np.asarray(self.pts, dtype=float)
        if self.pts.ndim != 2 or self.pts.shape[1] != 2 or len(self.pts) < 2:
            raise CurveError("a curve needs at least two 2-d points")
        i = self._axis
        order = np.argsort(self.pts[:, i])
        self.pts = self.pts[order]
        if np.any(np.diff(self.pts[:, i]) <= 0):
            # collapse exact duplicates in the parameter, keep strict monotonicity
            keep = np.concatenate([[True], np.diff(self.pts[:, i]) > 1e-300])
            self.pts = self.pts[keep]
            if len(self.pts) < 2 or np.any(np.diff(self.pts[:, self._axis]) <= 0):
                raise CurveError("curve is not monotone in its graph parameter")

    @property
    def _axis(self) -> int:
        return 1 if self.orientation == "stable" else 0

    @property
    def param(self) -> np.ndarray:
        return self.pts[:, self._axis]

    @property
    def values(self) -> np.ndarray:
        return self.pts[:, 1 - self._axis]

    @property
    def lipschitz(self) -> float:
        d = np.diff(self.pts, axis=0)
        i = self._axis
        return float(np.max(np.abs(d[:, 1 - i]) / np.abs(d[:, i])))

    def value(self, t: np.ndarray) -> np.ndarray:
        """Graphed coordinate at parameter t (linear interpolation)."""
        return np.interp(t, self.param, self.values)

    def point(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        v = self.value(t)
        if self.orientation == "stable":
            return np.stack([v, t], axis=-1)
        return np.stack([t, v], axis=-1)

    def span(self) -> tuple[float, float]:
        return float(self.param[0]), float(self.param[-1])

    def clip(self, lo: float, hi: float) -> "GraphCurve":
        """Restrict the parameter range to [lo, hi], interpolating endpoints."""
        t = self.param
        if lo < t[0] - 1e-12 or hi > t[-1] + 1e-12:
            raise CurveError(
                f"clip range [{lo:g}, {hi:g}] exceeds curve span [{t[0]:g}, {t[-1]:g}]")
        lo = max(lo, t[0])
        hi = min(hi, t[-1])
        inner = (t > lo) & (t < hi)
        ts = np.concatenate([[lo], t[inner], [hi]])
        return GraphCurve(self.orientation, self.point(ts))

    def resample(self, n: int) -> "GraphCurve":
        lo, hi = self.span()
        return GraphCurve(self.orientation, self.point(np.linspace(lo, hi, n)))

    def max_abs_value(self) -> float:
        return float(np.max(np.abs(self.values)))


def intersect_graphs(stable: GraphCurve, unstable: GraphCurve,
                     tol: float = 1e-14, maxit: int = 60) -> np.ndarray:
    """Intersection point of a stable and an unstable graph curve.

    Solves v1 = g(v2), v2 = h(v1) by fixed-point iteration; the product of
    the two Lipschitz constants is below omega^2 < 1, so this contracts.
    """
    lo2, hi2 = stable.span()
    lo1, hi1 = unstable.span()
    v2 = 0.5 * (lo2 + hi2)
    for _ in range(maxit):
        v1 = float(np.clip(stable.value(v2), lo1, hi1))
        v2_new = float(np.clip(unstable.value(v1), lo2, hi2))
        if abs(v2_new - v2) < tol:
            v2 = v2_new
            break
        v2 = v2_new
    v1 = float(stable.value(v2))
    return np.array([v1, v2])
