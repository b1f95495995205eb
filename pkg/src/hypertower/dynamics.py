"""Surface diffeomorphisms of the flat 2-torus with exact derivatives.

All operations are array-first: points are arrays of shape ``(..., 2)`` with
coordinates in ``[0, 1)``, matrices are ``(..., 2, 2)``.  The flat metric makes
the exponential map a translation, so chart changes later on are exact linear
algebra plus mod-1 reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "TorusPoint",
    "TangentVector",
    "SurfaceMap",
    "wrap",
    "torus_diff",
    "torus_dist",
    "iterate",
    "orbit",
    "cocycle",
    "builtin_maps",
    "get_map",
    "linear_automorphism",
    "cat_map",
    "perturbed_cat_map",
    "NotHyperbolicError",
]


class NotHyperbolicError(ValueError):
    """Raised when a requested toral automorphism is not hyperbolic."""


def wrap(p: np.ndarray) -> np.ndarray:
    """Reduce coordinates mod 1 into [0, 1)."""
    return np.mod(np.asarray(p, dtype=float), 1.0)


def torus_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal representative of a - b, componentwise in [-1/2, 1/2)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.round(d)


def torus_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Flat-torus distance: Euclidean norm of the minimal representative."""
    return np.linalg.norm(torus_diff(a, b), axis=-1)


def TorusPoint(x1: float, x2: float) -> np.ndarray:
    """Construct a torus point, reduced mod 1."""
    return wrap(np.array([x1, x2], dtype=float))


@dataclass(frozen=True)
class TangentVector:
    """A tangent vector at a base point; flat metric, Euclidean norm."""

    base: np.ndarray
    v: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.v))

    def unit(self) -> "TangentVector":
        return TangentVector(self.base, self.v / np.linalg.norm(self.v))


@dataclass(frozen=True)
class SurfaceMap:
    """A C^{1+alpha} diffeomorphism of the 2-torus with analytic derivative.

    ``forward``/``inverse`` map ``(..., 2)`` point arrays to point arrays;
    ``derivative``/``inverse_derivative`` return ``(..., 2, 2)`` Jacobians.
    ``inverse_derivative(x)`` is the derivative of ``f^{-1}`` at ``x``, i.e.
    the matrix inverse of ``derivative`` at the preimage.
    """

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    inverse_derivative: Callable[[np.ndarray], np.ndarray]
    hoelder_exponent: float = 1.0
    linear: bool = False
    matrix: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    def __repr__(self) -> str:  # keep dataclass noise out of reports
        return f"SurfaceMap({self.name!r})"


def _mat_apply(m: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.einsum("ij,...j->...i", m, np.asarray(p, dtype=float))


def linear_automorphism(m, name: Optional[str] = None) -> SurfaceMap:
    """Hyperbolic toral automorphism from an SL(2,Z) matrix with |trace| > 2.

    Rejects matrices that are non-integer, have det != 1, or |trace| <= 2
    (eigenvalues on the unit circle, no hyperbolicity).
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2) or not np.allclose(m, np.round(m)):
        raise NotHyperbolicError("matrix must be 2x2 with integer entries")
    m = np.round(m)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if not np.isclose(det, 1.0):
        raise NotHyperbolicError(f"matrix must be in SL(2,Z); det={det:g}")
    tr = m[0, 0] + m[1, 1]
    if abs(tr) <= 2:
        raise NotHyperbolicError(f"|trace|={abs(tr):g} <= 2: not hyperbolic")
    minv = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
    const = np.broadcast_to  # derivative is constant

    def deriv(p, _m=m):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(_m, p.shape[:-1] + (2, 2)).copy()

    def ideriv(p, _m=minv):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(_m, p.shape[:-1] + (2, 2)).copy()

    return SurfaceMap(
        name=name or f"linear[{int(m[0,0])},{int(m[0,1])};{int(m[1,0])},{int(m[1,1])}]",
        forward=lambda p: wrap(_mat_apply(m, p)),
        inverse=lambda p: wrap(_mat_apply(minv, p)),
        derivative=deriv,
        inverse_derivative=ideriv,
        hoelder_exponent=1.0,
        linear=True,
        matrix=m,
        params={"matrix": m.astype(int).tolist()},
    )


def cat_map() -> SurfaceMap:
    """The automorphism A = [[2,1],[1,1]]; chi = log((3+sqrt5)/2)."""
    sm = linear_automorphism([[2, 1], [1, 1]], name="cat")
    return sm


def perturbed_cat_map(eps_p: float = 0.03) -> SurfaceMap:
    """f(x) = A x + (eps_p sin(2 pi x2), 0) mod 1, with Newton inverse.

    eps_p <= 0.05 keeps the cone-field hyperbolicity: the derivative
    perturbation has norm 2 pi eps_p <= 0.315, below A's smallest singular
    value (3-sqrt5)/2 = 0.382.
    """
    if not 0.0 <= eps_p <= 0.05:
        raise ValueError("perturbation amplitude must lie in [0, 0.05]")
    a = np.array([[2.0, 1.0], [1.0, 1.0]])
    ainv = np.array([[1.0, -1.0], [-1.0, 2.0]])
    two_pi = 2.0 * np.pi

    def fwd(p):
        p = np.asarray(p, dtype=float)
        out = _mat_apply(a, p)
        out = out.copy()
        out[..., 0] += eps_p * np.sin(two_pi * p[..., 1])
        return wrap(out)

    def deriv(p):
        p = np.asarray(p, dtype=float)
        j = np.broadcast_to(a, p.shape[:-1] + (2, 2)).copy()
        j[..., 0, 1] += eps_p * two_pi * np.cos(two_pi * p[..., 1])
        return j

    def _solve2(j, r):
        det = j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
        out = np.empty_like(r)
        out[..., 0] = (j[..., 1, 1] * r[..., 0] - j[..., 0, 1] * r[..., 1]) / det
        out[..., 1] = (-j[..., 1, 0] * r[..., 0] + j[..., 0, 0] * r[..., 1]) / det
        return out

    def inv(p, tol=1e-13, maxit=60):
        p = np.asarray(p, dtype=float)
        x = wrap(_mat_apply(ainv, p))
        for _ in range(maxit):
            r = torus_diff(fwd(x), p)
            if np.max(np.abs(r)) < tol:
                break
            x = wrap(x - _solve2(deriv(x), r))
        return x

    def ideriv(p):
        j = deriv(inv(p))
        det = j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
        out = np.empty_like(j)
        out[..., 0, 0] = j[..., 1, 1]
        out[..., 1, 1] = j[..., 0, 0]
        out[..., 0, 1] = -j[..., 0, 1]
        out[..., 1, 0] = -j[..., 1, 0]
        return out / det[..., None, None]

    return SurfaceMap(
        name="perturbed-cat",
        forward=fwd,
        inverse=inv,
        derivative=deriv,
        inverse_derivative=ideriv,
        hoelder_exponent=1.0,
        linear=(eps_p == 0.0),
        matrix=a if eps_p == 0.0 else None,
        params={"eps_p": eps_p},
    )


def builtin_maps() -> list[SurfaceMap]:
    """The standard example maps used throughout the test suites."""
    return [
        cat_map(),
        perturbed_cat_map(),
        linear_automorphism([[3, 2], [1, 1]], name="sl2-3211"),
    ]


def get_map(name: str, **params) -> SurfaceMap:
    """Look up a builtin map by name; parameters per map family."""
    if name == "cat":
        return cat_map()
    if name == "perturbed-cat":
        return perturbed_cat_map(**params)
    if name == "linear":
        return linear_automorphism(params["matrix"])
    for sm in builtin_maps():
        if sm.name == name:
            return sm
    raise KeyError(f"unknown map {name!r}")


def iterate(sm: SurfaceMap, p: np.ndarray, n: int) -> np.ndarray:
    """f^n(p); composes forward or inverse |n| times, reducing mod 1 each step."""
    p = wrap(p)
    step = sm.forward if n >= 0 else sm.inverse
    for _ in range(abs(int(n))):
        p = step(p)
    return p


def orbit(sm: SurfaceMap, p: np.ndarray, n: int) -> np.ndarray:
    """Orbit segment [p, f(p), ..., f^n(p)] (or backward for n < 0).

    Returns an array of shape (|n|+1,) + p.shape.
    """
    p = wrap(p)
    out = [p]
    step = sm.forward if n >= 0 else sm.inverse
    for _ in range(abs(int(n))):
        p = step(p)
        out.append(p)
    return np.stack(out, axis=0)


def cocycle(sm: SurfaceMap, p: np.ndarray, n: int) -> np.ndarray:
    """Derivative cocycle Df^n_p by the chain rule.

    For n < 0 multiplies ``inverse_derivative`` along the backward orbit:
    Df^{-k}_p = D(f^{-1})_{f^{-(k-1)}p} ... D(f^{-1})_p.
    """
    p = wrap(p)
    shape = np.asarray(p, dtype=float).shape[:-1] + (2, 2)
    acc = np.broadcast_to(np.eye(2), shape).copy()
    if n >= 0:
        for _ in range(int(n)):
            acc = sm.derivative(p) @ acc
            p = sm.forward(p)
    else:
        for _ in range(-int(n)):
            acc = sm.inverse_derivative(p) @ acc
            p = sm.inverse(p)
    return acc
