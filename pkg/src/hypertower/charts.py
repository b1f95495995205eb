"""Lyapunov charts: the norms s(x), u(x), the coordinate change L_x, chart
boxes, the chart-coordinate map, and the one-step hyperbolicity verification.

The chart at x turns the derivative into diag(A_x, B_x) with A_x >= e^lambda
and B_x <= e^-lambda (the Oseledets--Pesin reduction), at the price of a
coordinate change whose norm grows like e^{2 eps l} with the regularity level.

Series policy: s(x)^2 = 2 sum_n e^{2 n lambda} |Df^n e^s|^2 and its u-analogue
are truncated at N_t terms with the geometric tail certified below 1e-10 of
the value; one-step norms along the orbit are taken against locally estimated
unit directions, so no accumulation of directional error occurs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dynamics import SurfaceMap, torus_diff, wrap
from .regularity import (
    DerivedConstants,
    HyperbolicityParams,
    estimate_splitting_batch,
    orbit_frame_data,
    regularity_batch,
    splitting_angle,
)

__all__ = [
    "Chart",
    "ChartMap",
    "OneStepReport",
    "CalibrationResult",
    "b_level_value",
    "su_values",
    "build_chart",
    "build_charts",
    "chart_pair",
    "chart_bx",
    "oseledets_pesin_check",
    "chart_map",
    "verify_one_step_hyperbolicity",
    "calibrate_b",
    "ChartError",
    "OffDiagonalError",
    "ReductionBoundError",
    "TruncationError",
]

SERIES_RTOL = 1e-10
_C_CAP_LOG = 2.0  # certified truncation assumes log C(x) <= 2 (level <= 200/eps)


class ChartError(RuntimeError):
    pass


class OffDiagonalError(ChartError):
    """Conjugated derivative not diagonal: splitting estimate is inconsistent."""


class ReductionBoundError(ChartError):
    """Diagonal coefficients violate the reduction bounds e^lam <= A, B <= e^-lam."""


class TruncationError(ChartError):
    """Certified tail tolerance unreachable within the term cap."""


@dataclass(frozen=True)
class Chart:
    """Lyapunov chart data at a point.

    L maps chart coordinates to the ambient tangent plane; its columns are
    e_u/u and e_s/s.  b_level is the half-width of the level box; b_x is the
    pointwise half-width (computed on demand, see ``chart_bx``).
    """

    base: np.ndarray
    e_s: np.ndarray
    e_u: np.ndarray
    s: float
    u: float
    L: np.ndarray
    L_inv: np.ndarray
    level: int
    b_level: float
    b_x: Optional[float] = None

    @property
    def angle(self) -> float:
        return float(splitting_angle(self.e_s, self.e_u))

    @property
    def L_inv_norm(self) -> float:
        return float(np.linalg.norm(self.L_inv, 2))

    def to_chart(self, ambient_pts: np.ndarray) -> np.ndarray:
        """Chart coordinates of ambient points (soul of Psi_x^{-1})."""
        return np.einsum("ij,...j->...i", self.L_inv, torus_diff(ambient_pts, self.base))

    def to_ambient(self, z: np.ndarray) -> np.ndarray:
        """Psi_x(z): ambient point of chart coordinates z."""
        return wrap(self.base + np.einsum("ij,...j->...i", self.L, np.asarray(z, dtype=float)))


def _inv2(m: np.ndarray) -> np.ndarray:
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / det[..., None, None]


def series_terms(params: HyperbolicityParams, chi: float | None = None) -> int:
    """Truncation length with the geometric tail certified below SERIES_RTOL."""
    chi = chi if chi is not None else params.chi
    q = 2.0 * (params.lam - chi)
    n = (math.log(SERIES_RTOL * (1.0 - math.exp(q))) - 2.0 * _C_CAP_LOG) / q
    n = int(math.ceil(n))
    if n > 10_000:
        raise TruncationError(f"series truncation needs {n} > 1e4 terms")
    return max(n, 5)


def b_level_value(params: HyperbolicityParams, constants: DerivedConstants,
                  b: float, level: int) -> float:
    """Level box half-width: b (3 Q0 Qhat^-1 e^{2 eps l} sum_k e^{-|k| eps})^{-1/alpha}."""
    eps = params.epsilon
    ssum = (1.0 + math.exp(-eps)) / (1.0 - math.exp(-eps))
    base = 3.0 * constants.Q0 / constants.Qhat * math.exp(2.0 * eps * level) * ssum
    return b * base ** (-1.0 / params.alpha)


def _linear_su(sm: SurfaceMap, params: HyperbolicityParams) -> tuple[float, float]:
    ev = np.linalg.eigvals(sm.matrix)
    lam_u = float(np.max(np.abs(ev)))
    lam_s = float(np.min(np.abs(ev)))
    rs = math.exp(params.lam) * lam_s
    ru = math.exp(params.lam) / lam_u
    if rs >= 1.0 or ru >= 1.0:
        raise TruncationError("lambda exceeds the contraction rate of the linear map")
    s = math.sqrt(2.0 / (1.0 - rs * rs))
    u = math.sqrt(2.0 / (1.0 - ru * ru))
    return s, u


def _su_from_logs(log_a, log_d, reach, n_t, lam):
    """s,u at every window offset where the truncated sums fit (else nan).

    s_k^2 = 2 sum_n exp(2 n lam + 2(Sa[k+n] - Sa[k])) with Sa the cumulative
    log of stable one-step norms, and dually for u with backward segments.
    """
    sa = np.concatenate([np.zeros((1,) + log_a.shape[1:]), np.cumsum(log_a, axis=0)], axis=0)
    sd = np.concatenate([np.zeros((1,) + log_d.shape[1:]), np.cumsum(log_d, axis=0)], axis=0)
    n = np.arange(n_t + 1)
    out_s = np.full((2 * reach + 1,) + log_a.shape[1:], np.nan)
    out_u = np.full_like(out_s, np.nan)
    for k in range(2 * reach + 1):
        if k + n_t <= 2 * reach:
            seg = sa[k + n] - sa[k]          # (n_t+1, B)
            out_s[k] = np.sqrt(2.0 * np.sum(np.exp(2.0 * (n[:, None] * lam + seg)), axis=0))
        if k - n_t >= 0:
            seg = sd[k] - sd[k - n]
            out_u[k] = np.sqrt(2.0 * np.sum(np.exp(2.0 * (n[:, None] * lam - seg)), axis=0))
    return out_s, out_u


def su_values(sm: SurfaceMap, pts: np.ndarray, params: HyperbolicityParams,
              horizon: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """s(x), u(x) for a batch of points (closed form for linear maps)."""
    pts = wrap(np.asarray(pts, dtype=float))
    shape = pts.shape[:-1]
    if sm.linear:
        s, u = _linear_su(sm, params)
        return np.full(shape, s), np.full(shape, u)
    n_t = series_terms(params)
    _, _, _, log_a, log_d = orbit_frame_data(sm, pts, n_t, horizon)
    out_s, out_u = _su_from_logs(log_a, log_d, n_t, n_t, params.lam)
    return out_s[n_t], out_u[n_t]


def _charts_from_arrays(pts, e_s, e_u, s, u, levels, params, constants, b):
    charts = []
    pts2 = pts.reshape(-1, 2)
    e_s2, e_u2 = e_s.reshape(-1, 2), e_u.reshape(-1, 2)
    s2, u2 = np.ravel(s), np.ravel(u)
    lv = np.ravel(levels)
    for i in range(len(pts2)):
        L = np.column_stack([e_u2[i] / u2[i], e_s2[i] / s2[i]])
        charts.append(
            Chart(
                base=pts2[i], e_s=e_s2[i], e_u=e_u2[i],
                s=float(s2[i]), u=float(u2[i]),
                L=L, L_inv=_inv2(L), level=int(lv[i]),
                b_level=b_level_value(params, constants, b, int(lv[i])),
            )
        )
    return charts


def build_charts(
    sm: SurfaceMap,
    pts: np.ndarray,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    levels: np.ndarray | int | None = None,
    horizon: int = 30,
) -> list[Chart]:
    """Charts at a batch of points; levels measured if not declared."""
    pts = wrap(np.atleast_2d(np.asarray(pts, dtype=float)))
    e_s, e_u = estimate_splitting_batch(sm, pts, horizon)
    s, u = su_values(sm, pts, params, horizon)
    if levels is None:
        _, _, lv = regularity_batch(sm, pts, params, e_s=e_s, e_u=e_u, check_stable=False)
        if np.any(lv < 0):
            raise ChartError("some points are not regular at this chi")
    else:
        lv = np.broadcast_to(np.asarray(levels, dtype=int), pts.shape[:-1])
    return _charts_from_arrays(pts, e_s, e_u, s, u, lv, params, constants, b)


def build_chart(
    sm: SurfaceMap,
    p: np.ndarray,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    level: int | None = None,
    horizon: int = 30,
) -> Chart:
    """Chart at a single point (declared level optional, else measured)."""
    return build_charts(sm, np.asarray(p, dtype=float)[None, :], params, constants, b,
                        levels=None if level is None else level, horizon=horizon)[0]


def _align(vec: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return -vec if float(np.dot(vec, ref)) < 0 else vec


def chart_pair(
    sm: SurfaceMap,
    p: np.ndarray,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    levels: tuple[int, int] | None = None,
    horizon: int = 30,
) -> tuple[Chart, Chart]:
    """Charts at p and f(p) with orientation-consistent splittings.

    The directions at f(p) are sign-aligned with the derivative images of the
    directions at p, so the reduced derivative has positive diagonal.
    """
    p = wrap(np.asarray(p, dtype=float))
    fp = sm.forward(p)
    lv = list(levels) if levels is not None else [None, None]
    cx = build_chart(sm, p, params, constants, b, level=lv[0], horizon=horizon)
    cy = build_chart(sm, fp, params, constants, b, level=lv[1], horizon=horizon)
    j = sm.derivative(p)
    ey_u = _align(cy.e_u, j @ cx.e_u)
    ey_s = _align(cy.e_s, j @ cx.e_s)
    L = np.column_stack([ey_u / cy.u, ey_s / cy.s])
    cy = replace(cy, e_s=ey_s, e_u=ey_u, L=L, L_inv=_inv2(L))
    return cx, cy


def chart_bx(
    sm: SurfaceMap,
    chart: Chart,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    horizon: int = 30,
) -> float:
    """Pointwise box half-width b(x), truncated two-sided sum with tail
    certified by the slow-variation envelope |L^-1_{f^k x}| <= 3 Q0/Qhat
    e^{2 eps l} e^{2 eps |k|}."""
    eps = params.epsilon
    env = 3.0 * constants.Q0 / constants.Qhat * math.exp(2.0 * eps * chart.level)
    if sm.linear:
        ssum = (1.0 + math.exp(-3 * eps)) / (1.0 - math.exp(-3 * eps))
        total = chart.L_inv_norm * ssum
        return b * total ** (-1.0 / params.alpha)
    # need tail 2 env e^{-eps(K+1)}/(1-e^{-eps}) <= SERIES_RTOL * partial, partial >= 1
    k_cert = math.ceil((math.log(2 * env / (1 - math.exp(-eps))) - math.log(SERIES_RTOL)) / eps)
    if k_cert > 10_000:
        raise TruncationError(f"b(x) truncation needs {k_cert} > 1e4 terms")
    n_t = series_terms(params)
    window, e_s, e_u, log_a, log_d = orbit_frame_data(
        sm, chart.base[None, :], k_cert + n_t, horizon)
    s_all, u_all = _su_from_logs(log_a, log_d, k_cert + n_t, n_t, params.lam)
    ks = np.arange(-k_cert, k_cert + 1)
    idx = ks + k_cert + n_t
    s2 = s_all[idx, 0] ** 2
    u2 = u_all[idx, 0] ** 2
    ang = splitting_angle(e_s[idx, 0], e_u[idx, 0])
    sin2 = np.sin(ang) ** 2
    norm2 = (s2 + u2 + np.sqrt((s2 + u2) ** 2 - 4 * s2 * u2 * sin2)) / (2 * sin2)
    total = float(np.sum(np.exp(-3.0 * eps * np.abs(ks)) * np.sqrt(norm2)))
    return b * total ** (-1.0 / params.alpha)


# ---------------------------------------------------------------------------
# Oseledets--Pesin reduction and the chart-coordinate map


def oseledets_pesin_check(sm: SurfaceMap, cx: Chart, cfx: Chart,
                          offdiag_tol: float = 1e-8) -> tuple[float, float]:
    """Conjugated derivative at the origin; returns its diagonal (A, B).

    Raises OffDiagonalError if the conjugated matrix is not diagonal (bad
    splitting), ReductionBoundError if A < e^lambda or B > e^-lambda.
    The lambda used is recovered from nothing here: callers assert against
    their own params; this check uses the invariant pair ordering A > 1 > B.
    """
    m = cfx.L_inv @ sm.derivative(cx.base) @ cx.L
    diag_mag = max(abs(m[0, 0]), abs(m[1, 1]))
    if max(abs(m[0, 1]), abs(m[1, 0])) >= offdiag_tol * diag_mag:
        raise OffDiagonalError(
            f"off-diagonal {max(abs(m[0,1]), abs(m[1,0])):.3e} vs diagonal {diag_mag:.3e}: "
            "splitting not Df-invariant at this tolerance"
        )
    return float(m[0, 0]), float(m[1, 1])


def assert_reduction_bounds(a: float, bcoef: float, lam: float, tol: float = 1e-9) -> None:
    el = math.exp(lam)
    if not (a >= el * (1 - tol)):
        raise ReductionBoundError(f"A={a:.6g} < e^lambda={el:.6g}")
    if not (0.0 < bcoef <= (1 + tol) / el):
        raise ReductionBoundError(f"B={bcoef:.6g} outside (0, e^-lambda={1/el:.6g}]")


@dataclass
class ChartMap:
    """f in chart coordinates: f_x = Psi_{f(x)}^{-1} o f o Psi_x."""

    sm: SurfaceMap
    source: Chart
    target: Chart

    def _check_domain(self, z: np.ndarray, half: float) -> None:
        if np.any(np.abs(z) > half * (1 + 1e-9) + 1e-15):
            raise ChartError("chart point outside the source box")

    def evaluate(self, z: np.ndarray, check: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if check:
            self._check_domain(z, self.source.b_level)
        amb = self.source.to_ambient(z)
        return self.target.to_chart(self.sm.forward(amb))

    def derivative(self, z: np.ndarray, check: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if check:
            self._check_domain(z, self.source.b_level)
        amb = self.source.to_ambient(z)
        j = self.sm.derivative(amb)
        return np.einsum("ij,...jk,kl->...il", self.target.L_inv, j, self.source.L)

    def inverse_evaluate(self, w: np.ndarray, check: bool = True) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if check:
            self._check_domain(w, self.target.b_level)
        amb = self.target.to_ambient(w)
        return self.source.to_chart(self.sm.inverse(amb))


def chart_map(sm: SurfaceMap, cx: Chart, cfx: Chart) -> ChartMap:
    if not np.allclose(torus_diff(sm.forward(cx.base), cfx.base), 0.0, atol=1e-12):
        raise ChartError("target chart is not based at f(source base)")
    return ChartMap(sm, cx, cfx)


# ---------------------------------------------------------------------------
# One-step hyperbolicity verification and the calibration of b


@dataclass
class OneStepReport:
    n_points: int
    n_vectors: int
    violations: list
    strip_halfwidth: float
    strip_bound: float
    max_lipschitz: float

    @property
    def passed(self) -> bool:
        return not self.violations


def _cone_vectors(omega: float, kind: str, n: int) -> np.ndarray:
    """Unit vectors spanning the open cone, boundary inset by 1e-9."""
    t = np.linspace(-1 + 1e-9, 1 - 1e-9, n) * omega
    if kind == "u":
        v = np.stack([np.ones(n), t], axis=-1)
    else:
        v = np.stack([t, np.ones(n)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def verify_one_step_hyperbolicity(
    cmap: ChartMap,
    omega: float,
    lam: float,
    n_samples: int = 32,
    rng: np.random.Generator | None = None,
    n_vectors: int = 9,
    n_curve: int = 65,
    quarantine: float = 1e-6,
) -> OneStepReport:
    """Cone invariance, e^{lam/2} growth, and strip containment for one step.

    Samples chart points in the source strip (inset by the quarantine band),
    checks that K^u maps into the strong unstable cone with norm growth at
    least e^{lam/2}, dually for K^s under the inverse map, and that the
    preimage of the target box is a strongly stable strip: boundary slopes at
    most e^-lam omega and horizontal extent at most e^{-lam/3} b_{l0}.
    Violations are returned with their witness point and vector.
    """
    rng = rng or np.random.default_rng(0)
    b0, b1 = cmap.source.b_level, cmap.target.b_level
    growth = math.exp(lam / 2)
    strong = math.exp(-lam) * omega
    violations: list[dict] = []

    z = rng.uniform(-1, 1, size=(n_samples, 2)) * (b0 - quarantine * b0)
    w = cmap.evaluate(z, check=False)
    inside = np.all(np.abs(w) <= b1 * (1 - quarantine), axis=-1)
    z_in = z[inside]
    vu = _cone_vectors(omega, "u", n_vectors)
    for zp in z_in:
        d = cmap.derivative(zp, check=False)
        img = vu @ d.T
        norms = np.linalg.norm(img, axis=-1)
        ok_cone = np.abs(img[:, 1]) <= strong * np.abs(img[:, 0]) * (1 + 1e-9)
        ok_grow = norms >= growth * (1 - 1e-12)
        for k in np.nonzero(~(ok_cone & ok_grow))[0]:
            violations.append({"kind": "unstable", "point": zp.tolist(),
                               "vector": vu[k].tolist(), "norm": float(norms[k])})
    # dual: stable cone under the inverse, sampled at image points
    w_in = w[inside]
    vs = _cone_vectors(omega, "s", n_vectors)
    for wp, zp in zip(w_in, z_in):
        d = cmap.derivative(zp, check=False)
        dinv = _inv2(d)
        img = vs @ dinv.T
        norms = np.linalg.norm(img, axis=-1)
        ok_cone = np.abs(img[:, 0]) <= strong * np.abs(img[:, 1]) * (1 + 1e-9)
        ok_grow = norms >= growth * (1 - 1e-12)
        for k in np.nonzero(~(ok_cone & ok_grow))[0]:
            violations.append({"kind": "stable", "point": wp.tolist(),
                               "vector": vs[k].tolist(), "norm": float(norms[k])})

    # strip containment: pull the target box's stable boundaries back
    tgrid = np.linspace(-b1, b1, n_curve)
    strip_bound = math.exp(-lam / 3) * b0
    max_extent = 0.0
    max_lip = 0.0
    for side in (-1.0, 1.0):
        curve_w = np.stack([np.full(n_curve, side * b1), tgrid], axis=-1)
        curve_z = cmap.inverse_evaluate(curve_w, check=False)
        # clip to the source box's vertical range
        z2 = curve_z[:, 1]
        keep = np.abs(z2) <= b0
        if keep.sum() < 2:
            violations.append({"kind": "strip-span", "side": side})
            continue
        cz = curve_z[keep]
        order = np.argsort(cz[:, 1])
        cz = cz[order]
        dz = np.diff(cz, axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            slopes = np.abs(dz[:, 0]) / np.abs(dz[:, 1])
        max_lip = max(max_lip, float(np.nanmax(slopes)))
        bad = slopes > strong + 1e-7
        if np.any(bad):
            violations.append({"kind": "strip-slope", "side": side,
                               "slope": float(np.nanmax(slopes))})
        extent = float(np.max(np.abs(cz[:, 0])))
        max_extent = max(max_extent, extent)
        if extent > strip_bound * (1 + 1e-9) + 1e-15:
            violations.append({"kind": "strip-extent", "side": side,
                               "extent": extent, "bound": strip_bound})
    return OneStepReport(
        n_points=int(inside.sum()), n_vectors=n_vectors, violations=violations,
        strip_halfwidth=max_extent, strip_bound=strip_bound, max_lipschitz=max_lip,
    )


@dataclass
class CalibrationResult:
    value: float
    halvings: int
    n_points: int
    passed: bool


def calibrate_b(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    rng: np.random.Generator | None = None,
    n_points: int = 500,
    b0: float = 0.05,
    max_halvings: int = 20,
    n_samples: int = 8,
) -> CalibrationResult:
    """Halve b from b0 until one-step hyperbolicity passes on a point sample.

    The chart data s, u, L are b-independent and computed once; only the box
    half-widths change between iterations.
    """
    rng = rng or np.random.default_rng(1)
    pts = rng.random((n_points, 2))
    pairs = [chart_pair(sm, p, params, constants, b0) for p in pts]
    b = b0
    for halvings in range(max_halvings + 1):
        scale = b / b0
        ok = True
        for cx, cy in pairs:
            sx = replace(cx, b_level=cx.b_level * scale)
            sy = replace(cy, b_level=cy.b_level * scale)
            rep = verify_one_step_hyperbolicity(
                ChartMap(sm, sx, sy), constants.omega, params.lam,
                n_samples=n_samples, rng=rng)
            if not rep.passed:
                ok = False
                break
        if ok:
            return CalibrationResult(value=b, halvings=halvings,
                                     n_points=n_points, passed=True)
        b *= 0.5
    return CalibrationResult(value=b, halvings=max_halvings, n_points=n_points,
                             passed=False)
