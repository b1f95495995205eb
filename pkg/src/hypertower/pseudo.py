"""Pseudo-orbits and the regular branches they determine in chart coordinates.

A pseudo-orbit is a chain with jumps d(f(x_{j-1}), x_j) <= delta e^{-lam l_j}
at declared regularity levels l_j changing by at most one per step.  Each
valid chain determines a regular branch: the backward-induced stable strip in
the first chart box maps onto an unstable strip in the last, expanding cone
vectors by e^{lam (j-i)/3} between any two indices with no constant loss
under concatenation.

Strips are tracked through the chain as monotone polyline graphs, pulled back
junction by junction with adaptive resampling; clipping to intermediate boxes
never truncates the vertical span (one-step strips are full height), which is
asserted along the way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .charts import Chart, build_charts, _inv2
from .curves import GraphCurve
from .dynamics import SurfaceMap, torus_dist, wrap
from .regularity import DerivedConstants, HyperbolicityParams, regularity_batch

__all__ = [
    "PseudoOrbit",
    "StripRegion",
    "RegularBranch",
    "PseudoOrbitRejection",
    "BranchError",
    "validate_pseudo_orbit",
    "true_orbit_pseudo",
    "splice_orbits",
    "branch_charts",
    "build_regular_branch",
    "check_overlap",
    "OverlapReport",
    "calibrate_delta",
    "verify_branch_surface_estimates",
]


class PseudoOrbitRejection(ValueError):
    """A pseudo-orbit clause failed; carries (index, clause, measured, bound)."""

    def __init__(self, index: int, clause: str, measured: float, bound: float):
        self.index = index
        self.clause = clause
        self.measured = measured
        self.bound = bound
        super().__init__(
            f"pseudo-orbit rejected at index {index} ({clause}): "
            f"measured {measured:.6g} vs bound {bound:.6g}"
        )


class BranchError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoOrbit:
    points: np.ndarray   # (k+1, 2)
    levels: np.ndarray   # (k+1,) ints
    delta: float
    lam: float

    @property
    def k(self) -> int:
        return len(self.points) - 1


def validate_pseudo_orbit(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    points: np.ndarray,
    levels: np.ndarray,
    delta: float,
    measured_levels: np.ndarray | None = None,
) -> PseudoOrbit:
    """Check the three defining clauses and return the validated chain.

    Clauses, in order per index: level adjacency |l_j - l_{j-1}| <= 1,
    membership level(x_j) <= l_j, and the jump bound
    d(f(x_{j-1}), x_j) <= delta e^{-lam l_j}.
    """
    points = wrap(np.asarray(points, dtype=float))
    levels = np.asarray(levels, dtype=int)
    if len(points) != len(levels):
        raise ValueError("points and levels must have equal length")
    for j in range(1, len(levels)):
        if abs(int(levels[j]) - int(levels[j - 1])) > 1:
            raise PseudoOrbitRejection(j, "level-adjacency",
                                       abs(int(levels[j]) - int(levels[j - 1])), 1)
    if measured_levels is None:
        _, _, measured_levels = regularity_batch(sm, points, params, check_stable=False)
    for j in range(len(points)):
        if measured_levels[j] < 0 or measured_levels[j] > levels[j]:
            raise PseudoOrbitRejection(j, "membership-level",
                                       float(measured_levels[j]), float(levels[j]))
    fprev = sm.forward(points[:-1])
    jumps = torus_dist(fprev, points[1:])
    bounds = delta * np.exp(-params.lam * levels[1:])
    for j in range(len(jumps)):
        if jumps[j] > bounds[j] * (1 + 1e-12):
            raise PseudoOrbitRejection(j + 1, "jump", float(jumps[j]), float(bounds[j]))
    return PseudoOrbit(points=points, levels=levels, delta=delta, lam=params.lam)


def true_orbit_pseudo(sm: SurfaceMap, x: np.ndarray, k: int, ell: int,
                      params: HyperbolicityParams, delta: float = 0.0) -> PseudoOrbit:
    """The true orbit of a level-l point as a pseudo-orbit with l_j = l + j."""
    pts = [wrap(np.asarray(x, dtype=float))]
    for _ in range(k):
        pts.append(sm.forward(pts[-1]))
    levels = ell + np.arange(k + 1)
    return PseudoOrbit(points=np.stack(pts), levels=levels, delta=delta,
                       lam=params.lam)


def splice_orbits(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    x: np.ndarray,
    y: np.ndarray,
    k: int,
    ell: int,
    delta: float,
) -> PseudoOrbit:
    """Tent-levelled splice: forward orbit of x to k/2, backward orbit of y after.

    x_j = f^j(x) for j <= k/2, x_j = f^{j-k}(y) beyond, l_j = min(l+j, l+k-j).
    Validation is propagated: the only nontrivial jump is at the midpoint.
    """
    if k % 2 != 0 or k <= 0:
        raise ValueError("splice length k must be a positive even integer")
    half = k // 2
    pts = [wrap(np.asarray(x, dtype=float))]
    for _ in range(half):
        pts.append(sm.forward(pts[-1]))
    back = [wrap(np.asarray(y, dtype=float))]
    for _ in range(k - half - 1):
        back.append(sm.inverse(back[-1]))
    pts = pts + back[::-1]
    levels = np.array([ell + min(j, k - j) for j in range(k + 1)], dtype=int)
    return validate_pseudo_orbit(sm, params, np.stack(pts), levels, delta)


def branch_charts(
    sm: SurfaceMap,
    porbit: PseudoOrbit,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
) -> list[Chart]:
    """Charts along the chain at the declared levels."""
    return build_charts(sm, porbit.points, params, constants, b,
                        levels=porbit.levels)


@dataclass(frozen=True)
class StripRegion:
    """Curvilinear strip in a chart box, bounded by two full-length graphs."""

    kind: str                 # 'stable' or 'unstable'
    box_halfwidth: float
    lo: GraphCurve
    hi: GraphCurve

    def width(self) -> float:
        t = np.linspace(*self.lo.span(), 33)
        return float(np.max(self.hi.value(t) - self.lo.value(t)))

    def contains(self, pts: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(pts)
        i = 1 if self.kind == "stable" else 0   # graph parameter axis
        par, val = pts[:, i], pts[:, 1 - i]
        inside_box = np.abs(par) <= self.box_halfwidth + tol
        return (inside_box & (val >= self.lo.value(par) - tol)
                & (val <= self.hi.value(par) + tol))

    def midline(self) -> GraphCurve:
        lo, hi = self.lo.span()
        t = np.linspace(lo, hi, max(len(self.lo.pts), len(self.hi.pts)))
        mid = 0.5 * (self.lo.value(t) + self.hi.value(t))
        orient = self.lo.orientation
        pts = np.stack([mid, t], axis=-1) if orient == "stable" else np.stack([t, mid], axis=-1)
        return GraphCurve(orient, pts)


def _junction_maps(sm: SurfaceMap, charts: list[Chart]):
    """Forward and backward chart-to-chart step maps g_j, g_j^{-1}."""

    def fwd(j, z):
        amb = charts[j].to_ambient(z)
        return charts[j + 1].to_chart(sm.forward(amb))

    def bwd(j, w):
        amb = charts[j + 1].to_ambient(w)
        return charts[j].to_chart(sm.inverse(amb))

    def jac(j, z):
        amb = charts[j].to_ambient(z)
        dj = sm.derivative(amb)
        return np.einsum("ij,...jk,kl->...il", charts[j + 1].L_inv, dj, charts[j].L)

    return fwd, bwd, jac


def _map_polyline(fun, pts: np.ndarray, chord_limit: float, passes: int = 6) -> np.ndarray:
    """Image of a polyline with adaptive refinement of long image chords."""
    img = fun(pts)
    for _ in range(passes):
        chords = np.linalg.norm(np.diff(img, axis=0), axis=-1)
        split = chords > chord_limit
        if not np.any(split):
            break
        mids = 0.5 * (pts[:-1][split] + pts[1:][split])
        order = np.argsort(np.concatenate([np.arange(len(pts), dtype=float),
                                           np.nonzero(split)[0] + 0.5]))
        pts = np.concatenate([pts, mids])[order]
        img = fun(pts)
    return img


@dataclass
class RegularBranch:
    sm: SurfaceMap
    porbit: PseudoOrbit
    charts: list
    stable_strip: StripRegion
    unstable_strip: StripRegion

    @property
    def k(self) -> int:
        return self.porbit.k

    def map_between(self, i: int, j: int, z: np.ndarray) -> np.ndarray:
        """f^{i,j} in chart coordinates (forward for j > i, backward for j < i)."""
        fwd, bwd, _ = _junction_maps(self.sm, self.charts)
        z = np.asarray(z, dtype=float)
        if j >= i:
            for m in range(i, j):
                z = fwd(m, z)
        else:
            for m in range(i - 1, j - 1, -1):
                z = bwd(m, z)
        return z

    def derivative_between(self, i: int, j: int, z: np.ndarray) -> np.ndarray:
        """Chain-rule derivative of f^{i,j} at a chart point of index i."""
        fwd, bwd, jac = _junction_maps(self.sm, self.charts)
        z = np.asarray(z, dtype=float)
        acc = np.broadcast_to(np.eye(2), z.shape[:-1] + (2, 2)).copy()
        if j >= i:
            for m in range(i, j):
                acc = jac(m, z) @ acc
                z = fwd(m, z)
        else:
            for m in range(i - 1, j - 1, -1):
                z = bwd(m, z)
                acc = _inv2(jac(m, z)) @ acc
        return acc

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        return self.map_between(0, self.k, z)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        return self.derivative_between(0, self.k, z)


def build_regular_branch(
    sm: SurfaceMap,
    porbit: PseudoOrbit,
    charts: list[Chart],
    params: HyperbolicityParams,
    constants: DerivedConstants,
    n_curve: int = 33,
    slack: float = 1e-7,
) -> RegularBranch:
    """Stable/unstable strips of the branch by backward curve induction.

    Starting from the stable boundaries of the final chart box, each junction
    pulls the current curves back, asserts they remain in the stable cone
    (Lipschitz at most omega plus slack) and span the box, clips, and
    resamples.  The unstable strip is the forward image of the stable strip's
    horizontal boundaries.
    """
    k = porbit.k
    omega = constants.omega
    fwd, bwd, _ = _junction_maps(sm, charts)
    b_of = [c.b_level for c in charts]

    if k == 0:
        b0 = b_of[0]
        left = GraphCurve("stable", [[-b0, -b0], [-b0, b0]])
        right = GraphCurve("stable", [[b0, -b0], [b0, b0]])
        bottom = GraphCurve("unstable", [[-b0, -b0], [b0, -b0]])
        top = GraphCurve("unstable", [[-b0, b0], [b0, b0]])
        return RegularBranch(sm, porbit, charts,
                             StripRegion("stable", b0, left, right),
                             StripRegion("unstable", b0, bottom, top))

    # backward induction on the two stable boundary curves
    t = np.linspace(-b_of[k], b_of[k], n_curve)
    curves = [np.stack([np.full(n_curve, s * b_of[k]), t], axis=-1) for s in (-1, 1)]
    for j in range(k - 1, -1, -1):
        bj = b_of[j]
        new_curves = []
        for pts in curves:
            img = _map_polyline(lambda q: bwd(j, q), pts, chord_limit=bj / 16)
            g = GraphCurve("stable", img)
            if g.lipschitz > omega + slack:
                raise BranchError(
                    f"pulled-back curve exits the stable cone at junction {j}: "
                    f"Lipschitz {g.lipschitz:.3e} > omega {omega:.3e}")
            lo, hi = g.span()
            if lo > -bj + 1e-15 or hi < bj - 1e-15:
                raise BranchError(
                    f"pulled-back curve does not span the box at junction {j}")
            g = g.clip(-bj, bj).resample(n_curve)
            new_curves.append(g.pts)
        curves = new_curves
    gl, gr = (GraphCurve("stable", c) for c in curves)
    if np.mean(gl.values) > np.mean(gr.values):
        gl, gr = gr, gl
    stable_strip = StripRegion("stable", b_of[0], gl, gr)

    # forward images of the strip's horizontal boundaries
    uns = []
    for s in (-1, 1):
        v1 = np.linspace(gl.value(s * b_of[0]), gr.value(s * b_of[0]), n_curve)
        pts = np.stack([v1, np.full(n_curve, s * b_of[0])], axis=-1)
        for j in range(0, k):
            pts = _map_polyline(lambda q: fwd(j, q), pts, chord_limit=b_of[j + 1] / 16)
            g = GraphCurve("unstable", pts)
            if g.lipschitz > omega + slack:
                raise BranchError(
                    f"forward curve exits the unstable cone at junction {j}")
            pts = g.clip(max(g.span()[0], -b_of[j + 1]),
                         min(g.span()[1], b_of[j + 1])).resample(n_curve).pts
        g = GraphCurve("unstable", pts)
        lo, hi = g.span()
        if lo > -b_of[k] * (1 - 1e-9) + slack or hi < b_of[k] * (1 - 1e-9) - slack:
            raise BranchError("unstable boundary image is not full length")
        uns.append(g)
    if np.mean(uns[0].values) > np.mean(uns[1].values):
        uns = [uns[1], uns[0]]
    unstable_strip = StripRegion("unstable", b_of[k], uns[0], uns[1])

    return RegularBranch(sm, porbit, charts, stable_strip, unstable_strip)


# ---------------------------------------------------------------------------
# Overlapping charts (clause A and clause B) and the calibration of delta


@dataclass
class OverlapReport:
    distance: float
    level: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations


def _cone_fan(width: float, kind: str, n: int = 9) -> np.ndarray:
    t = np.linspace(-1 + 1e-9, 1 - 1e-9, n) * width
    if kind == "u":
        v = np.stack([np.ones(n), t], axis=-1)
    else:
        v = np.stack([t, np.ones(n)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def check_overlap(
    sm: SurfaceMap,
    cx: Chart,
    cy: Chart,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    n_grid: int = 33,
    n_curve: int = 65,
) -> OverlapReport:
    """Overlapping-charts verification for two same-level charts.

    Clause A: on a grid of points in the intersection of the two level
    neighbourhoods, the transition derivative maps the strong cones into the
    cones with norm loss at most e^{lam/24}, in all four orientations.
    Clause B: the four extreme full-length strongly stable (and unstable)
    curves cross the partner's strong box completely.
    """
    if cx.level != cy.level:
        raise ValueError("overlap check requires equal declared levels")
    lam, omega = params.lam, constants.omega
    bl = cx.b_level
    loss = math.exp(-lam / 24)
    strong = math.exp(-lam) * omega
    violations: list[dict] = []

    def transition(src: Chart, dst: Chart, z):
        return dst.to_chart(src.to_ambient(z))

    # clause A on the grid (the transition derivative is constant on the
    # flat torus, but membership in the intersection is still per point)
    axis = np.linspace(-bl, bl, n_grid)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    for src, dst, tag in ((cx, cy, "x->y"), (cy, cx, "y->x")):
        w = transition(src, dst, grid)
        sel = np.all(np.abs(w) <= bl, axis=-1)
        if not np.any(sel):
            violations.append({"clause": "A", "dir": tag, "why": "empty intersection"})
            continue
        t = dst.L_inv @ src.L
        for kind in ("u", "s"):
            fan = _cone_fan(strong, kind, 9)
            img = fan @ t.T
            norm = np.linalg.norm(img, axis=-1)
            if kind == "u":
                in_cone = np.abs(img[:, 1]) < omega * np.abs(img[:, 0])
            else:
                in_cone = np.abs(img[:, 0]) < omega * np.abs(img[:, 1])
            ok = in_cone & (norm >= loss * (1 - 1e-12))
            for i in np.nonzero(~ok)[0]:
                violations.append({"clause": "A", "dir": tag, "cone": kind,
                                   "vector": fan[i].tolist(), "norm": float(norm[i])})

    # clause B: extreme strongly stable/unstable curves cross the partner
    narrow = math.exp(-lam / 3) * bl
    offs = narrow - strong * bl
    tpar = np.linspace(-bl, bl, n_curve)
    for src, dst, kind, tag in ((cx, cy, "s", "x->y"), (cy, cx, "s", "y->x"),
                                (cx, cy, "u", "x->y"), (cy, cx, "u", "y->x")):
        for c0 in (-offs, offs):
            for slope in (-strong, strong):
                val = c0 + slope * tpar
                pts = (np.stack([val, tpar], axis=-1) if kind == "s"
                       else np.stack([tpar, val], axis=-1))
                img = transition(src, dst, pts)
                # crossing of the partner's strong box of the opposite kind
                par = img[:, 1] if kind == "s" else img[:, 0]
                other = img[:, 0] if kind == "s" else img[:, 1]
                spans = par.min() <= -narrow and par.max() >= narrow
                inside = np.abs(other[(par >= -narrow) & (par <= narrow)]) <= bl
                if not (spans and np.all(inside)):
                    violations.append({"clause": "B", "dir": tag, "cone": kind,
                                       "offset": float(c0), "slope": float(slope)})
    return OverlapReport(distance=float(torus_dist(cx.base, cy.base)),
                         level=cx.level, violations=violations)


def calibrate_delta(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    rng: np.random.Generator | None = None,
    level: int = 1,
    n_pairs: int = 500,
    delta0: float | None = None,
    max_halvings: int = 40,
):
    """Halve delta from b/10 until same-level pairs at distance
    delta e^{-lam l} have overlapping charts (Theorem-F style calibration)."""
    from .charts import CalibrationResult

    rng = rng or np.random.default_rng(2)
    delta = delta0 if delta0 is not None else b / 10.0
    for halvings in range(max_halvings + 1):
        dmax = delta * math.exp(-params.lam * level)
        x = rng.random((n_pairs, 2))
        theta = rng.uniform(0, 2 * np.pi, n_pairs)
        dist = dmax * rng.uniform(0.2, 1.0, n_pairs)
        y = wrap(x + dist[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1))
        cxs = build_charts(sm, x, params, constants, b, levels=level)
        cys = build_charts(sm, y, params, constants, b, levels=level)
        ok = True
        for cx, cy in zip(cxs, cys):
            rep = check_overlap(sm, cx, cy, params, constants, n_grid=9, n_curve=33)
            if not rep.passed:
                ok = False
                break
        if ok:
            return CalibrationResult(value=delta, halvings=halvings,
                                     n_points=n_pairs, passed=True)
        delta *= 0.5
    return CalibrationResult(value=delta, halvings=max_halvings,
                             n_points=n_pairs, passed=False)


def verify_branch_surface_estimates(
    sm: SurfaceMap,
    branch: RegularBranch,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> dict:
    """Ambient-norm growth bounds for a built branch (report-only).

    Samples ambient points in the surface image of the stable strip and cone
    vectors; asserts |Df^i v^u| >= Qhat e^{-2 eps l0} e^{lam i/3} |v^u| and
    the backward stable dual, recording the worst margins.
    """
    rng = rng or np.random.default_rng(3)
    k = branch.k
    c0 = branch.charts[0]
    ck = branch.charts[k]
    ell0 = branch.porbit.levels[0]
    const = constants.Qhat * math.exp(-2.0 * params.epsilon * ell0)
    bound = const * math.exp(params.lam * k / 3.0)

    lo, hi = branch.stable_strip.lo, branch.stable_strip.hi
    t = rng.uniform(-c0.b_level, c0.b_level, n_samples)
    frac = rng.random(n_samples)
    v1 = lo.value(t) + frac * (hi.value(t) - lo.value(t))
    z = np.stack([v1, t], axis=-1)
    amb = c0.to_ambient(z)

    fan_u = _cone_fan(constants.omega, "u", 5)
    fan_s = _cone_fan(constants.omega, "s", 5)
    worst_u, worst_s = np.inf, np.inf
    from .dynamics import cocycle

    jac_fwd = cocycle(sm, amb, k)
    end = amb
    for _ in range(k):
        end = sm.forward(end)
    jac_bwd_at_end = cocycle(sm, end, -k)
    for v in fan_u:
        vu = np.einsum("ij,j->i", c0.L, v)
        vu = vu / np.linalg.norm(vu)
        grow = np.linalg.norm(np.einsum("...ij,j->...i", jac_fwd, vu), axis=-1)
        worst_u = min(worst_u, float(np.min(grow)))
    for v in fan_s:
        vs = np.einsum("ij,j->i", ck.L, v)
        vs = vs / np.linalg.norm(vs)
        grow = np.linalg.norm(np.einsum("...ij,j->...i", jac_bwd_at_end, vs), axis=-1)
        worst_s = min(worst_s, float(np.min(grow)))
    return {
        "k": k,
        "bound": bound,
        "min_unstable_growth": worst_u,
        "min_stable_backward_growth": worst_s,
        "passed": bool(worst_u >= bound and worst_s >= bound),
    }
