"""Shadowing of pseudo-orbits, the bracket operation, and closing.

The unique orbit tracking a bi-infinite pseudo-orbit is found as the nested
intersection of the stable strips of the forward prefixes with the unstable
strips of the backward ones; the recorded intersection diameters supply both
the uniqueness certificate (diameter below tolerance) and the decay check
against 4 b_{l0} e^{-lam n/3}.

The strip engine here is batched over independent chains (arrays shaped
(depth+1, B, 2)), which keeps thousand-pair bracket verifications cheap; a
single pair is just B = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .charts import b_level_value, su_values
from .dynamics import SurfaceMap, cocycle, iterate, torus_diff, torus_dist, wrap
from .regularity import (
    DerivedConstants,
    HyperbolicityParams,
    estimate_splitting_batch,
    regularity_batch,
)
from .pseudo import PseudoOrbit, validate_pseudo_orbit

__all__ = [
    "ShadowResult",
    "ShadowError",
    "shadow",
    "bracket",
    "bracket_many",
    "bracket_oracle_linear",
    "close_periodic",
    "verify_shadow_regularity",
    "PeriodicPoint",
]


class ShadowError(RuntimeError):
    pass


@dataclass
class ShadowResult:
    point: np.ndarray
    diameter: float
    contraction_log: list          # (depth, diameter) pairs
    per_index_error: dict          # n -> chart-coordinate sup-error of f^n(y)
    checked_range: tuple
    certified_level: int
    depth: int


# ---------------------------------------------------------------------------
# batched chain charts and strip propagation


@dataclass
class _ChainCharts:
    """Charts along a chain: arrays indexed (index, pair)."""

    bases: np.ndarray      # (n+1, B, 2)
    L: np.ndarray          # (n+1, B, 2, 2)
    L_inv: np.ndarray
    b_lev: np.ndarray      # (n+1, B)

    @property
    def n(self) -> int:
        return len(self.bases) - 1


def _inv2(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / det[..., None, None]


def chain_charts(
    sm: SurfaceMap,
    bases: np.ndarray,
    levels: np.ndarray,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
) -> _ChainCharts:
    """Charts at every chain point, vectorized over (index, pair)."""
    bases = np.asarray(bases, dtype=float)
    npts, bsz = bases.shape[0], bases.shape[1]
    flat = bases.reshape(-1, 2)
    e_s, e_u = estimate_splitting_batch(sm, flat)
    s, u = su_values(sm, flat, params)
    L = np.empty((len(flat), 2, 2))
    L[:, :, 0] = e_u / u[:, None]
    L[:, :, 1] = e_s / s[:, None]
    Li = _inv2(L)
    blv = np.array([b_level_value(params, constants, b, int(l)) for l in levels])
    return _ChainCharts(
        bases=bases,
        L=L.reshape(npts, bsz, 2, 2),
        L_inv=Li.reshape(npts, bsz, 2, 2),
        b_lev=np.broadcast_to(blv[:, None], (npts, bsz)).copy(),
    )


def _row_interp(tq: np.ndarray, t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation: tq, t, v all (B, m)-shaped, t increasing."""
    idx = np.clip(
        np.apply_along_axis(np.searchsorted, 1, t, 0) * 0, 0, 0)  # placeholder
    # vectorized searchsorted per row
    B, m = t.shape
    pos = np.empty(tq.shape, dtype=int)
    for i in range(B):
        pos[i] = np.searchsorted(t[i], tq[i])
    pos = np.clip(pos, 1, m - 1)
    t0 = np.take_along_axis(t, pos - 1, axis=1)
    t1 = np.take_along_axis(t, pos, axis=1)
    v0 = np.take_along_axis(v, pos - 1, axis=1)
    v1 = np.take_along_axis(v, pos, axis=1)
    w = np.where(t1 > t0, (tq - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0)
    return v0 + w * (v1 - v0)


def _sort_rows_by(param, value):
    order = np.argsort(param, axis=1)
    return np.take_along_axis(param, order, axis=1), np.take_along_axis(value, order, axis=1)


def _pull_stable_strip(sm: SurfaceMap, cc: _ChainCharts, start: int,
                       n_curve: int = 33, omega: float | None = None,
                       slack: float = 1e-7):
    """Stable-strip boundary graphs at index 0 for the prefix chain 0..start.

    Returns (v1 curves, t grid, ok mask): v1 has shape (2, B, m) giving the
    graphed coordinate of the two boundary curves over the common t grid.
    """
    B = cc.bases.shape[1]
    ok = np.ones(B, dtype=bool)
    blast = cc.b_lev[start]                              # (B,)
    t = np.linspace(-1, 1, n_curve)[None, :] * blast[:, None]
    curves = []
    for sgn in (-1.0, 1.0):
        v1 = sgn * np.broadcast_to(blast[:, None], t.shape).copy()
        curves.append(np.stack([v1, t.copy()], axis=-1))  # (B, m, 2)
    for j in range(start - 1, -1, -1):
        bj = cc.b_lev[j]
        new_curves = []
        for cur in curves:
            amb = wrap(cc.bases[j + 1][:, None, :]
                       + np.einsum("bij,bmj->bmi", cc.L[j + 1], cur))
            pre = sm.inverse(amb.reshape(-1, 2)).reshape(amb.shape)
            z = np.einsum("bij,bmj->bmi", cc.L_inv[j],
                          torus_diff(pre, cc.bases[j][:, None, :]))
            tt, vv = _sort_rows_by(z[..., 1], z[..., 0])
            # span and cone checks
            ok &= (tt[:, 0] <= -bj + 1e-15) & (tt[:, -1] >= bj - 1e-15)
            dv = np.diff(vv, axis=1)
            dt = np.diff(tt, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                slopes = np.abs(dv) / np.abs(dt)
            if omega is not None:
                ok &= ~np.any(slopes > omega + slack, axis=1)
            tq = np.linspace(-1, 1, n_curve)[None, :] * bj[:, None]
            vq = _row_interp(tq, tt, vv)
            new_curves.append(np.stack([vq, tq], axis=-1))
        curves = new_curves
    v1 = np.stack([c[..., 0] for c in curves], axis=0)
    lo = np.minimum(v1[0], v1[1])
    hi = np.maximum(v1[0], v1[1])
    tgrid = np.linspace(-1, 1, n_curve)[None, :] * cc.b_lev[0][:, None]
    return np.stack([lo, hi]), tgrid, ok


def _push_unstable_strip(sm: SurfaceMap, cc: _ChainCharts, n_curve: int = 33,
                         omega: float | None = None, slack: float = 1e-7):
    """Unstable-strip boundary graphs at the last chain index (dual pass)."""
    B = cc.bases.shape[1]
    n = cc.n
    ok = np.ones(B, dtype=bool)
    b0 = cc.b_lev[0]
    t = np.linspace(-1, 1, n_curve)[None, :] * b0[:, None]
    curves = [np.stack([t.copy(), sgn * np.broadcast_to(b0[:, None], t.shape).copy()],
                       axis=-1) for sgn in (-1.0, 1.0)]
    for j in range(0, n):
        bj = cc.b_lev[j + 1]
        new_curves = []
        for cur in curves:
            amb = wrap(cc.bases[j][:, None, :]
                       + np.einsum("bij,bmj->bmi", cc.L[j], cur))
            img = sm.forward(amb.reshape(-1, 2)).reshape(amb.shape)
            z = np.einsum("bij,bmj->bmi", cc.L_inv[j + 1],
                          torus_diff(img, cc.bases[j + 1][:, None, :]))
            tt, vv = _sort_rows_by(z[..., 0], z[..., 1])
            ok &= (tt[:, 0] <= -bj + 1e-15) & (tt[:, -1] >= bj - 1e-15)
            dv = np.diff(vv, axis=1)
            dt = np.diff(tt, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                slopes = np.abs(dv) / np.abs(dt)
            if omega is not None:
                ok &= ~np.any(slopes > omega + slack, axis=1)
            tq = np.linspace(-1, 1, n_curve)[None, :] * bj[:, None]
            vq = _row_interp(tq, tt, vv)
            new_curves.append(np.stack([tq, vq], axis=-1))
        curves = new_curves
    v2 = np.stack([c[..., 1] for c in curves], axis=0)
    lo = np.minimum(v2[0], v2[1])
    hi = np.maximum(v2[0], v2[1])
    tgrid = np.linspace(-1, 1, n_curve)[None, :] * cc.b_lev[n][:, None]
    return np.stack([lo, hi]), tgrid, ok


def _intersect_strips(stable_v1, stable_t, unstable_v2, unstable_t):
    """Corners, midpoint, and diameter of a stable/unstable strip crossing.

    All arguments are (2, B, m) / (B, m) graph arrays over common grids.
    Returns (mid (B,2), diam (B,)).
    """
    B = stable_t.shape[0]
    corners = np.empty((4, B, 2))
    c = 0
    for i_s in range(2):
        for i_u in range(2):
            v2 = np.zeros(B)
            for _ in range(40):
                v1 = _row_interp(v2[:, None], stable_t, stable_v1[i_s])[:, 0]
                v2 = _row_interp(v1[:, None], unstable_t, unstable_v2[i_u])[:, 0]
            v1 = _row_interp(v2[:, None], stable_t, stable_v1[i_s])[:, 0]
            corners[c] = np.stack([v1, v2], axis=-1)
            c += 1
    mid = corners.mean(axis=0)
    diam = np.zeros(B)
    for i in range(4):
        for j in range(i + 1, 4):
            diam = np.maximum(diam, np.linalg.norm(corners[i] - corners[j], axis=-1))
    return mid, diam


# ---------------------------------------------------------------------------
# public operations


def _orbit_array(sm: SurfaceMap, pts: np.ndarray, n: int, direction: int) -> np.ndarray:
    out = [np.atleast_2d(np.asarray(pts, dtype=float))]
    step = sm.forward if direction > 0 else sm.inverse
    for _ in range(n):
        out.append(step(out[-1]))
    return np.stack(out, axis=0)


def shadow(
    sm: SurfaceMap,
    porbit_forward: PseudoOrbit,
    porbit_backward: PseudoOrbit,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    depth: int | None = None,
    tol: float = 1e-9,
    n_curve: int = 33,
) -> ShadowResult:
    """Shadowing point of a two-sided pseudo-orbit sharing its center x0.

    ``porbit_backward`` lists the points in backward order: its entry j is
    the chain point at index -j, entry 0 being x0.  Strips are intersected at
    increasing depth and the run fails if the recorded diameter has not
    reached the tolerance at the maximal available depth.
    """
    if not np.allclose(porbit_forward.points[0], porbit_backward.points[0]):
        raise ValueError("forward and backward pseudo-orbits must share x0")
    max_depth = min(porbit_forward.k, porbit_backward.k)
    depth = max_depth if depth is None else min(depth, max_depth)

    fwd_cc = chain_charts(sm, porbit_forward.points[: depth + 1, None, :],
                          porbit_forward.levels[: depth + 1], params, constants, b)
    back_pts = porbit_backward.points[: depth + 1][::-1]
    back_lev = porbit_backward.levels[: depth + 1][::-1]
    bwd_cc = chain_charts(sm, back_pts[:, None, :], back_lev, params, constants, b)

    log = []
    mid = None
    diam_val = np.inf
    for n in range(1, depth + 1):
        sv1, st, ok_s = _pull_stable_strip(sm, fwd_cc, n, n_curve, constants.omega)
        sub = _ChainCharts(bases=bwd_cc.bases[depth - n:], L=bwd_cc.L[depth - n:],
                           L_inv=bwd_cc.L_inv[depth - n:], b_lev=bwd_cc.b_lev[depth - n:])
        uv2, ut, ok_u = _push_unstable_strip(sm, sub, n_curve, constants.omega)
        if not (ok_s[0] and ok_u[0]):
            raise ShadowError(f"strip propagation failed at depth {n}")
        mid, diam = _intersect_strips(sv1, st, uv2, ut)
        diam_val = float(diam[0])
        log.append((n, diam_val))
        if diam_val <= tol:
            break
    if diam_val > tol:
        raise ShadowError(
            f"intersection diameter {diam_val:.3e} above tolerance {tol:g} "
            f"at maximal depth {depth}")

    c0 = fwd_cc
    y = wrap(c0.bases[0, 0] + c0.L[0, 0] @ mid[0])

    # per-index containment of the numerical orbit of y, forward and backward,
    # limited to the range where float roundoff amplification stays below the
    # box scale
    c2 = max(constants.c2, 1e-9)
    min_box = float(min(fwd_cc.b_lev.min(), bwd_cc.b_lev.min()))
    drift_cap = int(max(1, math.floor(math.log(min_box / 1e-13) / c2)))
    n_chk_f = min(len(log), drift_cap, depth)
    errors = {}
    z = y.copy()
    for n in range(0, n_chk_f + 1):
        zc = np.einsum("ij,j->i", fwd_cc.L_inv[n, 0], torus_diff(z, fwd_cc.bases[n, 0]))
        errors[n] = float(np.max(np.abs(zc)))
        if errors[n] > fwd_cc.b_lev[n, 0] * (1 + 1e-7):
            raise ShadowError(f"shadow orbit leaves chart box at index {n}")
        if n < n_chk_f:
            z = sm.forward(z)
    z = y.copy()
    for n in range(1, min(n_chk_f, depth) + 1):
        z = sm.inverse(z)
        idx = depth - n
        zc = np.einsum("ij,j->i", bwd_cc.L_inv[idx, 0], torus_diff(z, bwd_cc.bases[idx, 0]))
        errors[-n] = float(np.max(np.abs(zc)))
        if errors[-n] > bwd_cc.b_lev[idx, 0] * (1 + 1e-7):
            raise ShadowError(f"shadow orbit leaves chart box at index {-n}")
    lvl0 = int(porbit_forward.levels[0])
    return ShadowResult(
        point=y, diameter=diam_val, contraction_log=log,
        per_index_error=errors, checked_range=(-min(n_chk_f, depth), n_chk_f),
        certified_level=lvl0 + constants.ell_prime, depth=len(log),
    )


def bracket(
    sm: SurfaceMap,
    x: np.ndarray,
    y: np.ndarray,
    ell: int,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    delta: float,
    depth: int | None = None,
    tol: float = 1e-9,
) -> ShadowResult:
    """[x, y] = V^s_x cap V^u_y via shadowing of the spliced two-sided chain.

    Forward part: the true orbit of x; backward part: the backward orbit of y
    with the single junction jump d(x, y) <= delta e^{-lam ell} at the center.
    The level sequence is l_n = ell + |n|.
    """
    x = wrap(np.asarray(x, dtype=float))
    y = wrap(np.asarray(y, dtype=float))
    d0 = float(torus_dist(x, y))
    bound = delta * math.exp(-params.lam * ell)
    if d0 > bound:
        raise ShadowError(f"bracket precondition failed: d={d0:.3e} > {bound:.3e}")
    if depth is None:
        b0 = b_level_value(params, constants, b, ell)
        depth = int(math.ceil(3.0 * math.log(max(4 * b0 / tol, 4.0)) / params.lam)) + 5
    fwd = _orbit_array(sm, x, depth, +1)[:, 0]
    bwd = np.concatenate([[x], _orbit_array(sm, y, depth, -1)[1:, 0]])
    levels = ell + np.arange(depth + 1)
    po_f = PseudoOrbit(points=fwd, levels=levels, delta=0.0, lam=params.lam)
    po_b = PseudoOrbit(points=bwd, levels=levels, delta=delta, lam=params.lam)
    return shadow(sm, po_f, po_b, params, constants, b, depth=depth, tol=tol)


def bracket_many(
    sm: SurfaceMap,
    xs: np.ndarray,
    ys: np.ndarray,
    ell: int,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    delta: float,
    depth: int | None = None,
    tol: float = 1e-9,
    n_curve: int = 33,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched bracket: returns (points (B,2), chart diameters (B,)).

    One deep pass per side instead of the per-depth log; used for large
    oracle comparisons.
    """
    xs = wrap(np.atleast_2d(xs))
    ys = wrap(np.atleast_2d(ys))
    if depth is None:
        b0 = b_level_value(params, constants, b, ell)
        depth = int(math.ceil(3.0 * math.log(max(4 * b0 / tol, 4.0)) / params.lam)) + 5
    d0 = torus_dist(xs, ys)
    bound = delta * math.exp(-params.lam * ell)
    if np.any(d0 > bound):
        raise ShadowError("bracket precondition failed for some pair")
    levels = ell + np.arange(depth + 1)
    fwd = _orbit_array(sm, xs, depth, +1)
    bwd_orbit = _orbit_array(sm, ys, depth, -1)
    bwd = np.concatenate([xs[None, :, :], bwd_orbit[1:]], axis=0)[::-1]
    fwd_cc = chain_charts(sm, fwd, levels, params, constants, b)
    bwd_cc = chain_charts(sm, bwd, levels[::-1], params, constants, b)
    sv1, st, ok_s = _pull_stable_strip(sm, fwd_cc, depth, n_curve, constants.omega)
    uv2, ut, ok_u = _push_unstable_strip(sm, bwd_cc, n_curve, constants.omega)
    if not np.all(ok_s & ok_u):
        raise ShadowError(f"strip propagation failed for {int(np.sum(~(ok_s & ok_u)))} pairs")
    mid, diam = _intersect_strips(sv1, st, uv2, ut)
    if np.any(diam > tol):
        raise ShadowError("bracket diameter above tolerance for some pair")
    pts = wrap(fwd_cc.bases[0] + np.einsum("bij,bj->bi", fwd_cc.L[0], mid))
    return pts, diam


def bracket_oracle_linear(sm: SurfaceMap, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Closed-form bracket for linear maps: solve x + a e_s = y + c e_u."""
    if not sm.linear:
        raise ValueError("oracle only valid for linear automorphisms")
    e_s, e_u = estimate_splitting_batch(sm, np.zeros((1, 2)))
    e_s, e_u = e_s[0], e_u[0]
    rhs = torus_diff(y, x)
    m = np.column_stack([e_s, -e_u])
    ab = np.linalg.solve(m, rhs)
    return wrap(x + ab[0] * e_s)


@dataclass
class PeriodicPoint:
    point: np.ndarray
    period: int
    residual: float
    refined: bool
    newton_steps: int
    shadow_diameter: float


def close_periodic(
    sm: SurfaceMap,
    porbit: PseudoOrbit,
    period: int,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    tol: float = 1e-12,
    max_newton: int = 30,
) -> PeriodicPoint:
    """Periodic point from a closed pseudo-orbit loop.

    The loop (x_0 .. x_{period-1}) must close up: d(f(x_{period-1}), x_0)
    within the jump bound.  The periodic extension is shadowed to depth
    3*period and refined by Newton iteration on f^period - id, lifted to the
    plane to handle wraparound.  If a Newton step leaves the shadowing box
    the unrefined shadow point is returned with ``refined=False``.
    """
    pts = porbit.points
    if len(pts) != period:
        raise ValueError("pseudo-orbit must list exactly `period` points")
    lam = params.lam
    wrap_jump = float(torus_dist(sm.forward(pts[-1]), pts[0]))
    bound = porbit.delta * math.exp(-lam * porbit.levels[0])
    if wrap_jump > bound * (1 + 1e-12):
        raise ShadowError(
            f"loop does not close: jump {wrap_jump:.3e} > bound {bound:.3e}")
    reps = 3
    ext_pts = np.concatenate([pts] * reps + [pts[:1]], axis=0)
    ext_lev = np.concatenate([porbit.levels] * reps + [porbit.levels[:1]])
    po_f = PseudoOrbit(points=ext_pts, levels=ext_lev, delta=porbit.delta, lam=lam)
    back_pts = np.concatenate([pts[:1], np.concatenate([pts[1:][::-1], pts[:1]] * reps
                                                       , axis=0)], axis=0)
    back_lev = np.concatenate([porbit.levels[:1],
                               np.concatenate([porbit.levels[1:][::-1],
                                               porbit.levels[:1]] * reps)])
    po_b = PseudoOrbit(points=back_pts, levels=back_lev, delta=porbit.delta, lam=lam)
    # the shadow point only seeds Newton; accept whatever diameter the
    # periodic extension reaches at depth 3*period.  Loops with jumps beyond
    # the chart-overlap scale cannot be tracked through charts at all; the
    # loop's base point then seeds Newton directly.
    try:
        res = shadow(sm, po_f, po_b, params, constants, b, depth=3 * period,
                     tol=math.inf)
        seed_point = res.point
        seed_diam = res.diameter
    except ShadowError:
        seed_point = pts[0]
        seed_diam = math.inf
    p = seed_point.copy()
    # Newton may wander up to the loop scale when seeded from the base point
    loop_scale = float(np.max(torus_dist(pts, pts[0]))) + wrap_jump
    box_amb = max(4.0 * b_level_value(params, constants, b, int(porbit.levels[0])),
                  2.0 * loop_scale + 0.1)
    start = p.copy()
    refined = True
    steps = 0
    for steps in range(1, max_newton + 1):
        g = torus_diff(iterate(sm, p, period), p)
        if float(np.linalg.norm(g)) <= tol:
            break
        jac = cocycle(sm, p, period) - np.eye(2)
        try:
            step = np.linalg.solve(jac, g)
        except np.linalg.LinAlgError:
            refined = False
            break
        p_new = wrap(p - step)
        if float(torus_dist(p_new, start)) > box_amb:
            refined = False
            break
        p = p_new
    resid = float(torus_dist(iterate(sm, p, period), p))
    if resid > tol:
        refined = False
        p = seed_point
        resid = float(torus_dist(iterate(sm, p, period), p))
    return PeriodicPoint(point=p, period=period, residual=resid, refined=refined,
                         newton_steps=steps, shadow_diameter=seed_diam)


def verify_shadow_regularity(
    sm: SurfaceMap,
    result: ShadowResult,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    window: int = 20,
) -> dict:
    """Measured regularity of the shadowing point at (lam/4, 2 eps).

    Asserts the measured level is at most the certified l0 + l'.
    """
    p2 = replace(params, chi=params.lam / 4.0, lam=params.lam / 8.0,
                 epsilon=2.0 * params.epsilon)
    c, k, lvl = regularity_batch(sm, result.point[None, :], p2, window=window)
    measured = int(lvl[0])
    return {
        "C": float(c[0]),
        "K": float(k[0]),
        "measured_level": measured,
        "certified_level": result.certified_level,
        "passed": 0 < measured <= result.certified_level,
    }
