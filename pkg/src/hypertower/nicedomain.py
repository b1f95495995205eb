"""Nice domains from pairs of periodic points, almost returns, and the
hyperbolic branches they spawn.

A nice domain is a curvilinear quadrilateral whose boundary consists of
pieces of the local stable/unstable curves of two periodic points p, q; its
stable boundary never re-enters the interior at forward multiples of T (and
dually backward).  Because the boundary pieces are invariant curves, the
check is exact for linear maps and verified numerically in general.

Geometry convention: everything lives in the frame of p, with w1 along
e_u(p) and w2 along e_s(p), signs chosen so q has positive coordinates.
Stable leaves are near-vertical graphs, unstable leaves near-horizontal, and
the domain carries product (foot) coordinates: foot_u(z) is the w1-value
where the stable leaf through z meets the bottom edge, foot_s(z) the
w2-value where the unstable leaf meets the left edge.  Stable strips are
intervals of foot_u, unstable strips intervals of foot_s; the
nested-or-disjoint dichotomy then becomes interval algebra on transversals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .curves import GraphCurve, intersect_graphs
from .dynamics import SurfaceMap, cocycle, iterate, torus_diff, torus_dist, wrap
from .pseudo import PseudoOrbit, validate_pseudo_orbit
from .regularity import (
    DerivedConstants,
    HyperbolicityParams,
    SplittingField,
    regularity_batch,
)
from .shadow import PeriodicPoint, close_periodic

__all__ = [
    "NiceDomain",
    "NiceDomainError",
    "HyperbolicBranch",
    "nice_radius",
    "find_nice_domain",
    "assemble_domain",
    "verify_niceness",
    "find_periodic_candidates",
    "detect_almost_returns",
    "extract_branch",
    "concatenate",
    "branch_width_floor",
]


class NiceDomainError(RuntimeError):
    pass


def _lcm(a: int, b: int) -> int:
    return a * b // math.gcd(a, b)


def _unwrap_polyline(off: np.ndarray) -> np.ndarray:
    """Continuity-corrected offsets: remove mod-1 folds along a polyline."""
    out = off.copy()
    for axis in range(2):
        jumps = np.diff(out[:, axis])
        shifts = -np.cumsum(np.round(jumps))
        out[1:, axis] += shifts
    return out


def _eig_directions(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(stable, unstable) unit eigenvectors of a hyperbolic 2x2 matrix."""
    evals, evecs = np.linalg.eig(m)
    if np.any(np.abs(np.imag(evals)) > 1e-12):
        raise NiceDomainError("complex eigenvalues: point is not hyperbolic-periodic")
    evals = np.real(evals)
    evecs = np.real(evecs)
    iu = int(np.argmax(np.abs(evals)))
    e_u = evecs[:, iu] / np.linalg.norm(evecs[:, iu])
    e_s = evecs[:, 1 - iu] / np.linalg.norm(evecs[:, 1 - iu])
    return e_s, e_u


def grow_invariant_curve(
    sm: SurfaceMap,
    base: np.ndarray,
    kind: str,
    T: int,
    target: float,
    seed_len: float,
    n_pts: int = 401,
    max_iter: int = 200,
) -> np.ndarray:
    """Local stable/unstable curve of a T-periodic point by graph transform.

    A seed segment along the invariant eigendirection is iterated under
    f^{-T} (stable) or f^{T} (unstable), resampled by arclength, and clipped
    to ``target`` arclength on each side of the base point.  Returns offsets
    from the base (lifted plane, no mod-1 folds), ordered along the curve
    with the base in the middle.
    """
    dfT = cocycle(sm, base, T)
    e_s, e_u = _eig_directions(dfT)
    direction = e_s if kind == "stable" else e_u
    step = (lambda p: iterate(sm, p, -T)) if kind == "stable" else (
        lambda p: iterate(sm, p, T))
    t = np.linspace(-seed_len / 2, seed_len / 2, n_pts)
    off = t[:, None] * direction[None, :]
    for _ in range(max_iter):
        img = step(wrap(base[None, :] + off))
        off = _unwrap_polyline(torus_diff(img, base))
        # arclength resample, clipped to the target window around the base
        seg = np.linalg.norm(np.diff(off, axis=0), axis=-1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        i0 = int(np.argmin(np.linalg.norm(off, axis=-1)))
        s = s - s[i0]
        left, right = -s[0], s[-1]
        lo, hi = -min(left, 1.1 * target), min(right, 1.1 * target)
        grid = np.linspace(lo, hi, n_pts)
        off = np.stack([np.interp(grid, s, off[:, 0]),
                        np.interp(grid, s, off[:, 1])], axis=-1)
        if left >= target and right >= target:
            return off
    raise NiceDomainError(
        f"{kind} curve of the periodic point did not reach arclength {target:g}")


@dataclass
class NiceDomain:
    """A nice domain with product (foot) coordinates; see the module docstring."""

    sm: SurfaceMap
    p: np.ndarray
    q: np.ndarray
    period_p: int
    period_q: int
    T: int
    level: int
    frame: np.ndarray        # columns e_u(p), e_s(p), sign-normalized
    frame_inv: np.ndarray
    bottom: GraphCurve       # unstable edge through p   (w2 = h_B(w1))
    top: GraphCurve          # unstable edge through q
    left: GraphCurve         # stable edge through p     (w1 = g_L(w2))
    right: GraphCurve        # stable edge through q
    corner_pq: np.ndarray    # [p,q] = V^s_p cap V^u_q, frame coords
    corner_qp: np.ndarray
    field: SplittingField
    r_bound: float
    diameter: float
    verification: dict = field(default_factory=dict)

    # -- coordinates -------------------------------------------------------
    def to_frame(self, ambient: np.ndarray) -> np.ndarray:
        return np.einsum("ij,...j->...i", self.frame_inv,
                         torus_diff(ambient, self.p))

    def to_ambient(self, w: np.ndarray) -> np.ndarray:
        return wrap(self.p + np.einsum("ij,...j->...i", self.frame,
                                       np.asarray(w, dtype=float)))

    def to_lift(self, w: np.ndarray) -> np.ndarray:
        """Lifted-plane representative near p (for splitting-field queries;
        the field's bounding box is built in these coordinates)."""
        return self.p + np.einsum("ij,...j->...i", self.frame,
                                  np.asarray(w, dtype=float))

    def relift(self, ambient: np.ndarray) -> np.ndarray:
        """Lifted representative of a wrapped ambient point near the domain."""
        return self.to_lift(self.to_frame(ambient))

    @property
    def span_u(self) -> float:
        return float(self.corner_qp[0])

    @property
    def span_s(self) -> float:
        return float(self.corner_pq[1])

    def contains_frame(self, w: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Membership in frame coordinates; tol > 0 shrinks, < 0 grows."""
        w = np.atleast_2d(w)
        w1, w2 = w[..., 0], w[..., 1]
        hb = np.interp(w1, self.bottom.param, self.bottom.values)
        ht = np.interp(w1, self.top.param, self.top.values)
        gl = np.interp(w2, self.left.param, self.left.values)
        gr = np.interp(w2, self.right.param, self.right.values)
        return ((w2 >= hb + tol) & (w2 <= ht - tol)
                & (w1 >= gl + tol) & (w1 <= gr - tol))

    def contains(self, ambient: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.contains_frame(self.to_frame(ambient), tol)

    # -- foliation marching ------------------------------------------------
    def _march(self, w0: np.ndarray, kind: str, direction: float,
               n_sub: int = 48, record: bool = False):
        """March frame points along the (interpolated) foliation until the
        bounding transversal is crossed; bisect the crossing.

        kind 'stable' marches along e_s toward the bottom (direction -1) or
        top (+1); 'unstable' along e_u toward left/right.  Returns crossing
        points (and the path when ``record``)."""
        w = np.atleast_2d(w0).astype(float).copy()
        if self.field.constant:
            # straight leaves in the frame: feet are the frame coordinates
            if kind == "stable":
                tgt = (np.interp(w[:, 0], self.bottom.param, self.bottom.values)
                       if direction < 0 else
                       np.interp(w[:, 0], self.top.param, self.top.values))
                out = np.stack([w[:, 0], tgt], axis=-1)
            else:
                tgt = (np.interp(w[:, 1], self.left.param, self.left.values)
                       if direction < 0 else
                       np.interp(w[:, 1], self.right.param, self.right.values))
                out = np.stack([tgt, w[:, 1]], axis=-1)
            return (out, [w, out]) if record else out

        axis = 1 if kind == "stable" else 0
        if kind == "stable":
            edge = self.bottom if direction < 0 else self.top
        else:
            edge = self.left if direction < 0 else self.right
        span = self.span_s if kind == "stable" else self.span_u
        h = 1.35 * span / n_sub
        path = [w.copy()]

        def side(pts):
            par = pts[:, 0] if kind == "stable" else pts[:, 1]
            val = np.interp(par, edge.param, edge.values)
            return (pts[:, axis] - val) * (-direction)

        def vel(pts):
            amb = self.to_lift(pts)
            v = self.field.e_s(amb) if kind == "stable" else self.field.e_u(amb)
            v = np.einsum("ij,...j->...i", self.frame_inv, v)
            sgn = np.sign(v[:, axis]) * direction
            sgn = np.where(sgn == 0, 1.0, sgn)
            v = v * sgn[:, None]
            return v / np.linalg.norm(v, axis=-1, keepdims=True)

        active = np.ones(len(w), dtype=bool)
        lo = w.copy()
        hi = w.copy()
        for _ in range(2 * n_sub):
            if not np.any(active):
                break
            cur = w[active]
            k1 = vel(cur)
            k2 = vel(cur + 0.5 * h * k1)
            k3 = vel(cur + 0.5 * h * k2)
            k4 = vel(cur + h * k3)
            new = cur + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            crossed = side(new) <= 0
            idx = np.nonzero(active)[0]
            lo[idx[crossed]] = cur[crossed]
            hi[idx[crossed]] = new[crossed]
            w[idx] = new
            active[idx[crossed]] = False
            if np.any(~crossed):
                path.append(w.copy())
        # bisection between lo (outside-crossing side) and hi
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            s = side(mid)
            takehi = s <= 0
            hi[takehi] = mid[takehi]
            lo[~takehi] = mid[~takehi]
        out = 0.5 * (lo + hi)
        if record:
            path.append(out)
            return out, path
        return out

    def feet(self, ambient: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(foot_u, foot_s) of ambient points: product coordinates on the domain."""
        w = self.to_frame(ambient)
        if self.field.constant:
            return np.atleast_2d(w)[..., 0], np.atleast_2d(w)[..., 1]
        bot = self._march(w, "stable", -1.0)
        lef = self._march(w, "unstable", -1.0)
        return bot[:, 0], lef[:, 1]

    def leaf(self, ambient: np.ndarray, kind: str, n_pts: int = 33) -> np.ndarray:
        """Full-length leaf (frame coords) of the foliation through a point."""
        w = self.to_frame(np.asarray(ambient, dtype=float))[None, :]
        if self.field.constant:
            if kind == "stable":
                t = np.linspace(0.0, 1.0, n_pts)
                lo = float(np.interp(w[0, 0], self.bottom.param, self.bottom.values))
                hi = float(np.interp(w[0, 0], self.top.param, self.top.values))
                w2 = lo + t * (hi - lo)
                return np.stack([np.full(n_pts, w[0, 0]), w2], axis=-1)
            lo = float(np.interp(w[0, 1], self.left.param, self.left.values))
            hi = float(np.interp(w[0, 1], self.right.param, self.right.values))
            w1 = lo + np.linspace(0.0, 1.0, n_pts) * (hi - lo)
            return np.stack([w1, np.full(n_pts, w[0, 1])], axis=-1)
        _, down = self._march(w, kind, -1.0, record=True)
        _, up = self._march(w, kind, +1.0, record=True)
        pts = np.concatenate([np.concatenate(down[::-1], axis=0),
                              np.concatenate(up, axis=0)], axis=0)
        axis = 1 if kind == "stable" else 0
        order = np.argsort(pts[:, axis])
        pts = pts[order]
        par = pts[:, axis]
        keep = np.concatenate([[True], np.diff(par) > 1e-14])
        pts = pts[keep]
        grid = np.linspace(pts[0, axis], pts[-1, axis], n_pts)
        other = np.interp(grid, pts[:, axis], pts[:, 1 - axis])
        if kind == "stable":
            return np.stack([other, grid], axis=-1)
        return np.stack([grid, other], axis=-1)

    def leaf_at_foot(self, s: float, kind: str, n_pts: int = 33) -> np.ndarray:
        """Leaf anchored exactly at a transversal foot (frame coords)."""
        if kind == "stable":
            w2 = float(np.interp(s, self.bottom.param, self.bottom.values))
            start = self.to_ambient(np.array([s, w2 + 1e-12]))
        else:
            w1 = float(np.interp(s, self.left.param, self.left.values))
            start = self.to_ambient(np.array([w1 + 1e-12, s]))
        return self.leaf(start, kind, n_pts)


def nice_radius(params: HyperbolicityParams, constants: DerivedConstants,
                delta: float, ell: int, c_ell: float) -> float:
    """r = delta e^{-lam l} e^{-c2} / (2 C_l)."""
    return delta * math.exp(-params.lam * ell) * math.exp(-constants.c2) / (2.0 * c_ell)


def estimate_c_ell(sm: SurfaceMap, params: HyperbolicityParams, ell: int,
                   rng: np.random.Generator, n: int = 200) -> float:
    """Empirical chart-to-ambient distortion at level l, times two."""
    from .charts import su_values
    from .regularity import estimate_splitting_batch, splitting_angle

    pts = rng.random((4 * n, 2))
    _, _, lvl = regularity_batch(sm, pts, params, check_stable=False)
    sel = lvl <= ell
    pts = pts[sel][:n] if np.any(sel) else pts[:n]
    s, u = su_values(sm, pts, params)
    e_s, e_u = estimate_splitting_batch(sm, pts)
    ang = splitting_angle(e_s, e_u)
    s2, u2 = s * s, u * u
    sin2 = np.sin(ang) ** 2
    norm2 = (s2 + u2 + np.sqrt((s2 + u2) ** 2 - 4 * s2 * u2 * sin2)) / (2 * sin2)
    return 2.0 * float(np.sqrt(np.max(norm2)))


# ---------------------------------------------------------------------------
# periodic candidates and domain assembly


def _min_period(sm: SurfaceMap, p: np.ndarray, n: int, tol: float = 1e-9) -> int:
    z = p.copy()
    for m in range(1, n + 1):
        z = sm.forward(z)
        if n % m == 0 and torus_dist(z, p) <= tol:
            return m
    return n


def find_periodic_candidates(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    b: float,
    delta: float,
    seeds: np.ndarray,
    ell: int,
    horizon: int = 96,
    close_radius: float = 0.1,
    max_period: int = 6,
    rng: np.random.Generator | None = None,
) -> list[PeriodicPoint]:
    """Periodic points from recurrence loops of seed points.

    Each seed orbit is scanned for approximate returns; the loop is validated
    as a pseudo-orbit at a recorded (possibly domain-scale) delta and closed
    through the shadowing + Newton machinery.  Candidates are deduplicated
    and reduced to their minimal periods; only points of measured level at
    most ``ell`` and minimal period at most ``max_period`` are kept.
    """
    out: list[PeriodicPoint] = []
    seen: list[np.ndarray] = []
    for seed in np.atleast_2d(seeds):
        orbit = [wrap(seed)]
        for _ in range(horizon):
            orbit.append(sm.forward(orbit[-1]))
        for n in range(1, horizon + 1):
            gap = float(torus_dist(orbit[n], orbit[0]))
            if gap > close_radius:
                continue
            pts = np.stack(orbit[:n])
            _, _, lv = regularity_batch(sm, pts, params, check_stable=False)
            if np.any(lv < 0):
                continue
            lstar = int(max(np.max(lv), 1))
            delta_loop = max(delta, 1.05 * gap * math.exp(params.lam * lstar))
            po = PseudoOrbit(points=pts, levels=np.full(n, lstar, dtype=int),
                             delta=delta_loop, lam=params.lam)
            try:
                pp = close_periodic(sm, po, n, params, constants, b)
            except Exception:
                continue
            if not pp.refined or pp.residual > 1e-12:
                continue
            m = _min_period(sm, pp.point, pp.period)
            if m > max_period:
                continue
            point = _polish_periodic(sm, pp.point, m)
            resid = float(torus_dist(iterate(sm, point, m), point))
            if resid > 1e-12:
                continue
            if any(torus_dist(point, s) < 1e-7 for s in seen):
                break
            _, _, lvp = regularity_batch(sm, point[None, :], params,
                                         check_stable=False)
            if lvp[0] < 0 or lvp[0] > ell:
                continue
            seen.append(point)
            out.append(PeriodicPoint(point=point, period=m, residual=resid,
                                     refined=True, newton_steps=pp.newton_steps,
                                     shadow_diameter=pp.shadow_diameter))
            break
    return out


def _polish_periodic(sm: SurfaceMap, p: np.ndarray, m: int,
                     iters: int = 5) -> np.ndarray:
    """A few Newton steps on f^m - id to pin the minimal-period residual."""
    p = wrap(np.asarray(p, dtype=float))
    for _ in range(iters):
        g = torus_diff(iterate(sm, p, m), p)
        if float(np.linalg.norm(g)) < 1e-14:
            break
        jac = cocycle(sm, p, m) - np.eye(2)
        try:
            p = wrap(p - np.linalg.solve(jac, g))
        except np.linalg.LinAlgError:
            break
    return p


def assemble_domain(
    sm: SurfaceMap,
    pp: PeriodicPoint,
    qq: PeriodicPoint,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    ell: int,
    r_bound: float,
    b_seed: float,
    field_resolution: int = 384,
    n_curve: int = 401,
) -> NiceDomain:
    """Quadrilateral between two periodic points with invariant-curve edges."""
    p, q = pp.point, qq.point
    T = _lcm(pp.period, qq.period)
    d = float(torus_dist(p, q))
    if d < 1e-9:
        raise NiceDomainError("degenerate domain: p = q")
    if d >= r_bound:
        raise NiceDomainError(f"d(p,q) = {d:.3g} exceeds the r bound {r_bound:.3g}")
    e_s, e_u = _eig_directions(cocycle(sm, p, T))
    frame = np.column_stack([e_u, e_s])
    wq = np.linalg.solve(frame, torus_diff(q, p))
    if wq[0] < 0:
        frame[:, 0] = -frame[:, 0]
    if wq[1] < 0:
        frame[:, 1] = -frame[:, 1]
    frame_inv = np.linalg.inv(frame)
    wq = frame_inv @ torus_diff(q, p)

    target = 1.6 * d
    curves = {}
    for base, tag in ((p, "p"), (q, "q")):
        for kind in ("stable", "unstable"):
            off = grow_invariant_curve(sm, base, kind, T, target, b_seed, n_curve)
            w = np.einsum("ij,nj->ni", frame_inv, off)
            if tag == "q":
                w = w + wq[None, :]
            curves[(tag, kind)] = GraphCurve(kind, w)

    corner_pq = intersect_graphs(curves[("p", "stable")], curves[("q", "unstable")])
    corner_qp = intersect_graphs(curves[("q", "stable")], curves[("p", "unstable")])
    if not (corner_pq[1] > 1e-9 and corner_qp[0] > 1e-9):
        raise NiceDomainError("corner ordering failed: curves do not bound a disk")

    def clip_graph(c: GraphCurve, lo, hi):
        lo = max(lo, c.span()[0])
        hi = min(hi, c.span()[1])
        return c.clip(lo, hi)

    pad = 1e-9
    bottom = clip_graph(curves[("p", "unstable")], -pad, corner_qp[0] + pad)
    top = clip_graph(curves[("q", "unstable")], corner_pq[0] - pad, wq[0] + pad)
    leftc = clip_graph(curves[("p", "stable")], -pad, corner_pq[1] + pad)
    rightc = clip_graph(curves[("q", "stable")], corner_qp[1] - pad, wq[1] + pad)

    corners = np.stack([np.zeros(2), corner_pq, wq, corner_qp])
    diam = float(np.max([np.linalg.norm(
        frame @ (corners[i] - corners[j])) for i in range(4) for j in range(i + 1, 4)]))
    if diam >= r_bound:
        raise NiceDomainError(f"domain diameter {diam:.3g} exceeds r = {r_bound:.3g}")

    # field over the lifted bounding box around p (queries use to_lift)
    lift = p[None, :] + np.einsum("ij,nj->ni", frame, corners)
    blo, bhi = lift.min(axis=0), lift.max(axis=0)
    fld = SplittingField(sm, blo, bhi, n=field_resolution)

    return NiceDomain(
        sm=sm, p=p, q=q, period_p=pp.period, period_q=qq.period, T=T, level=ell,
        frame=frame, frame_inv=frame_inv, bottom=bottom, top=top, left=leftc,
        right=rightc, corner_pq=corner_pq, corner_qp=corner_qp, field=fld,
        r_bound=r_bound, diameter=diam,
    )


def verify_niceness(domain: NiceDomain, n_max: int = 50,
                    band: float | None = None) -> dict:
    """Interior-avoidance of the boundary at multiples of T, both directions.

    Iterates the stable edges forward and the unstable edges backward by f^T
    up to n_max times, testing that no sample enters the interior beyond the
    tolerance band (boundary images lie on the invariant curves themselves).
    """
    sm = domain.sm
    band = band if band is not None else max(1e-9, 1e-7 * domain.diameter)
    log = {"n_max": n_max, "band": band, "violations": [], "max_penetration": 0.0}

    def penetration(w):
        w1, w2 = w[:, 0], w[:, 1]
        hb = np.interp(w1, domain.bottom.param, domain.bottom.values)
        ht = np.interp(w1, domain.top.param, domain.top.values)
        gl = np.interp(w2, domain.left.param, domain.left.values)
        gr = np.interp(w2, domain.right.param, domain.right.values)
        depth = np.minimum.reduce([w2 - hb, ht - w2, w1 - gl, gr - w1])
        return depth  # > 0 means inside by that margin

    for kind, edges, direction in (("stable", (domain.left, domain.right), +1),
                                   ("unstable", (domain.bottom, domain.top), -1)):
        for edge in edges:
            pts = domain.to_ambient(edge.resample(129).pts)
            for n in range(1, n_max + 1):
                pts = iterate(sm, pts, direction * domain.T)
                w = domain.to_frame(pts)
                depth = penetration(w)
                worst = float(np.max(depth))
                log["max_penetration"] = max(log["max_penetration"], worst)
                if worst > band:
                    log["violations"].append(
                        {"kind": kind, "n": n * domain.T, "penetration": worst})
    log["passed"] = not log["violations"]
    return log


def find_nice_domain(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    region_lo,
    region_hi,
    ell: int,
    b: float,
    delta: float,
    r_override: float | None = None,
    n_search: int = 16,
    n_random_seeds: int = 8,
    horizon_search: int = 96,
    max_period: int = 6,
    n_nice: int = 50,
    field_resolution: int = 384,
    rng: np.random.Generator | None = None,
) -> NiceDomain:
    """Construct and verify a nice domain inside the given rectangle region.

    Grid-samples the region for level-compatible points, picks extremal and
    random seeds, closes their recurrence loops into periodic points, and
    tries the ten best-separated admissible pairs until the niceness
    verification passes.  ``r_override`` replaces the derived r bound (the
    value in force is recorded on the domain either way).
    """
    rng = rng or np.random.default_rng(5)
    lo = np.asarray(region_lo, dtype=float)
    hi = np.asarray(region_hi, dtype=float)
    xs = np.linspace(lo[0], hi[0], n_search)
    ys = np.linspace(lo[1], hi[1], n_search)
    grid = wrap(np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2))
    _, _, lvl = regularity_batch(sm, grid, params, check_stable=False)
    z = grid[(lvl > 0) & (lvl <= ell)]
    if len(z) == 0:
        raise NiceDomainError("region contains no points of the requested level")

    from .regularity import estimate_splitting_batch
    e_s0, e_u0 = estimate_splitting_batch(sm, np.mean(z, axis=0)[None, :])
    frame0 = np.column_stack([e_u0[0], e_s0[0]])
    w = np.einsum("ij,nj->ni", np.linalg.inv(frame0), torus_diff(z, z.mean(axis=0)))
    extremal = [z[int(np.argmin(w[:, 0]))], z[int(np.argmax(w[:, 0]))],
                z[int(np.argmin(w[:, 1]))], z[int(np.argmax(w[:, 1]))]]
    seeds = np.concatenate([np.stack(extremal),
                            z[rng.choice(len(z), size=min(n_random_seeds, len(z)),
                                         replace=False)]], axis=0)
    cands = find_periodic_candidates(sm, params, constants, b, delta, seeds, ell,
                                     horizon=horizon_search, max_period=max_period)
    if len(cands) < 2:
        raise NiceDomainError(f"found only {len(cands)} periodic candidates")

    c_ell = estimate_c_ell(sm, params, ell, rng)
    r_derived = nice_radius(params, constants, delta, ell, c_ell)
    r_eff = r_override if r_override is not None else r_derived

    pairs = []
    for i in range(len(cands)):
        for j in range(len(cands)):
            if i == j:
                continue
            d = float(torus_dist(cands[i].point, cands[j].point))
            if 1e-9 < d < r_eff:
                pairs.append((d, i, j))
    pairs.sort(key=lambda t: -t[0])
    errors = []
    for d, i, j in pairs[:10]:
        try:
            dom = assemble_domain(sm, cands[i], cands[j], params, constants, ell,
                                  r_eff, b_seed=b / 10.0,
                                  field_resolution=field_resolution)
            nice = verify_niceness(dom, n_max=n_nice)
            if not nice["passed"]:
                errors.append((d, "niceness", nice["violations"][:3]))
                continue
            dom.verification["niceness"] = nice
            dom.verification["r_derived"] = r_derived
            dom.verification["r_effective"] = r_eff
            dom.verification["c_ell"] = c_ell
            return dom
        except NiceDomainError as exc:
            errors.append((d, "assembly", str(exc)))
    raise NiceDomainError(f"no admissible (p, q) pair worked: {errors[:5]}")


# ---------------------------------------------------------------------------
# almost returns and hyperbolic branches


def detect_almost_returns(
    domain: NiceDomain,
    a_points: np.ndarray,
    horizon: int,
    tol: float = 1e-7,
    n_leaf: int = 33,
) -> list[tuple[int, int, int]]:
    """(x, y, i) triples with f^i(W^s_x) meeting W^u_y inside the domain.

    The stable leaf of each point of A is iterated forward (contracting,
    re-centered on the anchor orbit each step); at multiples of T with
    f^i(x) in the domain, the stable-feet range of the image curve is
    matched against the feet of the W^u leaves of A.
    """
    sm = domain.sm
    T = domain.T
    if horizon % T != 0:
        raise ValueError("horizon must be a multiple of T")
    a_points = wrap(np.atleast_2d(a_points))
    fu, fs = domain.feet(a_points)
    hits: list[tuple[int, int, int]] = []
    for ix, x in enumerate(a_points):
        leafw = domain.leaf(x, "stable", n_leaf)
        amb = domain.to_ambient(leafw)
        off = _unwrap_polyline(torus_diff(amb, x))
        anchor = x.copy()
        for i in range(1, horizon + 1):
            new_anchor = sm.forward(anchor)
            off = torus_diff(sm.forward(wrap(anchor[None, :] + off)), new_anchor)
            anchor = new_anchor
            if i % T != 0:
                continue
            if not bool(domain.contains(anchor[None, :])[0]):
                continue
            img = wrap(anchor[None, :] + off)
            _, fs_img = domain.feet(img)
            lo, hi = float(np.min(fs_img)) - tol, float(np.max(fs_img)) + tol
            for iy in np.nonzero((fs >= lo) & (fs <= hi))[0]:
                hits.append((ix, int(iy), i))
    return hits


def branch_width_floor(domain: NiceDomain, i: int, c2: float) -> float:
    """Smallest reliably representable strip width at return time i."""
    noise = 30.0 * math.exp(c2 * i) * 1e-16
    field_err = 0.0 if domain.field.constant else 5e-6
    return max(1e-10 * domain.span_u, noise, field_err)


@dataclass
class HyperbolicBranch:
    """f^i between a stable and an unstable strip of the domain.

    ``su`` is the stable strip's foot interval on the unstable transversal,
    ``ss`` the unstable strip's interval on the stable transversal.
    ``times`` lists the cumulative internal visit times (concatenations keep
    their history); ``thin`` flags strips below the representable width
    floor, which are excluded from hard geometric assertions.
    """

    i: int
    times: tuple
    su: tuple
    ss: tuple
    anchor: np.ndarray
    anchor_foot: float
    C_branch: float
    lam_branch: float
    thin: bool = False
    checks: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.su[1] - self.su[0]

    def signature(self, quantum: float) -> tuple:
        return (self.i, round(self.su[0] / quantum), round(self.su[1] / quantum))


def _leaf_inside_at_times(domain: NiceDomain, leafw: np.ndarray,
                          times: tuple, band: float) -> bool:
    sm = domain.sm
    amb = domain.to_ambient(leafw)
    anchor = amb[len(amb) // 2].copy()
    off = _unwrap_polyline(torus_diff(amb, anchor))
    tmax = max(times)
    tset = set(times)
    for t in range(1, tmax + 1):
        new_anchor = sm.forward(anchor)
        off = torus_diff(sm.forward(wrap(anchor[None, :] + off)), new_anchor)
        anchor = new_anchor
        if t in tset:
            pts = wrap(anchor[None, :] + off)
            if not bool(np.all(domain.contains(pts, tol=-band))):
                return False
    return True


def _foot_interval(domain: NiceDomain, anchor_foot: float, times: tuple,
                   constants: DerivedConstants, kind: str = "stable",
                   n_leaf: int = 17, band: float | None = None) -> tuple:
    """Strip interval around an anchor foot by expansion-guess plus bisection."""
    sm = domain.sm
    i_tot = max(times)
    span = domain.span_u if kind == "stable" else domain.span_s
    band = band if band is not None else max(1e-9, 1e-7 * domain.diameter)
    if kind == "stable":
        check_times = tuple(sorted(times))
    else:
        # the unstable strip is tested backward from the endpoint
        check_times = tuple(sorted({i_tot - t for t in times if t != i_tot}
                                   | {i_tot}))

    def cond(s):
        s = float(np.clip(s, 0.0, span))
        leafw = domain.leaf_at_foot(s, "stable" if kind == "stable" else "unstable",
                                    n_leaf)
        if kind == "stable":
            return _leaf_inside_at_times(domain, leafw, check_times, band)
        return _leaf_inside_at_times_backward(domain, leafw, check_times, band)

    floor = branch_width_floor(domain, i_tot, constants.c2)
    # expansion-based width guess
    mid_leaf = domain.leaf_at_foot(
        anchor_foot, "stable" if kind == "stable" else "unstable", 3)
    anchor_pt = domain.to_ambient(mid_leaf[1])
    anchor_lift = domain.to_lift(mid_leaf[1])
    direction = (domain.field.e_u(anchor_lift[None, :])[0] if kind == "stable"
                 else domain.field.e_s(anchor_lift[None, :])[0])
    jac = cocycle(sm, anchor_pt, i_tot if kind == "stable" else -i_tot)
    rate = float(np.linalg.norm(jac @ direction))
    guess = span / max(rate, 1.0)
    if guess < floor:
        return (anchor_foot, anchor_foot, True)

    out = []
    for sign in (-1.0, +1.0):
        step = max(guess * 0.5, floor)
        s_in = anchor_foot
        s_out = None
        s = anchor_foot
        for _ in range(200):
            s = s + sign * step
            if s <= 0.0 or s >= span:
                edge = 0.0 if sign < 0 else span
                if cond(edge):
                    s_in = edge
                    s_out = None
                else:
                    s_out = edge
                break
            if cond(s):
                s_in = s
            else:
                s_out = s
                break
        if s_out is None:
            out.append(s_in)
            continue
        lo, hi = (s_out, s_in) if sign < 0 else (s_in, s_out)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            ok = cond(mid)
            if sign < 0:
                if ok:
                    hi = mid
                else:
                    lo = mid
            else:
                if ok:
                    lo = mid
                else:
                    hi = mid
        out.append(0.5 * (lo + hi))
    lo, hi = min(out), max(out)
    return (lo, hi, False)


def _leaf_inside_at_times_backward(domain: NiceDomain, leafw: np.ndarray,
                                   times: tuple, band: float) -> bool:
    sm = domain.sm
    amb = domain.to_ambient(leafw)
    anchor = amb[len(amb) // 2].copy()
    off = _unwrap_polyline(torus_diff(amb, anchor))
    tmax = max(times)
    tset = set(times)
    for t in range(1, tmax + 1):
        new_anchor = sm.inverse(anchor)
        off = torus_diff(sm.inverse(wrap(anchor[None, :] + off)), new_anchor)
        anchor = new_anchor
        if t in tset:
            pts = wrap(anchor[None, :] + off)
            if not bool(np.all(domain.contains(pts, tol=-band))):
                return False
    return True


def extract_branch(
    domain: NiceDomain,
    x: np.ndarray,
    i: int,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    delta_eff: float,
    times: tuple | None = None,
    n_check: int = 24,
    rng: np.random.Generator | None = None,
) -> HyperbolicBranch:
    """Hyperbolic branch at a (almost) return time i of the anchor x.

    Builds the spliced pseudo-orbit through p and validates it at the
    effective delta (recorded), locates the stable/unstable strip foot
    intervals by anchored bisection, and verifies the branch estimates:
    cone invariance and the growth bounds with C = Qhat^{-1} e^{2 eps l},
    rate lam/3, at sampled strip points.
    """
    sm = domain.sm
    rng = rng or np.random.default_rng(11)
    if i <= 0 or i % domain.T != 0:
        raise NiceDomainError("return time must be a positive multiple of T")
    x = wrap(np.asarray(x, dtype=float))
    times = (i,) if times is None else tuple(times)

    fx = iterate(sm, x, i)
    fu_x, _ = domain.feet(x[None, :])
    _, fs_fx = domain.feet(fx[None, :])
    su = _foot_interval(domain, float(fu_x[0]), times, constants, "stable")
    ss = _foot_interval(domain, float(fs_fx[0]), times, constants, "unstable")
    thin = su[2] or ss[2]

    ell = domain.level
    c_branch = math.exp(2.0 * params.epsilon * ell) / constants.Qhat
    branch = HyperbolicBranch(
        i=i, times=times, su=(su[0], su[1]), ss=(ss[0], ss[1]),
        anchor=x, anchor_foot=float(fu_x[0]), C_branch=c_branch,
        lam_branch=params.lam / 3.0, thin=thin,
    )
    if su[1] - su[0] >= domain.span_u - 1e-9:
        raise NiceDomainError(
            "branch strip covers the whole domain: two fixed points in one branch")

    # the spliced pseudo-orbit through p, validated at the effective delta
    try:
        cur = x.copy()
        orbitx = [cur]
        for _ in range(i):
            cur = sm.forward(cur)
            orbitx.append(cur)
        chain = [domain.p] + orbitx[1:i] + [domain.p]
        levels = np.full(i + 1, ell, dtype=int)
        validate_pseudo_orbit(sm, params, np.stack(chain), levels, delta_eff)
        branch.checks["pseudo_orbit_delta"] = delta_eff
        branch.checks["pseudo_orbit_valid"] = True
    except Exception as exc:  # recorded, not fatal: estimates verified below
        branch.checks["pseudo_orbit_valid"] = False
        branch.checks["pseudo_orbit_error"] = str(exc)

    # growth and cone checks at sampled strip points
    if not thin:
        s_samples = rng.uniform(su[0], su[1], n_check)
        h_samples = rng.random(n_check)
        ptsw = []
        for s, h in zip(s_samples, h_samples):
            lw = domain.leaf_at_foot(float(s), "stable", 9)
            ptsw.append(lw[int(round(h * (len(lw) - 1)))])
        ptsw = np.stack(ptsw)
        pts = domain.to_ambient(ptsw)
        lift = domain.to_lift(ptsw)
        e_u = domain.field.e_u(lift)
        e_s = domain.field.e_s(lift)
        # growth along the orbit, checked at quarter times
        js = sorted({0, i // 4, i // 2, (3 * i) // 4, i})
        vu = e_u.copy()
        vs = e_s.copy()
        norms_u = {0: np.ones(len(pts))}
        norms_s = {0: np.ones(len(pts))}
        cur = pts.copy()
        nu = np.ones(len(pts))
        ns = np.ones(len(pts))
        for t in range(1, i + 1):
            jac = sm.derivative(cur)
            vu = np.einsum("...ij,...j->...i", jac, vu)
            vs = np.einsum("...ij,...j->...i", jac, vs)
            cur = sm.forward(cur)
            nu = nu * np.linalg.norm(vu, axis=-1)
            ns = ns * np.linalg.norm(vs, axis=-1)
            vu /= np.linalg.norm(vu, axis=-1, keepdims=True)
            vs /= np.linalg.norm(vs, axis=-1, keepdims=True)
            if t in js:
                norms_u[t] = nu.copy()
                norms_s[t] = ns.copy()
        ok_growth = True
        margin = np.inf
        for j in js:
            # |v^u_j| <= C e^{-lam/3 (i-j)} |v^u_i|  and  |v^s_j| <= C e^{-lam/3 j} |v^s_0|
            lhs_u = norms_u[j]
            rhs_u = c_branch * math.exp(-branch.lam_branch * (i - j)) * norms_u[i]
            lhs_s = norms_s[j]
            rhs_s = c_branch * math.exp(-branch.lam_branch * j)
            ok_growth &= bool(np.all(lhs_u <= rhs_u * (1 + 1e-9)))
            ok_growth &= bool(np.all(lhs_s <= rhs_s * (1 + 1e-9)))
            if j > 0:
                margin = min(margin, float(np.min(rhs_u / lhs_u)))
        # cone invariance: image of e_u stays within the unstable cone field
        eu_end = domain.field.e_u(domain.relift(cur))
        align = np.abs(np.sum(vu * eu_end, axis=-1))
        ok_cone = bool(np.all(align >= math.cos(constants.omega)))
        branch.checks.update({
            "growth_ok": ok_growth, "growth_margin": margin,
            "cone_ok": ok_cone, "cone_min_alignment": float(np.min(align)),
        })
        # Markov/caps: boundary leaves map onto the stable edges
        caps = []
        for s_val in branch.su:
            lw = domain.leaf_at_foot(float(s_val), "stable", 9)
            amb = domain.to_ambient(lw)
            img = iterate(sm, amb, i)
            w_img = domain.to_frame(img)
            w1 = w_img[:, 0]
            gl = np.interp(w_img[:, 1], domain.left.param, domain.left.values)
            gr = np.interp(w_img[:, 1], domain.right.param, domain.right.values)
            caps.append(float(np.min(np.minimum(np.abs(w1 - gl), np.abs(gr - w1)))))
        branch.checks["cap_edge_distance"] = max(caps)
    return branch


def concatenate(
    domain: NiceDomain,
    b1: HyperbolicBranch,
    b2: HyperbolicBranch,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    delta_eff: float = 0.0,
    rng: np.random.Generator | None = None,
) -> HyperbolicBranch:
    """Concatenated branch with return time i1 + i2 and no constant loss.

    The new stable strip is the set of leaves of b1's strip whose f^{i1}
    images land in b2's strip; located by a monotone foot-map solve anchored
    at b1, then verified like a primitive branch.
    """
    sm = domain.sm
    if b1.thin or b2.thin:
        raise NiceDomainError("cannot concatenate quarantined thin branches")
    span = domain.span_u

    def foot_map(s):
        lw = domain.leaf_at_foot(float(np.clip(s, 0, span)), "stable", 5)
        pt = domain.to_ambient(lw[len(lw) // 2])
        img = iterate(sm, pt, b1.i)
        fu, _ = domain.feet(img[None, :])
        return float(fu[0])

    lo, hi = b1.su
    f_lo, f_hi = foot_map(lo + 1e-12), foot_map(hi - 1e-12)
    orient = 1.0 if f_hi >= f_lo else -1.0
    t_lo, t_hi = sorted((b2.su[0], b2.su[1]))
    lo_img, hi_img = sorted((f_lo, f_hi))
    if t_hi < lo_img or t_lo > hi_img:
        raise NiceDomainError("strip images do not intersect: empty concatenation")

    def solve(target):
        a, c = lo, hi
        fa = f_lo
        for _ in range(80):
            m = 0.5 * (a + c)
            fm = foot_map(m)
            if (fm - target) * orient < 0:
                a = m
            else:
                c = m
        return 0.5 * (a + c)

    s_lo = solve(t_lo if orient > 0 else t_hi)
    s_hi = solve(t_hi if orient > 0 else t_lo)
    s_lo, s_hi = min(s_lo, s_hi), max(s_hi, s_lo)
    anchor_foot = 0.5 * (s_lo + s_hi)
    anchor_leaf = domain.leaf_at_foot(anchor_foot, "stable", 3)
    anchor = domain.to_ambient(anchor_leaf[1])
    times = tuple(b1.times) + tuple(b1.i + t for t in b2.times)
    delta_eff = delta_eff or b1.checks.get("pseudo_orbit_delta", 0.0)
    return extract_branch(domain, anchor, b1.i + b2.i, params, constants,
                          delta_eff=delta_eff, times=times, rng=rng)
