"""Oseledets splittings, regularity functions C(x), K(x), and level sets.

The contraction/expansion regularity of a point is summarised by the smallest
constant C >= 1 making the four hyperbolicity inequalities

    |Df^n e^s| <= C e^{-chi n},    |Df^n e^u|  >= C^{-1} e^{chi n},
    |Df^-n e^s| >= C^{-1} e^{chi n},  |Df^-n e^u| <= C e^{-chi n}

hold over a finite window, together with the splitting angle K.  The level of
a point is the smallest integer l with C <= e^{eps l} and K >= e^{-eps l}.

Since C is an infimum over all n (unobservable from finite data), a window
max with a stabilization test is used as the surrogate; points whose C keeps
growing from window to 2*window are rejected as not regular at this chi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import SurfaceMap, cocycle, torus_dist, wrap

__all__ = [
    "Splitting",
    "RegularityData",
    "HyperbolicityParams",
    "DerivedConstants",
    "derive_constants",
    "estimate_splitting",
    "estimate_splitting_batch",
    "regularity_data",
    "regularity_batch",
    "level_histogram",
    "verify_splitting_hoelder",
    "verify_su_hoelder",
    "SplittingField",
    "DegenerateSplittingError",
    "NotRegularError",
    "ConstantsError",
]


class DegenerateSplittingError(RuntimeError):
    """No hyperbolicity detected: estimated directions nearly parallel."""


class NotRegularError(RuntimeError):
    """C(x) keeps growing with the window; point not in any regular level set."""


class ConstantsError(ValueError):
    """Parameter constraints for the derived constants cannot be met."""


@dataclass(frozen=True)
class Splitting:
    """Per-point stable/unstable unit directions and their angle."""

    base: np.ndarray
    e_s: np.ndarray
    e_u: np.ndarray

    @property
    def angle(self) -> float:
        return float(splitting_angle(self.e_s, self.e_u))

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "e_s", np.asarray(self.e_s, dtype=float))
        object.__setattr__(self, "e_u", np.asarray(self.e_u, dtype=float))


def splitting_angle(e_s: np.ndarray, e_u: np.ndarray) -> np.ndarray:
    """Angle between the lines spanned by e_s and e_u, in (0, pi/2]."""
    dot = np.abs(np.sum(e_s * e_u, axis=-1))
    return np.arccos(np.clip(dot, 0.0, 1.0))


@dataclass(frozen=True)
class RegularityData:
    base: np.ndarray
    C: float
    K: float
    level: int
    window: int


@dataclass(frozen=True)
class HyperbolicityParams:
    """chi > lambda > 0, epsilon in (0, eps1), Hoelder alpha, and epsilon0.

    epsilon0 is a configured stand-in for the stable-manifold theorem's
    existence constant; it enters only the auxiliary constant iota.
    """

    chi: float
    lam: float
    epsilon: float
    epsilon0: float = 0.011
    alpha: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.lam < self.chi):
            raise ConstantsError(f"need 0 < lambda < chi, got lambda={self.lam}, chi={self.chi}")
        if not (0.0 < self.alpha <= 1.0):
            raise ConstantsError("alpha must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ConstantsError("epsilon must be positive")


@dataclass(frozen=True)
class DerivedConstants:
    c1: float
    c2: float
    c3: float
    gamma: float
    beta: float
    iota: float
    eta: float
    zeta: float
    eps1: float
    Q0: float
    Qhat: float
    Q1: float
    omega: float
    ell_prime: int


def _grid_log_norms(sm: SurfaceMap, n: int = 256) -> tuple[float, float]:
    """Max of log||Df|| and log||Df^-1|| over an n x n grid (operator norms)."""
    xs = (np.arange(n) + 0.5) / n
    g = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    j = sm.derivative(g)
    sv = np.linalg.svd(j, compute_uv=False)
    m_f = float(np.max(sv[:, 0]))
    m_b = float(np.max(1.0 / sv[:, 1]))
    return math.log(m_f), math.log(m_b)


def _omega_feasible(w: float, lam: float, epsilon: float, alpha: float) -> bool:
    e = math.exp
    s3 = 3.0 * epsilon / alpha
    return (
        e(-lam / 2) * e(s3) + e(-lam) * w < e(-lam / 3)
        and e(lam) / math.sqrt(1 + w * w) >= e(2 * lam / 3)
        and (e(-lam / 24) - w * e(lam / 24)) / math.sqrt(1 + w * w) > e(-lam / 4)
        and (1 - w) >= math.sqrt(2 * (1 + w * w)) / 2
        and 2 * w < 1 - e(lam / 24) * e(-lam / 3)
        and e(-lam / 24) < 1 / math.sqrt(1 + e(-2 * lam) * w * w)
    )


def derive_constants(
    sm: SurfaceMap,
    chi: float,
    lam: float,
    epsilon: float = 0.01,
    epsilon0: float = 0.011,
    grid: int = 256,
    c2_margin: float = 0.01,
) -> DerivedConstants:
    """All auxiliary constants of the hyperbolicity theory.

    c2 bounds max log||Df^{+-1}||: exact for linear maps, a grid max with a
    relative safety margin otherwise.  c3 = 1.05 (1+alpha) c2.  The cone
    half-width omega is the largest value in (0,1) satisfying the six
    smallness inequalities, found by bisection to 1e-10.
    """
    if not (0.0 < lam < chi):
        raise ConstantsError(f"need 0 < lambda < chi, got lambda={lam}, chi={chi}")
    alpha = sm.hoelder_exponent
    if sm.linear:
        sv = np.linalg.svd(sm.matrix, compute_uv=False)
        c2 = math.log(max(sv[0], 1.0 / sv[1]))
    else:
        lf, lb = _grid_log_norms(sm, grid)
        c2 = (1.0 + c2_margin) * max(lf, lb)
    c1 = -c2
    c3 = 1.05 * (1.0 + alpha) * c2
    gamma = (chi - c1) / (2.0 * chi)
    beta = 2.0 * chi * alpha / (c3 + chi)
    iota = 2.0 * (chi - lam) / (6.0 * epsilon0 * gamma * alpha + (2.0 + alpha * beta) * c2 + 2.0 * chi)
    eta = 6.0 * gamma * alpha * iota + 2.0
    zeta = alpha * beta * iota
    eps1 = min(
        lam * alpha / 18.0,
        lam * beta / (7.0 * gamma),
        lam * zeta / (eta - 1.0),
        lam / (2.0 * (1.0 + 1.0 / alpha)),
        epsilon0,
    )
    if epsilon >= eps1:
        raise ConstantsError(
            f"epsilon={epsilon:g} must be < eps1={eps1:.10g} for this map and (chi, lambda)"
        )
    q0 = 1.0 / 8.0
    qhat = q0 * math.sqrt((1.0 - math.exp(2.0 * (lam - chi))) / 2.0)
    q1 = math.sqrt(1.0 + math.exp(2.0 * (lam + c2)))

    if not _omega_feasible(1e-12, lam, epsilon, alpha):
        raise ConstantsError("no admissible cone width: lambda too large relative to alpha")
    lo, hi = 1e-12, 1.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if _omega_feasible(mid, lam, epsilon, alpha):
            lo = mid
        else:
            hi = mid
    omega = lo
    ell_prime = math.ceil(abs(math.log(qhat) / (2.0 * epsilon)))
    return DerivedConstants(
        c1=c1, c2=c2, c3=c3, gamma=gamma, beta=beta, iota=iota, eta=eta,
        zeta=zeta, eps1=eps1, Q0=q0, Qhat=qhat, Q1=q1, omega=omega,
        ell_prime=ell_prime,
    )


_GENERIC = np.array([0.6401843996644798, 0.7682212795824050])  # fixed generic seed


def _linear_directions(sm: SurfaceMap) -> tuple[np.ndarray, np.ndarray]:
    evals, evecs = np.linalg.eig(sm.matrix)
    iu = int(np.argmax(np.abs(evals)))
    e_u = np.real(evecs[:, iu])
    e_s = np.real(evecs[:, 1 - iu])
    e_u = e_u / np.linalg.norm(e_u)
    e_s = e_s / np.linalg.norm(e_s)
    # canonical sign: first nonzero component positive
    if e_u[0] < 0 or (e_u[0] == 0 and e_u[1] < 0):
        e_u = -e_u
    if e_s[0] < 0 or (e_s[0] == 0 and e_s[1] < 0):
        e_s = -e_s
    return e_s, e_u


def estimate_splitting_batch(
    sm: SurfaceMap, pts: np.ndarray, horizon: int = 30
) -> tuple[np.ndarray, np.ndarray]:
    """Unstable/stable directions at each point of ``pts`` (shape (..., 2)).

    e_u is the normalized image of a generic vector under the cocycle pushed
    forward from the distant past, e_s the image under the inverse cocycle
    pulled back from the future; exact eigendirections for linear maps.
    Returns (e_s, e_u), each of pts.shape.
    """
    pts = wrap(pts)
    if sm.linear:
        e_s, e_u = _linear_directions(sm)
        shape = pts.shape
        return np.broadcast_to(e_s, shape).copy(), np.broadcast_to(e_u, shape).copy()
    if horizon < 10:
        raise ValueError("horizon must be >= 10")
    # transport along stored orbits: re-applying the map after a backward
    # pass would drift by the inverse error amplified e^{chi h}
    back = [pts]
    for _ in range(horizon):
        back.append(sm.inverse(back[-1]))
    v = np.broadcast_to(_GENERIC, pts.shape).copy()
    for k in range(horizon, 0, -1):
        v = np.einsum("...ij,...j->...i", sm.derivative(back[k]), v)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    e_u = v
    fut = [pts]
    for _ in range(horizon):
        fut.append(sm.forward(fut[-1]))
    w = np.broadcast_to(_GENERIC, pts.shape).copy()
    for k in range(horizon, 0, -1):
        w = np.einsum("...ij,...j->...i", sm.inverse_derivative(fut[k]), w)
        w = w / np.linalg.norm(w, axis=-1, keepdims=True)
    e_s = w
    # canonical sign
    flip = (e_u[..., 0] < 0) | ((e_u[..., 0] == 0) & (e_u[..., 1] < 0))
    e_u = np.where(flip[..., None], -e_u, e_u)
    flip = (e_s[..., 0] < 0) | ((e_s[..., 0] == 0) & (e_s[..., 1] < 0))
    e_s = np.where(flip[..., None], -e_s, e_s)
    return e_s, e_u


def estimate_splitting(sm: SurfaceMap, p: np.ndarray, horizon: int = 30) -> Splitting:
    """Splitting at a single point; raises if no hyperbolicity is detected."""
    e_s, e_u = estimate_splitting_batch(sm, np.asarray(p, dtype=float), horizon)
    ang = float(splitting_angle(e_s, e_u))
    if ang < 1e-6:
        raise DegenerateSplittingError(
            f"estimated directions within angle {ang:.2e} at horizon {horizon}"
        )
    return Splitting(base=wrap(p), e_s=e_s, e_u=e_u)


def orbit_frame_data(sm: SurfaceMap, pts: np.ndarray, reach: int, horizon: int = 30):
    """Orbit window around each point with unit e_s/e_u and one-step norms.

    Returns (X, e_s, e_u, log_a, log_d) where X[k] is the orbit at offset
    k-reach (k = 0..2*reach), e_s/e_u are unit stable/unstable directions at
    those points, log_a[j] = log|Df(X_j) e_s(X_j)| and log_d[j] likewise for
    e_u (defined for j = 0..2*reach-1).  Directions are seeded by power
    iteration beyond the window and propagated only in their numerically
    stable directions (e_u forward, e_s backward), so |Df^n e| products can
    be accumulated from one-step norms without directional error growth.
    """
    pts = wrap(np.asarray(pts, dtype=float))
    total = reach + horizon
    x = pts
    back = [x]
    for _ in range(total):
        x = sm.inverse(x)
        back.append(x)
    x = pts
    fwd = [x]
    for _ in range(total):
        x = sm.forward(x)
        fwd.append(x)
    full = np.stack(back[::-1] + fwd[1:], axis=0)  # indices 0..2*total

    gen = np.broadcast_to(np.array([0.64018439966448, 0.76822127958241]),
                          pts.shape).copy()
    v = gen.copy()
    e_u = np.empty((2 * reach + 1,) + pts.shape)
    for idx in range(2 * total):
        j = sm.derivative(full[idx])
        v = np.einsum("...ij,...j->...i", j, v)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        k = idx + 1 - (total - reach)
        if 0 <= k <= 2 * reach:
            e_u[k] = v
    w = gen.copy()
    e_s = np.empty_like(e_u)
    for idx in range(2 * total, 0, -1):
        ji = sm.inverse_derivative(full[idx])
        w = np.einsum("...ij,...j->...i", ji, w)
        w = w / np.linalg.norm(w, axis=-1, keepdims=True)
        k = idx - 1 - (total - reach)
        if 0 <= k <= 2 * reach:
            e_s[k] = w
    log_a = np.empty((2 * reach,) + pts.shape[:-1])
    log_d = np.empty_like(log_a)
    for k in range(2 * reach):
        j = sm.derivative(full[total - reach + k])
        log_a[k] = np.log(np.linalg.norm(
            np.einsum("...ij,...j->...i", j, e_s[k]), axis=-1))
        log_d[k] = np.log(np.linalg.norm(
            np.einsum("...ij,...j->...i", j, e_u[k]), axis=-1))
    window = full[total - reach: total + reach + 1]
    return window, e_s, e_u, log_a, log_d


def _c_window(sm: SurfaceMap, pts: np.ndarray, chi: float, window: int,
              horizon: int = 30) -> np.ndarray:
    """Smallest constant per point making all four window inequalities hold.

    Uses cumulative one-step norms along the orbit, so the window can exceed
    the scale at which direct vector pushing would lose the stable direction.
    """
    pts = wrap(pts)
    _, _, _, log_a, log_d = orbit_frame_data(sm, pts, window, horizon)
    zero = np.zeros((1,) + log_a.shape[1:])
    sa = np.concatenate([zero, np.cumsum(log_a, axis=0)], axis=0)
    sd = np.concatenate([zero, np.cumsum(log_d, axis=0)], axis=0)
    w = window
    n = np.arange(1, window + 1)[:, None]
    chin = chi * n
    log_c = np.max(np.concatenate([
        chin + (sa[w + n[:, 0]] - sa[w]),    # |Df^n e^s| e^{chi n}
        chin - (sd[w + n[:, 0]] - sd[w]),    # e^{chi n} / |Df^n e^u|
        chin - (sd[w] - sd[w - n[:, 0]]),    # |Df^-n e^u| e^{chi n}
        chin + (sa[w] - sa[w - n[:, 0]]),    # e^{chi n} / |Df^-n e^s|
    ], axis=0), axis=0)
    return np.exp(log_c)


def _level_from_ck(c: np.ndarray, k: np.ndarray, epsilon: float) -> np.ndarray:
    need = np.maximum(np.log(c), -np.log(k)) / epsilon
    lvl = np.maximum(1, np.ceil(need - 1e-12).astype(int))
    return lvl


def regularity_batch(
    sm: SurfaceMap,
    pts: np.ndarray,
    params: HyperbolicityParams,
    window: int = 20,
    e_s: np.ndarray | None = None,
    e_u: np.ndarray | None = None,
    check_stable: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(C, K, level) arrays for a batch of points.

    When ``check_stable`` is set, points whose window constant grows by more
    than 5% from ``window`` to ``2*window`` get level -1 (not regular).
    """
    pts = wrap(np.asarray(pts, dtype=float))
    if e_s is None or e_u is None:
        e_s, e_u = estimate_splitting_batch(sm, pts)
    c1 = np.maximum(1.0, _c_window(sm, pts, params.chi, window))
    k = splitting_angle(e_s, e_u)
    lvl = _level_from_ck(c1, k, params.epsilon)
    if check_stable:
        c2 = np.maximum(1.0, _c_window(sm, pts, params.chi, 2 * window))
        bad = c2 > 1.05 * c1
        c1 = np.where(bad, c2, c1)
        lvl = np.where(bad, -1, _level_from_ck(c1, k, params.epsilon))
    return c1, k, lvl


def regularity_data(
    sm: SurfaceMap,
    split: Splitting,
    params: HyperbolicityParams,
    window: int = 20,
) -> RegularityData:
    """C, K and the minimal level of a single point; raises if unstable."""
    c, k, lvl = regularity_batch(
        sm, split.base[None, :], params, window,
        e_s=split.e_s[None, :], e_u=split.e_u[None, :],
    )
    if lvl[0] < 0:
        raise NotRegularError(
            f"C grows >5% from window {window} to {2*window}: not in any regular set at chi={params.chi:g}"
        )
    return RegularityData(base=split.base, C=float(c[0]), K=float(k[0]),
                          level=int(lvl[0]), window=window)


def level_histogram(levels: np.ndarray) -> dict[int, int]:
    lv = np.asarray(levels)
    lv = lv[lv > 0]
    vals, counts = np.unique(lv, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


# ---------------------------------------------------------------------------
# Hoelder continuity reports


@dataclass(frozen=True)
class HoelderReport:
    exponent: float
    max_ratio: float
    n_pairs: int
    level: int
    quantity: str

    def bounded_by(self, ceiling: float) -> bool:
        return self.max_ratio <= ceiling


def _sample_level_pairs(sm, params, level, n_pairs, rng, window=15):
    """Pairs of nearby points of level <= `level`, various separation scales."""
    scales = 10.0 ** rng.uniform(-6.0, -1.3, size=n_pairs)
    x = rng.random((n_pairs, 2))
    theta = rng.uniform(0, 2 * np.pi, size=n_pairs)
    y = wrap(x + scales[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1))
    _, _, lx = regularity_batch(sm, x, params, window, check_stable=False)
    _, _, ly = regularity_batch(sm, y, params, window, check_stable=False)
    keep = (lx <= level) & (ly <= level) & (torus_dist(x, y) > 0)
    return x[keep], y[keep]


def verify_splitting_hoelder(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    level: int,
    n_pairs: int = 2000,
    rng: np.random.Generator | None = None,
) -> HoelderReport:
    """Empirical max of d(E^s_x, E^s_y)/d(x,y)^beta over sampled level pairs.

    Report-only: the theory provides an existence constant, so the value is
    compared against a configured ceiling by the caller.
    """
    rng = rng or np.random.default_rng(0)
    x, y = _sample_level_pairs(sm, params, level, n_pairs, rng)
    if len(x) == 0:
        return HoelderReport(constants.beta, 0.0, 0, level, "splitting")
    esx, _ = estimate_splitting_batch(sm, x)
    esy, _ = estimate_splitting_batch(sm, y)
    # Grassmannian distance between the stable lines at x and y
    dot = np.abs(np.sum(esx * esy, axis=-1))
    dist = np.arccos(np.clip(dot, 0.0, 1.0))
    ratio = dist / torus_dist(x, y) ** constants.beta
    return HoelderReport(constants.beta, float(np.max(ratio)), len(x), level, "splitting")


def verify_su_hoelder(
    sm: SurfaceMap,
    params: HyperbolicityParams,
    constants: DerivedConstants,
    level: int,
    n_pairs: int = 2000,
    rng: np.random.Generator | None = None,
) -> HoelderReport:
    """Empirical max of |s(x)-s(y)|/d(x,y)^zeta (and the u analogue)."""
    from .charts import su_values  # chart-norm series; lazy to avoid a cycle

    rng = rng or np.random.default_rng(0)
    x, y = _sample_level_pairs(sm, params, level, n_pairs, rng)
    if len(x) == 0:
        return HoelderReport(constants.zeta, 0.0, 0, level, "su")
    sx, ux = su_values(sm, x, params)
    sy, uy = su_values(sm, y, params)
    d = torus_dist(x, y) ** constants.zeta
    ratio = np.maximum(np.abs(sx - sy), np.abs(ux - uy)) / d
    return HoelderReport(constants.zeta, float(np.max(ratio)), len(x), level, "su")


# ---------------------------------------------------------------------------
# Interpolated splitting field (used by the nice-domain and tower machinery)


class SplittingField:
    """Bilinear-interpolated e_s/e_u directions over a rectangle of the torus.

    For linear maps the field is constant and evaluation is exact.  For the
    perturbed maps the directions are precomputed on a grid once and then
    interpolated (they are Hoelder continuous, see the splitting verification),
    which makes batched foliation marching cheap.
    """

    def __init__(self, sm: SurfaceMap, lo: np.ndarray, hi: np.ndarray,
                 n: int = 192, horizon: int = 30):
        self.sm = sm
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.constant = sm.linear
        if self.constant:
            self._e_s, self._e_u = _linear_directions(sm)
            return
        pad = 0.05 * (self.hi - self.lo)
        self.glo, self.ghi = self.lo - pad, self.hi + pad
        self.n = n
        xs = np.linspace(self.glo[0], self.ghi[0], n)
        ys = np.linspace(self.glo[1], self.ghi[1], n)
        g = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        e_s, e_u = estimate_splitting_batch(sm, wrap(g), horizon)
        self.es_grid = e_s.reshape(n, n, 2)
        self.eu_grid = e_u.reshape(n, n, 2)
        # align signs across the grid so interpolation never crosses +-v
        for grid in (self.es_grid, self.eu_grid):
            ref = grid[0, 0]
            sign = np.where(np.sum(grid * ref, axis=-1) < 0, -1.0, 1.0)
            grid *= sign[..., None]

    def _interp(self, grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
        t = (pts - self.glo) / (self.ghi - self.glo) * (self.n - 1)
        t = np.clip(t, 0, self.n - 1 - 1e-9)
        i = t.astype(int)
        fr = t - i
        g00 = grid[i[..., 0], i[..., 1]]
        g10 = grid[i[..., 0] + 1, i[..., 1]]
        g01 = grid[i[..., 0], i[..., 1] + 1]
        g11 = grid[i[..., 0] + 1, i[..., 1] + 1]
        fx, fy = fr[..., 0:1], fr[..., 1:2]
        v = (g00 * (1 - fx) * (1 - fy) + g10 * fx * (1 - fy)
             + g01 * (1 - fx) * fy + g11 * fx * fy)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def e_s(self, pts: np.ndarray) -> np.ndarray:
        """Stable direction at lifted-plane points (no mod-1 reduction)."""
        pts = np.asarray(pts, dtype=float)
        if self.constant:
            return np.broadcast_to(self._e_s, pts.shape).copy()
        return self._interp(self.es_grid, pts)

    def e_u(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.constant:
            return np.broadcast_to(self._e_u, pts.shape).copy()
        return self._interp(self.eu_grid, pts)
