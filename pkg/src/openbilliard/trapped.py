"""Escape times, trapped sets, and the quantitative flow experiments.

The trapped region D is an open cylinder around the periodic ray.  Escape
times are computed exactly from the event-driven trajectory (per-flight
presence intervals in the cylinder are roots of a quadratic), capped at a
configurable horizon.  Membership in the trapped set at horizon T is
`escape_time >= T` together with starting inside D.

The transverse width of the trapped set decays like exp(-cT); at feasible
sample counts a space-filling grid cannot contain points that close to the
codimension-2 stable set, so the width ladder is measured by deterministic
bisection along a transverse section while the sampled grid provides the
fraction/extent summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .billiard import PhasePoint, flow
from .errors import InvalidInputError, TangencyAmbiguityError
from .geometry import Scene, tangent_frame


@dataclass
class TrappedRegion:
    """Open cylinder around the periodic-ray segment.

    The axial range is the ray segment extended by `extension` on both ends;
    coordinates are measured along the unit axis from `axis_point`.
    """

    axis_point: np.ndarray
    axis_dir: np.ndarray
    radius: float
    axial_lo: float
    axial_hi: float

    def __post_init__(self):
        self.axis_point = np.asarray(self.axis_point, dtype=float)
        self.axis_dir = np.asarray(self.axis_dir, dtype=float)
        if self.radius <= 0:
            raise InvalidInputError("cylinder radius must be positive")
        if self.axial_hi <= self.axial_lo:
            raise InvalidInputError("empty axial range")

    @classmethod
    def around_periodic_ray(cls, scene: Scene, radius: float, extension: float = 0.0):
        p1, p2 = scene.axis_points
        return cls(axis_point=p1, axis_dir=scene.axis_dir, radius=radius,
                   axial_lo=-extension, axial_hi=scene.gap + extension)

    def contains(self, x) -> bool:
        u = np.asarray(x, dtype=float) - self.axis_point
        a = float(u @ self.axis_dir)
        if not self.axial_lo < a < self.axial_hi:
            return False
        r2 = float(u @ u) - a * a
        return r2 < self.radius**2

    def radial_coordinate(self, x) -> float:
        u = np.asarray(x, dtype=float) - self.axis_point
        a = float(u @ self.axis_dir)
        return math.sqrt(max(float(u @ u) - a * a, 0.0))


def _segment_presence(a, v, t0, t1, region: TrappedRegion):
    """Time intervals within [t0, t1] that the flight x = a + (t - t0) v
    spends inside the cylinder (0, 1, or 2 intervals as (lo, hi) pairs)."""
    e = region.axis_dir
    w0 = a - region.axis_point
    alpha0 = float(w0 @ e)
    ve = float(v @ e)
    wp = w0 - alpha0 * e
    u = v - ve * e
    # radial part: |wp + s u|^2 < r^2, s = t - t0
    A = float(u @ u)
    B = 2.0 * float(wp @ u)
    C = float(wp @ wp) - region.radius**2
    span = t1 - t0
    if A < 1e-300:
        radial = (0.0, span) if C < 0.0 else None
    else:
        disc = B * B - 4.0 * A * C
        if disc <= 0.0:
            radial = None
        else:
            sq = math.sqrt(disc)
            radial = ((-B - sq) / (2 * A), (-B + sq) / (2 * A))
    if radial is None:
        return []
    # axial part: alpha0 + s ve in (lo, hi)
    if ve == 0.0:
        axial = (0.0, span) if region.axial_lo < alpha0 < region.axial_hi else None
    else:
        s1 = (region.axial_lo - alpha0) / ve
        s2 = (region.axial_hi - alpha0) / ve
        axial = (min(s1, s2), max(s1, s2))
    if axial is None:
        return []
    lo = max(radial[0], axial[0], 0.0)
    hi = min(radial[1], axial[1], span)
    return [(t0 + lo, t0 + hi)] if hi > lo else []


def escape_time(pp: PhasePoint, region: TrappedRegion, T_max: float, scene: Scene) -> float:
    """Last time the forward trajectory is inside the region, capped at T_max.

    Returns T_max for samples that never leave for good within the horizon;
    0.0 for trajectories that never visit the region.  Tangency ambiguities
    propagate to the caller.
    """
    speed = pp.speed
    if not scene.alpha0 - 1e-12 <= speed <= scene.beta0 + 1e-12:
        raise InvalidInputError(f"speed {speed} outside [alpha0, beta0]")
    traj = flow(pp, T_max, scene, tangency="error")
    if not traj.escaped:
        return T_max  # still bouncing at the horizon: a later return cannot be ruled out
    last = 0.0
    x, v, t0 = traj.start.x, traj.start.xi, 0.0
    for ev in traj.events:
        for _, hi in _segment_presence(x, v, t0, ev.time, region):
            last = max(last, hi)
        x, v, t0 = ev.hit.point, ev.outgoing, ev.time
    # final flight: the ray never reflects again, so its presence interval in
    # the cylinder is examined over the whole half-line
    for _, hi in _segment_presence(x, v, t0, math.inf, region):
        last = max(last, hi)
    return min(last, T_max)


def in_trapped_set(pp: PhasePoint, region: TrappedRegion, T: float, scene: Scene,
                   T_max: float | None = None) -> bool:
    """Membership test for the sampled trapped set at horizon T."""
    if not region.contains(pp.x):
        return False
    if T_max is None:
        T_max = max(2.0 * T, T + 2.0 * scene.gap)
    return escape_time(pp, region, T_max, scene) >= T


@dataclass
class TrappedGrid:
    """Low-discrepancy phase-space sample of D x {|xi| in [alpha0, beta0]}
    with per-sample escape times (capped)."""

    region: TrappedRegion
    horizon: float
    cap: float
    positions: np.ndarray       # (n, 3)
    directions: np.ndarray      # (n, 3) unit
    speeds: np.ndarray          # (n,)
    escape_times: np.ndarray    # (n,), nan = indeterminate (tangency)
    indeterminate: int = 0

    def trapped_mask(self, T: float | None = None) -> np.ndarray:
        T = self.horizon if T is None else T
        return np.nan_to_num(self.escape_times, nan=-1.0) >= T

    def trapped_fraction(self, T: float | None = None) -> float:
        ok = ~np.isnan(self.escape_times)
        if not np.any(ok):
            return 0.0
        return float(np.mean(self.trapped_mask(T)[ok]))

    def max_trapped_radius(self, T: float | None = None) -> float:
        mask = self.trapped_mask(T)
        if not np.any(mask):
            return 0.0
        radii = [self.region.radial_coordinate(x) for x in self.positions[mask]]
        return float(max(radii))

    def summary(self, T: float | None = None) -> dict:
        return {
            "horizon": self.horizon if T is None else T,
            "samples": int(len(self.escape_times)),
            "indeterminate": int(self.indeterminate),
            "trapped_fraction": self.trapped_fraction(T),
            "max_trapped_radius": self.max_trapped_radius(T),
        }


def trapped_grid(region: TrappedRegion, T: float, n_samples: int, scene: Scene,
                 seed: int = 0, cone_half_angle: float = 0.35,
                 T_max: float | None = None) -> TrappedGrid:
    """Sample the region and record escape times.

    Sobol sampling over (cylinder position) x (direction cone around both
    axis orientations) x (speed band); alternating samples take the +axis and
    -axis cone so the grid is symmetric under motion reversal.
    """
    if n_samples < 2:
        raise InvalidInputError("need at least 2 samples")
    if T_max is None:
        T_max = max(2.0 * T, 25.0 * scene.gap)
    e = region.axis_dir
    u1, u2 = tangent_frame(e)
    eng = qmc.Sobol(d=6, scramble=True, seed=seed)
    raw = eng.random(1 << max(int(np.ceil(np.log2(n_samples))), 1))[:n_samples]
    cos_max = math.cos(cone_half_angle)
    positions = np.empty((n_samples, 3))
    directions = np.empty((n_samples, 3))
    speeds = np.empty(n_samples)
    times = np.empty(n_samples)
    indeterminate = 0
    for i, row in enumerate(raw):
        r = region.radius * math.sqrt(row[0])
        ang = 2.0 * math.pi * row[1]
        ax = region.axial_lo + row[2] * (region.axial_hi - region.axial_lo)
        x = region.axis_point + ax * e + r * (math.cos(ang) * u1 + math.sin(ang) * u2)
        c = cos_max + row[3] * (1.0 - cos_max)
        s = math.sqrt(max(1.0 - c * c, 0.0))
        az = 2.0 * math.pi * row[4]
        sign = 1.0 if i % 2 == 0 else -1.0
        d = sign * c * e + s * (math.cos(az) * u1 + math.sin(az) * u2)
        speed = scene.alpha0 + row[5] * (scene.beta0 - scene.alpha0)
        positions[i], directions[i], speeds[i] = x, d, speed
        if not scene.is_outside(x):
            times[i] = 0.0  # inside an obstacle: not a phase point of the exterior
            continue
        try:
            times[i] = escape_time(PhasePoint(x, speed * d), region, T_max, scene)
        except TangencyAmbiguityError:
            times[i] = np.nan
            indeterminate += 1
    return TrappedGrid(region=region, horizon=T, cap=T_max, positions=positions,
                       directions=directions, speeds=speeds, escape_times=times,
                       indeterminate=indeterminate)


# ---------------------------------------------------------------------------
# transverse width of the trapped set
# ---------------------------------------------------------------------------


def transverse_trapped_width(region: TrappedRegion, T: float, scene: Scene,
                             speed: float | None = None, bisect_iters: int = 48) -> float:
    """Largest transverse offset (axial direction of motion) trapped at
    horizon T, found by bisection on the section through the gap midpoint."""
    if speed is None:
        speed = 0.5 * (scene.alpha0 + scene.beta0)
    e = region.axis_dir
    u1, _ = tangent_frame(e)
    mid = region.axis_point + 0.5 * (region.axial_lo + region.axial_hi) * e
    T_max = T + 10.0 * scene.gap / speed

    def trapped(y):
        pp = PhasePoint(mid + y * u1, speed * e)
        try:
            return escape_time(pp, region, T_max, scene) >= T
        except TangencyAmbiguityError:
            return False

    lo, hi = 0.0, region.radius
    if trapped(hi * (1.0 - 1e-12)):
        return region.radius
    for _ in range(bisect_iters):
        mid_y = 0.5 * (lo + hi)
        if trapped(mid_y):
            lo = mid_y
        else:
            hi = mid_y
    return 0.5 * (lo + hi)


def width_decay_fit(region: TrappedRegion, T_values, scene: Scene,
                    speed: float | None = None) -> dict:
    """Fit width(T) ~ exp(-c T); returns the ladder and the fitted rate c."""
    widths = [transverse_trapped_width(region, T, scene, speed=speed) for T in T_values]
    Ts = np.asarray(T_values, dtype=float)
    ws = np.asarray(widths, dtype=float)
    good = ws > 0.0
    if np.sum(good) < 2:
        return {"T": list(Ts), "width": list(ws), "c": float("nan")}
    slope = np.polyfit(Ts[good], np.log(ws[good]), 1)[0]
    return {"T": list(Ts), "width": list(ws), "c": float(-slope)}


# ---------------------------------------------------------------------------
# divergence, crossings, separation
# ---------------------------------------------------------------------------


@dataclass
class DivergenceResult:
    window_starts: np.ndarray
    min_distances: np.ndarray
    growth_rate: float   # slope of log min-distance per unit time
    alpha_hat: float     # implied initial-distance exponent


def _phase_distance(x1, v1, x2, v2) -> float:
    dx = x1 - x2
    dv = v1 - v2
    return math.sqrt(float(dx @ dx) + float(dv @ dv))


def divergence_probe(pp1: PhasePoint, pp2: PhasePoint, t: float, scene: Scene,
                     window: float = 1.0, samples_per_window: int = 64) -> DivergenceResult:
    """Per-window minimum phase distance between two trajectories.

    The direction component of the flow jumps at reflections, so the
    separation bound only holds at a nearby time; taking the minimum over a
    unit window implements the "some t' with |t'-t| <= tau" form.
    """
    tr1 = flow(pp1, t, scene, tangency="error")
    tr2 = flow(pp2, t, scene, tangency="error")
    d0 = _phase_distance(pp1.x, pp1.xi, pp2.x, pp2.xi)
    n_win = max(int(t / window), 1)
    starts = np.array([k * window for k in range(n_win)])
    mins = np.empty(n_win)
    for k, t0 in enumerate(starts):
        t1 = min(t0 + window, t)
        grid = list(np.linspace(t0, t1, samples_per_window))
        grid += [ev.time for ev in tr1.events if t0 <= ev.time <= t1]
        grid += [ev.time for ev in tr2.events if t0 <= ev.time <= t1]
        mins[k] = min(_phase_distance(tr1.position(s), tr1.velocity(s),
                                      tr2.position(s), tr2.velocity(s)) for s in grid)
    rate = float("nan")
    alpha_hat = float("nan")
    pos = mins > 0.0
    if d0 > 0.0 and np.sum(pos) >= 2:
        mid = starts[pos] + 0.5 * window
        coef = np.polyfit(mid, np.log(mins[pos]), 1)
        rate = float(coef[0])
        alpha_hat = float(coef[1] / math.log(d0)) if d0 not in (1.0,) else float("nan")
    return DivergenceResult(window_starts=starts, min_distances=mins,
                            growth_rate=rate, alpha_hat=alpha_hat)


def tangency_crossing_count(traj, eta: float) -> int:
    """Number of boundary events with incidence margin <= eta."""
    if eta <= 0:
        raise InvalidInputError("eta must be positive")
    return sum(1 for ev in traj.events if abs(ev.hit.cos_incidence) <= eta)


@dataclass
class SeparationResult:
    T_values: list
    separations: list        # min distance trapped(D) vs non-trapped(Dt), per T
    n_trapped: list
    n_escaping: list
    inconclusive: list       # horizons with an empty trapped sample set
    c_fit: float


def separation_probe(region: TrappedRegion, outer: TrappedRegion, T_values, scene: Scene,
                     n_samples: int = 2000, seed: int = 0) -> SeparationResult:
    """Minimum phase distance between sampled trapped (inner region) and
    non-trapped (outer region) points, per horizon, plus a decay-rate fit.

    Samples combine a Sobol grid over the outer region with deterministic
    transverse-section points clustered near the trapped-set boundary, where
    the minimum is attained.
    """
    if not (outer.radius > region.radius):
        raise InvalidInputError("outer region must strictly contain the inner one")
    T_values = list(T_values)
    T_max = max(T_values) + 10.0 * scene.gap
    speed = 0.5 * (scene.alpha0 + scene.beta0)
    e = region.axis_dir
    u1, _ = tangent_frame(e)
    mid = region.axis_point + 0.5 * (region.axial_lo + region.axial_hi) * e

    pool = []  # (phase_vector, escape_inner, escape_outer, inside_inner)
    grid = trapped_grid(outer, max(T_values), n_samples, scene, seed=seed,
                        T_max=T_max)
    for i in range(len(grid.escape_times)):
        x, d, s = grid.positions[i], grid.directions[i], grid.speeds[i]
        if not scene.is_outside(x):
            continue
        pp = PhasePoint(x, s * d)
        try:
            t_in = escape_time(pp, region, T_max, scene)
        except TangencyAmbiguityError:
            continue
        t_out = grid.escape_times[i]
        if math.isnan(t_out):
            continue
        pool.append((np.concatenate([x, s * d]), t_in, t_out, region.contains(x)))
    # structured near-boundary section points for each horizon
    for T in T_values:
        w = transverse_trapped_width(region, T, scene, speed=speed)
        for f in (0.25, 0.5, 0.8, 0.95, 1.05, 1.3, 2.0, 4.0):
            y = min(w * f, outer.radius * 0.999)
            if y <= 0.0:
                continue
            x = mid + y * u1
            pp = PhasePoint(x, speed * e)
            try:
                t_in = escape_time(pp, region, T_max, scene)
                t_out = escape_time(pp, outer, T_max, scene)
            except TangencyAmbiguityError:
                continue
            pool.append((np.concatenate([x, speed * e]), t_in, t_out, region.contains(x)))

    separations, n_tr, n_esc, inconclusive = [], [], [], []
    for T in T_values:
        A = [p for p, ti, to, ins in pool if ins and ti >= T]
        B = [p for p, ti, to, ins in pool if to < T]
        n_tr.append(len(A))
        n_esc.append(len(B))
        if not A or not B:
            inconclusive.append(T)
            separations.append(float("nan"))
            continue
        Aa, Bb = np.array(A), np.array(B)
        d2 = np.sum((Aa[:, None, :] - Bb[None, :, :]) ** 2, axis=2)
        separations.append(float(np.sqrt(d2.min())))
    seps = np.array(separations)
    Ts = np.array(T_values, dtype=float)
    ok = ~np.isnan(seps) & (seps > 0)
    c_fit = float("nan")
    if np.sum(ok) >= 2:
        c_fit = float(-np.polyfit(Ts[ok], np.log(seps[ok]), 1)[0])
    return SeparationResult(T_values=T_values, separations=separations,
                            n_trapped=n_tr, n_escaping=n_esc,
                            inconclusive=inconclusive, c_fit=c_fit)


def default_core_cylinder(scene: Scene, radius: float = 0.25,
                          extension: float = 0.05) -> TrappedRegion:
    """The standard working neighborhood of the periodic ray."""
    return TrappedRegion.around_periodic_ray(scene, radius=radius, extension=extension)
