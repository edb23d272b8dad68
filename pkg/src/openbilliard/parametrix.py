"""Approximate-solution machinery: symbol surrogate, per-story amplitudes,
phase with critical points and Hessians, and the oscillatory-sum evaluator.

The object evaluated is a sum over reflection stories of amplitude times an
oscillatory exponential in the momentum variable.  Story terms carry the sign
(-1)^|J| so consecutive stories cancel on the shared obstacle boundary.  Two
evaluation routes are kept deliberately independent: `direct` integrates the
oscillatory integral with phase-span-adaptive Gauss-Legendre quadrature over
the symbol's momentum support, and `stationary` sums critical-point
contributions; their agreement as h decreases is one of the acceptance gates.

Momentum-space geometry is factorized for speed: for a fixed direction the
story ray through the evaluation point is found once by shooting, and the
dependence on the momentum magnitude is closed-form along the ray polyline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .billiard import PhasePoint, Story, story_flow, validate_story
from .errors import (CausticError, DomainError, InvalidInputError,
                     NumericFailureError)
from .geometry import Scene, tangent_frame
from .wavefront import FieldRay, PhaseField, trace_field_ray


# ---------------------------------------------------------------------------
# symbol surrogate
# ---------------------------------------------------------------------------


def _cos_bump(u, power):
    """cos(pi u / 2)^(2 power) on |u| < 1, zero outside; u may be an array."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    mask = np.abs(u) < 1.0
    out[mask] = np.cos(0.5 * np.pi * u[mask]) ** (2 * power)
    return out


def _cos_bump_of_square(v, power):
    """Same bump as a smooth function of v = u^2 in [0, 1)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    mask = (v >= 0.0) & (v < 1.0)
    out[mask] = np.cos(0.5 * np.pi * np.sqrt(v[mask])) ** (2 * power)
    return out


@dataclass
class SymbolSurrogate:
    """Smooth compactly supported bump in phase space.

    Spatial factor: ellipsoidal bump in the axis-aligned frame (transverse,
    transverse, axial radii).  Momentum factor: a cone of directions around
    one orientation of the periodic-ray axis intersected with a speed band.
    Values are in [0, 1] with exact support; the cosine-power profile makes
    the sampled derivative growth controllable through `power`.
    """

    center: np.ndarray
    radii: np.ndarray              # (transverse1, transverse2, axial)
    axis: np.ndarray               # unit axis vector e
    axis_sign: int                 # +1: directions near +e, -1: near -e
    cone_half_angle: float
    speed_band: tuple              # (lo, hi), inside [alpha0, beta0]
    power: int = 3
    trapped_horizon: float = 0.0   # declared T_q; measured by the experiments

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        self.axis = np.asarray(self.axis, dtype=float)
        self.axis = self.axis / np.linalg.norm(self.axis)
        if self.axis_sign not in (-1, 1):
            raise InvalidInputError("axis_sign must be +1 or -1 "
                                    "(symbols straddling both signs are rejected)")
        if not 0 < self.cone_half_angle < 0.5 * math.pi:
            raise InvalidInputError("cone_half_angle out of range")
        lo, hi = self.speed_band
        if not 0 < lo < hi:
            raise InvalidInputError("bad speed band")
        u1, u2 = tangent_frame(self.axis)
        self._frame = np.stack([u1, u2, self.axis])

    @property
    def smoothness_rho(self) -> float:
        """Scale bound entering the sampled derivative check
        |d^a q| <= 2 rho^|a| for |a| <= 2."""
        lo, hi = self.speed_band
        scales = [1.0 / float(np.min(self.radii)),
                  2.0 / (hi - lo),
                  1.0 / (1.0 - math.cos(self.cone_half_angle))]
        return self.power * math.pi * max(scales)

    def spatial_factor(self, x):
        u = ((np.atleast_2d(x) - self.center) @ self._frame.T) / self.radii
        return _cos_bump_of_square(np.sum(u * u, axis=1), self.power)

    def momentum_factor(self, xi):
        xi = np.atleast_2d(xi)
        speed = np.linalg.norm(xi, axis=1)
        lo, hi = self.speed_band
        ub = (2.0 * speed - (lo + hi)) / (hi - lo)
        band = _cos_bump(ub, self.power)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosang = (xi @ (self.axis_sign * self.axis)) / np.where(speed > 0, speed, 1.0)
        w = (1.0 - cosang) / (1.0 - math.cos(self.cone_half_angle))
        cone = _cos_bump_of_square(np.clip(w, 0.0, 2.0), self.power)
        return band * cone

    def value(self, x, xi) -> float:
        return float(self.spatial_factor(x)[0] * self.momentum_factor(xi)[0])

    def value_many(self, X, Xi) -> np.ndarray:
        return self.spatial_factor(X) * self.momentum_factor(Xi)

    def center_momentum(self) -> np.ndarray:
        lo, hi = self.speed_band
        return self.axis_sign * 0.5 * (lo + hi) * self.axis

    def spatial_boundary_distance(self, scene: Scene, n=256) -> float:
        """Min distance from the spatial support to the obstacle boundaries
        (sampled over the support ellipsoid surface)."""
        from .geometry import fibonacci_sphere
        best = math.inf
        for u in fibonacci_sphere(n):
            p = self.center + (self.radii * u) @ self._frame
            for ob in scene.obstacles:
                q = ob.nearest_boundary_point(p)
                best = min(best, float(np.linalg.norm(p - q)))
        return best

    def sampled_derivative_excess(self, n=300, seed=0) -> float:
        """max over samples and |alpha| <= 2 of |d^alpha q| / (2 rho^|alpha|);
        values <= 1 mean the declared smoothness bound holds."""
        rng = np.random.default_rng(seed)
        rho = self.smoothness_rho
        worst = 0.0
        h = min(1e-4, 0.02 / rho)
        for _ in range(n):
            u = rng.uniform(-1, 1, 3)
            x = self.center + (self.radii * u) @ self._frame
            lo, hi = self.speed_band
            s = rng.uniform(lo, hi)
            dd = self.axis_sign * self.axis + 0.3 * self.cone_half_angle * rng.standard_normal(3)
            xi = s * dd / np.linalg.norm(dd)
            for k in range(3):
                dx = np.zeros(3)
                dx[k] = h
                qp, qm, q0 = (self.value(x + dx, xi), self.value(x - dx, xi),
                              self.value(x, xi))
                worst = max(worst, abs(qp - qm) / (2 * h) / (2 * rho))
                worst = max(worst, abs(qp - 2 * q0 + qm) / h**2 / (2 * rho**2))
                kp, km = self.value(x, xi + dx), self.value(x, xi - dx)
                worst = max(worst, abs(kp - km) / (2 * h) / (2 * rho))
                worst = max(worst, abs(kp - 2 * q0 + km) / h**2 / (2 * rho**2))
        return worst


def default_symbol(scene: Scene, cone_half_angle=0.15, power=3) -> SymbolSurrogate:
    """Symbol centered mid-gap at speed 1/2 (transport speed 2|xi| = 1)."""
    lo = max(scene.alpha0, 0.4)
    hi = min(scene.beta0, 0.6)
    return SymbolSurrogate(center=scene.axis_mid,
                           radii=np.array([0.1, 0.1, 0.5 * scene.gap - scene.delta0]),
                           axis=scene.axis_dir, axis_sign=+1,
                           cone_half_angle=cone_half_angle,
                           speed_band=(lo, hi), power=power)


def measure_trapped_horizon(symbol: SymbolSurrogate, region, scene: Scene,
                            n=64, seed=0) -> float:
    """Sampled two-sided trapped horizon of the symbol support w.r.t. a
    region: min over support samples of min(forward, backward escape time)."""
    from .errors import TangencyAmbiguityError
    from .trapped import escape_time

    rng = np.random.default_rng(seed)
    T_max = 60.0 * scene.gap
    worst = math.inf
    lo, hi = symbol.speed_band
    for _ in range(n):
        u = rng.uniform(-1, 1, 3)
        if u @ u > 1.0:
            continue
        x = symbol.center + (symbol.radii * u) @ symbol._frame
        ang = symbol.cone_half_angle * math.sqrt(rng.random())
        az = rng.uniform(0, 2 * math.pi)
        u1, u2 = symbol._frame[0], symbol._frame[1]
        d = (math.cos(ang) * symbol.axis_sign * symbol.axis
             + math.sin(ang) * (math.cos(az) * u1 + math.sin(az) * u2))
        s = rng.uniform(lo, hi)
        if symbol.value(x, s * d) <= 0.0 or not scene.is_outside(x):
            continue
        try:
            fwd = escape_time(PhasePoint(x, s * d), region, T_max, scene)
            bwd = escape_time(PhasePoint(x, -s * d), region, T_max, scene)
        except TangencyAmbiguityError:
            continue
        worst = min(worst, fwd, bwd)
    return worst


# ---------------------------------------------------------------------------
# support constants, story enumeration, chi_plus
# ---------------------------------------------------------------------------


def support_c1(scene: Scene) -> float:
    """Earliest time a |J|-story amplitude can be nonzero: c1 |J| <= t."""
    return scene.delta0 / (2.0 * scene.beta0)


def support_c2(scene: Scene) -> float:
    """Latest time (with the hull cutoff) per story: t <= c2 (|J| + 1)."""
    return 4.0 * scene.span / scene.alpha0


def story_enumeration(t: float, scene: Scene, axis_sign: int | None = None) -> list:
    """All alternating stories that can carry amplitude at time t, i.e.
    |J| <= t / c1, optionally pruned to those starting on the obstacle the
    symbol's momentum cone points at (axis_sign > 0 means momentum toward
    obstacle 2, so stories starting with obstacle 1 are dropped)."""
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    c1 = support_c1(scene)
    n_max = int(math.floor(t / c1 + 1e-12))
    stories = [()]
    starts = (1, 2)
    if axis_sign is not None:
        starts = (2,) if axis_sign > 0 else (1,)
    for n in range(1, n_max + 1):
        for s0 in starts:
            stories.append(tuple((s0 - 1 + k) % 2 + 1 for k in range(n)))
    return stories


def in_chi_plus(x, scene: Scene, margin: float = 0.1) -> bool:
    """Membership in the hull cutoff region: inside the convex hull of the
    obstacles (conservatively, the capsule over the smaller extent), outside
    both obstacles by `margin`."""
    x = np.asarray(x, dtype=float)
    c1 = scene.obstacles[0].center
    c2 = scene.obstacles[1].center
    axis = c2 - c1
    L2 = float(axis @ axis)
    s = float(np.clip((x - c1) @ axis / L2, 0.0, 1.0))
    r = float(np.linalg.norm(x - (c1 + s * axis)))
    cap = min(scene.obstacles[0].max_extent(), scene.obstacles[1].max_extent())
    if r > cap - margin:
        return False
    for ob in scene.obstacles:
        if ob.value(x) <= 0.0:
            return False
        if float(np.linalg.norm(x - ob.nearest_boundary_point(x))) < margin:
            return False
    return True


# ---------------------------------------------------------------------------
# amplitudes
# ---------------------------------------------------------------------------


def _field_for(scene, story, xi_hat, y=None):
    source = np.zeros(3) if y is None else np.asarray(y, dtype=float)
    return PhaseField(scene=scene, xi_hat=xi_hat, story=story, source=source)


def amplitude_w0(story, x, t, xi, symbol: SymbolSurrogate, scene: Scene,
                 field_ray: FieldRay | None = None, initial_guess=None,
                 diagnostics: dict | None = None) -> float:
    """Leading amplitude: curvature product times the symbol at the backward
    story-transported point; zero when the story has not fully unwound or the
    point is off the phase-field domain."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    speed = float(np.linalg.norm(xi))
    if t < 0 or speed == 0.0:
        raise InvalidInputError("need t >= 0 and |xi| > 0")
    story = validate_story(story)
    if len(story) == 0:
        return float(symbol.value(x - 2.0 * t * xi, xi))
    if field_ray is None:
        try:
            field_ray = trace_field_ray(_field_for(scene, story, xi / speed), x,
                                        initial_guess=initial_guess)
        except (DomainError, NumericFailureError, CausticError):
            if diagnostics is not None:
                diagnostics["domain_misses"] = diagnostics.get("domain_misses", 0) + 1
            return 0.0
    s_back = 2.0 * t * speed
    if field_ray.bounces_undone(s_back) < len(story):
        return 0.0
    z = field_ray.backward_point(s_back)
    return float(field_ray.lambda_product * symbol.value(z, xi))


def _laplacian_w0(story, z, s, xi, symbol, scene, h=None, guess=None):
    """Central finite-difference spatial Laplacian of the story amplitude."""
    if h is None:
        h = min(1e-4, 0.05 / symbol.smoothness_rho)
    if len(story) == 0:
        # closed form up to the symbol: w0(z', s) = q(z' - 2 s xi, xi)
        base = z - 2.0 * s * xi
        tot = 0.0
        q0 = symbol.value(base, xi)
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = h
            tot += (symbol.value(base + dx, xi) - 2.0 * q0
                    + symbol.value(base - dx, xi)) / h**2
        return tot
    tot = 0.0
    w00 = amplitude_w0(story, z, s, xi, symbol, scene, initial_guess=guess)
    for k in range(3):
        dx = np.zeros(3)
        dx[k] = h
        wp = amplitude_w0(story, z + dx, s, xi, symbol, scene, initial_guess=guess)
        wm = amplitude_w0(story, z - dx, s, xi, symbol, scene, initial_guess=guess)
        tot += (wp - 2.0 * w00 + wm) / h**2
    return tot


def amplitude_w1(story, x, t, xi, symbol: SymbolSurrogate, scene: Scene,
                 tol: float = 1e-8, field_ray: FieldRay | None = None) -> complex:
    """First transport correction: -i times the integral along the backward
    ray of (partial curvature product) x (Laplacian of the previous order at
    the transported point).

    The integrand has kinks where the backward walk crosses a reflection, so
    the quadrature is split at the crossing times; non-convergence raises
    NumericFailureError naming the worst subinterval.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    speed = float(np.linalg.norm(xi))
    story = validate_story(story)
    if len(story) == 0:
        def integrand(s):
            return _laplacian_w0((), x - 2.0 * (t - s) * xi, s, xi, symbol, scene)
        splits = [0.0, t]
    else:
        if field_ray is None:
            try:
                field_ray = trace_field_ray(_field_for(scene, story, xi / speed), x)
            except (DomainError, NumericFailureError, CausticError):
                return 0.0 + 0.0j

        def integrand(s):
            s_back = 2.0 * (t - s) * speed
            undone = field_ray.bounces_undone(s_back)
            rem = story[: len(story) - undone]
            z = field_ray.backward_point(s_back)
            g = field_ray.partial_amplitude_factor(s_back)
            guess = field_ray.forward_direction_at(s_back)
            return g * _laplacian_w0(rem, z, s, xi, symbol, scene, guess=guess)

        acc = np.cumsum(field_ray.leg_lengths)
        splits = sorted({0.0, t, *[t - a / (2.0 * speed) for a in acc
                                   if 0.0 < t - a / (2.0 * speed) < t]})
    total = 0.0
    worst = (0.0, None)
    for a, b in zip(splits, splits[1:]):
        val, err = quad(integrand, a, b, epsabs=tol, epsrel=tol, limit=200)
        if err > worst[0]:
            worst = (err, (a, b))
        total += val
    if worst[0] > 1e3 * max(tol, tol * abs(total)):
        raise NumericFailureError(
            f"transport-source quadrature did not converge on {worst[1]} "
            f"(error estimate {worst[0]:.3e})")
    return -1j * total


# ---------------------------------------------------------------------------
# phase, critical points, Hessian
# ---------------------------------------------------------------------------


def phase_S_and_grad(story, x, t, xi, y, scene: Scene,
                     field_ray: FieldRay | None = None):
    """Phase value phi_J(x, xi)|xi| - t|xi|^2 and its momentum gradient via
    the transported-endpoint identity (backward story point minus source)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    y = np.asarray(y, dtype=float)
    speed = float(np.linalg.norm(xi))
    story = validate_story(story)
    if len(story) == 0:
        value = float((x - y) @ xi) - t * speed**2
        return value, (x - y) - 2.0 * t * xi
    if field_ray is None:
        field_ray = trace_field_ray(_field_for(scene, story, xi / speed, y=y), x)
    # field_ray must come from a field whose source is y
    value = field_ray.value * speed - t * speed**2
    grad = field_ray.backward_point(2.0 * t * speed) - y
    return value, grad


def critical_point(story, x, t, y, scene: Scene, speed_hint: float | None = None,
                   restarts: int = 20, tol: float = 1e-10, seed: int = 0,
                   max_iter: int = 60):
    """Momentum solving the two-point story connection: the forward
    story-constrained flow from y over time 2t ends at x.

    Returns the momentum vector, or None when shooting does not converge;
    raises NumericFailureError if the Jacobian degenerates.  For the empty
    story the answer is closed-form (x - y) / (2t).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    story = validate_story(story)
    if t <= 0:
        raise InvalidInputError("critical point needs t > 0")
    if len(story) == 0:
        return (x - y) / (2.0 * t)

    def endpoint(xi):
        traj = story_flow(y, xi, 2.0 * t, story, scene, tangency="error")
        refl = sum(1 for ev in traj.events if not ev.grazing)
        return traj.end.x, refl

    def residual(xi):
        try:
            ex, refl = endpoint(xi)
        except Exception:
            return None, 0
        return ex - x, refl

    # axis-informed initial guess
    e = scene.axis_dir
    p_first = scene.axis_points[story[0] - 1]
    p_last = scene.axis_points[story[-1] - 1]
    path = (float(np.linalg.norm(y - p_first)) + (len(story) - 1) * scene.gap
            + float(np.linalg.norm(p_last - x)))
    speed0 = speed_hint if speed_hint is not None else path / (2.0 * t)
    sign0 = 1.0 if story[0] == 2 else -1.0
    rng = np.random.default_rng(seed)
    guesses = [speed0 * sign0 * e]
    for _ in range(restarts):
        guesses.append(speed0 * sign0 * e
                       + 0.2 * speed0 * rng.standard_normal(3))
    scale = max(1.0, float(np.linalg.norm(x - y)))
    for g in guesses:
        xi = g.astype(float)
        r, refl = residual(xi)
        if r is None:
            continue
        ok = False
        for _ in range(max_iter):
            if float(np.linalg.norm(r)) <= tol * scale and refl == len(story):
                ok = True
                break
            h = 1e-7 * max(float(np.linalg.norm(xi)), 1e-3)
            J = np.zeros((3, 3))
            bad = False
            for k in range(3):
                dxi = np.zeros(3)
                dxi[k] = h
                rp, _ = residual(xi + dxi)
                rm, _ = residual(xi - dxi)
                if rp is None or rm is None:
                    bad = True
                    break
                J[:, k] = (rp - rm) / (2.0 * h)
            if bad:
                break
            if abs(np.linalg.det(J)) < 1e-300:
                raise NumericFailureError("singular Jacobian in critical-point shooting")
            step = np.linalg.solve(J, -r)
            lam, improved = 1.0, False
            for _ in range(8):
                xi_new = xi + lam * step
                r_new, refl_new = residual(xi_new)
                if r_new is not None and np.linalg.norm(r_new) < np.linalg.norm(r):
                    xi, r, refl = xi_new, r_new, refl_new
                    improved = True
                    break
                lam *= 0.5
            if not improved:
                break
        if ok:
            return xi
    return None


def hessian_S(story, x, t, xi, y, scene: Scene, step: float | None = None):
    """Symmetrized central-difference momentum Hessian of the phase and its
    determinant.  Exact -2t I for the empty story."""
    story = validate_story(story)
    if len(story) == 0:
        H = -2.0 * t * np.eye(3)
        return H, float(np.linalg.det(H))
    xi = np.asarray(xi, dtype=float)
    if step is None:
        step = 1e-5 * max(float(np.linalg.norm(xi)), 1e-2)
    guess = None
    try:
        base = trace_field_ray(_field_for(scene, story, xi / np.linalg.norm(xi), y=y), x)
        guess = base.gradient
    except (DomainError, NumericFailureError):
        pass
    H = np.zeros((3, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = step
        _, gp = _grad_S(story, x, t, xi + d, y, scene, guess)
        _, gm = _grad_S(story, x, t, xi - d, y, scene, guess)
        H[:, k] = (gp - gm) / (2.0 * step)
    H = 0.5 * (H + H.T)
    return H, float(np.linalg.det(H))


def _grad_S(story, x, t, xi, y, scene, guess=None):
    speed = float(np.linalg.norm(xi))
    ray = trace_field_ray(_field_for(scene, story, xi / speed, y=y), x,
                          initial_guess=guess)
    value = ray.value * speed - t * speed**2
    grad = ray.backward_point(2.0 * t * speed) - y
    return value, grad


# ---------------------------------------------------------------------------
# oscillatory-sum evaluator
# ---------------------------------------------------------------------------


@dataclass
class ParametrixTerm:
    story: Story
    contribution: complex
    amplitude: complex = 0.0
    phase_value: float = 0.0
    critical_point: np.ndarray | None = None
    hessian: np.ndarray | None = None
    det_hessian: float | None = None
    error: str | None = None


@dataclass
class SKResult:
    value: complex
    method: str
    h: float
    t: float
    K: int
    terms: list
    excluded: int = 0
    quadrature_rel_change: float = 0.0


def _direction_nodes(symbol: SymbolSurrogate, n: int):
    """Tensor Gauss-Legendre nodes over the cone's transverse-disk chart.

    Directions are sign * (sqrt(1 - a^2 - b^2) e + a u1 + b u2); the solid
    angle element is da db / |cos| so each node carries weight w_a w_b / c.
    """
    smax = math.sin(symbol.cone_half_angle)
    g, w = np.polynomial.legendre.leggauss(n)
    a = smax * g
    wa = smax * w
    u1, u2, e = symbol._frame
    nodes = []
    for i in range(n):
        for j in range(n):
            aa, bb = a[i], a[j]
            s2 = aa * aa + bb * bb
            if s2 >= smax * smax:
                continue  # outside the cone: symbol vanishes
            c = math.sqrt(1.0 - s2)
            d = symbol.axis_sign * (c * e) + aa * u1 + bb * u2
            nodes.append((d / np.linalg.norm(d), wa[i] * wa[j] / c))
    return nodes


def _speed_nodes(symbol: SymbolSurrogate, n: int):
    lo, hi = symbol.speed_band
    g, w = np.polynomial.legendre.leggauss(n)
    rho = 0.5 * (hi + lo) + 0.5 * (hi - lo) * g
    return rho, 0.5 * (hi - lo) * w


def _story_integral_direct(story, x, t, y, h, K, symbol, scene,
                           n_dir, n_rho, warm):
    """Oscillatory integral over the symbol's momentum support for one story."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho, wrho = _speed_nodes(symbol, n_rho)
    total = 0.0 + 0.0j
    guess = warm.get(story)
    for d, wdir in _direction_nodes(symbol, n_dir):
        if story:
            try:
                ray = trace_field_ray(_field_for(scene, story, d, y=y), x,
                                      initial_guess=guess)
            except (DomainError, NumericFailureError, CausticError):
                continue
            guess = ray.gradient
            warm[story] = guess
            phi = ray.value
            s_back = 2.0 * t * rho
            Z = np.array([ray.backward_point(s) for s in s_back])
            undone = np.array([ray.bounces_undone(s) for s in s_back])
            lam = ray.lambda_product
            amp = np.where(undone == len(story),
                           lam * symbol.value_many(Z, rho[:, None] * d), 0.0)
        else:
            phi = float((x - y) @ d)
            Z = x[None, :] - 2.0 * t * rho[:, None] * d[None, :]
            amp = symbol.value_many(Z, rho[:, None] * d)
        if K >= 1:
            # the first correction does not share the leading term's support,
            # so it is evaluated at every node (expensive for long stories)
            corr = np.zeros(len(rho), dtype=complex)
            for i, r in enumerate(rho):
                corr[i] = amplitude_w1(story, x, t, r * d, symbol, scene,
                                       tol=1e-7)
            amp = amp + h * corr
        S = phi * rho - t * rho * rho
        total += wdir * np.sum(wrho * rho * rho * amp * np.exp(-1j * S / h))
    return total


def _phase_span_estimate(story, x, t, y, symbol, scene):
    """Crude bound on the phase variation over the symbol support, used to
    pick quadrature sizes."""
    lo, hi = symbol.speed_band
    xi0 = symbol.center_momentum()
    try:
        _, g = phase_S_and_grad(story, x, t, xi0, y, scene)
        lever = float(np.linalg.norm(g))
    except (DomainError, NumericFailureError, CausticError):
        lever = float(np.linalg.norm(x - y)) + 2.0 * t * hi
    dxi = math.hypot(hi - lo, (hi + lo) * math.sin(symbol.cone_half_angle))
    return lever * dxi + t * (hi - lo) ** 2


def evaluate_SK(x, t, y, h, K, symbol: SymbolSurrogate, scene: Scene,
                method: str = "stationary", eps_log_window: float = 1.0,
                n_dir: int | None = None, n_rho: int | None = None,
                check_refinement: bool = False) -> SKResult:
    """Evaluate the story sum at (x, t) for data concentrated at scale h.

    method="direct": adaptive Gauss-Legendre quadrature of each story's
    oscillatory momentum integral (node counts scale with the phase span).
    method="stationary": per-story critical-point evaluation; stories whose
    critical point does not exist contribute zero.  Terms carry (-1)^|J|.
    """
    if not 0.0 < h <= 0.1:
        raise InvalidInputError("h must lie in (0, 0.1]")
    if K not in (0, 1):
        raise InvalidInputError("K must be 0 or 1")
    if t < 0 or t > eps_log_window * abs(math.log(h)) + 1e-12:
        raise InvalidInputError("t outside the logarithmic window")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    stories = story_enumeration(t, scene, axis_sign=symbol.axis_sign)
    pref = (2.0 * math.pi * h) ** -3
    terms = []
    excluded = 0
    rel_change = 0.0
    if method == "direct":
        warm = {}
        for story in stories:
            span = _phase_span_estimate(story, x, t, y, symbol, scene) / h
            nd = n_dir if n_dir is not None else min(max(12, int(span / 4) + 8), 48)
            nr = n_rho if n_rho is not None else min(max(16, int(span / 3) + 10), 220)
            try:
                I = _story_integral_direct(story, x, t, y, h, K, symbol, scene,
                                           nd, nr, warm)
                if check_refinement:
                    I2 = _story_integral_direct(story, x, t, y, h, K, symbol,
                                                scene, int(nd * 1.3) + 2,
                                                int(nr * 1.3) + 2, warm)
                    denom = max(abs(I2), 1e-300)
                    rel_change = max(rel_change, abs(I - I2) / denom)
                    I = I2
            except (CausticError, NumericFailureError) as exc:
                excluded += 1
                terms.append(ParametrixTerm(story=story, contribution=0.0,
                                            error=str(exc)))
                continue
            contrib = (-1.0) ** len(story) * pref * I
            terms.append(ParametrixTerm(story=story, contribution=contrib,
                                        amplitude=I))
    elif method == "stationary":
        for story in stories:
            term = _story_term_stationary(story, x, t, y, h, K, symbol, scene)
            if term.error is not None and term.contribution == 0:
                excluded += term.error != "no critical point"
            terms.append(term)
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    value = sum(term.contribution for term in terms)
    return SKResult(value=value, method=method, h=h, t=t, K=K, terms=terms,
                    excluded=excluded, quadrature_rel_change=rel_change)


def _story_term_stationary(story, x, t, y, h, K, symbol, scene) -> ParametrixTerm:
    try:
        s = critical_point(story, x, t, y, scene)
    except NumericFailureError as exc:
        return ParametrixTerm(story=story, contribution=0.0, error=str(exc))
    if s is None:
        return ParametrixTerm(story=story, contribution=0.0,
                              error="no critical point")
    speed = float(np.linalg.norm(s))
    try:
        if story:
            ray = trace_field_ray(_field_for(scene, story, s / speed, y=y), x)
        else:
            ray = None
        S_val, grad = phase_S_and_grad(story, x, t, s, y, scene, field_ray=ray)
        H, detH = hessian_S(story, x, t, s, y, scene)
        w0 = amplitude_w0(story, x, t, s, symbol, scene, field_ray=ray)
        amp = complex(w0)
        if K >= 1 and w0 != 0.0:
            w1 = amplitude_w1(story, x, t, s, symbol, scene, field_ray=ray)
            d2w0 = _momentum_hessian_w0(story, x, t, s, symbol, scene)
            corr = w1 + 0.5j * float(np.trace(np.linalg.solve(H, d2w0)))
            amp = amp + h * corr
    except (DomainError, CausticError, NumericFailureError) as exc:
        return ParametrixTerm(story=story, contribution=0.0, error=str(exc))
    eigs = np.linalg.eigvalsh(H)
    sig = int(np.sum(eigs > 0) - np.sum(eigs < 0))
    pref = (2.0 * math.pi * h) ** -1.5
    contrib = ((-1.0) ** len(story) * pref / math.sqrt(abs(detH))
               * np.exp(-0.25j * math.pi * sig) * np.exp(-1j * S_val / h) * amp)
    return ParametrixTerm(story=story, contribution=contrib, amplitude=amp,
                          phase_value=S_val, critical_point=s, hessian=H,
                          det_hessian=detH)


def _momentum_hessian_w0(story, x, t, xi, symbol, scene, step=None):
    if step is None:
        step = 1e-3 * max(float(np.linalg.norm(xi)), 1e-2)
    n = 3
    H = np.zeros((n, n))
    w00 = amplitude_w0(story, x, t, xi, symbol, scene)
    for i in range(n):
        for j in range(i, n):
            di = np.zeros(n)
            dj = np.zeros(n)
            di[i] = step
            dj[j] = step
            if i == j:
                wp = amplitude_w0(story, x, t, xi + di, symbol, scene)
                wm = amplitude_w0(story, x, t, xi - di, symbol, scene)
                H[i, i] = (wp - 2 * w00 + wm) / step**2
            else:
                wpp = amplitude_w0(story, x, t, xi + di + dj, symbol, scene)
                wpm = amplitude_w0(story, x, t, xi + di - dj, symbol, scene)
                wmp = amplitude_w0(story, x, t, xi - di + dj, symbol, scene)
                wmm = amplitude_w0(story, x, t, xi - di - dj, symbol, scene)
                H[i, j] = H[j, i] = (wpp - wpm - wmp + wmm) / (4 * step**2)
    return H


# ---------------------------------------------------------------------------
# decay experiment
# ---------------------------------------------------------------------------


def _story_support_window(t, speed, scene, symbol):
    """Conservative |J| window that can carry amplitude at time t: the
    backward walk of length 2 t speed must complete the story and land in the
    symbol's spatial support."""
    path = 2.0 * t * speed
    lo = max(0, int(math.floor((path - 2.0 * scene.span
                                - 2 * float(np.max(symbol.radii))) / scene.gap)) - 1)
    hi = int(math.ceil(path / scene.gap)) + 1
    return lo, hi


def decay_experiment(x_slice, t_ladder, symbol: SymbolSurrogate, scene: Scene,
                     xi: np.ndarray | None = None) -> dict:
    """Sum of |leading amplitudes| over stories on a time ladder, with an
    exponential-rate fit.

    Evaluated at a fixed representative momentum (default: the symbol
    center).  Stories outside a conservative geometric support window are
    skipped; the window is validated against full enumeration in the tests.
    """
    if xi is None:
        xi = symbol.center_momentum()
    xi = np.asarray(xi, dtype=float)
    speed = float(np.linalg.norm(xi))
    sums = []
    for t in t_ladder:
        lo, hi = _story_support_window(t, speed, scene, symbol)
        total = 0.0
        for story in story_enumeration(t, scene, axis_sign=symbol.axis_sign):
            if not (lo <= len(story) <= hi):
                continue
            total += abs(amplitude_w0(story, np.asarray(x_slice[0], float), t,
                                      xi, symbol, scene))
            for xx in x_slice[1:]:
                total += abs(amplitude_w0(story, np.asarray(xx, float), t, xi,
                                          symbol, scene))
        sums.append(total)
    ts = np.asarray(t_ladder, dtype=float)
    vals = np.asarray(sums)
    ok = vals > 0.0
    rate = float("nan")
    if np.sum(ok) >= 2:
        rate = float(-np.polyfit(ts[ok], np.log(vals[ok]), 1)[0])
    return {"t": list(ts), "sum_w0": list(vals), "rate": rate,
            "transport_speed": 2.0 * speed}
