"""Strictly convex obstacles and ray-surface queries.

Obstacles are smooth implicit bodies g(x) = 0 with g < 0 inside and g > 0
outside.  Two analytic families (spheres, ellipsoids) give closed-form ray
intersections; a general polynomial implicit body is supported through
safeguarded root bracketing.  The "no infinite order contact" hypothesis holds
by construction for quadrics and is documented, not validated, for general
implicit bodies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, InvalidInputError, ProbeFailureError

Vec3 = np.ndarray

# Relative guard against re-detecting the surface a ray just left.
_DEPART_EPS = 1e-11


def _unit(v: Vec3) -> Vec3:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise InvalidInputError("zero vector cannot be normalized")
    return v / n


def tangent_frame(n: Vec3) -> tuple[Vec3, Vec3]:
    """Orthonormal pair spanning the plane orthogonal to unit vector n."""
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = _unit(np.cross(n, a))
    t2 = np.cross(n, t1)
    return t1, t2


# ---------------------------------------------------------------------------
# obstacles
# ---------------------------------------------------------------------------


@dataclass
class Sphere:
    kind = "sphere"
    center: Vec3
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise InvalidInputError("sphere radius must be positive")

    def value(self, x):
        u = x - self.center
        return float(u @ u) - self.radius**2

    def gradient(self, x):
        return 2.0 * (x - self.center)

    def hessian(self, x):
        return 2.0 * np.eye(3)

    def max_extent(self) -> float:
        return self.radius

    def intersect(self, x, v, tmin=0.0):
        """Smallest ray parameter t > tmin with g(x + t v) = 0, or None."""
        u = x - self.center
        a = float(v @ v)
        b = 2.0 * float(u @ v)
        c = float(u @ u) - self.radius**2
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return None
        sq = math.sqrt(disc)
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
        for t in (t0, t1):
            if t > tmin:
                return t
        return None

    def ray_miss_margin(self, x, v):
        """Signed closest-approach margin of the forward ray in scaled units
        (<= 0 means the ray meets the body)."""
        u = x - self.center
        d = _unit(np.asarray(v, dtype=float))
        s = -float(u @ d)
        closest = u + max(s, 0.0) * d
        return float(np.linalg.norm(closest)) / self.radius - 1.0

    def nearest_boundary_point(self, p):
        return self.center + self.radius * _unit(p - self.center)


@dataclass
class Ellipsoid:
    kind = "ellipsoid"
    center: Vec3
    radii: Vec3

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        if np.any(self.radii <= 0):
            raise InvalidInputError("ellipsoid radii must be positive")

    def value(self, x):
        u = (x - self.center) / self.radii
        return float(u @ u) - 1.0

    def gradient(self, x):
        return 2.0 * (x - self.center) / self.radii**2

    def hessian(self, x):
        return np.diag(2.0 / self.radii**2)

    def max_extent(self) -> float:
        return float(np.max(self.radii))

    def intersect(self, x, v, tmin=0.0):
        u = (x - self.center) / self.radii
        w = v / self.radii
        a = float(w @ w)
        b = 2.0 * float(u @ w)
        c = float(u @ u) - 1.0
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return None
        sq = math.sqrt(disc)
        for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
            if t > tmin:
                return t
        return None

    def ray_miss_margin(self, x, v):
        u = (x - self.center) / self.radii
        w = np.asarray(v, dtype=float) / self.radii
        w = w / np.linalg.norm(w)
        s = -float(u @ w)
        closest = u + max(s, 0.0) * w
        return float(np.linalg.norm(closest)) - 1.0

    def nearest_boundary_point(self, p):
        return _nearest_boundary_newton(self, p)


@dataclass
class ImplicitBody:
    """Polynomial implicit body g(x) = sum_k c_k * prod_i (x_i - center_i)^p_ki.

    The caller is responsible for supplying a strictly convex body; convexity
    is validated by sampling in the test suite, and the no-infinite-order
    contact hypothesis is assumed, not checked.
    """

    kind = "implicit"
    center: Vec3
    terms: list  # [(coef, (px, py, pz)), ...]
    extent_hint: float = 2.0  # conservative bound on boundary distance from center

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.terms = [(float(c), tuple(int(p) for p in pw)) for c, pw in self.terms]

    def value(self, x):
        u = x - self.center
        return float(sum(c * u[0] ** p[0] * u[1] ** p[1] * u[2] ** p[2] for c, p in self.terms))

    def gradient(self, x):
        u = x - self.center
        g = np.zeros(3)
        for c, p in self.terms:
            for i in range(3):
                if p[i] == 0:
                    continue
                q = list(p)
                q[i] -= 1
                g[i] += c * p[i] * u[0] ** q[0] * u[1] ** q[1] * u[2] ** q[2]
        return g

    def hessian(self, x):
        u = x - self.center
        h = np.zeros((3, 3))
        for c, p in self.terms:
            for i in range(3):
                for j in range(3):
                    pi = p[i]
                    q = list(p)
                    if pi == 0:
                        continue
                    q[i] -= 1
                    pj = q[j]
                    if pj == 0:
                        continue
                    q[j] -= 1
                    h[i, j] += c * pi * pj * u[0] ** q[0] * u[1] ** q[1] * u[2] ** q[2]
        return h

    def max_extent(self) -> float:
        return self.extent_hint

    def intersect(self, x, v, tmin=0.0, xtol=1e-12):
        """First root of g(x + t v) by marching + safeguarded bracketing.

        Marching resolution is tied to the body extent; dips of g toward zero
        without a sign change (near-tangency) are refined with a local
        minimum search before being declared misses.
        """
        speed = float(np.linalg.norm(v))
        if speed == 0.0:
            raise InvalidInputError("degenerate direction")
        # Only the segment of the ray within reach of the body matters.
        to_c = self.center - x
        s_mid = float(to_c @ v) / speed**2
        reach = self.extent_hint * 1.5
        lo = max(tmin, s_mid - reach / speed)
        hi = s_mid + reach / speed
        if hi <= lo:
            return None
        f = lambda t: self.value(x + t * v)
        n = 128
        ts = np.linspace(lo, hi, n + 1)
        vals = np.array([f(t) for t in ts])
        prev_t, prev_v = ts[0], vals[0]
        for t, val in zip(ts[1:], vals[1:]):
            if prev_v > 0.0 and val <= 0.0:
                return brentq(f, prev_t, t, xtol=xtol)
            if prev_v <= 0.0 < val and prev_t > tmin:
                return prev_t
            prev_t, prev_v = t, val
        # No sign change on the coarse grid: refine around the minimum in case
        # a thin crossing was stepped over.
        k = int(np.argmin(vals))
        if 0 < k < n and vals[k] > 0.0:
            a, b = ts[k - 1], ts[k + 1]
            for _ in range(60):
                m1 = a + (b - a) / 3.0
                m2 = b - (b - a) / 3.0
                if f(m1) < f(m2):
                    b = m2
                else:
                    a = m1
            tm = 0.5 * (a + b)
            if f(tm) <= 0.0:
                return brentq(f, lo, tm, xtol=xtol)
        return None

    def ray_miss_margin(self, x, v):
        d = _unit(np.asarray(v, dtype=float))
        t = self.intersect(x, d, tmin=0.0)
        if t is not None:
            return -1e-16  # ray meets the body
        f = lambda s: self.value(x + s * d)
        ts = np.linspace(0.0, float(np.linalg.norm(self.center - x)) + 2 * self.extent_hint, 257)
        return float(min(f(s) for s in ts))

    def nearest_boundary_point(self, p):
        return _nearest_boundary_newton(self, p)


Obstacle = Sphere | Ellipsoid | ImplicitBody


def _nearest_boundary_newton(obstacle, p, max_iter=80, tol=1e-13):
    """Closest boundary point to an exterior point p.

    Newton on the Lagrange system q - p + mu * grad g(q) = 0, g(q) = 0,
    started from the first ray hit toward the body center.
    """
    p = np.asarray(p, dtype=float)
    d = obstacle.center - p
    t = obstacle.intersect(p, d, tmin=0.0)
    if t is None:
        raise InvalidInputError("point appears to be inside the obstacle")
    q = p + min(t, 1.0) * d
    grad = obstacle.gradient(q)
    mu = float(np.linalg.norm(q - p)) / max(float(np.linalg.norm(grad)), 1e-300)
    z = np.concatenate([q, [mu]])
    scale = max(1.0, obstacle.max_extent())
    for _ in range(max_iter):
        q, mu = z[:3], z[3]
        g = obstacle.gradient(q)
        F = np.concatenate([q - p + mu * g, [obstacle.value(q)]])
        J = np.zeros((4, 4))
        J[:3, :3] = np.eye(3) + mu * obstacle.hessian(q)
        J[:3, 3] = g
        J[3, :3] = g
        step = np.linalg.solve(J, -F)
        z = z + step
        if float(np.linalg.norm(step[:3])) < tol * scale:
            break
    return z[:3]


# ---------------------------------------------------------------------------
# hits and scenes
# ---------------------------------------------------------------------------


@dataclass
class SurfaceHit:
    """A forward ray-boundary intersection.

    time is the ray parameter (x + time * xi), i.e. elapsed time at speed
    |xi|; normal is the outward unit normal; cos_incidence = -xihat . normal.
    """

    time: float
    point: Vec3
    normal: Vec3
    obstacle_id: int
    cos_incidence: float


@dataclass
class Scene:
    """Two disjoint strictly convex obstacles plus the scalar parameters the
    experiments need (speed band, margins, tolerances)."""

    obstacles: tuple
    alpha0: float = 0.35
    beta0: float = 0.65
    delta0: float = 0.5
    eta: float = 0.01
    delta1: float | None = None
    quadric_tol: float = 1e-12
    implicit_tol: float = 1e-10
    tangency_tol: float = 1e-9
    # derived at load time
    axis_points: tuple = field(default=None)  # (p1, p2) periodic-ray endpoints
    gap: float = field(default=None)          # d, boundary-to-boundary distance
    span: float = field(default=None)         # D, max distance between the bodies

    def __post_init__(self):
        if len(self.obstacles) != 2:
            raise ConfigError("a scene holds exactly two obstacles")
        if not (0 < self.alpha0 <= self.beta0):
            raise ConfigError("require 0 < alpha0 <= beta0")
        if self.axis_points is None:
            p1, p2 = closest_boundary_pair(self.obstacles[0], self.obstacles[1])
            self.axis_points = (p1, p2)
        self.gap = float(np.linalg.norm(self.axis_points[1] - self.axis_points[0]))
        if self.gap <= 0:
            raise ConfigError("obstacles must be disjoint")
        if self.span is None:
            self.span = farthest_boundary_distance(self.obstacles[0], self.obstacles[1])
        if self.delta1 is None:
            self.delta1 = self._default_delta1()

    # geometry helpers -----------------------------------------------------

    @property
    def axis_dir(self) -> Vec3:
        """Unit vector along the periodic ray, oriented obstacle 1 -> 2."""
        return (self.axis_points[1] - self.axis_points[0]) / self.gap

    @property
    def axis_mid(self) -> Vec3:
        return 0.5 * (self.axis_points[0] + self.axis_points[1])

    @property
    def scene_center(self) -> Vec3:
        return 0.5 * (self.obstacles[0].center + self.obstacles[1].center)

    @property
    def escape_radius(self) -> float:
        # Beyond 3x the scene span, an outgoing ray cannot return.
        return 3.0 * self.span

    def obstacle(self, obstacle_id: int):
        return self.obstacles[obstacle_id - 1]

    def is_outside(self, x, margin=0.0) -> bool:
        return all(ob.value(np.asarray(x, dtype=float)) > margin for ob in self.obstacles)

    def _default_delta1(self) -> float:
        """Half the worst boundary-transversality of a small near-axis ray
        family over the first two bounces."""
        from .billiard import PhasePoint, flow  # deferred, avoids an import cycle

        e = self.axis_dir
        t1, t2 = tangent_frame(e)
        worst = 1.0
        r = 0.05 * self.gap
        for a, b in [(0, 0), (r, 0), (-r, 0), (0, r), (0, -r)]:
            start = PhasePoint(self.axis_mid + a * t1 + b * t2, e.copy())
            try:
                traj = flow(start, 2.5 * self.gap, self, tangency="reflect")
            except Exception:
                continue
            for ev in traj.events[:2]:
                worst = min(worst, ev.hit.cos_incidence)
        return 0.5 * worst


def closest_boundary_pair(ob1, ob2, max_iter=200, tol=1e-13):
    """Mutual nearest boundary points by alternating projection.

    For disjoint strictly convex bodies the iteration contracts and the
    distance decreases monotonically.
    """
    p = ob1.center + 0.0
    q = ob2.nearest_boundary_point(p)
    p = ob1.nearest_boundary_point(q)
    last = float(np.linalg.norm(q - p))
    for _ in range(max_iter):
        q = ob2.nearest_boundary_point(p)
        p_new = ob1.nearest_boundary_point(q)
        move = float(np.linalg.norm(p_new - p))
        p = p_new
        d = float(np.linalg.norm(q - p))
        if d > last + 1e-12:
            raise ProbeFailureError("alternating projection failed to contract")
        last = d
        if move < tol * max(1.0, d):
            break
    return p, q


def farthest_boundary_distance(ob1, ob2, n=512) -> float:
    """Max distance between boundary points of the two bodies (the scene span D).

    Exact for spheres; for other bodies, supported-direction sampling with a
    Fibonacci sphere (adequate for the scalar constants it feeds).
    """
    if isinstance(ob1, Sphere) and isinstance(ob2, Sphere):
        return float(np.linalg.norm(ob2.center - ob1.center)) + ob1.radius + ob2.radius
    best = 0.0
    for u in fibonacci_sphere(n):
        p = _support_point(ob1, u)
        q = _support_point(ob2, -u)
        best = max(best, float(np.linalg.norm(p - q)))
    return best


def _support_point(obstacle, direction, iters=40):
    """Boundary point maximizing x . direction (projected-gradient ascent)."""
    x = obstacle.nearest_boundary_point(obstacle.center + 10.0 * obstacle.max_extent() * direction)
    for _ in range(iters):
        n = _unit(obstacle.gradient(x))
        step = direction - (direction @ n) * n
        if float(np.linalg.norm(step)) < 1e-12:
            break
        x = obstacle.nearest_boundary_point(x + 0.2 * obstacle.max_extent() * step)
    return x


def fibonacci_sphere(n: int):
    """n roughly uniform unit vectors."""
    i = np.arange(n) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _make_hit(scene, obstacle_id, x, xi, t) -> SurfaceHit:
    ob = scene.obstacle(obstacle_id)
    point = x + t * xi
    normal = _unit(ob.gradient(point))
    cosi = -float(xi @ normal) / float(np.linalg.norm(xi))
    return SurfaceHit(time=float(t), point=point, normal=normal,
                      obstacle_id=obstacle_id, cos_incidence=cosi)


def first_intersection(x, xi, scene, obstacle_ids=(1, 2), tmin=None) -> SurfaceHit | None:
    """Earliest forward intersection of the ray x + t*xi with the requested
    obstacles, or None if it escapes.

    Raises InvalidInputError for a degenerate direction.  `tmin` guards
    against re-detecting a surface the ray just left (used by the flow when
    it restarts from a boundary point).
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    speed = float(np.linalg.norm(xi))
    if speed == 0.0:
        raise InvalidInputError("degenerate direction |xi| = 0")
    if tmin is None:
        tmin = _DEPART_EPS * scene.span / speed
    best = None
    for oid in obstacle_ids:
        t = scene.obstacle(oid).intersect(x, xi, tmin=tmin)
        if t is not None and (best is None or t < best[0]):
            best = (t, oid)
    if best is None:
        return None
    return _make_hit(scene, best[1], x, xi, best[0])


def tangency_margin(hit: SurfaceHit) -> float:
    """|xihat . n| at the hit; the hit is eta-tangential iff margin <= eta."""
    return abs(hit.cos_incidence)


def shape_operator(obstacle, boundary_point, scene_tol=1e-8):
    """Shape operator (second fundamental form w.r.t. the outward normal) in
    an orthonormal tangent frame at a boundary point.

    Returns (S, (t1, t2), normal) with S the symmetric 2x2 matrix whose
    eigenvalues are the principal curvatures (positive for a convex body).
    """
    x = np.asarray(boundary_point, dtype=float)
    if abs(obstacle.value(x)) > scene_tol * max(1.0, obstacle.max_extent() ** 2):
        raise InvalidInputError("point is not on the obstacle boundary")
    grad = obstacle.gradient(x)
    gn = float(np.linalg.norm(grad))
    n = grad / gn
    t1, t2 = tangent_frame(n)
    H = obstacle.hessian(x)
    S = np.array([[t1 @ H @ t1, t1 @ H @ t2],
                  [t2 @ H @ t1, t2 @ H @ t2]]) / gn
    S = 0.5 * (S + S.T)
    return S, (t1, t2), n


def travel_time_regularity_probe(scene, x, xi, perturbation, offsets, obstacle_ids=(1, 2)):
    """Fitted log-log slope of |t(x, xi + delta*p) - t(x, xi)| against delta.

    Smooth regime (away from tangency) gives slope ~1; entering the tangency
    band gives the square-root law (slope ~1/2).  Raises ProbeFailureError if
    fewer than two probe rays hit.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    p = np.asarray(perturbation, dtype=float)
    base = first_intersection(x, xi, scene, obstacle_ids)
    if base is None:
        raise ProbeFailureError("base ray misses every obstacle")
    logs = []
    for d in offsets:
        if d == 0.0:
            continue
        hit = first_intersection(x, xi + d * p, scene, obstacle_ids)
        if hit is None:
            continue
        dt = abs(hit.time - base.time)
        if dt > 0.0:
            logs.append((math.log(abs(d)), math.log(dt)))
    if len(logs) < 2:
        raise ProbeFailureError("all probe rays missed or produced zero time difference")
    a = np.array(logs)
    slope = np.polyfit(a[:, 0], a[:, 1], 1)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# scene IO and builders
# ---------------------------------------------------------------------------


def _obstacle_from_json(spec) -> Obstacle:
    kind = spec.get("kind")
    if kind == "sphere":
        return Sphere(center=np.asarray(spec["center"], float), radius=float(spec["radius"]))
    if kind == "ellipsoid":
        return Ellipsoid(center=np.asarray(spec["center"], float),
                         radii=np.asarray(spec["radii"], float))
    if kind == "implicit":
        return ImplicitBody(center=np.asarray(spec["center"], float),
                            terms=[(c, tuple(p)) for c, p in spec["terms"]],
                            extent_hint=float(spec.get("extent_hint", 2.0)))
    raise ConfigError(f"unknown obstacle kind: {kind!r}")


def _obstacle_to_json(ob) -> dict:
    if isinstance(ob, Sphere):
        return {"kind": "sphere", "center": list(ob.center), "radius": ob.radius}
    if isinstance(ob, Ellipsoid):
        return {"kind": "ellipsoid", "center": list(ob.center), "radii": list(ob.radii)}
    return {"kind": "implicit", "center": list(ob.center),
            "terms": [[c, list(p)] for c, p in ob.terms], "extent_hint": ob.extent_hint}


def scene_from_json(data) -> Scene:
    """Build a Scene from a parsed JSON dict (see README for the schema)."""
    try:
        obstacles = tuple(_obstacle_from_json(s) for s in data["obstacles"])
        tol = data.get("tolerances", {})
        return Scene(
            obstacles=obstacles,
            alpha0=float(data.get("alpha0", 0.35)),
            beta0=float(data.get("beta0", 0.65)),
            delta0=float(data.get("delta0", 0.5)),
            eta=float(data.get("eta", 0.01)),
            delta1=data.get("delta1"),
            quadric_tol=float(tol.get("quadric", 1e-12)),
            implicit_tol=float(tol.get("implicit", 1e-10)),
            tangency_tol=float(tol.get("tangency", 1e-9)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene description: {exc}") from exc


def scene_to_json(scene: Scene) -> dict:
    return {
        "obstacles": [_obstacle_to_json(ob) for ob in scene.obstacles],
        "alpha0": scene.alpha0, "beta0": scene.beta0,
        "delta0": scene.delta0, "eta": scene.eta, "delta1": scene.delta1,
        "tolerances": {"quadric": scene.quadric_tol, "implicit": scene.implicit_tol,
                       "tangency": scene.tangency_tol},
    }


def load_scene(path) -> Scene:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_json(data)


def symmetric_two_sphere_scene(gap=2.0, radius=1.0, **kwargs) -> Scene:
    """The workhorse configuration: two unit spheres on the z-axis."""
    c = gap + 2.0 * radius
    return Scene(obstacles=(Sphere(center=np.array([0.0, 0.0, 0.0]), radius=radius),
                            Sphere(center=np.array([0.0, 0.0, c]), radius=radius)),
                 **kwargs)


def sphere_pair_scene(radius1, radius2, center_gap, **kwargs) -> Scene:
    """Two spheres of different radii on the z-axis, centers center_gap apart."""
    return Scene(obstacles=(Sphere(center=np.array([0.0, 0.0, 0.0]), radius=radius1),
                            Sphere(center=np.array([0.0, 0.0, center_gap]), radius=radius2)),
                 **kwargs)
