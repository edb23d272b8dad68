"""Periodic ray, linearized return map, and the contraction factor.

The unique periodic trajectory of the two-obstacle exterior runs between the
mutual nearest boundary points.  The return map is taken over one full period
(two reflections) on the section plane through the obstacle-1 endpoint,
transverse coordinates = two in-plane positions and two in-plane direction
components; its Jacobian is computed by central finite differences.

For the symmetric two-sphere benchmark the product of the two contracting
eigenvalues of the full-period map is (3-2*sqrt(2))^4 = 577 - 408*sqrt(2),
and the per-period contraction of a transported wavefront's curvature product
is the square root of that value (one factor of 3-2*sqrt(2) per bounce); the
`front_contraction` property exposes it for the experiments that compare
against wavefront and trapped-set decay rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .billiard import PhasePoint, flow
from .errors import DegenerateGeometryError, NumericFailureError
from .geometry import Scene, closest_boundary_pair, tangent_frame


@dataclass
class PeriodicRay:
    endpoint1: np.ndarray  # on obstacle 1
    endpoint2: np.ndarray  # on obstacle 2
    length: float          # d
    period: float          # 2d at unit speed
    axis: np.ndarray       # unit vector, oriented obstacle 1 -> 2


@dataclass
class PoincareData:
    jacobian: np.ndarray          # 4x4, one full period
    eigenvalues: np.ndarray       # 4 complex
    lam: float                    # product of the eigenvalues of modulus < 1
    mu: float                     # product of the eigenvalues of modulus > 1

    @property
    def front_contraction(self) -> float:
        """Per-period contraction of the wavefront curvature product.

        Equals sqrt(lam): the amplitude of a ray tube contracts by the
        per-plane (not both-planes) eigenvalue each period.
        """
        return float(np.sqrt(self.lam))

    @property
    def transverse_growth_rate(self) -> float:
        """Per-plane expansion exponent per unit time at unit speed:
        log(sqrt(mu)) / period is computed by the caller, which knows the
        period; this property returns log(sqrt(mu)) per period unit."""
        return float(np.log(np.sqrt(self.mu)))


def find_periodic_ray(scene: Scene, tol=1e-12) -> PeriodicRay:
    """Locate the periodic ray by alternating nearest-point projection.

    Converges monotonically for disjoint strictly convex bodies; the result
    hits both boundaries normally.
    """
    p1, p2 = closest_boundary_pair(scene.obstacles[0], scene.obstacles[1], tol=tol)
    d = float(np.linalg.norm(p2 - p1))
    axis = (p2 - p1) / d
    for ob, p, sign in ((scene.obstacles[0], p1, 1.0), (scene.obstacles[1], p2, -1.0)):
        n = ob.gradient(p)
        n = n / np.linalg.norm(n)
        if abs(float(axis @ n) * sign) < 1.0 - 1e-10:
            raise NumericFailureError("periodic-ray endpoints are not normal to the boundary")
    return PeriodicRay(endpoint1=p1, endpoint2=p2, length=d, period=2.0 * d, axis=axis)


def _section_map(ray: PeriodicRay, scene: Scene):
    """Full-period transverse return map at the obstacle-1 endpoint.

    State (y1, y2, v1, v2): in-plane position offsets and in-plane direction
    components on the plane through endpoint1 orthogonal to the axis,
    traversed in the +axis direction at unit speed.
    """
    e = ray.axis
    u1, u2 = tangent_frame(e)
    p0 = ray.endpoint1
    budget = 3.0 * ray.period

    def section(state):
        y1, y2, v1, v2 = state
        x = p0 + y1 * u1 + y2 * u2
        v_sq = v1 * v1 + v2 * v2
        if v_sq >= 1.0:
            raise NumericFailureError("transverse direction components too large")
        xi = v1 * u1 + v2 * u2 + np.sqrt(1.0 - v_sq) * e
        traj = flow(PhasePoint(x, xi), budget, scene, tangency="error")
        refl = [ev for ev in traj.events if not ev.grazing]
        if len(refl) < 2 or refl[0].hit.obstacle_id != 2 or refl[1].hit.obstacle_id != 1:
            raise NumericFailureError("return-map probe left the periodic-orbit neighborhood")
        x_e, xi_e = refl[1].hit.point, refl[1].outgoing
        denom = float(xi_e @ e)
        if denom <= 0.0:
            raise NumericFailureError("return-map probe is not transverse to the section")
        s = float((p0 - x_e) @ e) / denom
        xp = x_e + s * xi_e
        return np.array([float((xp - p0) @ u1), float((xp - p0) @ u2),
                         float(xi_e @ u1), float(xi_e @ u2)])

    return section


def poincare_jacobian(ray: PeriodicRay, scene: Scene, step: float | None = None) -> PoincareData:
    """Central finite-difference Jacobian of the full-period section map."""
    if step is None:
        step = 1e-6 * ray.length
    section = _section_map(ray, scene)
    J = np.zeros((4, 4))
    for k in range(4):
        dp = np.zeros(4)
        dp[k] = step
        J[:, k] = (section(dp) - section(-dp)) / (2.0 * step)
    ev = np.linalg.eigvals(J)
    lam = float(np.real(np.prod([m for m in ev if abs(m) < 1.0]))) if np.any(np.abs(ev) < 1) else 1.0
    mu = float(np.real(np.prod([m for m in ev if abs(m) > 1.0]))) if np.any(np.abs(ev) > 1) else 1.0
    return PoincareData(jacobian=J, eigenvalues=ev, lam=lam, mu=mu)


def contraction_lambda(data: PoincareData, unit_circle_margin=1e-4) -> float:
    """Product of the (exactly two) eigenvalues of modulus < 1.

    Raises DegenerateGeometryError when the spectrum is not cleanly
    hyperbolic.
    """
    mods = np.abs(data.eigenvalues)
    if np.any(np.abs(mods - 1.0) < unit_circle_margin):
        raise DegenerateGeometryError("eigenvalue within margin of the unit circle")
    inside = data.eigenvalues[mods < 1.0]
    if len(inside) != 2:
        raise DegenerateGeometryError(f"expected 2 contracting eigenvalues, got {len(inside)}")
    lam = complex(np.prod(inside))
    if abs(lam.imag) > 1e-9 * abs(lam.real):
        raise DegenerateGeometryError("contracting product is not real")
    lam = float(lam.real)
    if not 0.0 < lam < 1.0:
        raise DegenerateGeometryError(f"contracting product {lam} outside (0, 1)")
    return lam


def symplectic_pairing_defect(data: PoincareData) -> float:
    """Worst relative mismatch between each eigenvalue and the reciprocal of
    its best partner (zero for an exactly symplectic map)."""
    ev = data.eigenvalues
    worst = 0.0
    for m in ev:
        best = min(abs(m * p - 1.0) for p in ev)
        worst = max(worst, best)
    return float(worst)
