"""Reflected eikonal phase fields and wavefront-curvature transport.

A phase field phi has |grad phi| = 1; its rays are straight lines along the
gradient.  A reflected field with story J is the field whose rays have
bounced on the prescribed alternating obstacle sequence; its value at x is
the base-plane-wave value at the first bounce plus the path length after it,
and its gradient at x is the direction of the unique J-story ray through x,
found by shooting on the backward story-constrained flow.

Curvature bookkeeping uses the transverse Hessian Q of the field (the second
fundamental form of the level surface with respect to -grad phi): free
transport is the exact Riccati map Q -> Q (I + tau Q)^{-1}, and reflection
follows the astigmatic mirror law obtained by matching second-order phase
expansions on the boundary (tangential/sagittal Coddington equations in the
principal sections).  The Gaussian-curvature ratio across a flight of length
l is 1 / (1 + l tr Q + l^2 det Q), which telescopes into the curvature
product attached to each story.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .billiard import PhasePoint, Story, reflect, story_flow, validate_story
from .errors import (CausticError, DomainError, InvalidInputError,
                     NumericFailureError, TangencyAmbiguityError)
from .geometry import Scene, SurfaceHit, shape_operator, tangent_frame


@dataclass
class WavefrontState:
    """Point on a wavefront: position, unit ray direction, accumulated phase,
    and the 2x2 curvature matrix Q in the transported orthonormal frame."""

    point: np.ndarray
    direction: np.ndarray
    phase: float
    Q: np.ndarray
    frame: tuple  # (f1, f2), orthonormal, orthogonal to direction

    @classmethod
    def plane_wave(cls, point, direction, phase=0.0):
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        f1, f2 = tangent_frame(d)
        return cls(point=np.asarray(point, dtype=float), direction=d,
                   phase=float(phase), Q=np.zeros((2, 2)), frame=(f1, f2))

    @property
    def mean_curvature_trace(self) -> float:
        return float(np.trace(self.Q))

    @property
    def gaussian_curvature(self) -> float:
        return float(np.linalg.det(self.Q))


def curvature_ratio(Q: np.ndarray, length: float) -> float:
    """Gaussian-curvature ratio G(end)/G(start) across a caustic-free flight,
    valid also when det Q = 0: 1 / (1 + l tr Q + l^2 det Q)."""
    H = float(np.trace(Q))
    G = float(np.linalg.det(Q))
    denom = 1.0 + length * H + length * length * G
    if denom <= 0.0:
        raise CausticError("flight crosses a focal point", focal_distance=_focal_distance(Q))
    return 1.0 / denom


def _focal_distance(Q) -> float:
    q = np.linalg.eigvalsh(Q)
    focals = [-1.0 / v for v in q if v < -1e-300]
    return min(focals) if focals else math.inf


def propagate_free(ws: WavefrontState, tau: float) -> WavefrontState:
    """Advance a wavefront state a distance tau along its ray.

    Q evolves by the exact Riccati map Q (I + tau Q)^{-1}; a focal point in
    (0, tau] raises CausticError carrying the focal distance.
    """
    if tau < 0:
        raise InvalidInputError("tau must be nonnegative")
    focal = _focal_distance(ws.Q)
    if tau >= focal:
        raise CausticError(f"focal point at distance {focal:.6g} <= tau", focal_distance=focal)
    A = np.eye(2) + tau * ws.Q
    Qn = ws.Q @ np.linalg.inv(A)
    Qn = 0.5 * (Qn + Qn.T)
    return WavefrontState(point=ws.point + tau * ws.direction,
                          direction=ws.direction, phase=ws.phase + tau,
                          Q=Qn, frame=ws.frame)


def _rotate_frame(frame, d_old, d_new):
    """Minimal rotation taking d_old to d_new, applied to the frame pair.
    Near anti-parallel directions (normal incidence) the rotation axis is
    ill-conditioned; any orthonormal frame normal to d_new is equivalent for
    the symmetric-matrix bookkeeping, so one frame vector is kept and the
    other flipped."""
    axis = np.cross(d_old, d_new)
    s = float(np.linalg.norm(axis))
    c = float(d_old @ d_new)
    if s < 1e-12:
        if c > 0.0:
            return frame
        return (frame[0].copy(), -frame[1])
    axis = axis / s
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    R = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    return (R @ frame[0], R @ frame[1])


def reflect_wavefront(ws: WavefrontState, hit: SurfaceHit, scene: Scene) -> WavefrontState:
    """Reflect a wavefront state off a boundary point.

    Matching the second-order expansions of the incident and reflected phases
    on the surface gives, for tangent vectors u,
        u' H_out u = u' H_in u + 2 c u' K u,      c = -d_in . n (signed),
    with K the obstacle shape operator; H_out is then reassembled in the
    reflected transverse frame using its kernel direction d_out.  The phase
    value is continuous across the reflection.
    """
    n = hit.normal
    d_in = ws.direction
    c = -float(d_in @ n)
    if abs(c) < scene.tangency_tol:
        raise TangencyAmbiguityError("tangential incidence in wavefront reflection")
    d_out = reflect(d_in, n)
    d_out = d_out / np.linalg.norm(d_out)
    K2, (t1, t2), _ = shape_operator(scene.obstacle(hit.obstacle_id), hit.point,
                                     scene_tol=1e-6)
    K3 = (K2[0, 0] * np.outer(t1, t1) + K2[1, 1] * np.outer(t2, t2)
          + K2[0, 1] * (np.outer(t1, t2) + np.outer(t2, t1)))
    g1, g2 = ws.frame
    H_in = (ws.Q[0, 0] * np.outer(g1, g1) + ws.Q[1, 1] * np.outer(g2, g2)
            + ws.Q[0, 1] * (np.outer(g1, g2) + np.outer(g2, g1)))
    M = H_in + 2.0 * c * K3
    f1, f2 = _rotate_frame(ws.frame, d_in, d_out)

    def proj(w):
        # projection onto the surface tangent plane along d_out
        return w - (float(n @ w) / c) * d_out

    p1, p2 = proj(f1), proj(f2)
    Qn = np.array([[p1 @ M @ p1, p1 @ M @ p2],
                   [p2 @ M @ p1, p2 @ M @ p2]])
    Qn = 0.5 * (Qn + Qn.T)
    return WavefrontState(point=hit.point.copy(), direction=d_out,
                          phase=ws.phase, Q=Qn, frame=(f1, f2))


# ---------------------------------------------------------------------------
# phase fields
# ---------------------------------------------------------------------------


@dataclass
class PhaseField:
    """Base plane wave (x - source) . xi_hat reflected along a story.

    The gradient field and all curvature data depend only on the direction
    xi_hat and the story; the source shifts values by a constant.
    """

    scene: Scene
    xi_hat: np.ndarray
    story: Story
    source: np.ndarray

    def __post_init__(self):
        self.xi_hat = np.asarray(self.xi_hat, dtype=float)
        self.xi_hat = self.xi_hat / np.linalg.norm(self.xi_hat)
        self.story = validate_story(self.story)
        self.source = np.asarray(self.source, dtype=float)


@dataclass
class FieldRay:
    """The story ray through an evaluation point with all transport data.

    Bounce points are stored in backward order (entry 0 is the last forward
    bounce, nearest the evaluation point)."""

    x: np.ndarray
    gradient: np.ndarray          # unit field gradient at x
    value: float                  # phase value at x
    bounce_points: list           # backward order
    bounce_normals: list
    bounce_margins: list          # |cos incidence| per bounce
    leg_lengths: np.ndarray       # leg 0: x -> first backward bounce, ...
    base_direction: np.ndarray    # xi_hat
    post_bounce_Q: list           # forward post-reflection curvature per bounce (backward order)
    lambda_factors: np.ndarray    # per-forward-flight amplitude factors (backward order)
    Q_at_x: np.ndarray
    frame_at_x: tuple

    @property
    def n_bounces(self) -> int:
        return len(self.bounce_points)

    @property
    def total_bounce_path(self) -> float:
        """l_J: path length from x back through the first forward bounce."""
        return float(np.sum(self.leg_lengths))

    @property
    def lambda_product(self) -> float:
        return float(np.prod(self.lambda_factors)) if self.n_bounces else 1.0

    def backward_point(self, s: float) -> np.ndarray:
        """Point at backward arc length s along the ray polyline (continuing
        straight past the first forward bounce, ignoring the obstacles)."""
        if s <= 0.0:
            return self.x.copy()
        pts = [self.x] + self.bounce_points
        acc = 0.0
        for k, leg in enumerate(self.leg_lengths):
            if s <= acc + leg:
                f = (s - acc) / leg
                return (1.0 - f) * pts[k] + f * pts[k + 1]
            acc += leg
        if self.n_bounces == 0:
            return self.x - s * self.base_direction
        return self.bounce_points[-1] - (s - acc) * self.base_direction

    def bounces_undone(self, s: float) -> int:
        """Number of reflections the backward walk of length s has crossed."""
        acc = np.cumsum(self.leg_lengths)
        return int(np.searchsorted(acc, s + 1e-15 * max(1.0, s)))

    def forward_direction_at(self, s: float) -> np.ndarray:
        """Field gradient (forward ray direction) at backward arc length s."""
        pts = [self.x] + self.bounce_points
        acc = 0.0
        for k, leg in enumerate(self.leg_lengths):
            if s <= acc + leg:
                d = pts[k] - pts[k + 1]
                return d / np.linalg.norm(d)
            acc += leg
        return self.base_direction.copy()

    def partial_amplitude_factor(self, s: float) -> float:
        """Curvature-ratio product from x back to backward arc length s
        (full product of the legs crossed, partial factor on the cut leg)."""
        out = 1.0
        acc = 0.0
        for k, leg in enumerate(self.leg_lengths):
            if s >= acc + leg - 1e-15:
                out *= self.lambda_factors[k] if k < len(self.lambda_factors) else 1.0
                acc += leg
                continue
            cut = s - acc
            if cut <= 0.0 or k >= len(self.post_bounce_Q):
                break
            # leg k runs forward from bounce k; the portion between the cut
            # point and the x-side end has length cut measured from that end
            Qstart = self.post_bounce_Q[k]
            remain = leg - cut
            ws_mid_Q = _riccati(Qstart, remain)
            out *= math.sqrt(curvature_ratio(ws_mid_Q, cut))
            break
        return out


def _riccati(Q, tau):
    A = np.eye(2) + tau * Q
    Qn = Q @ np.linalg.inv(A)
    return 0.5 * (Qn + Qn.T)


def _backward_budget(scene: Scene, n_bounces: int) -> float:
    return (n_bounces + 2.0) * scene.span + 4.0 * scene.gap


def _backward_trace(field: PhaseField, x, d):
    """Backward story trace from (x, -d).  Returns (trajectory, ok)."""
    scene = field.scene
    budget = _backward_budget(scene, len(field.story))
    try:
        traj = story_flow(x, -d, budget, tuple(reversed(field.story)), scene,
                          tangency="error")
    except TangencyAmbiguityError:
        return None, False
    refl = [ev for ev in traj.events if not ev.grazing]
    return traj, len(refl) == len(field.story)


def trace_field_ray(field: PhaseField, x, initial_guess=None,
                    dir_tol=1e-12, max_iter=60, restarts=4) -> FieldRay:
    """Find the story ray through x and assemble value/curvature data.

    Shooting unknowns: the unit gradient direction at x (2 chart parameters);
    residual: the backward trace's final direction must be the reversed base
    direction.  Damped Newton with finite-difference Jacobian; raises
    DomainError when no ray exists within the iteration budget.
    """
    scene = field.scene
    x = np.asarray(x, dtype=float)
    xi_hat = field.xi_hat
    story = field.story
    if len(story) == 0:
        f1, f2 = tangent_frame(xi_hat)
        return FieldRay(x=x, gradient=xi_hat.copy(),
                        value=float((x - field.source) @ xi_hat),
                        bounce_points=[], bounce_normals=[], bounce_margins=[],
                        leg_lengths=np.zeros(0), base_direction=xi_hat.copy(),
                        post_bounce_Q=[], lambda_factors=np.zeros(0),
                        Q_at_x=np.zeros((2, 2)), frame_at_x=(f1, f2))

    b1, b2 = tangent_frame(xi_hat)  # residual basis, fixed

    def residual(d):
        traj, ok = _backward_trace(field, x, d)
        if not ok:
            return None, None
        v_end = traj.end.xi
        r = np.array([float((v_end + xi_hat) @ b1), float((v_end + xi_hat) @ b2)])
        return r, traj

    guesses = []
    if initial_guess is not None:
        guesses.append(np.asarray(initial_guess, dtype=float))
    base = xi_hat if len(story) % 2 == 0 else -xi_hat
    guesses.append(base)
    rng = np.random.default_rng(12345)
    for _ in range(restarts):
        guesses.append(base + 0.15 * rng.standard_normal(3))

    best = None
    for g in guesses:
        d = g / np.linalg.norm(g)
        r, traj = residual(d)
        if r is None:
            continue
        converged = False
        for _ in range(max_iter):
            if float(np.linalg.norm(r)) <= dir_tol:
                converged = True
                break
            c1, c2 = tangent_frame(d)
            h = 1e-7
            J = np.zeros((2, 2))
            failed = False
            for j, cb in enumerate((c1, c2)):
                dp = d + h * cb
                dp /= np.linalg.norm(dp)
                dm = d - h * cb
                dm /= np.linalg.norm(dm)
                rp, _ = residual(dp)
                rm, _ = residual(dm)
                if rp is None or rm is None:
                    failed = True
                    break
                J[:, j] = (rp - rm) / (2.0 * h)
            if failed:
                break
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                raise NumericFailureError("singular shooting Jacobian")
            lam = 1.0
            improved = False
            for _ in range(8):
                d_new = d + lam * (step[0] * c1 + step[1] * c2)
                d_new /= np.linalg.norm(d_new)
                r_new, traj_new = residual(d_new)
                if r_new is not None and np.linalg.norm(r_new) < np.linalg.norm(r):
                    d, r, traj = d_new, r_new, traj_new
                    improved = True
                    break
                lam *= 0.5
            if not improved:
                break
        if converged:
            best = (d, traj)
            break
    if best is None:
        raise DomainError("no story ray through the requested point "
                          f"(story {story}, point {x})")
    d, traj = best
    return _assemble_field_ray(field, x, d, traj)


def _assemble_field_ray(field: PhaseField, x, d, traj) -> FieldRay:
    scene = field.scene
    xi_hat = field.xi_hat
    events = [ev for ev in traj.events if not ev.grazing]
    pts = [ev.hit.point for ev in events]
    normals = [ev.hit.normal for ev in events]
    margins = [abs(ev.hit.cos_incidence) for ev in events]
    chain = [x] + pts
    legs = np.array([float(np.linalg.norm(chain[k + 1] - chain[k]))
                     for k in range(len(pts))])
    value = float((pts[-1] - field.source) @ xi_hat) + float(np.sum(legs))

    # forward wavefront pass: plane wave arrives at the first forward bounce
    ws = WavefrontState.plane_wave(pts[-1], xi_hat)
    post_Q = [None] * len(pts)
    factors = np.ones(len(pts))
    for k in range(len(pts) - 1, -1, -1):
        hit = events[k].hit
        ws = WavefrontState(point=hit.point, direction=ws.direction,
                            phase=ws.phase, Q=ws.Q, frame=ws.frame)
        ws = reflect_wavefront(ws, hit, scene)
        post_Q[k] = ws.Q.copy()
        leg = legs[k]
        factors[k] = math.sqrt(curvature_ratio(ws.Q, leg))
        ws = propagate_free(ws, leg)
    return FieldRay(x=x, gradient=d.copy(), value=value, bounce_points=pts,
                    bounce_normals=normals, bounce_margins=margins,
                    leg_lengths=legs, base_direction=xi_hat.copy(),
                    post_bounce_Q=post_Q, lambda_factors=factors,
                    Q_at_x=ws.Q, frame_at_x=ws.frame)


def phase_eval(field: PhaseField, x, initial_guess=None):
    """(value, gradient) of the reflected phase at x.  The gradient is the
    unit direction of the story ray; raises DomainError off the field."""
    ray = trace_field_ray(field, x, initial_guess=initial_guess)
    return ray.value, ray.gradient


def lambda_product(field: PhaseField, x, initial_guess=None) -> float:
    """Telescoping product of per-flight Gaussian-curvature ratios (square
    roots) along the story ray through x; 1 for the empty story."""
    ray = trace_field_ray(field, x, initial_guess=initial_guess)
    return ray.lambda_product


def wavefront_at(field: PhaseField, x) -> WavefrontState:
    """Wavefront state of the field at x (point, gradient, value, curvature)."""
    ray = trace_field_ray(field, x)
    return WavefrontState(point=ray.x, direction=ray.gradient, phase=ray.value,
                          Q=ray.Q_at_x, frame=ray.frame_at_x)


# ---------------------------------------------------------------------------
# condition (P)
# ---------------------------------------------------------------------------


@dataclass
class ConditionPReport:
    clause1_min_eigenvalue: float
    clause1_pass: bool
    clause1_evaluated: int
    clause2_covered_fraction: float
    clause2_pass: bool
    clause3_checked: int
    clause3_violations: int
    clause3_sampled_pass: bool
    skipped_out_of_domain: int


def condition_P_check(field: PhaseField, p: int, scene: Scene,
                      n_samples: int = 200, seed: int = 0,
                      region_radius: float = 0.25, eig_tol: float = 1e-8,
                      cover_tol: float = 1e-9) -> ConditionPReport:
    """Sampled check of the three phase-field conditions against obstacle p.

    Clause 1: minimal curvature eigenvalue over domain samples >= -tol.
    Clause 2: sampled silhouette of the other obstacle is covered by field
    rays continuing from the exit side of obstacle p.
    Clause 3: midpoint quasi-convexity of the value on sampled pairs
    (reported separately as a sampled pass, never asserted as a proof).
    """
    rng = np.random.default_rng(seed)
    e = scene.axis_dir
    u1, u2 = tangent_frame(e)
    p1 = scene.axis_points[0]

    def sample_point():
        r = region_radius * math.sqrt(rng.random())
        ang = 2 * math.pi * rng.random()
        ax = rng.uniform(0.1, scene.gap - 0.1)
        return p1 + ax * e + r * (math.cos(ang) * u1 + math.sin(ang) * u2)

    skipped = 0
    min_eig = math.inf
    values = []
    pts = []
    evaluated = 0
    for _ in range(n_samples):
        x = sample_point()
        try:
            ray = trace_field_ray(field, x)
        except (DomainError, NumericFailureError, CausticError):
            skipped += 1
            continue
        evaluated += 1
        min_eig = min(min_eig, float(np.linalg.eigvalsh(ray.Q_at_x)[0]))
        values.append(ray.value)
        pts.append(x)

    # clause 2: silhouette coverage of the other obstacle
    other = 3 - p
    ob_other = scene.obstacle(other)
    ob_p = scene.obstacle(p)
    covered = 0
    total = 0
    from .geometry import fibonacci_sphere
    for u in fibonacci_sphere(128):
        z = ob_other.nearest_boundary_point(ob_other.center
                                            + 2.0 * ob_other.max_extent() * u)
        total += 1
        if len(field.story) == 0:
            if ob_p.ray_miss_margin(z, -field.xi_hat) <= cover_tol:
                covered += 1
        else:
            try:
                trace_field_ray(field, z)
                covered += 1
            except (DomainError, NumericFailureError, CausticError):
                pass

    # clause 3: sampled midpoint quasi-convexity of the value
    checked = 0
    violations = 0
    for _ in range(min(n_samples, len(pts) * (len(pts) - 1) // 2 if pts else 0)):
        i, j = rng.integers(0, len(pts), size=2)
        if i == j:
            continue
        mid = 0.5 * (pts[i] + pts[j])
        try:
            vm, _ = phase_eval(field, mid)
        except (DomainError, NumericFailureError, CausticError):
            continue
        checked += 1
        if vm > max(values[i], values[j]) + 1e-9:
            violations += 1

    frac = covered / total if total else 0.0
    return ConditionPReport(
        clause1_min_eigenvalue=min_eig if evaluated else math.nan,
        clause1_pass=(evaluated > 0 and min_eig >= -eig_tol),
        clause1_evaluated=evaluated,
        clause2_covered_fraction=frac,
        clause2_pass=(frac >= 1.0 - 1e-12),
        clause3_checked=checked,
        clause3_violations=violations,
        clause3_sampled_pass=(violations == 0),
        skipped_out_of_domain=skipped,
    )


def gradient_derivative_probe(field: PhaseField, points, h=1e-5):
    """Max finite-difference first and second directional derivatives of the
    field gradient over the sample points (the boundedness probe)."""
    first = 0.0
    second = 0.0
    axes = np.eye(3)
    for x in points:
        try:
            ray0 = trace_field_ray(field, x)
        except (DomainError, NumericFailureError):
            continue
        g0 = ray0.gradient
        for u in axes:
            try:
                gp = trace_field_ray(field, x + h * u, initial_guess=g0).gradient
                gm = trace_field_ray(field, x - h * u, initial_guess=g0).gradient
            except (DomainError, NumericFailureError):
                continue
            first = max(first, float(np.linalg.norm((gp - gm) / (2 * h))))
            second = max(second, float(np.linalg.norm((gp - 2 * g0 + gm) / h**2)))
    return first, second
