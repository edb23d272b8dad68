"""Event-driven broken-ray flow outside the two obstacles.

Flights are exact straight lines; the only numerics is the root finding done
by the geometry module, so there is no time-stepping error.  Besides the
standard flow, the module provides the story-constrained flow used by the
reflected-phase machinery: reflections follow a prescribed alternating
sequence of obstacle indices and every other boundary is transparent, with
everything transparent once the sequence is exhausted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, TangencyAmbiguityError
from .geometry import Scene, SurfaceHit, first_intersection

Story = tuple[int, ...]


def validate_story(story) -> Story:
    """Check the alternation rule j_i != j_{i+1}, j_i in {1, 2}."""
    story = tuple(int(j) for j in story)
    for j in story:
        if j not in (1, 2):
            raise InvalidInputError(f"story entries must be 1 or 2, got {j}")
    for a, b in zip(story, story[1:]):
        if a == b:
            raise InvalidInputError(f"story must alternate obstacles: {story}")
    return story


@dataclass
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.xi))


@dataclass
class ReflectionEvent:
    time: float          # absolute time along the trajectory
    hit: SurfaceHit
    incoming: np.ndarray
    outgoing: np.ndarray
    grazing: bool = False  # True for a skipped tangential touch (no deflection)


@dataclass
class Trajectory:
    start: PhasePoint
    events: list
    end: PhasePoint
    elapsed: float
    escaped: bool = False

    @property
    def story(self) -> Story:
        """Obstacle ids of the genuine reflections, in order."""
        return tuple(ev.hit.obstacle_id for ev in self.events if not ev.grazing)

    def position(self, t: float) -> np.ndarray:
        """Position at time t in [0, elapsed] (piecewise linear)."""
        if not 0.0 <= t <= self.elapsed + 1e-12:
            raise InvalidInputError("time outside trajectory range")
        x, xi, t0 = self.start.x, self.start.xi, 0.0
        for ev in self.events:
            if t <= ev.time:
                return x + (t - t0) * xi
            x, xi, t0 = ev.hit.point, ev.outgoing, ev.time
        return x + (t - t0) * xi

    def velocity(self, t: float) -> np.ndarray:
        xi = self.start.xi
        for ev in self.events:
            if t < ev.time:
                return xi
            xi = ev.outgoing
        return xi


def reflect(xi, n):
    """Specular reflection of xi about the unit normal n."""
    xi = np.asarray(xi, dtype=float)
    n = np.asarray(n, dtype=float)
    return xi - 2.0 * float(n @ xi) * n


def _run_flow(x, xi, duration, scene, allowed, tangency):
    """Shared event loop.

    `allowed(n_reflections, last_obstacle)` yields the obstacle ids that are
    solid for the next flight; the standard flow passes both obstacles (minus
    the one just left, which a convex body cannot re-hit), the story flow
    passes the single expected obstacle or none.  Escape is decided exactly:
    the closed-form intersection query covers the whole forward ray, so "no
    hit" means no reflection can ever happen again.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if duration < 0:
        raise InvalidInputError("flow duration must be nonnegative")
    speed = float(np.linalg.norm(xi))
    if speed == 0.0:
        raise InvalidInputError("degenerate direction |xi| = 0")
    start = PhasePoint(x.copy(), xi.copy())
    events = []
    n_refl = 0
    last_obstacle = None
    t_now = 0.0
    remaining = float(duration)
    escaped = False
    while True:
        ids = allowed(n_refl, last_obstacle)
        hit = first_intersection(x, xi, scene, obstacle_ids=ids) if ids else None
        if hit is None:
            escaped = True
            x = x + remaining * xi
            break
        if hit.time >= remaining:
            x = x + remaining * xi
            break
        margin = abs(hit.cos_incidence)
        grazing = margin < scene.tangency_tol
        if grazing and tangency == "error":
            ev = ReflectionEvent(time=t_now + hit.time, hit=hit,
                                 incoming=xi.copy(), outgoing=xi.copy(), grazing=True)
            raise TangencyAmbiguityError(
                f"tangential hit (margin {margin:.3e}) on obstacle {hit.obstacle_id}",
                event=ev)
        if grazing and tangency == "skip":
            out = xi.copy()  # graze through; does not consume a story stage
        else:
            out = reflect(xi, hit.normal)
            n_refl += 1
            last_obstacle = hit.obstacle_id
            grazing = False
        t_now += hit.time
        remaining -= hit.time
        events.append(ReflectionEvent(time=t_now, hit=hit, incoming=xi.copy(),
                                      outgoing=out, grazing=grazing))
        x, xi = hit.point, out
    end = PhasePoint(x, xi.copy())
    return Trajectory(start=start, events=events, end=end,
                      elapsed=float(duration), escaped=escaped)


def flow(pp: PhasePoint, t: float, scene: Scene, tangency: str = "error") -> Trajectory:
    """Evolve a phase point for time t (event-driven, exact flights).

    Backward evolution is obtained by flowing (x, -xi) and negating, which is
    exact for the reversible billiard.  Tangential hits below the scene
    tolerance raise TangencyAmbiguityError unless `tangency` is "skip" or
    "reflect".
    """
    def allowed(n_events, last):
        # A ray leaving a strictly convex body cannot hit it again.
        if last is None:
            return (1, 2)
        return (3 - last,)

    return _run_flow(pp.x, pp.xi, t, scene, allowed, tangency)


def story_flow(x, v, duration, solid_sequence, scene, tangency="error") -> Trajectory:
    """Flow in which reflections follow `solid_sequence` exactly.

    While k reflections have happened (k < len(solid_sequence)), only obstacle
    solid_sequence[k] is solid and the other is transparent; after the
    sequence is exhausted the motion is free.  This is the kernel behind both
    directions of the story-constrained flow.
    """
    seq = [int(j) for j in solid_sequence]

    def allowed(n_events, last):
        if n_events < len(seq):
            return (seq[n_events],)
        return ()

    return _run_flow(x, v, duration, scene, allowed, tangency)


def modified_flow(pp: PhasePoint, t: float, story, scene: Scene,
                  tangency: str = "error") -> Trajectory:
    """Backward story-constrained spatial flow over time 2t.

    Starting from (x, xi), the point moves with velocity -xi; reflections
    follow the reversed story (an initial hit on the wrong obstacle is
    transparent), and after len(story) reflections both obstacles are
    ignored.  For the empty story the result is x - 2t*xi regardless of any
    obstacles in the way.

    The returned trajectory is in backward-motion convention: start velocity
    is -xi and `end.x` is the transported point.
    """
    story = validate_story(story)
    return story_flow(pp.x, -pp.xi, 2.0 * t, tuple(reversed(story)), scene, tangency)


def remaining_story(pp: PhasePoint, t: float, story, scene: Scene) -> Story:
    """Prefix of the story not yet consumed by the backward flow over time 2t.

    Returns the full story at t = 0 and the empty story once all reflections
    have happened.
    """
    story = validate_story(story)
    traj = modified_flow(pp, t, story, scene)
    done = sum(1 for ev in traj.events if not ev.grazing)
    return story[: len(story) - done]


def trajectory_rows(traj: Trajectory):
    """One row per event: time, point, normal, obstacle id, outgoing direction."""
    for ev in traj.events:
        yield (ev.time, *ev.hit.point, *ev.hit.normal, ev.hit.obstacle_id, *ev.outgoing)
