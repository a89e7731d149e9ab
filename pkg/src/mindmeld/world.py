"""2D kinematic car, goal-bearing labels, RRT* planning and Stanley tracking."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

WHEEL_LIMIT = 2.5
YAW_GAIN = 1.0  # rad/s of yaw per wheel unit
LABEL_GAIN = 1.0
SPEED = 2.0
DT = 0.1
GOAL_RADIUS = 1.0


def wrap(angle):
    """Wrap to (-pi, pi]."""
    a = np.mod(np.asarray(angle, dtype=float) + np.pi, 2 * np.pi) - np.pi
    a = np.where(a <= -np.pi, a + 2 * np.pi, a)
    return float(a) if np.ndim(a) == 0 else a


def clip_wheel(value):
    return np.clip(value, -WHEEL_LIMIT, WHEEL_LIMIT)


@dataclass(frozen=True)
class CarState:
    x: float
    y: float
    heading: float
    speed: float = SPEED

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (self.xmin - margin <= x <= self.xmax + margin) and (self.ymin - margin <= y <= self.ymax + margin)


@dataclass
class World:
    goal: tuple[float, float]
    bounds: Rect
    obstacles: list[Rect] = field(default_factory=list)

    def __post_init__(self):
        for ob in self.obstacles:
            if ob.contains(*self.goal):
                raise ValueError("goal lies inside an obstacle")
            if not (self.bounds.xmin <= ob.xmin and ob.xmax <= self.bounds.xmax
                    and self.bounds.ymin <= ob.ymin and ob.ymax <= self.bounds.ymax):
                raise ValueError(f"obstacle {ob} extends outside world bounds")

    def in_bounds(self, x: float, y: float) -> bool:
        return self.bounds.contains(x, y)

    def collides(self, x: float, y: float) -> bool:
        return any(ob.contains(x, y) for ob in self.obstacles)

    def to_json(self) -> dict:
        b = self.bounds
        return {
            "goal": list(self.goal),
            "bounds": [b.xmin, b.ymin, b.xmax, b.ymax],
            "obstacles": [[o.xmin, o.ymin, o.xmax, o.ymax] for o in self.obstacles],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "World":
        return cls(
            goal=tuple(blob["goal"]),
            bounds=Rect(*blob["bounds"]),
            obstacles=[Rect(*o) for o in blob.get("obstacles", [])],
        )

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Trajectory:
    dt: float
    states: list[CarState]
    actions: list[float]

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.actions) != max(len(self.states) - 1, 0):
            raise ValueError("need exactly one action between consecutive states")

    def __len__(self) -> int:
        return len(self.states)

    def array(self) -> np.ndarray:
        """(T, 3) array of x, y, heading."""
        return np.array([[s.x, s.y, s.heading] for s in self.states])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "heading", "action"])
            for k, s in enumerate(self.states):
                act = repr(float(self.actions[k])) if k < len(self.actions) else ""
                w.writerow([repr(k * self.dt), repr(s.x), repr(s.y), repr(s.heading), act])

    @classmethod
    def read_csv(cls, path, speed: float = SPEED) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty trajectory")
        dt = float(rows[1]["t"]) - float(rows[0]["t"]) if len(rows) > 1 else DT
        states = [CarState(float(r["x"]), float(r["y"]), float(r["heading"]), speed) for r in rows]
        actions = [float(r["action"]) for r in rows[:-1]]
        return cls(dt, states, actions)


@dataclass
class PlannedPath:
    waypoints: np.ndarray  # (K, 2)
    cost: float

    def __len__(self) -> int:
        return len(self.waypoints)


class PlanningError(RuntimeError):
    pass


# ---------------------------------------------------------------- dynamics


def step(s: CarState, wheel: float, dt: float = DT, yaw_gain: float = YAW_GAIN) -> CarState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    heading = wrap(s.heading + yaw_gain * float(clip_wheel(wheel)) * dt)
    return CarState(
        s.x + s.speed * dt * math.cos(heading),
        s.y + s.speed * dt * math.sin(heading),
        heading,
        s.speed,
    )


def goal_bearing(s: CarState, goal) -> float:
    """Angle to the goal relative to the car heading, in (-pi, pi]."""
    return wrap(math.atan2(goal[1] - s.y, goal[0] - s.x) - s.heading)


def ground_truth_label(s: CarState, world: World, gain: float = LABEL_GAIN) -> float:
    if s.x == world.goal[0] and s.y == world.goal[1]:
        return 0.0
    return float(clip_wheel(gain * goal_bearing(s, world.goal)))


def reached(s: CarState, world: World, radius: float = GOAL_RADIUS) -> bool:
    return math.hypot(world.goal[0] - s.x, world.goal[1] - s.y) <= radius


# ---------------------------------------------------------------- collision


def segments_hit_rect(p0: np.ndarray, p1: np.ndarray, rect: Rect) -> np.ndarray:
    """Vectorised Liang-Barsky test: does each segment p0[k]->p1[k] touch ``rect``?"""
    p0 = np.atleast_2d(p0)
    p1 = np.atleast_2d(p1)
    d = p1 - p0
    t0 = np.zeros(len(p0))
    t1 = np.ones(len(p0))
    hit = np.ones(len(p0), dtype=bool)
    for axis, lo, hi in ((0, rect.xmin, rect.xmax), (1, rect.ymin, rect.ymax)):
        for p, q in ((-d[:, axis], p0[:, axis] - lo), (d[:, axis], hi - p0[:, axis])):
            parallel = p == 0
            hit &= ~(parallel & (q < 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(parallel, 0.0, q / np.where(parallel, 1.0, p))
            entering = (p < 0) & ~parallel
            leaving = (p > 0) & ~parallel
            t0 = np.where(entering, np.maximum(t0, r), t0)
            t1 = np.where(leaving, np.minimum(t1, r), t1)
    return hit & (t0 <= t1)


def segments_free(world: World, p0, p1, margin: float = 0.0) -> np.ndarray:
    p0 = np.atleast_2d(p0)
    p1 = np.atleast_2d(p1)
    free = np.ones(len(p0), dtype=bool)
    for ob in world.obstacles:
        grown = Rect(ob.xmin - margin, ob.ymin - margin, ob.xmax + margin, ob.ymax + margin)
        free &= ~segments_hit_rect(p0, p1, grown)
    return free


# ---------------------------------------------------------------- RRT*


def rrt_star(
    start,
    world: World,
    seed: int = 0,
    iters: int = 4000,
    step_size: float = 1.0,
    goal_bias: float = 0.05,
    gamma: float | None = None,
    goal_radius: float = GOAL_RADIUS,
    margin: float = 0.0,
    checkpoints: Sequence[int] = (),
):
    """Plan a collision-free path from ``start`` to ``world.goal``.

    Near-neighbour radius shrinks as ``gamma * sqrt(log n / n)``. When the
    final tree node sees the goal directly, the goal is appended so the path
    ends exactly on it. With ``checkpoints``, also returns the best cost
    found after each listed iteration count (``inf`` if none yet).
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(world.goal, dtype=float)
    b = world.bounds
    if world.collides(*start) or not world.in_bounds(*start):
        raise PlanningError("start is inside an obstacle or out of bounds")
    if gamma is None:
        area = (b.xmax - b.xmin) * (b.ymax - b.ymin)
        gamma = 2.0 * math.sqrt(1.5 * area / math.pi)
    rng = np.random.default_rng(seed)

    cap = iters + 1
    nodes = np.empty((cap, 2))
    cost = np.empty(cap)
    parent = np.full(cap, -1, dtype=np.intp)
    children: list[list[int]] = [[]]
    nodes[0] = start
    cost[0] = 0.0
    n = 1
    best_at: dict[int, float] = {}
    check = set(checkpoints)

    def goal_cost(k: int) -> float:
        # cost of finishing at the goal from node k (inf if it cannot)
        dist = float(np.hypot(*(goal - nodes[k])))
        if dist > goal_radius:
            return math.inf
        if dist == 0.0 or segments_free(world, nodes[k], goal, margin)[0]:
            return cost[k] + dist
        return math.inf

    def best_goal() -> tuple[float, int]:
        d = np.hypot(*(goal - nodes[:n]).T)
        cand = np.flatnonzero(d <= goal_radius)
        best, arg = math.inf, -1
        for k in cand:
            c = goal_cost(int(k))
            if c < best:
                best, arg = c, int(k)
        return best, arg

    def propagate(k: int, delta: float) -> None:
        stack = list(children[k])
        while stack:
            j = stack.pop()
            cost[j] -= delta
            stack.extend(children[j])

    for it in range(1, iters + 1):
        if rng.random() < goal_bias:
            sample = goal.copy()
        else:
            sample = np.array([rng.uniform(b.xmin, b.xmax), rng.uniform(b.ymin, b.ymax)])
        d2 = ((nodes[:n] - sample) ** 2).sum(axis=1)
        near_idx = int(np.argmin(d2))
        vec = sample - nodes[near_idx]
        dist = math.sqrt(d2[near_idx])
        if dist == 0.0:
            if it in check:
                best_at[it] = best_goal()[0]
            continue
        new = nodes[near_idx] + vec * min(1.0, step_size / dist)
        if world.collides(*new) or not world.in_bounds(*new) or not segments_free(world, nodes[near_idx], new, margin)[0]:
            if it in check:
                best_at[it] = best_goal()[0]
            continue

        radius = min(gamma * math.sqrt(math.log(n + 1) / (n + 1)), 3.0 * step_size)
        dn = np.hypot(*(nodes[:n] - new).T)
        near = np.flatnonzero(dn <= radius)
        if near_idx not in near:
            near = np.append(near, near_idx)
        free = segments_free(world, nodes[near], np.broadcast_to(new, (len(near), 2)), margin)
        near = near[free]
        via = cost[near] + dn[near]
        k_best = int(np.argmin(via))
        par = int(near[k_best])

        k = n
        nodes[k] = new
        cost[k] = via[k_best]
        parent[k] = par
        children.append([])
        children[par].append(k)
        n += 1

        for j, dj in zip(near, dn[near]):
            j = int(j)
            if j == par:
                continue
            c_new = cost[k] + dj
            if c_new < cost[j] - 1e-12:
                old = int(parent[j])
                children[old].remove(j)
                children[k].append(j)
                parent[j] = k
                delta = cost[j] - c_new
                cost[j] = c_new
                propagate(j, delta)

        if it in check:
            best_at[it] = best_goal()[0]

    best, arg = best_goal()
    if arg < 0:
        raise PlanningError(f"planning failed after {iters} samples")
    chain = []
    k = arg
    while k >= 0:
        chain.append(nodes[k])
        k = int(parent[k])
    pts = np.array(chain[::-1])
    if np.hypot(*(goal - pts[-1])) > 0:
        pts = np.vstack([pts, goal])
    path = PlannedPath(pts, float(best))
    if checkpoints:
        return path, best_at
    return path


def path_length(points: np.ndarray) -> float:
    return float(np.hypot(*np.diff(points, axis=0).T).sum())


# ---------------------------------------------------------------- Stanley


def nearest_on_path(pos: np.ndarray, waypoints: np.ndarray):
    """Closest point on the polyline; returns (point, segment index, tangent angle, signed offset).

    The offset is positive when ``pos`` lies to the right of the path direction.
    """
    if len(waypoints) == 1:
        return waypoints[0], 0, 0.0, 0.0
    a = waypoints[:-1]
    b = waypoints[1:]
    ab = b - a
    L2 = (ab ** 2).sum(axis=1)
    L2 = np.where(L2 == 0, 1.0, L2)
    t = np.clip(((pos - a) * ab).sum(axis=1) / L2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.hypot(*(proj - pos).T)
    k = int(np.argmin(d))
    tangent = math.atan2(ab[k, 1], ab[k, 0])
    rel = pos - proj[k]
    left = math.cos(tangent) * rel[1] - math.sin(tangent) * rel[0]
    return proj[k], k, tangent, -left


def stanley_control(s: CarState, path: PlannedPath, gain: float = 2.5) -> float:
    """Wheel command ``heading_error + atan(gain * cross_track / speed)``; positive turns left."""
    if len(path) == 0:
        raise ValueError("empty path")
    if s.speed <= 0:
        raise ValueError("Stanley control is undefined for non-positive speed")
    _, _, tangent, cross = nearest_on_path(s.position, np.asarray(path.waypoints, dtype=float))
    heading_error = wrap(tangent - s.heading)
    return float(clip_wheel(heading_error + math.atan(gain * cross / s.speed)))


def follow_path(
    start: CarState, path: PlannedPath, world: World, gain: float = 2.5, max_steps: int = 600, dt: float = DT
) -> Trajectory:
    """Closed-loop Stanley tracking until the goal radius is reached."""
    states, actions = [start], []
    s = start
    for _ in range(max_steps):
        if reached(s, world):
            break
        a = stanley_control(s, path, gain)
        s = step(s, a, dt)
        actions.append(a)
        states.append(s)
    return Trajectory(dt, states, actions)


def planner_labels(traj: Trajectory, world: World, seed: int = 0, iters: int = 1500, replan_every: int = 10, gain: float = 2.5) -> np.ndarray:
    """Ground-truth wheel labels along a recorded rollout from RRT* + Stanley.

    A fresh plan is made from the car's position every ``replan_every`` steps
    and the Stanley law on that plan gives the label at each state.
    """
    labels = np.zeros(len(traj))
    path = None
    for k, s in enumerate(traj.states):
        if path is None or k % replan_every == 0:
            try:
                path = rrt_star((s.x, s.y), world, seed=seed + k, iters=iters)
            except PlanningError:
                if path is None:
                    raise
        labels[k] = stanley_control(s, path, gain)
    return labels


# ---------------------------------------------------------------- rollouts


def random_world(rng: np.random.Generator, size: float = 30.0) -> World:
    goal = tuple(float(v) for v in rng.uniform(0.25 * size, 0.75 * size, 2))
    return World(goal=goal, bounds=Rect(0.0, 0.0, size, size))


def random_start(world: World, rng: np.random.Generator, min_dist: float = 10.0, max_dist: float = 14.0) -> CarState:
    b = world.bounds
    while True:
        r = rng.uniform(min_dist, max_dist)
        ang = rng.uniform(-np.pi, np.pi)
        x = world.goal[0] + r * math.cos(ang)
        y = world.goal[1] + r * math.sin(ang)
        if b.xmin + 1 < x < b.xmax - 1 and b.ymin + 1 < y < b.ymax - 1 and not world.collides(x, y):
            heading = math.atan2(world.goal[1] - y, world.goal[0] - x) + rng.uniform(-np.pi / 2, np.pi / 2)
            return CarState(x, y, heading)


def perturbed_rollout(
    world: World,
    start: CarState,
    rng: np.random.Generator,
    noise_scale: float = 1.0,
    noise_rate: float = 0.5,
    max_steps: int = 120,
    dt: float = DT,
) -> Trajectory:
    """Goal approach driven by ground-truth labels plus Ornstein-Uhlenbeck wander."""
    s = start
    states, actions = [s], []
    ou = 0.0
    sigma = noise_scale * math.sqrt(2 * noise_rate)
    for _ in range(max_steps):
        if reached(s, world):
            break
        ou += -noise_rate * ou * dt + sigma * math.sqrt(dt) * rng.standard_normal()
        a = float(clip_wheel(ground_truth_label(s, world) + (ou if noise_scale > 0 else 0.0)))
        nxt = step(s, a, dt)
        if not world.in_bounds(nxt.x, nxt.y):
            break
        s = nxt
        states.append(s)
        actions.append(a)
    return Trajectory(dt, states, actions)


def make_calibration_rollouts(
    world: World, n: int, seed: int, noise_scale: float = 1.0, max_steps: int = 120
) -> list[Trajectory]:
    """``n`` DAgger-like rollouts toward the goal of ``world``; deterministic per seed."""
    if n < 1:
        raise ValueError("need at least one rollout")
    out = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        start = random_start(world, rng)
        out.append(perturbed_rollout(world, start, rng, noise_scale=noise_scale, max_steps=max_steps))
    return out


def trajectory_labels(traj: Trajectory, world: World) -> np.ndarray:
    return np.array([ground_truth_label(s, world) for s in traj.states])
