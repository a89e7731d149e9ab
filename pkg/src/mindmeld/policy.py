"""Steering policies learned from labels: behavioural cloning and DAgger."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DenseParams, Tensor
from .demonstrators import LabelSequence, StyleProfile, corrupt
from .world import (
    DT,
    WHEEL_LIMIT,
    CarState,
    Trajectory,
    World,
    goal_bearing,
    make_calibration_rollouts,
    random_start,
    reached,
    step,
    trajectory_labels,
)

CONDITIONS = ("BC", "DAGGER", "MM_DAGGER")
N_FEATURES = 4


def features(s: CarState, world: World) -> np.ndarray:
    """Relative goal bearing, scaled goal distance and absolute heading (sin, cos)."""
    dist = math.hypot(world.goal[0] - s.x, world.goal[1] - s.y)
    scale = max(world.bounds.xmax - world.bounds.xmin, world.bounds.ymax - world.bounds.ymin)
    return np.array([goal_bearing(s, world.goal), dist / scale, math.sin(s.heading), math.cos(s.heading)])


def state_features(states, world: World) -> np.ndarray:
    return np.array([features(s, world) for s in states]).reshape(-1, N_FEATURES)


@dataclass
class PolicyConfig:
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 3e-3
    epochs: int = 300
    demo_rollouts: int = 4
    dagger_iters: int = 5
    dagger_rollouts: int = 2
    eval_starts: int = 20
    max_steps: int = 300


@dataclass
class PolicyParams:
    net: DenseParams

    @classmethod
    def init(cls, rng: np.random.Generator, hidden=(32, 32)) -> "PolicyParams":
        widths = [N_FEATURES, *hidden, 1]
        return cls(DenseParams.init(widths, ["tanh"] * len(hidden) + ["linear"], rng, "policy"))

    def act(self, x: np.ndarray) -> np.ndarray:
        out = ad.forward_dense(self.net, Tensor(np.atleast_2d(x))).data[:, 0]
        return np.clip(out, -WHEEL_LIMIT, WHEEL_LIMIT)

    def __call__(self, s: CarState, world: World) -> float:
        return float(self.act(features(s, world))[0])


def fit_policy(
    x: np.ndarray, y: np.ndarray, cfg: PolicyConfig, seed: int, policy: PolicyParams | None = None
) -> tuple[PolicyParams, list[float]]:
    """Full-batch Adam regression of wheel labels on features; returns the loss trace."""
    if len(x) == 0:
        raise ValueError("no demonstrations to learn from")
    rng = np.random.default_rng(seed)
    if policy is None:
        policy = PolicyParams.init(rng, cfg.hidden)
    opt = ad.Adam(policy.net.parameters(), lr=cfg.lr)
    xt = Tensor(np.asarray(x, dtype=float))
    yt = np.asarray(y, dtype=float)[:, None]
    trace = []
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        with ad.Tape() as tape:
            value = ad.reduce_mean(ad.square(ad.sub(ad.forward_dense(policy.net, xt), yt)))
        if not np.isfinite(value.data):
            raise FloatingPointError(f"policy loss diverged at epoch {epoch}")
        tape.backward(value)
        opt.step()
        trace.append(float(value.data))
    return policy, trace


# ---------------------------------------------------------------- closed loop


def rollout_policy(policy, world: World, start: CarState, max_steps: int = 300, dt: float = DT) -> Trajectory:
    """Drive with ``policy`` until the goal, the step limit, or leaving the bounds."""
    s = start
    states, actions = [s], []
    for _ in range(max_steps):
        if reached(s, world):
            break
        a = policy(s, world)
        nxt = step(s, a, dt)
        if not world.in_bounds(nxt.x, nxt.y) or world.collides(nxt.x, nxt.y):
            break
        s = nxt
        states.append(s)
        actions.append(a)
    return Trajectory(dt, states, actions)


def cross_track(traj: Trajectory, goal) -> float:
    """Mean distance from the straight start-goal segment."""
    pts = traj.array()[:, :2]
    p0, p1 = pts[0], np.asarray(goal, dtype=float)
    seg = p1 - p0
    denom = float(seg @ seg)
    if denom == 0:
        return float(np.mean(np.linalg.norm(pts - p0, axis=1)))
    u = np.clip((pts - p0) @ seg / denom, 0.0, 1.0)
    return float(np.mean(np.linalg.norm(pts - (p0 + u[:, None] * seg), axis=1)))


@dataclass
class Evaluation:
    success_rate: float
    mean_time: float  # seconds, over successful runs (nan if none)
    mean_cross_track: float


def eval_starts(world: World, n: int, seed: int) -> list[CarState]:
    rng = np.random.default_rng([seed, 404])
    return [random_start(world, rng) for _ in range(n)]


def evaluate(policy, world: World, starts: list[CarState], max_steps: int = 300) -> Evaluation:
    wins, times, xte = 0, [], []
    for s0 in starts:
        traj = rollout_policy(policy, world, s0, max_steps)
        xte.append(cross_track(traj, world.goal))
        if reached(traj.states[-1], world):
            wins += 1
            times.append(len(traj.actions) * traj.dt)
    return Evaluation(wins / len(starts), float(np.mean(times)) if times else math.nan, float(np.mean(xte)))


# ---------------------------------------------------------------- experts and conditions


@dataclass
class StyledExpert:
    """A simulated demonstrator labelling visited states in its own style."""

    style: StyleProfile
    seed: int

    def label(self, traj: Trajectory, world: World, task_id: int) -> LabelSequence:
        o = trajectory_labels(traj, world)
        if len(o) <= 2 * abs(self.style.timing):
            # too short to shift; the demonstrator can only echo its gain
            return LabelSequence(self.style.id, task_id, o, np.clip(self.style.magnitude * o, -WHEEL_LIMIT, WHEEL_LIMIT))
        return corrupt(o, self.style, self.seed, task_id)


Corrector = Callable[[LabelSequence], np.ndarray]


@dataclass
class ConditionResult:
    condition: str
    losses: list[float] = field(default_factory=list)  # final fit loss per iteration
    dataset_sizes: list[int] = field(default_factory=list)
    success: list[float] = field(default_factory=list)  # per iteration
    mean_time: float = math.nan
    mean_cross_track: float = math.nan
    uncorrected: int = 0  # rollouts too short for the corrector

    @property
    def final_success(self) -> float:
        return self.success[-1]


def _labels_for(expert: StyledExpert, traj: Trajectory, world: World, task_id: int, corrector, result) -> np.ndarray:
    seq = expert.label(traj, world, task_id)
    if corrector is None:
        return seq.a
    try:
        return corrector(seq)
    except ValueError:
        result.uncorrected += 1
        return seq.a


def run_dagger(
    expert: StyledExpert,
    world: World,
    cfg: PolicyConfig,
    seed: int,
    corrector: Corrector | None = None,
    iterations: int | None = None,
    condition: str | None = None,
) -> ConditionResult:
    """Iteration 0 is behavioural cloning on demonstration rollouts; later
    iterations roll out the current policy and aggregate relabelled states."""
    iterations = cfg.dagger_iters if iterations is None else iterations
    if condition is None:
        condition = "BC" if iterations == 0 else ("MM_DAGGER" if corrector is not None else "DAGGER")
    result = ConditionResult(condition)
    starts = eval_starts(world, cfg.eval_starts, seed)
    demos = make_calibration_rollouts(world, cfg.demo_rollouts, seed=seed)
    xs, ys = [], []
    for k, traj in enumerate(demos):
        xs.append(state_features(traj.states, world))
        ys.append(_labels_for(expert, traj, world, k, corrector, result))
    policy = None
    rng = np.random.default_rng([seed, 17])
    task = len(demos)
    for it in range(iterations + 1):
        if it > 0:
            for _ in range(cfg.dagger_rollouts):
                traj = rollout_policy(policy, world, random_start(world, rng), cfg.max_steps)
                xs.append(state_features(traj.states, world))
                ys.append(_labels_for(expert, traj, world, task, corrector, result))
                task += 1
        x, y = np.concatenate(xs), np.concatenate(ys)
        policy, trace = fit_policy(x, y, cfg, seed=seed + it, policy=policy)
        ev = evaluate(policy, world, starts, cfg.max_steps)
        result.losses.append(trace[-1])
        result.dataset_sizes.append(len(x))
        result.success.append(ev.success_rate)
        result.mean_time, result.mean_cross_track = ev.mean_time, ev.mean_cross_track
    return result


def run_bc(expert: StyledExpert, world: World, cfg: PolicyConfig, seed: int) -> ConditionResult:
    return run_dagger(expert, world, cfg, seed, iterations=0)
