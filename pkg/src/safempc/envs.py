"""Ground-truth stochastic robot dynamics, obstacles, tasks, and episodes.

Three planar robots (unicycle, Ackermann car, 2D double integrator) are
Euler-discretized at dt = 0.02 s with additive Gaussian process noise.
Actions are normalized to [-1, 1] per component. Obstacle geometry, spawn
regions, and goals come from layout files (see layouts.py); distances are in
meters throughout.

Collisions never terminate an episode: safety is scored per episode (an
episode counts as unsafe if any step collided), matching how the benchmark
metrics are defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .streams import RandomStream

UNICYCLE = "unicycle"
ACKERMANN = "ackermann"
DOUBLE_INTEGRATOR = "double_integrator"
ENV_KINDS = (UNICYCLE, ACKERMANN, DOUBLE_INTEGRATOR)

STATE_DIM = {UNICYCLE: 3, ACKERMANN: 4, DOUBLE_INTEGRATOR: 4}
ACTION_DIM = 2

GOAL_FEATURE_DIM = 3


def _noise_std(kind: str, dt: float) -> np.ndarray:
    if kind == UNICYCLE:
        base = [0.03, 0.03, 0.05]
    elif kind == ACKERMANN:
        base = [0.03, 0.03, 0.05, 0.01]
    elif kind == DOUBLE_INTEGRATOR:
        base = [0.03, 0.03, 0.1, 0.1]
    else:
        raise ValueError(f"unknown env kind {kind!r}")
    return dt * np.asarray(base, dtype=np.float64)


@dataclass
class EnvParams:
    """Physical parameters shared by the simulated robots."""

    kind: str = UNICYCLE
    dt: float = 0.02
    v_max: float = 1.5
    omega_max: float = math.pi
    gamma_max: float = 2.0
    wheelbase: float = 0.2
    a_max: float = 3.0
    steering_clip: float = 0.7
    speed_clip: float = 1.5
    robot_radius: float = 0.1
    noise_std: np.ndarray = field(default=None)  # per-state std, dt folded in

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.noise_std is None:
            self.noise_std = _noise_std(self.kind, self.dt)
        self.noise_std = np.asarray(self.noise_std, dtype=np.float64)
        if np.any(self.noise_std < 0):
            raise ValueError("noise stds must be nonnegative")

    @property
    def state_dim(self) -> int:
        return STATE_DIM[self.kind]

    @property
    def noise_cov_trace(self) -> float:
        return float(np.sum(self.noise_std**2))


# ---------------------------------------------------------------------------
# dynamics (batched; S is (B, n), A is (B, 2) in [-1,1], D is (B, n) noise)


def step_unicycle(S, A, D, p: EnvParams):
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    theta = S[:, 2]
    v = p.v_max * A[:, 0]
    out = S + D
    out = out.copy()
    out[:, 0] += p.dt * v * np.cos(theta)
    out[:, 1] += p.dt * v * np.sin(theta)
    out[:, 2] += p.dt * p.omega_max * A[:, 1]
    return out


def step_ackermann(S, A, D, p: EnvParams):
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    theta = S[:, 2]
    psi = S[:, 3]
    v = p.v_max * A[:, 0]
    out = S + D
    out = out.copy()
    out[:, 0] += p.dt * v * np.cos(theta)
    out[:, 1] += p.dt * v * np.sin(theta)
    out[:, 2] += p.dt * v * np.tan(psi) / p.wheelbase
    out[:, 3] += p.dt * p.gamma_max * A[:, 1]
    np.clip(out[:, 3], -p.steering_clip, p.steering_clip, out=out[:, 3])
    return out


def step_double_integrator(S, A, D, p: EnvParams):
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    out = S + D
    out = out.copy()
    out[:, 0] += p.dt * S[:, 2]
    out[:, 1] += p.dt * S[:, 3]
    out[:, 2] += p.dt * p.a_max * A[:, 0]
    out[:, 3] += p.dt * p.a_max * A[:, 1]
    speed = np.sqrt(out[:, 2] ** 2 + out[:, 3] ** 2)
    over = speed > p.speed_clip
    if np.any(over):
        scale = p.speed_clip / speed[over]
        out[over, 2] *= scale
        out[over, 3] *= scale
    return out


_STEP_FN = {
    UNICYCLE: step_unicycle,
    ACKERMANN: step_ackermann,
    DOUBLE_INTEGRATOR: step_double_integrator,
}


def step_batch(kind: str, S, A, D, p: EnvParams):
    return _STEP_FN[kind](S, A, D, p)


def sample_process_noise(p: EnvParams, stream: RandomStream, size: int | None = None):
    """Zero-mean Gaussian process noise with the per-env diagonal covariance."""
    if size is None:
        return p.noise_std * stream.normal(size=p.state_dim)
    return p.noise_std[None, :] * stream.normal(size=(size, p.state_dim))


def world_velocity(kind: str, S_next, A, p: EnvParams):
    """World-frame velocity at the end of a step, per robot model.

    First-order robots carry no velocity state; the commanded speed realized
    over the step, resolved along the new heading, is used instead.
    """
    S_next = np.atleast_2d(np.asarray(S_next, dtype=np.float64))
    if kind == DOUBLE_INTEGRATOR:
        return S_next[:, 2:4]
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    v = p.v_max * A[:, 0]
    theta = S_next[:, 2]
    return np.stack([v * np.cos(theta), v * np.sin(theta)], axis=1)


# ---------------------------------------------------------------------------
# rewards


def circle_reward(pos_next, vel_next, radius: float = 1.5):
    """Path-following reward, maximal on the target circle at full
    counterclockwise tangential speed; negative for clockwise motion."""
    pos = np.atleast_2d(np.asarray(pos_next, dtype=np.float64))
    vel = np.atleast_2d(np.asarray(vel_next, dtype=np.float64))
    rho = np.sqrt(pos[:, 0] ** 2 + pos[:, 1] ** 2)
    num = -vel[:, 0] * pos[:, 1] + vel[:, 1] * pos[:, 0]
    out = np.zeros_like(rho)
    ok = rho >= 1e-6
    out[ok] = num[ok] / ((1.0 + np.abs(rho[ok] - radius)) * rho[ok])
    return out


def goal_reward(prev_dist: float, new_dist: float) -> float:
    """Decrease in distance to the goal."""
    if prev_dist < 0 or new_dist < 0:
        raise ValueError("distances must be nonnegative")
    return prev_dist - new_dist


def augment_goal_features(S, goal, kind: str):
    """Unit vector toward the goal (robot frame for heading-carrying robots,
    world frame for the double integrator) plus min(d/8, 1)."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    goal = np.asarray(goal, dtype=np.float64)
    vec = goal[None, :] - S[:, :2]
    d = np.sqrt(vec[:, 0] ** 2 + vec[:, 1] ** 2)
    feats = np.zeros((S.shape[0], GOAL_FEATURE_DIM))
    ok = d > 0
    ux = np.zeros_like(d)
    uy = np.zeros_like(d)
    ux[ok] = vec[ok, 0] / d[ok]
    uy[ok] = vec[ok, 1] / d[ok]
    if kind in (UNICYCLE, ACKERMANN):
        theta = S[:, 2]
        c, s = np.cos(theta), np.sin(theta)
        feats[:, 0] = c * ux + s * uy
        feats[:, 1] = -s * ux + c * uy
    else:
        feats[:, 0] = ux
        feats[:, 1] = uy
    feats[:, 2] = np.minimum(d / 8.0, 1.0)
    return feats


# ---------------------------------------------------------------------------
# obstacles


@dataclass(frozen=True)
class RectObstacle:
    min_xy: tuple
    max_xy: tuple

    def __post_init__(self):
        if not (self.min_xy[0] < self.max_xy[0] and self.min_xy[1] < self.max_xy[1]):
            raise ValueError("rectangle min must be < max componentwise")

    def signed_distance(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        lo = np.asarray(self.min_xy)
        hi = np.asarray(self.max_xy)
        q = np.maximum(lo[None, :] - P, P - hi[None, :])
        outside = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=1))
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class CircleObstacle:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")

    def signed_distance(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        c = np.asarray(self.center)
        return np.sqrt(np.sum((P - c[None, :]) ** 2, axis=1)) - self.radius


def min_signed_distance(P, obstacles):
    """Signed distance to the nearest obstacle (negative inside)."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if not obstacles:
        return np.full(P.shape[0], np.inf)
    return np.min(np.stack([o.signed_distance(P) for o in obstacles], axis=0), axis=0)


def is_collision(P, obstacles, robot_radius: float):
    """Closed-set test: a robot disc touching an obstacle boundary collides."""
    return min_signed_distance(P, obstacles) <= robot_radius


# ---------------------------------------------------------------------------
# tasks and episode lifecycle

CIRCLE_TASK = "circle"
GOAL_TASK = "goal"


@dataclass
class TaskSpec:
    task: str
    obstacles: list
    spawn_min: tuple
    spawn_max: tuple
    episode_cap: int
    circle_radius: float = 1.5
    goals: list = field(default_factory=list)
    goal_radius: float = 0.25
    workspace_min: tuple = (-3.0, -3.0)
    workspace_max: tuple = (3.0, 3.0)

    def __post_init__(self):
        if self.task not in (CIRCLE_TASK, GOAL_TASK):
            raise ValueError(f"unknown task {self.task!r}")
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")
        if self.task == GOAL_TASK and not self.goals:
            raise ValueError("goal task needs at least one goal candidate")


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    collided: bool
    done: bool
    done_reason: str  # goal | timeout | none

    def __post_init__(self):
        if self.done and self.done_reason == "none":
            raise ValueError("done step must carry a done_reason")


class Env:
    """Single-owner mutable environment; random draws come from the stream
    handed to reset, so episodes are reproducible given (seed, path)."""

    MAX_SPAWN_ATTEMPTS = 10_000

    def __init__(self, params: EnvParams, task: TaskSpec):
        self.params = params
        self.task = task
        self.state: np.ndarray | None = None
        self.goal: np.ndarray | None = None
        self.step_idx = 0
        self._stream: RandomStream | None = None
        self._prev_goal_dist = 0.0

    @property
    def kind(self) -> str:
        return self.params.kind

    def reset(self, stream: RandomStream):
        """Draw a collision-free initial pose; returns (state, goal or None)."""
        self._stream = stream
        lo = np.asarray(self.task.spawn_min)
        hi = np.asarray(self.task.spawn_max)
        pos = None
        for _ in range(self.MAX_SPAWN_ATTEMPTS):
            cand = stream.uniform(size=2) * (hi - lo) + lo
            if not is_collision(cand[None, :], self.task.obstacles, self.params.robot_radius)[0]:
                pos = cand
                break
        if pos is None:
            raise RuntimeError("spawn region appears to intersect obstacles everywhere")
        s = np.zeros(self.params.state_dim)
        s[:2] = pos
        if self.kind in (UNICYCLE, ACKERMANN):
            s[2] = stream.uniform(-math.pi, math.pi)
        self.state = s
        self.step_idx = 0
        if self.task.task == GOAL_TASK:
            gi = int(stream.integers(0, len(self.task.goals)))
            self.goal = np.asarray(self.task.goals[gi], dtype=np.float64)
            self._prev_goal_dist = float(np.linalg.norm(self.goal - pos))
        else:
            self.goal = None
        return self.state.copy(), None if self.goal is None else self.goal.copy()

    def step(self, action) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("reset the environment before stepping")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        d = sample_process_noise(self.params, self._stream)
        s_next = step_batch(self.kind, self.state[None, :], a[None, :], d[None, :], self.params)[0]
        self.step_idx += 1

        if self.task.task == CIRCLE_TASK:
            vel = world_velocity(self.kind, s_next[None, :], a[None, :], self.params)[0]
            reward = float(circle_reward(s_next[None, :2], vel[None, :], self.task.circle_radius)[0])
        else:
            new_dist = float(np.linalg.norm(self.goal - s_next[:2]))
            reward = goal_reward(self._prev_goal_dist, new_dist)
            self._prev_goal_dist = new_dist

        collided = bool(
            is_collision(s_next[None, :2], self.task.obstacles, self.params.robot_radius)[0]
        )
        done = False
        reason = "none"
        if self.task.task == GOAL_TASK and self._prev_goal_dist <= self.task.goal_radius:
            done, reason = True, "goal"
        elif self.step_idx >= self.task.episode_cap:
            done, reason = True, "timeout"

        self.state = s_next
        return StepOutcome(s_next.copy(), reward, collided, done, reason)
