"""Planner-facing wrappers around learned and analytic components.

The planner only sees two small interfaces:

* a model with ``n_members`` and ``predict(members, states, actions)``
  returning the per-sample Gaussian over the next physical state and reward;
* a barrier with ``value(states)`` and a ``lipschitz_bound``.

State encoding: heading angles enter networks as (sin, cos) pairs. That map
is 1-Lipschitz, so a barrier net with certified bound L keeps the same bound
with respect to the raw state, which is what the safety margin consumes.
"""

from __future__ import annotations

import numpy as np

from . import envs
from .envs import (
    ACKERMANN,
    CIRCLE_TASK,
    DOUBLE_INTEGRATOR,
    GOAL_FEATURE_DIM,
    GOAL_TASK,
    UNICYCLE,
    EnvParams,
    TaskSpec,
)

ENCODED_DIM = {UNICYCLE: 4, ACKERMANN: 5, DOUBLE_INTEGRATOR: 4}


def encode_state(kind: str, S: np.ndarray) -> np.ndarray:
    """1-Lipschitz network input encoding of the physical state."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if kind == UNICYCLE:
        return np.stack([S[:, 0], S[:, 1], np.sin(S[:, 2]), np.cos(S[:, 2])], axis=1)
    if kind == ACKERMANN:
        return np.stack(
            [S[:, 0], S[:, 1], np.sin(S[:, 2]), np.cos(S[:, 2]), S[:, 3]], axis=1
        )
    return S.copy()


def model_input_dim(kind: str, task: str) -> int:
    dim = ENCODED_DIM[kind] + envs.ACTION_DIM
    if task == GOAL_TASK:
        dim += GOAL_FEATURE_DIM
    return dim


def barrier_input_dim(kind: str) -> int:
    return ENCODED_DIM[kind]


def build_model_state(kind: str, task: str, S: np.ndarray, goal) -> np.ndarray:
    """Network state features: encoded state plus goal features when present."""
    enc = encode_state(kind, S)
    if task == GOAL_TASK:
        feats = envs.augment_goal_features(np.atleast_2d(S), goal, kind)
        return np.concatenate([enc, feats], axis=1)
    return enc


class LearnedModel:
    """Ensemble-backed dynamics/reward model over physical states."""

    def __init__(self, ensemble, params: EnvParams, task: TaskSpec, goal=None):
        self.ensemble = ensemble
        self.params = params
        self.task = task
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)

    @property
    def n_members(self) -> int:
        return len(self.ensemble.members)

    def set_goal(self, goal) -> None:
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)

    def predict(self, members, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        ms = build_model_state(self.params.kind, self.task.task, S, self.goal)
        mean, var = self.ensemble.predict_raw(members, np.concatenate([ms, A], axis=1))
        n = self.params.state_dim
        mean_next = S + mean[:, :n]
        return mean_next, var[:, :n], mean[:, n], var[:, n]


class OracleModel:
    """True one-step mean and true noise covariance; zero reward variance.

    Used to validate the planner independently of learning.
    """

    n_members = 1

    def __init__(self, params: EnvParams, task: TaskSpec, goal=None):
        self.params = params
        self.task = task
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)
        self._var = params.noise_std**2

    def set_goal(self, goal) -> None:
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)

    def predict(self, members, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        zero = np.zeros_like(S)
        mu = envs.step_batch(self.params.kind, S, A, zero, self.params)
        var_next = np.broadcast_to(self._var[None, :], mu.shape).copy()
        if self.task.task == CIRCLE_TASK:
            vel = envs.world_velocity(self.params.kind, mu, A, self.params)
            r = envs.circle_reward(mu[:, :2], vel, self.task.circle_radius)
        else:
            prev = np.linalg.norm(self.goal[None, :] - S[:, :2], axis=1)
            new = np.linalg.norm(self.goal[None, :] - mu[:, :2], axis=1)
            r = prev - new
        return mu, var_next, r, np.zeros(len(r))


class LearnedBarrier:
    """Lipschitz-certified barrier net evaluated on encoded states."""

    def __init__(self, cbf, kind: str):
        self.cbf = cbf
        self.kind = kind

    @property
    def lipschitz_bound(self) -> float:
        return self.cbf.lipschitz_bound

    def value(self, S) -> np.ndarray:
        return self.cbf.value(encode_state(self.kind, S))


class HandcraftedBarrier:
    """tanh(slope * (signed distance to inflated obstacles - margin)).

    The Euclidean signed-distance field is 1-Lipschitz and tanh is
    1-Lipschitz, so slope <= 1 certifies a global Lipschitz bound of 1. The
    barrier depends on position only (the robot body is a disc).
    """

    def __init__(self, obstacles, robot_radius: float, margin: float = 0.05, slope: float = 1.0):
        if slope > 1.0:
            raise ValueError("slope above 1 would break the certified bound of 1")
        self.obstacles = obstacles
        self.offset = robot_radius + margin
        self.slope = slope

    @property
    def lipschitz_bound(self) -> float:
        return self.slope

    def value(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        sd = envs.min_signed_distance(S[:, :2], self.obstacles)
        return np.tanh(self.slope * (sd - self.offset))


class ConstantBarrier:
    """Constant barrier value; Lipschitz constant 0. Margin is then
    (1 - kappa) * c minus the model noise term, so a positive constant makes
    the safety constraint inactive whenever the model covariance is small."""

    def __init__(self, c: float):
        self.c = float(c)

    lipschitz_bound = 0.0

    def value(self, S) -> np.ndarray:
        return np.full(np.atleast_2d(S).shape[0], self.c)
