"""Shared test oracles: finite differences, exact spectral norms, Monte-Carlo
estimators with standard errors, and small hand-built worlds.

Everything here is deliberately independent of the implementations it checks:
the spectral norm uses a dense eigen-decomposition instead of power
iteration, gradients come from central differences instead of backprop, and
the toy worlds carry analytic signed distances and ground-truth safety.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import CircleObstacle, RectObstacle, TaskSpec, min_signed_distance


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    den = max(np.linalg.norm(exact), 1e-12)
    return float(num / den)


def exact_spectral_norm(W: np.ndarray) -> float:
    """Largest singular value via eigen-decomposition of W^T W (small dims)."""
    W = np.asarray(W, dtype=np.float64)
    if max(W.shape) > 8:
        raise ValueError("exact oracle is restricted to dims <= 8")
    eig = np.linalg.eigvalsh(W.T @ W)
    return float(np.sqrt(max(eig[-1], 0.0)))


def mc_mean_se(samples: np.ndarray):
    """Monte-Carlo mean and its standard error."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n))


def mc_var_se(samples: np.ndarray):
    """Sample variance and an (asymptotic, normal-theory) standard error."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    v = float(samples.var(ddof=1))
    c = samples - samples.mean()
    m4 = float(np.mean(c**4))
    se = np.sqrt(max(m4 - v**2 * (n - 3) / (n - 1), 0.0) / n)
    return v, float(se)


@dataclass
class ToyWorld:
    """Small world with analytic signed distance and safety ground truth.

    A state's position is safe iff its robot disc stays clear of every
    obstacle: signed distance > robot_radius.
    """

    obstacles: list
    robot_radius: float = 0.1
    spawn_min: tuple = (-2.0, -2.0)
    spawn_max: tuple = (2.0, 2.0)
    name: str = "toy"

    def signed_distance(self, P) -> np.ndarray:
        return min_signed_distance(P, self.obstacles)

    def truly_safe(self, P) -> np.ndarray:
        return self.signed_distance(P) > self.robot_radius

    def task_spec(self, task: str = "circle", episode_cap: int = 200, **kw) -> TaskSpec:
        return TaskSpec(
            task=task,
            obstacles=self.obstacles,
            spawn_min=self.spawn_min,
            spawn_max=self.spawn_max,
            episode_cap=episode_cap,
            **kw,
        )

    def sample_safe_states(
        self, stream, n: int, state_dim: int = 3, min_clearance: float = 0.05
    ) -> np.ndarray:
        """Rejection-sample states whose discs clear obstacles by a margin."""
        out = np.zeros((n, state_dim))
        got = 0
        attempt = 0
        lo = np.asarray(self.spawn_min)
        hi = np.asarray(self.spawn_max)
        while got < n:
            cand = stream.child("pos", attempt).uniform(size=(4 * n, 2)) * (hi - lo) + lo
            ok = self.signed_distance(cand) > self.robot_radius + min_clearance
            take = cand[ok][: n - got]
            out[got : got + len(take), :2] = take
            got += len(take)
            attempt += 1
        if state_dim >= 3:
            out[:, 2] = stream.child("heading").uniform(-np.pi, np.pi, size=n)
        return out


def single_obstacle_world() -> ToyWorld:
    """One circular obstacle at the origin; everything else is free space."""
    return ToyWorld(
        obstacles=[CircleObstacle(center=(0.0, 0.0), radius=0.5)],
        spawn_min=(-2.5, -2.5),
        spawn_max=(2.5, 2.5),
        name="single_obstacle",
    )


def corridor_world(half_width: float = 0.6) -> ToyWorld:
    """Two parallel walls forming a horizontal corridor around y = 0."""
    return ToyWorld(
        obstacles=[
            RectObstacle(min_xy=(-3.0, half_width), max_xy=(3.0, half_width + 1.0)),
            RectObstacle(min_xy=(-3.0, -half_width - 1.0), max_xy=(3.0, -half_width)),
        ],
        spawn_min=(-2.5, -0.4),
        spawn_max=(2.5, 0.4),
        name="corridor",
    )
