"""Simulated 36-beam LiDAR safety sensor.

The sensor casts equally spaced rays from the robot position, converts hits to
world-frame points, samples candidate states on a grid inside the sensing
disc, and labels each candidate safe/unsafe by intersecting the point cloud
with the robot's collision disc. For the double integrator the disc is
inflated per (candidate, point) pair by the braking distance of the velocity
component approaching that point: v_app^2 / (2 a_max); moving away applies no
inflation.

Everything here is deterministic given (state, obstacles), and labels are
returned in candidate order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import CircleObstacle, DOUBLE_INTEGRATOR, EnvParams, RectObstacle

N_BEAMS = 36
MAX_RANGE = 5.0


@dataclass
class LidarScan:
    ranges: np.ndarray  # (36,), capped at MAX_RANGE
    beam_angles: np.ndarray  # (36,), world frame
    origin: np.ndarray  # (2,)


@dataclass
class SafetyLabelBatch:
    states: np.ndarray  # (C, n)
    unsafe: np.ndarray  # (C,) bool

    def __post_init__(self):
        if len(self.states) != len(self.unsafe):
            raise ValueError("states and labels must have equal length")


def _ray_rect(origin, dirs, rect: RectObstacle):
    """Slab-method ray/AABB first-hit distances; inf where no hit. dirs (B,2)."""
    lo = np.asarray(rect.min_xy, dtype=np.float64)
    hi = np.asarray(rect.max_xy, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :] - origin[None, :]) * inv
        t2 = (hi[None, :] - origin[None, :]) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # beams parallel to a slab axis: only the other axis constrains
    parallel = dirs == 0.0
    inside = (origin[None, :] >= lo[None, :]) & (origin[None, :] <= hi[None, :])
    tmin[parallel & inside] = -np.inf
    tmax[parallel & inside] = np.inf
    tmin[parallel & ~inside] = np.inf
    tmax[parallel & ~inside] = -np.inf
    t_enter = np.max(tmin, axis=1)
    t_exit = np.min(tmax, axis=1)
    hit = (t_exit >= np.maximum(t_enter, 0.0)) & np.isfinite(t_enter)
    out = np.full(dirs.shape[0], np.inf)
    out[hit] = np.maximum(t_enter[hit], 0.0)
    return out


def _ray_circle(origin, dirs, circ: CircleObstacle):
    c = np.asarray(circ.center, dtype=np.float64)
    oc = origin[None, :] - c[None, :]
    b = np.sum(dirs * oc, axis=1)
    q = np.sum(oc * oc) - circ.radius**2
    disc = b * b - q
    out = np.full(dirs.shape[0], np.inf)
    ok = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near >= 0.0, t_near, t_far)
    valid = ok & (t >= 0.0)
    out[valid] = t[valid]
    return out


def raycast(position, obstacles, n_beams: int = N_BEAMS, max_range: float = MAX_RANGE) -> LidarScan:
    """First-hit distances along beams at angles 2*pi*j/n, capped at max range."""
    origin = np.asarray(position, dtype=np.float64)[:2]
    angles = 2.0 * np.pi * np.arange(n_beams) / n_beams
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ranges = np.full(n_beams, max_range)
    for obs in obstacles:
        if isinstance(obs, RectObstacle):
            t = _ray_rect(origin, dirs, obs)
        else:
            t = _ray_circle(origin, dirs, obs)
        ranges = np.minimum(ranges, t)
    ranges = np.minimum(ranges, max_range)
    return LidarScan(ranges=ranges, beam_angles=angles, origin=origin)


def scan_to_points(scan: LidarScan, max_range: float = MAX_RANGE) -> np.ndarray:
    """World-frame hit points; beams at max range contribute no point."""
    hit = scan.ranges < max_range
    r = scan.ranges[hit]
    a = scan.beam_angles[hit]
    return scan.origin[None, :] + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


# velocity variants for double-integrator candidates: current velocity, rest,
# and 8 compass directions at two speeds
_COMPASS = np.stack(
    [
        np.cos(2.0 * np.pi * np.arange(8) / 8),
        np.sin(2.0 * np.pi * np.arange(8) / 8),
    ],
    axis=1,
)
CANDIDATE_SPEEDS = (0.75, 1.5)


def sample_candidate_states(
    current: np.ndarray,
    kind: str,
    hit_points: np.ndarray | None = None,
    spacing: float = 0.1,
    max_range: float = MAX_RANGE,
) -> np.ndarray:
    """Candidate states to be labeled by the safety sensor.

    Positions form a regular grid of the given spacing inside the sensing
    disc around the robot; the current state is always included (first row).
    When hit points are supplied, grid positions farther than the sensor
    range from every hit are pruned (no obstacle evidence there). For the
    double integrator each position is crossed with 18 velocity variants.
    """
    current = np.asarray(current, dtype=np.float64)
    n = np.floor(max_range / spacing)
    offs = np.arange(-n, n + 1) * spacing
    gx, gy = np.meshgrid(offs, offs, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    grid = grid[np.sum(grid**2, axis=1) <= max_range**2]
    positions = current[None, :2] + grid
    if hit_points is not None and len(hit_points):
        d2 = np.sum((positions[:, None, :] - hit_points[None, :, :]) ** 2, axis=2)
        positions = positions[np.min(d2, axis=1) <= max_range**2]

    if kind == DOUBLE_INTEGRATOR:
        vels = np.concatenate(
            [
                current[None, 2:4],
                np.zeros((1, 2)),
                *[s * _COMPASS for s in CANDIDATE_SPEEDS],
            ],
            axis=0,
        )  # (18, 2)
        P, V = positions.shape[0], vels.shape[0]
        states = np.empty((P * V, 4))
        states[:, :2] = np.repeat(positions, V, axis=0)
        states[:, 2:] = np.tile(vels, (P, 1))
    else:
        states = np.empty((positions.shape[0], current.shape[0]))
        states[:, :2] = positions
        states[:, 2:] = current[None, 2:]
    return np.concatenate([current[None, :], states], axis=0)


def label_first_order(
    hit_points: np.ndarray, candidates: np.ndarray, robot_radius: float
) -> SafetyLabelBatch:
    """Unsafe iff any hit point lies within the robot disc (closed test)."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if hit_points is None or len(hit_points) == 0:
        return SafetyLabelBatch(candidates, np.zeros(len(candidates), dtype=bool))
    d2 = np.sum((candidates[:, None, :2] - hit_points[None, :, :]) ** 2, axis=2)
    unsafe = np.min(d2, axis=1) <= robot_radius**2
    return SafetyLabelBatch(candidates, unsafe)


def label_double_integrator(
    hit_points: np.ndarray,
    candidates: np.ndarray,
    robot_radius: float,
    a_max: float,
) -> SafetyLabelBatch:
    """Velocity-aware labeling with braking-distance inflation."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if hit_points is None or len(hit_points) == 0:
        return SafetyLabelBatch(candidates, np.zeros(len(candidates), dtype=bool))
    diff = hit_points[None, :, :] - candidates[:, None, :2]  # (C, K, 2)
    dist = np.sqrt(np.sum(diff**2, axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = diff / dist[:, :, None]
    unit = np.nan_to_num(unit)
    v_app = np.maximum(np.sum(candidates[:, None, 2:4] * unit, axis=2), 0.0)
    inflated = robot_radius + v_app**2 / (2.0 * a_max)
    unsafe = np.any(dist <= inflated, axis=1)
    return SafetyLabelBatch(candidates, unsafe)


def label_candidates(
    hit_points: np.ndarray, candidates: np.ndarray, kind: str, params: EnvParams
) -> SafetyLabelBatch:
    if kind == DOUBLE_INTEGRATOR:
        return label_double_integrator(hit_points, candidates, params.robot_radius, params.a_max)
    return label_first_order(hit_points, candidates, params.robot_radius)
