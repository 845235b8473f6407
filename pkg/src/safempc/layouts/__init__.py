"""Layout files: obstacle geometry, spawn region, goals, task parameters.

Layouts are YAML documents with the schema below (meters everywhere):

    task: circle | goal
    episode_cap: <int>
    spawn: {min: [x, y], max: [x, y]}
    obstacles:
      - {type: rect, min: [x, y], max: [x, y]}
      - {type: circle, center: [x, y], radius: r}
    workspace: {min: [x, y], max: [x, y]}
    circle_radius: 1.5          # circle task
    goals: [[x, y], ...]        # goal task
    goal_radius: 0.25           # goal task

Two layouts ship with the package ("circle", "goal"). Their obstacle
coordinates approximate the benchmark scenes from published figures; only the
circle-task wall columns have exactly specified x-extents.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import yaml

from ..envs import CircleObstacle, RectObstacle, TaskSpec

BUILTIN_LAYOUTS = ("circle", "goal")


class LayoutError(ValueError):
    pass


def _parse_obstacle(entry: dict):
    kind = entry.get("type")
    if kind == "rect":
        return RectObstacle(tuple(entry["min"]), tuple(entry["max"]))
    if kind == "circle":
        return CircleObstacle(tuple(entry["center"]), float(entry["radius"]))
    raise LayoutError(f"obstacle type must be 'rect' or 'circle', got {kind!r}")


def parse_layout(doc: dict) -> TaskSpec:
    try:
        task = doc["task"]
        spawn = doc["spawn"]
        spec = TaskSpec(
            task=task,
            obstacles=[_parse_obstacle(o) for o in doc.get("obstacles", [])],
            spawn_min=tuple(spawn["min"]),
            spawn_max=tuple(spawn["max"]),
            episode_cap=int(doc["episode_cap"]),
            circle_radius=float(doc.get("circle_radius", 1.5)),
            goals=[tuple(g) for g in doc.get("goals", [])],
            goal_radius=float(doc.get("goal_radius", 0.25)),
            workspace_min=tuple(doc.get("workspace", {}).get("min", (-3.0, -3.0))),
            workspace_max=tuple(doc.get("workspace", {}).get("max", (3.0, 3.0))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise LayoutError(f"invalid layout: {exc}") from exc
    return spec


def load_layout(name_or_path: str) -> TaskSpec:
    """Load a shipped layout by name or any layout YAML by path."""
    if name_or_path in BUILTIN_LAYOUTS:
        text = resources.files(__package__).joinpath(f"{name_or_path}.yaml").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise LayoutError(f"layout not found: {name_or_path}")
        text = path.read_text()
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise LayoutError("layout file must contain a mapping")
    return parse_layout(doc)
