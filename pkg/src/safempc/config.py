"""Experiment configuration: YAML schema, validation, defaults.

A config file has five sections (all optional except env.kind/env.layout):

    env:      {kind, layout, plus physical-parameter overrides like dt}
    agent:    pects | pets_sc | oracle_pects
    planner:  PlannerConfig fields
    train:    TrainSettings fields, with barrier hyperparameters under hyper:
    eval:     {episodes, workers}

Unknown keys and type mismatches are reported with their dotted field path so
CLI users get field-level errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from .agent import BARRIER, CLASSIFIER, TrainSettings
from .envs import ENV_KINDS, EnvParams
from .learning import CbfHyper
from .planner import PlannerConfig

PECTS = "pects"
PETS_SC = "pets_sc"
ORACLE = "oracle_pects"
AGENT_KINDS = (PECTS, PETS_SC, ORACLE)

# EnvParams fields a config may override (kind comes from env.kind, noise from
# the robot model)
_ENV_OVERRIDES = (
    "dt",
    "v_max",
    "omega_max",
    "gamma_max",
    "wheelbase",
    "a_max",
    "steering_clip",
    "speed_clip",
    "robot_radius",
)


class ConfigError(Exception):
    """Invalid experiment config; the message names the offending field."""


@dataclass
class ExperimentConfig:
    kind: str
    layout: str
    agent: str = PECTS
    env_overrides: dict = field(default_factory=dict)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval_episodes: int = 20
    eval_workers: int = 0

    def env_params(self) -> EnvParams:
        return EnvParams(kind=self.kind, **self.env_overrides)


def _coerce(value, target_type, path: str):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if target_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_dataclass(cls, data: dict, path: str, skip=()):
    """Instantiate a flat dataclass from a dict with field-path errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key in skip or key not in by_name:
            raise ConfigError(f"{path}.{key}: unknown field")
        f = by_name[key]
        target = type(f.default) if f.default is not dataclasses.MISSING else None
        if target in (int, float, str, tuple):
            value = _coerce(value, target, f"{path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(doc: dict) -> ExperimentConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root: expected a mapping")
    known = {"env", "agent", "planner", "train", "eval"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown section")

    env = doc.get("env")
    if not isinstance(env, dict):
        raise ConfigError("env: required section missing or not a mapping")
    if "kind" not in env:
        raise ConfigError("env.kind: required field missing")
    if "layout" not in env:
        raise ConfigError("env.layout: required field missing")
    kind = _coerce(env["kind"], str, "env.kind")
    if kind not in ENV_KINDS:
        raise ConfigError(f"env.kind: must be one of {ENV_KINDS}, got {kind!r}")
    layout = _coerce(env["layout"], str, "env.layout")
    overrides = {}
    for key, value in env.items():
        if key in ("kind", "layout"):
            continue
        if key not in _ENV_OVERRIDES:
            raise ConfigError(f"env.{key}: unknown field")
        overrides[key] = _coerce(value, float, f"env.{key}")

    agent = doc.get("agent", PECTS)
    if agent not in AGENT_KINDS:
        raise ConfigError(f"agent: must be one of {AGENT_KINDS}, got {agent!r}")

    planner = _build_dataclass(PlannerConfig, doc.get("planner"), "planner")

    train_doc = dict(doc.get("train") or {})
    hyper_doc = train_doc.pop("hyper", None)
    train = _build_dataclass(TrainSettings, train_doc, "train", skip=("hyper",))
    if hyper_doc is not None:
        train.hyper = _build_dataclass(CbfHyper, hyper_doc, "train.hyper")
    # the baseline uses the classifier path regardless of the train section
    train.algorithm = CLASSIFIER if agent == PETS_SC else BARRIER

    eval_doc = doc.get("eval") or {}
    if not isinstance(eval_doc, dict):
        raise ConfigError("eval: expected a mapping")
    for key in eval_doc:
        if key not in ("episodes", "workers"):
            raise ConfigError(f"eval.{key}: unknown field")
    eval_episodes = _coerce(eval_doc.get("episodes", 20), int, "eval.episodes")
    eval_workers = _coerce(eval_doc.get("workers", 0), int, "eval.workers")
    if eval_episodes < 1:
        raise ConfigError("eval.episodes: must be >= 1")

    cfg = ExperimentConfig(
        kind=kind,
        layout=layout,
        agent=agent,
        env_overrides=overrides,
        planner=planner,
        train=train,
        eval_episodes=eval_episodes,
        eval_workers=eval_workers,
    )
    try:
        cfg.env_params()
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_config(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(dc, skip=()):
        out = {}
        for f in fields(dc):
            if f.name in skip:
                continue
            v = getattr(dc, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    env = {"kind": cfg.kind, "layout": cfg.layout}
    env.update(cfg.env_overrides)
    train = plain(cfg.train, skip=("hyper",))
    train["hyper"] = plain(cfg.train.hyper)
    return {
        "env": env,
        "agent": cfg.agent,
        "planner": plain(cfg.planner),
        "train": train,
        "eval": {"episodes": cfg.eval_episodes, "workers": cfg.eval_workers},
    }


def default_config_yaml() -> str:
    cfg = ExperimentConfig(kind="unicycle", layout="circle")
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
