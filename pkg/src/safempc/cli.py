"""Command-line experiment driver.

Subcommands: train, eval, cbf-grid, bounds, print-config. A run directory is
self-describing: manifest.json (config snapshot, seed, artifact names),
metrics.csv (one row per training episode), model checkpoints, and a
transition-buffer snapshot. Evaluation needs nothing but the run directory.

All floats in CSV files are written with repr (64-bit round-trip precision)
so determinism checks can compare files byte-wise. Exit codes: 0 ok, 2
config/input error, 3 missing artifact.

The default output root is ./runs, overridable with SAFEMPC_RUNS.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import agent as agent_mod
from . import bounds as bounds_mod
from .config import (
    ORACLE,
    PETS_SC,
    ConfigError,
    config_to_dict,
    default_config_yaml,
    load_config,
    parse_config,
)
from .envs import Env
from .layouts import LayoutError, load_layout
from .learning import PnnEnsemble, load_cbf, load_classifier, save_cbf, save_classifier
from .models import LearnedBarrier, LearnedModel, encode_state
from .planner import Planner
from .streams import RandomStream

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
ENSEMBLE_CKPT = "ensemble.ckpt"
CBF_CKPT = "cbf.ckpt"
CLASSIFIER_CKPT = "classifier.ckpt"
TRANSITIONS = "transitions.csv"

METRIC_COLUMNS = (
    "episode",
    "reward",
    "steps",
    "success",
    "safe",
    "recovery_steps",
    "restarts",
    "replacements",
    "min_margin",
)


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_metrics(path: Path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for i, r in enumerate(records):
            w.writerow(
                [
                    i,
                    _fmt(r.reward),
                    r.steps,
                    _fmt(r.success),
                    _fmt(not r.collided),
                    r.recovery_steps,
                    r.restarts,
                    r.replacements,
                    _fmt(r.min_margin),
                ]
            )


def _write_trajectories(path: Path, records, state_dim: int) -> None:
    cols = (
        ["episode", "step"]
        + [f"s{i}" for i in range(state_dim)]
        + ["a0", "a1", "reward", "collided", "mode"]
    )
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for ep, r in enumerate(records):
            tr = r.trajectory
            for t in range(len(tr.actions)):
                w.writerow(
                    [ep, t]
                    + [_fmt(v) for v in tr.states[t + 1]]
                    + [_fmt(tr.actions[t, 0]), _fmt(tr.actions[t, 1])]
                    + [_fmt(tr.rewards[t]), _fmt(bool(tr.collided[t])), tr.modes[t]]
                )


def _load_run(run_dir: Path):
    manifest_path = run_dir / MANIFEST
    if not manifest_path.exists():
        _fail(3, f"{manifest_path}: missing run manifest")
    with open(manifest_path) as f:
        manifest = json.load(f)
    try:
        cfg = parse_config(manifest["config"])
    except ConfigError as exc:
        _fail(2, f"invalid config in manifest: {exc}")
    return manifest, cfg


def _build_eval_planner(run_dir: Path, cfg):
    params = cfg.env_params()
    task = load_layout(cfg.layout)
    if cfg.agent == ORACLE:
        return agent_mod.oracle_planner(params, task, cfg.planner), params, task
    ens_path = run_dir / ENSEMBLE_CKPT
    if not ens_path.exists():
        _fail(3, f"{ens_path}: missing ensemble checkpoint")
    ensemble = PnnEnsemble.load(ens_path)
    model = LearnedModel(ensemble, params, task)
    if cfg.agent == PETS_SC:
        clf_path = run_dir / CLASSIFIER_CKPT
        if not clf_path.exists():
            _fail(3, f"{clf_path}: missing classifier checkpoint")
        clf = load_classifier(clf_path)
        planner = Planner(
            model,
            None,
            cfg.planner,
            constrained=False,
            penalty_classifier=agent_mod.EncodedClassifier(clf, params.kind),
        )
    else:
        cbf_path = run_dir / CBF_CKPT
        if not cbf_path.exists():
            _fail(3, f"{cbf_path}: missing barrier checkpoint")
        cbf = load_cbf(cbf_path)
        planner = Planner(model, LearnedBarrier(cbf, params.kind), cfg.planner)
    return planner, params, task


@click.group()
def main():
    """Safe model-based control experiments."""


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")
@click.option("--seed", type=int, default=0, show_default=True)
def train(config_path, out, seed):
    """Train on CONFIG_PATH and write a run directory."""
    try:
        cfg = load_config(config_path)
        task = load_layout(cfg.layout)
    except (ConfigError, LayoutError) as exc:
        _fail(2, str(exc))
    params = cfg.env_params()
    run_dir = Path(out) if out else Path(_output_root()) / f"{cfg.agent}-{cfg.kind}-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.monotonic()
    if cfg.agent == ORACLE:
        planner = agent_mod.oracle_planner(params, task, cfg.planner)
        env = Env(params, task)
        stream = RandomStream(seed)
        records = [
            agent_mod.run_episode(env, planner, stream.child("episode", ep))
            for ep in range(cfg.train.n_episodes)
        ]
        artifacts = [METRICS]
    else:
        result = agent_mod.train_agent(cfg.env_params(), task, cfg.planner, cfg.train, seed)
        records = result.episodes
        result.ensemble.save(run_dir / ENSEMBLE_CKPT)
        artifacts = [METRICS, ENSEMBLE_CKPT, TRANSITIONS]
        if result.cbf is not None:
            save_cbf(result.cbf, run_dir / CBF_CKPT)
            artifacts.append(CBF_CKPT)
        if result.classifier is not None:
            save_classifier(result.classifier, run_dir / CLASSIFIER_CKPT)
            artifacts.append(CLASSIFIER_CKPT)
        result.buffer.to_csv(run_dir / TRANSITIONS)

    _write_metrics(run_dir / METRICS, records)
    manifest = {
        "config": config_to_dict(cfg),
        "seed": seed,
        "artifacts": sorted(artifacts),
        "version": _version(),
        "wall_clock_s": time.monotonic() - t0,
    }
    with open(run_dir / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    click.echo(str(run_dir))


@main.command("eval")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--episodes", type=int, default=None, help="Defaults to eval.episodes in the config.")
@click.option("--seed", type=int, default=1000, show_default=True)
@click.option("--workers", type=int, default=None, help="Defaults to eval.workers in the config.")
def eval_cmd(run_dir, episodes, seed, workers):
    """Evaluate a run directory with frozen models."""
    run_dir = Path(run_dir)
    _, cfg = _load_run(run_dir)
    n = episodes if episodes is not None else cfg.eval_episodes
    if n < 1:
        _fail(2, "episodes: must be >= 1")
    planner, params, task = _build_eval_planner(run_dir, cfg)
    records = agent_mod.evaluate(
        planner,
        params,
        task,
        seed,
        n,
        n_workers=workers if workers is not None else cfg.eval_workers,
        record_trajectory=True,
    )
    summary = agent_mod.summarize(records)
    with open(run_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    _write_trajectories(run_dir / "trajectories.csv", records, params.state_dim)
    click.echo(json.dumps(summary, sort_keys=True))


@main.command("cbf-grid")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--resolution", type=float, default=0.05, show_default=True)
def cbf_grid(run_dir, resolution):
    """Export the trained barrier on an xy grid (heading 0, zero velocity)."""
    run_dir = Path(run_dir)
    _, cfg = _load_run(run_dir)
    if resolution <= 0:
        _fail(2, "resolution: must be positive")
    cbf_path = run_dir / CBF_CKPT
    if not cbf_path.exists():
        _fail(3, f"{cbf_path}: missing barrier checkpoint")
    cbf = load_cbf(cbf_path)
    task = load_layout(cfg.layout)
    params = cfg.env_params()
    lo = np.asarray(task.workspace_min)
    hi = np.asarray(task.workspace_max)
    xs = lo[0] + resolution * np.arange(round((hi[0] - lo[0]) / resolution) + 1)
    ys = lo[1] + resolution * np.arange(round((hi[1] - lo[1]) / resolution) + 1)
    with open(run_dir / "grid.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "h"])
        for x in xs:
            S = np.zeros((len(ys), params.state_dim))
            S[:, 0] = x
            S[:, 1] = ys
            h = cbf.value(encode_state(params.kind, S))
            for y, hv in zip(ys, h):
                w.writerow([_fmt(x), _fmt(y), _fmt(hv)])
    click.echo(str(run_dir / "grid.csv"))


@main.command("bounds")
@click.argument("kappa", type=float)
@click.argument("k", type=int)
@click.argument("h0", type=float)
@click.argument("delta", type=float)
@click.argument("sigma", type=float)
def bounds_cmd(kappa, k, h0, delta, sigma):
    """Print the K-step exit probability bound."""
    try:
        inputs = bounds_mod.ExitBoundInputs(kappa=kappa, K=k, h0=h0, delta=delta, sigma=sigma)
        value = bounds_mod.exit_probability_bound(inputs)
    except ValueError as exc:
        _fail(2, str(exc))
    if value >= 1e-4:
        click.echo(f"{value:.6f}")
    else:
        click.echo(f"{value:.6e}")


@main.command("print-config")
def print_config():
    """Print the default experiment config with every field spelled out."""
    click.echo(default_config_yaml(), nl=False)


def _output_root() -> str:
    import os

    return os.environ.get("SAFEMPC_RUNS", "runs")


def _version() -> str:
    try:
        return metadata.version("safempc")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


if __name__ == "__main__":  # pragma: no cover
    main()
