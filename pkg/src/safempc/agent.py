"""Episode orchestration: sense, label, plan, act, learn.

The agent interleaves three activities per environment step: it casts the
safety sensor at the current state and labels a grid of candidate states,
plans an action with the barrier-constrained sampling MPC, and records the
executed transition. After every episode the dynamics ensemble and barrier
are retrained on everything gathered so far. The first few episodes (and any
episode before the ensemble has enough data) use uniform random actions.

Evaluation runs with frozen components and no buffer writes, and can be
distributed over worker processes; per-episode random streams are addressed
by (seed, episode index) alone, so serial and parallel evaluation produce
identical numbers.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from . import sensor
from .envs import GOAL_TASK, Env, EnvParams, TaskSpec
from .learning import (
    CbfHyper,
    PnnEnsemble,
    SafetyBuffers,
    TransitionBuffer,
    ingest_step,
    train_cbf,
    train_classifier,
    train_ensemble,
)
from .models import (
    HandcraftedBarrier,
    LearnedBarrier,
    LearnedModel,
    OracleModel,
    barrier_input_dim,
    build_model_state,
    encode_state,
    model_input_dim,
)
from .neural import LipschitzCbf, SafetyClassifier
from .planner import Planner, PlannerConfig, RECOVERY
from .streams import RandomStream

BARRIER = "barrier"
CLASSIFIER = "classifier"


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    actions: np.ndarray  # (T, 2)
    rewards: np.ndarray  # (T,)
    collided: np.ndarray  # (T,) bool
    modes: list  # (T,) str: nominal | recovery | explore


@dataclass
class EpisodeRecord:
    reward: float
    steps: int
    collided: bool
    success: bool
    recovery_steps: int
    restarts: int
    replacements: int
    min_margin: float
    done_reason: str
    trajectory: Trajectory | None = None


class EncodedClassifier:
    """Adapts the safety classifier to the planner's physical-state calls."""

    def __init__(self, clf: SafetyClassifier, kind: str):
        self.clf = clf
        self.kind = kind

    def prob(self, S) -> np.ndarray:
        return self.clf.prob(encode_state(self.kind, S))


def run_episode(
    env: Env,
    planner: Planner | None,
    stream: RandomStream,
    bufs: SafetyBuffers | None = None,
    buffer: TransitionBuffer | None = None,
    safe_cap: int = 200,
    record_trajectory: bool = False,
) -> EpisodeRecord:
    """Run one episode to termination.

    ``planner=None`` means uniform random exploration. Passing buffers turns
    on sensing and data collection; leaving them None gives a side-effect-free
    evaluation episode.
    """
    state, goal = env.reset(stream.child("env"))
    if planner is not None and hasattr(planner.model, "set_goal"):
        planner.model.set_goal(goal)

    ingest = bufs is not None and buffer is not None
    prev = None
    total_reward = 0.0
    collided = False
    recovery_steps = 0
    restarts = 0
    replacements = 0
    min_margin = np.inf
    if record_trajectory:
        t_states, t_actions, t_rewards, t_coll, t_modes = [state.copy()], [], [], [], []

    t = 0
    while True:
        labels = None
        if ingest:
            scan = sensor.raycast(state, env.task.obstacles)
            pts = sensor.scan_to_points(scan)
            cands = sensor.sample_candidate_states(state, env.kind, pts)
            labels = sensor.label_candidates(pts, cands, env.kind, env.params)

        if planner is None:
            action = stream.child("explore", t).uniform(-1.0, 1.0, size=2)
            mode = "explore"
        else:
            res = planner.plan(state, prev, stream.child("plan", t))
            action = res.applied_action
            prev = res.action_sequence
            mode = res.mode
            if res.mode == RECOVERY:
                recovery_steps += 1
            restarts += res.restarts
            replacements += res.replacements
            if np.isfinite(res.min_margin):
                min_margin = min(min_margin, res.min_margin)

        out = env.step(action)
        if ingest:
            ms = build_model_state(env.kind, env.task.task, state[None, :], goal)[0]
            ingest_step(
                bufs,
                buffer,
                ms,
                np.clip(action, -1.0, 1.0),
                out.next_state - state,
                out.reward,
                labels,
                state,
                stream.child("ingest", t),
                safe_cap,
            )
        total_reward += out.reward
        collided = collided or out.collided
        state = out.next_state
        if record_trajectory:
            t_states.append(state.copy())
            t_actions.append(np.clip(action, -1.0, 1.0))
            t_rewards.append(out.reward)
            t_coll.append(out.collided)
            t_modes.append(mode)
        t += 1
        if out.done:
            traj = None
            if record_trajectory:
                traj = Trajectory(
                    states=np.stack(t_states),
                    actions=np.stack(t_actions),
                    rewards=np.asarray(t_rewards),
                    collided=np.asarray(t_coll, dtype=bool),
                    modes=t_modes,
                )
            return EpisodeRecord(
                reward=total_reward,
                steps=t,
                collided=collided,
                success=out.done_reason == "goal",
                recovery_steps=recovery_steps,
                restarts=restarts,
                replacements=replacements,
                min_margin=float(min_margin) if np.isfinite(min_margin) else np.nan,
                done_reason=out.done_reason,
                trajectory=traj,
            )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSettings:
    n_episodes: int = 50
    explore_episodes: int = 3
    algorithm: str = BARRIER  # barrier | classifier
    ensemble_members: int = 3
    pnn_hidden: tuple = (32, 32)
    cbf_hidden: tuple = (32, 32)
    classifier_hidden: tuple = (64, 64)
    ensemble_epochs: int = 5
    ensemble_lr: float = 1e-3
    cbf_steps: int = 300
    cbf_lr: float = 1e-3
    classifier_steps: int = 300
    classifier_lr: float = 1e-3
    lipschitz_bound: float = 1.0
    safe_cap: int = 200
    buffer_capacity: int = 50_000
    hyper: CbfHyper = field(default_factory=CbfHyper)

    def __post_init__(self):
        if self.algorithm not in (BARRIER, CLASSIFIER):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0 <= self.explore_episodes <= self.n_episodes:
            raise ValueError("explore_episodes must be within [0, n_episodes]")


@dataclass
class TrainResult:
    ensemble: PnnEnsemble
    cbf: LipschitzCbf | None
    classifier: SafetyClassifier | None
    planner: Planner
    episodes: list
    cert_products: list
    buffer: TransitionBuffer | None = None
    safety: SafetyBuffers | None = None


def build_learner(
    params: EnvParams,
    task: TaskSpec,
    planner_cfg: PlannerConfig,
    settings: TrainSettings,
    stream: RandomStream,
):
    """Fresh ensemble/barrier (or classifier) plus the planner wired to them."""
    in_dim = model_input_dim(params.kind, task.task)
    out_dim = params.state_dim + 1
    ensemble = PnnEnsemble(
        in_dim, out_dim, settings.ensemble_members, settings.pnn_hidden, stream.child("ens")
    )
    model = LearnedModel(ensemble, params, task)
    if settings.algorithm == BARRIER:
        cbf = LipschitzCbf(
            barrier_input_dim(params.kind),
            settings.cbf_hidden,
            settings.lipschitz_bound,
            stream.child("cbf"),
        )
        planner = Planner(model, LearnedBarrier(cbf, params.kind), planner_cfg)
        return ensemble, cbf, None, planner
    clf = SafetyClassifier(
        barrier_input_dim(params.kind), settings.classifier_hidden, stream.child("clf")
    )
    planner = Planner(
        model,
        None,
        planner_cfg,
        constrained=False,
        penalty_classifier=EncodedClassifier(clf, params.kind),
    )
    return ensemble, None, clf, planner


def train_agent(
    params: EnvParams,
    task: TaskSpec,
    planner_cfg: PlannerConfig,
    settings: TrainSettings,
    seed: int,
    progress=None,
) -> TrainResult:
    """Episodic training loop: collect, then retrain model and safety net.

    ``progress`` is an optional callable(episode_index, EpisodeRecord).
    """
    stream = RandomStream(seed)
    env = Env(params, task)
    ensemble, cbf, clf, planner = build_learner(
        params, task, planner_cfg, settings, stream.child("init")
    )
    bufs = SafetyBuffers(settings.buffer_capacity)
    buffer = TransitionBuffer()
    episodes = []
    cert_products = []
    model_ready = False

    for ep in range(settings.n_episodes):
        explore = ep < settings.explore_episodes or not model_ready
        rec = run_episode(
            env,
            None if explore else planner,
            stream.child("episode", ep),
            bufs=bufs,
            buffer=buffer,
            safe_cap=settings.safe_cap,
        )
        hist = train_ensemble(
            ensemble,
            buffer,
            settings.ensemble_epochs,
            stream.child("train_ens", ep),
            lr=settings.ensemble_lr,
        )
        model_ready = model_ready or hist is not None
        if model_ready:
            if cbf is not None:
                ch = train_cbf(
                    cbf,
                    bufs,
                    ensemble,
                    settings.hyper,
                    params.kind,
                    settings.cbf_steps,
                    stream.child("train_cbf", ep),
                    lr=settings.cbf_lr,
                )
                cert_products.extend(ch["cert_product"])
            if clf is not None:
                train_classifier(
                    clf,
                    bufs,
                    params.kind,
                    settings.classifier_steps,
                    stream.child("train_clf", ep),
                    lr=settings.classifier_lr,
                )
        episodes.append(rec)
        if progress is not None:
            progress(ep, rec)
    return TrainResult(ensemble, cbf, clf, planner, episodes, cert_products, buffer, bufs)


# ---------------------------------------------------------------------------
# evaluation


def _episode_job(args):
    planner, params, task, seed, idx, record_trajectory = args
    env = Env(params, task)
    return run_episode(
        env,
        planner,
        RandomStream(seed, ("eval", idx)),
        record_trajectory=record_trajectory,
    )


def evaluate(
    planner: Planner,
    params: EnvParams,
    task: TaskSpec,
    seed: int,
    n_episodes: int,
    n_workers: int = 0,
    record_trajectory: bool = False,
) -> list[EpisodeRecord]:
    """Frozen-component evaluation; bitwise identical for any n_workers."""
    jobs = [
        (planner, params, task, seed, i, record_trajectory) for i in range(n_episodes)
    ]
    if n_workers and n_workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(n_workers) as pool:
            return pool.map(_episode_job, jobs)
    return [_episode_job(j) for j in jobs]


def summarize(records: list) -> dict:
    rewards = np.asarray([r.reward for r in records], dtype=np.float64)
    return {
        "ep_reward_mean": float(rewards.mean()),
        "ep_reward_std": float(rewards.std()),
        "success_pct": 100.0 * sum(r.success for r in records) / len(records),
        "safe_pct": 100.0 * sum(not r.collided for r in records) / len(records),
        "n_episodes": len(records),
    }


def oracle_planner(
    params: EnvParams, task: TaskSpec, cfg: PlannerConfig, margin: float = 0.05
) -> Planner:
    """Planner on the true dynamics with a handcrafted distance barrier; used
    to validate planning independently of learning."""
    model = OracleModel(params, task)
    barrier = HandcraftedBarrier(task.obstacles, params.robot_radius, margin)
    return Planner(model, barrier, cfg)
