"""Barrier-constrained sampling MPC.

Candidate action sequences are generated by filtered Gaussian sampling around
a warm-started mean, rolled out as particles through a stochastic model
ensemble, and checked step-by-step against a surrogate safety margin

    h(mu_e(s, a)) - kappa * h(s) - L_h * sqrt(tr(Sigma_e(s, a)))

evaluated with the same ensemble member that generated the particle's
transition. Candidates that violate the margin on any particle have their
prefix (actions, particle states, rewards) replaced by that of a randomly
chosen safe candidate, keeping the batch consistent at zero model cost. If
every candidate is unsafe the optimizer restarts with a zeroed mean; after
ell_max restarts it switches to a recovery mode that maximizes discounted
safety margins with no hard constraint.

The optimizer runs in stages: every stage but the last refines the sampling
mean with an exponentially reward-weighted average; the last stage returns
the argmax-reward sequence (lowest index on ties). A weighted average of safe
sequences is not itself guaranteed safe, which is why the final output is a
single sequence.

All randomness is drawn from counter-addressed child streams keyed by
(stage, attempt, step), so results are independent of evaluation order or
chunking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .streams import RandomStream

NOMINAL = "nominal"
RECOVERY = "recovery"


@dataclass
class PlannerConfig:
    horizon: int = 25
    n_candidates: int = 400
    n_particles: int = 5
    beta: float = 0.7
    action_std: float = 0.3
    gamma: float = 10.0
    kappa: float = 0.95
    ell_max: int = 5
    stages: int = 2
    action_dim: int = 2

    def __post_init__(self):
        if self.horizon < 1 or self.n_candidates < 2 or self.n_particles < 1:
            raise ValueError("need horizon >= 1, n_candidates >= 2, n_particles >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.gamma <= 0.0 or self.stages < 1:
            raise ValueError("gamma must be positive and stages >= 1")


@dataclass
class PlanResult:
    action_sequence: np.ndarray  # (H, q)
    applied_action: np.ndarray  # (q,)
    mode: str  # nominal | recovery
    restarts: int = 0
    replacements: int = 0
    min_margin: float = np.nan
    reward_estimate: float = np.nan
    particle_states: np.ndarray | None = None  # (P, H+1, n) of the chosen sequence
    particle_margins: np.ndarray | None = None  # (P, H)
    particle_rewards: np.ndarray | None = None  # (P, H)


def warm_start(prev_solution, horizon: int, action_dim: int):
    """Shift the previous solution by one (last element duplicated); zeros on
    the first call. Returns (mean_sequence, a_init)."""
    if prev_solution is None:
        return np.zeros((horizon, action_dim)), np.zeros(action_dim)
    prev = np.asarray(prev_solution, dtype=np.float64)
    mean = np.concatenate([prev[1:], prev[-1:]], axis=0)
    return mean, prev[0].copy()


def generate_sequences(mean, a_init, cfg: PlannerConfig, stream: RandomStream):
    """Filtered Gaussian action sampling, clamped to [-1, 1] componentwise."""
    N, H, q = cfg.n_candidates, cfg.horizon, cfg.action_dim
    noise = mean[None, :, :] + cfg.action_std * stream.normal(size=(N, H, q))
    acts = np.empty_like(noise)
    prev = np.broadcast_to(a_init, (N, q))
    for tau in range(H):
        prev = cfg.beta * noise[:, tau] + (1.0 - cfg.beta) * prev
        acts[:, tau] = prev
    return np.clip(acts, -1.0, 1.0)


def safety_margin(h_mu, h_cur, trace_cov, kappa: float, lipschitz: float):
    """Surrogate one-step safety margin; the step is safe iff it is >= 0."""
    return h_mu - kappa * h_cur - lipschitz * np.sqrt(trace_cov)


def mppi_update(actions, rewards, gamma: float):
    """Exponentially reward-weighted mean of the candidate sequences.

    The max reward is subtracted before exponentiating for stability.
    """
    w = np.exp(gamma * (rewards - np.max(rewards)))
    w /= w.sum()
    return np.einsum("i,ihq->hq", w, actions)


class _AllUnsafe(Exception):
    """Internal signal: every candidate violated the margin at some step."""


class Planner:
    """Receding-horizon sampling optimizer over a model/barrier pair.

    ``barrier=None`` disables the margin entirely (plain two-stage MPPI);
    ``constrained=False`` keeps margin bookkeeping but never replaces or
    restarts, which is the baseline mode used with classifier penalties.
    """

    def __init__(
        self,
        model,
        barrier,
        cfg: PlannerConfig,
        constrained: bool = True,
        penalty_classifier=None,
        penalty: float = -1000.0,
        penalty_threshold: float = 0.5,
    ):
        self.model = model
        self.barrier = barrier
        self.cfg = cfg
        self.constrained = constrained and barrier is not None
        self.penalty_classifier = penalty_classifier
        self.penalty = penalty
        self.penalty_threshold = penalty_threshold

    # -- rollout ----------------------------------------------------------

    def _rollout(self, s0, actions, stream: RandomStream, constrained: bool, objective: str):
        cfg = self.cfg
        N, H, _ = actions.shape
        P = cfg.n_particles
        n = len(s0)
        E = self.model.n_members
        L = self.barrier.lipschitz_bound if self.barrier is not None else 0.0

        states = np.empty((N, P, H + 1, n))
        states[:, :, 0] = s0
        rewards = np.zeros((N, P, H))
        margins = np.full((N, P, H), np.nan)
        replacements = 0

        for tau in range(H):
            S = states[:, :, tau].reshape(N * P, n)
            A = np.repeat(actions[:, tau, :], P, axis=0)
            members = stream.child("member", tau).integers(0, E, size=N * P)
            mu, var, mu_r, var_r = self.model.predict(members, S, A)
            if not np.all(np.isfinite(mu)):
                # non-finite model outputs: poison the margin so the candidate
                # is treated as unsafe rather than crashing the solver
                bad = ~np.all(np.isfinite(mu), axis=1)
                mu = np.where(np.isfinite(mu), mu, 0.0)
                var = np.where(np.isfinite(var), var, 0.0)
            else:
                bad = None
            trace = var.sum(axis=1)

            if self.barrier is not None:
                h_cur = self.barrier.value(S)
                h_mu = self.barrier.value(mu)
                marg = safety_margin(h_mu, h_cur, trace, cfg.kappa, L)
                if bad is not None:
                    marg[bad] = -np.inf
                margins[:, :, tau] = marg.reshape(N, P)

            z = stream.child("noise", tau).normal(size=(N * P, n))
            nxt = mu + np.sqrt(var) * z
            states[:, :, tau + 1] = nxt.reshape(N, P, n)

            if objective == RECOVERY:
                r = margins[:, :, tau].reshape(-1) / (tau + 1.0)
            else:
                r = mu_r + np.sqrt(var_r) * stream.child("rnoise", tau).normal(size=N * P)
                if self.penalty_classifier is not None:
                    unsafe_pred = self.penalty_classifier.prob(nxt) > self.penalty_threshold
                    r = r + self.penalty * unsafe_pred
            rewards[:, :, tau] = r.reshape(N, P)

            if constrained:
                step_unsafe = np.any(margins[:, :, tau] < 0, axis=1)
                if np.any(step_unsafe):
                    safe_idx = np.flatnonzero(~step_unsafe)
                    if safe_idx.size == 0:
                        raise _AllUnsafe
                    unsafe_idx = np.flatnonzero(step_unsafe)
                    pick = stream.child("donor", tau).integers(0, safe_idx.size, size=unsafe_idx.size)
                    donors = safe_idx[pick]
                    actions[unsafe_idx, : tau + 1] = actions[donors, : tau + 1]
                    states[unsafe_idx, :, : tau + 2] = states[donors, :, : tau + 2]
                    rewards[unsafe_idx, :, : tau + 1] = rewards[donors, :, : tau + 1]
                    margins[unsafe_idx, :, : tau + 1] = margins[donors, :, : tau + 1]
                    replacements += unsafe_idx.size

        r_hat = rewards.sum(axis=2).mean(axis=1)
        return {
            "actions": actions,
            "states": states,
            "rewards": rewards,
            "margins": margins,
            "r_hat": r_hat,
            "replacements": replacements,
        }

    # -- optimization stages ----------------------------------------------

    def _optimize(self, s0, mean, a_init, stream: RandomStream, constrained: bool, objective: str):
        """Multi-stage loop; returns (result dict, restarts) or raises
        _AllUnsafe with the restart budget exhausted."""
        cfg = self.cfg
        ell = 0
        res = None
        stage = 0
        while stage < cfg.stages:
            attempt = 0
            while True:
                acts = generate_sequences(mean, a_init, cfg, stream.child("gen", stage, attempt))
                try:
                    res = self._rollout(
                        s0, acts, stream.child("roll", stage, attempt), constrained, objective
                    )
                    break
                except _AllUnsafe:
                    ell += 1
                    if ell > cfg.ell_max:
                        raise
                    mean = np.zeros_like(mean)
                    a_init = np.zeros(cfg.action_dim)
                    attempt += 1
            if stage < cfg.stages - 1:
                mean = mppi_update(res["actions"], res["r_hat"], cfg.gamma)
                a_init = mean[0].copy()
            stage += 1
        return res, ell

    def _result(self, res, mode: str, restarts: int) -> PlanResult:
        best = int(np.argmax(res["r_hat"]))  # argmax breaks ties at lowest index
        margins = res["margins"][best]
        return PlanResult(
            action_sequence=res["actions"][best].copy(),
            applied_action=res["actions"][best, 0].copy(),
            mode=mode,
            restarts=restarts,
            replacements=res["replacements"],
            min_margin=float(np.nanmin(margins)) if np.any(np.isfinite(margins)) else np.nan,
            reward_estimate=float(res["r_hat"][best]),
            particle_states=res["states"][best].copy(),
            particle_margins=margins.copy(),
            particle_rewards=res["rewards"][best].copy(),
        )

    def plan(self, s0, prev_solution, stream: RandomStream) -> PlanResult:
        s0 = np.asarray(s0, dtype=np.float64)
        if not np.all(np.isfinite(s0)):
            raise ValueError("initial state must be finite")
        mean, a_init = warm_start(prev_solution, self.cfg.horizon, self.cfg.action_dim)
        try:
            res, ell = self._optimize(s0, mean, a_init, stream, self.constrained, "task")
        except _AllUnsafe:
            out = self.plan_recovery(s0, stream)
            out.restarts = self.cfg.ell_max
            return out
        return self._result(res, NOMINAL, ell)

    def plan_recovery(self, s0, stream: RandomStream) -> PlanResult:
        """Constraint-free MPC maximizing 1/(tau+1)-weighted safety margins."""
        s0 = np.asarray(s0, dtype=np.float64)
        mean = np.zeros((self.cfg.horizon, self.cfg.action_dim))
        a_init = np.zeros(self.cfg.action_dim)
        res, _ = self._optimize(s0, mean, a_init, stream.child("recovery"), False, RECOVERY)
        return self._result(res, RECOVERY, 0)
