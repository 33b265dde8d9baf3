"""Indexed supervisor sequences.

A sequence produces one labeler per round. Two families are provided:

``SyntheticSequence``
    ``psi_i(s) = clip(psi*(s) + f_i * u(s))`` where ``psi*`` is a PD rule and
    ``u`` a fixed smooth unit-norm field. Because ``||u|| = 1``,
    ``||psi_i(s) - psi_N(s)|| = |f_i - f_N|`` before clipping, so a decreasing
    schedule gives labels that are Cauchy with envelope ``f_i``.

``MpcSequence``
    Model-predictive control with the cross-entropy method over a dynamics
    ensemble that is refit on the learner's transitions after every round.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dynamics as dyn
from .env import EnvSpec, random_controller, reward, rollout

SCHEDULES = ("Harmonic", "Sqrt", "Geometric", "Constant", "Alternating", "Zero")


@dataclass(frozen=True)
class RateSchedule:
    """Perturbation amplitude ``f_i`` by round (rounds count from 1).

    ``Constant`` keeps the same offset every round, so the labelers never
    change. ``Alternating`` flips the sign of the offset each round, the
    non-converging negative control: consecutive labelers differ by ``2c``.
    """

    kind: str = "Harmonic"
    c: float = 0.4
    rho: float = 0.9

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"schedule kind must be one of {SCHEDULES}, got {self.kind!r}")
        if self.kind != "Zero" and not self.c > 0:
            raise ValueError("schedule constant c must be positive")
        if self.kind == "Geometric" and not 0 < self.rho < 1:
            raise ValueError("Geometric schedule needs rho in (0, 1)")

    def amplitude(self, i: int) -> float:
        if i < 1:
            raise ValueError("rounds are numbered from 1")
        if self.kind == "Harmonic":
            return self.c / i
        if self.kind == "Sqrt":
            return self.c / np.sqrt(i)
        if self.kind == "Geometric":
            return self.c * self.rho**i
        if self.kind == "Zero":
            return 0.0
        return self.c

    def signed(self, i: int) -> float:
        """Signed coefficient on the perturbation field at round ``i``."""
        if self.kind == "Alternating":
            return self.c * (-1.0) ** i
        return self.amplitude(i)

    @property
    def converges(self) -> bool:
        return self.kind in ("Harmonic", "Sqrt", "Geometric", "Zero")


# ----------------------------------------------------------------- synthetic

_FIELD_FREQ = np.array([1.7, -1.1, 0.9, 1.3])


def perturbation_field(states) -> np.ndarray:
    """Smooth field with ``||u(s)|| = 1`` everywhere."""
    phase = np.asarray(states, dtype=float) @ _FIELD_FREQ + 0.3
    return np.stack([np.cos(phase), np.sin(phase)], axis=-1)


@dataclass(frozen=True)
class SyntheticSupervisor:
    env: EnvSpec
    schedule: RateSchedule
    index: int
    kp: float = 1.5
    kd: float = 1.8

    kind = "Synthetic"

    def base_rule(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return self.kp * (np.asarray(self.env.goal) - states[..., :2]) - self.kd * states[..., 2:]

    def raw_labels(self, states) -> np.ndarray:
        """Labels before clipping to the action box."""
        return self.base_rule(states) + self.schedule.signed(self.index) * perturbation_field(states)

    def label_batch(self, states) -> np.ndarray:
        return np.clip(self.raw_labels(np.atleast_2d(states)), self.env.low, self.env.high)

    def label(self, state) -> np.ndarray:
        return self.label_batch(np.asarray(state, dtype=float)[None])[0]


class SyntheticSequence:
    def __init__(self, env: EnvSpec, schedule: RateSchedule, kp: float = 1.5, kd: float = 1.8):
        self.env, self.schedule, self.kp, self.kd = env, schedule, kp, kd
        self.rounds_observed = 0

    def at(self, i: int) -> SyntheticSupervisor:
        return SyntheticSupervisor(self.env, self.schedule, i, self.kp, self.kd)

    def observe(self, i: int, trajectories) -> None:
        self.rounds_observed = i


# ----------------------------------------------------------------- CEM

@dataclass(frozen=True)
class PlanConfig:
    horizon: int = 15
    population: int = 200
    elites: int = 20
    iterations: int = 5
    particles: int | None = None  # per candidate; None means one per ensemble member
    init_std_fraction: float = 0.5
    min_std: float = 1e-3
    # Also score the initial mean (the box center, i.e. "do nothing" for a
    # symmetric box) so flat objectives are not resolved by sampling noise.
    score_center: bool = True

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1 or self.population < 1:
            raise ValueError("horizon, population and iterations must be at least 1")
        if not 1 <= self.elites <= self.population:
            raise ValueError(f"elites ({self.elites}) must lie in [1, population={self.population}]")
        if self.particles is not None and self.particles < 1:
            raise ValueError("particles must be at least 1")


@dataclass
class CemResult:
    plan: np.ndarray  # (H, action_dim)
    best_return: float
    best_history: list  # best-seen return after each iteration
    clamped_iterations: int = 0


def planning_reward(env: EnvSpec) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """True reward scored at the post-action state, as the planner sees it."""

    def score(next_states, actions):
        return reward(env, next_states, actions)

    return score


def cem_plan(model, state, config: PlanConfig, reward_fn, action_low, action_high,
             seed: int | tuple = 0) -> CemResult:
    """Cross-entropy search over open-loop action sequences.

    Every candidate is scored by the mean return of ``particles`` simulated
    rollouts; particle ``k`` uses ensemble member ``k % n_members`` for the
    whole horizon. The sampling Gaussian is refit to the top ``elites``
    candidates each iteration, the refit mean is scored as one more candidate
    (as is the initial center when ``score_center`` is set), and the best
    sequence seen overall is returned.
    """
    low, high = np.asarray(action_low, dtype=float), np.asarray(action_high, dtype=float)
    H, P, K = config.horizon, config.population, config.elites
    A = low.size
    key = list(seed) if isinstance(seed, tuple) else [int(seed), 0]
    rng = np.random.Generator(np.random.Philox(key=key))
    n_members = getattr(model, "n_members", 1)
    n_particles = config.particles or n_members
    state = np.asarray(state, dtype=float)

    def evaluate(candidates):
        seqs = np.tile(candidates, (n_particles, 1, 1))
        rows = np.repeat(np.arange(n_particles) % n_members, len(candidates))
        s = np.tile(state, (len(seqs), 1))
        returns = np.zeros(len(seqs))
        for t in range(H):
            s = model.step_batch(s, seqs[:, t], rows)
            returns += reward_fn(s, seqs[:, t])
        return returns.reshape(n_particles, len(candidates)).mean(axis=0)

    mean = np.tile((low + high) / 2.0, (H, 1))
    std = np.tile(config.init_std_fraction * (high - low), (H, 1))
    best_return, best_plan, history, clamped = -np.inf, None, [], 0
    # Extra single candidates (the center, then each refit mean) ride along
    # with the next population batch so they add no per-call overhead.
    pending = mean[None].copy() if config.score_center else np.empty((0, H, A))
    for _ in range(config.iterations):
        samples = np.clip(mean + std * rng.standard_normal((P, H, A)), low, high)
        returns = evaluate(np.concatenate([pending, samples]))
        for k in range(len(pending)):
            if returns[k] > best_return:
                best_return, best_plan = float(returns[k]), pending[k].copy()
        returns = returns[len(pending):]
        order = np.argsort(-returns, kind="stable")
        if returns[order[0]] > best_return:
            best_return, best_plan = float(returns[order[0]]), samples[order[0]].copy()
        elites = samples[order[:K]]
        mean = elites.mean(axis=0)
        new_std = elites.std(axis=0)
        if np.any(new_std < config.min_std):
            clamped += 1
        std = np.maximum(new_std, config.min_std)
        # The refit mean is itself a candidate; it averages out per-step sampling noise.
        pending = mean[None].copy()
        history.append(best_return)
    final_mean_return = float(evaluate(pending)[0])
    if final_mean_return > best_return:
        best_return, best_plan = final_mean_return, pending[0].copy()
        history[-1] = best_return
    return CemResult(best_plan, best_return, history, clamped)


def state_key(state) -> int:
    """Stable 63-bit hash of a state's bytes."""
    digest = hashlib.blake2b(np.ascontiguousarray(state, dtype=float).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True, eq=False)
class MpcSupervisor:
    env: EnvSpec
    model: object  # DynamicsEnsemble or ExactModel
    config: PlanConfig
    index: int
    seed: int = 0

    kind = "MpcCem"

    def plan(self, state) -> CemResult:
        state = np.asarray(state, dtype=float)
        key = (state_key(state) ^ (self.seed << 20), self.index)
        return cem_plan(self.model, state, self.config, planning_reward(self.env),
                        self.env.low, self.env.high, seed=key)

    def label(self, state) -> np.ndarray:
        return np.clip(self.plan(state).plan[0], self.env.low, self.env.high)

    def label_batch(self, states) -> np.ndarray:
        return np.array([self.label(s) for s in np.atleast_2d(states)])


class MpcSequence:
    """PETS-style improving supervisor: the ensemble is refit after each round."""

    def __init__(self, env: EnvSpec, plan_config: PlanConfig = PlanConfig(),
                 dynamics_config: dyn.DynamicsConfig = dyn.DynamicsConfig(),
                 seed_rollouts: int = 1, seed: int = 0):
        self.env = env
        self.plan_config = plan_config
        self.dynamics_config = dynamics_config
        self.seed = seed
        self.buffer = dyn.TransitionBuffer(env.state_dim, env.action_dim)
        for k in range(seed_rollouts):
            rollout_seed = 10_000_019 * (seed + 1) + k
            self.buffer.add_trajectory(rollout(env, random_controller(env, rollout_seed), rollout_seed), episode=0)
        self.ensembles: dict[int, dyn.DynamicsEnsemble] = {}
        self.rounds_observed = 0

    def observe(self, i: int, trajectories) -> None:
        for traj in trajectories:
            self.buffer.add_trajectory(traj, episode=i)
        cfg = self.dynamics_config
        cfg = dyn.DynamicsConfig(cfg.members, cfg.hidden, cfg.epochs, cfg.batch_size, cfg.step_size,
                                 seed=cfg.seed + 7919 * i, holdout_fraction=cfg.holdout_fraction)
        self.ensembles[i] = dyn.fit_dynamics(self.buffer, cfg)
        self.rounds_observed = i

    def at(self, i: int) -> MpcSupervisor:
        if i not in self.ensembles:
            raise KeyError(f"no dynamics model has been fit for round {i}")
        return MpcSupervisor(self.env, self.ensembles[i], self.plan_config, i, self.seed)


def snapshot_final(sequence):
    """Frozen last observed labeler, usable to relabel any stored state."""
    if sequence.rounds_observed < 1:
        raise RuntimeError("snapshot_final called before any round was observed")
    return sequence.at(sequence.rounds_observed)
