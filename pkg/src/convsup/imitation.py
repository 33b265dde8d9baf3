"""On-policy imitation: roll out the learner, relabel with the current supervisor, update.

Three players are available: ``DaggerAggregate`` refits on every round's
data, ``GreedyPerRound`` fits the latest round only, and ``OGD`` takes one
projected gradient step with ``eta_i = eta_scale / (alpha * (i + eta_offset))``
where ``alpha = 2 * alpha_reg`` is the strong-convexity modulus of the loss.
``eta_scale = 0`` freezes the parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as pol
from .env import EnvSpec, rollout
from .supervisor import snapshot_final

PLAYERS = ("DaggerAggregate", "GreedyPerRound", "OGD")
SEEDINGS = ("fresh", "common")


@dataclass(frozen=True)
class PlayerConfig:
    kind: str = "DaggerAggregate"
    alpha_reg: float = 1.0
    rollouts_per_round: int = 1
    eta_scale: float = 1.0
    eta_offset: float = 0.0
    # "common" reuses the same start states and noise every round
    round_seeding: str = "fresh"
    mlp_epochs: int = 200
    mlp_step_size: float = 3e-3

    def __post_init__(self):
        if self.kind not in PLAYERS:
            raise ValueError(f"player kind must be one of {PLAYERS}, got {self.kind!r}")
        if self.round_seeding not in SEEDINGS:
            raise ValueError(f"round_seeding must be one of {SEEDINGS}")
        if self.rollouts_per_round < 1:
            raise ValueError("rollouts_per_round must be at least 1")
        if self.alpha_reg < 0 or self.eta_scale < 0 or self.eta_offset < 0:
            raise ValueError("alpha_reg, eta_scale and eta_offset must be nonnegative")
        if self.kind == "OGD" and self.alpha_reg == 0:
            raise ValueError("OGD step sizes 1/(alpha i) need alpha_reg > 0")

    @property
    def strong_convexity(self) -> float:
        return 2.0 * self.alpha_reg

    def step_size(self, i: int) -> float:
        return self.eta_scale / (self.strong_convexity * (i + self.eta_offset))


@dataclass(frozen=True, eq=False)
class RoundRecord:
    index: int
    params: pol.PolicyParams
    states: np.ndarray
    labels_current: np.ndarray
    loss_current: float
    learner_return: float
    rollout_seeds: tuple
    labels_final: np.ndarray | None = None
    loss_final: float | None = None
    supervisor_return: float | None = None
    timings: dict = field(default_factory=dict)

    @property
    def dataset(self) -> pol.LabeledDataset:
        return pol.LabeledDataset(self.states, self.labels_current)


@dataclass
class RunResult:
    records: list
    final_params: pol.PolicyParams
    final_supervisor: object
    sequence: object
    alpha_reg: float


class RoundError(RuntimeError):
    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
        self.round_index = round_index


def empirical_loss(params: pol.PolicyParams, states, labels, alpha_reg: float) -> float:
    states = np.atleast_2d(states)
    if len(states) == 0:
        raise ValueError("empirical loss of an empty state set is undefined")
    resid = pol.act_batch(params, states) - labels
    return float(np.mean(np.sum(resid**2, axis=1)) + alpha_reg * params.theta @ params.theta)


def loss_gradient(params: pol.PolicyParams, states, labels, alpha_reg: float) -> np.ndarray:
    states = np.atleast_2d(states)
    resid = pol.act_batch(params, states) - labels
    return pol.jacobian_vjp(params, states, 2.0 * resid / len(states)) + 2.0 * alpha_reg * params.theta


def _fit(player: PlayerConfig, data: pol.LabeledDataset, params: pol.PolicyParams, seed: int):
    if params.kind == "LinearAffine":
        return pol.fit_ridge(data, player.alpha_reg, params)
    return pol.fit_mlp(data, epochs=player.mlp_epochs, step_size=player.mlp_step_size, seed=seed,
                       alpha_reg=player.alpha_reg, template=params)


def update(player: PlayerConfig, history: list, params: pol.PolicyParams, seed: int = 0) -> pol.PolicyParams:
    """Parameters for the next round given all records so far and the current ones."""
    if not history:
        raise ValueError("update needs at least one completed round")
    last = history[-1]
    if player.kind == "DaggerAggregate":
        return _fit(player, pol.LabeledDataset.concatenate(r.dataset for r in history), params, seed)
    if player.kind == "GreedyPerRound":
        return _fit(player, last.dataset, params, seed)
    grad = loss_gradient(params, last.states, last.labels_current, player.alpha_reg)
    return pol.project(params.with_theta(params.theta - player.step_size(last.index) * grad))


def rollout_seed(run_seed: int, round_index: int, m: int) -> int:
    words = np.random.SeedSequence([int(run_seed), int(round_index), int(m)]).generate_state(2, np.uint32)
    return (int(words[0]) << 31) | (int(words[1]) >> 1)


def _timed_act(params, states) -> float:
    """Mean microseconds per single-state policy query."""
    start = time.perf_counter()
    for s in states:
        pol.act(params, s)
    return (time.perf_counter() - start) * 1e6 / len(states)


def run_loop(env: EnvSpec, sequence, player: PlayerConfig, n_rounds: int, seed: int = 0,
             initial: pol.PolicyParams | None = None, evaluate_supervisor: bool = False,
             backfill: bool = True) -> RunResult:
    """Run ``n_rounds`` of on-policy imitation and relabel everything with the final supervisor."""
    if n_rounds < 1:
        raise ValueError("n_rounds must be at least 1")
    params = initial if initial is not None else pol.template_for(env)
    records = []
    for i in range(1, n_rounds + 1):
        try:
            seed_round = 0 if player.round_seeding == "common" else i
            seeds = tuple(rollout_seed(seed, seed_round, m) for m in range(player.rollouts_per_round))
            controller = lambda s, p=params: pol.act(p, s)
            trajs = [rollout(env, controller, rs) for rs in seeds]
            states = np.concatenate([t.states[:-1] for t in trajs])
            learner_us = _timed_act(params, states)

            # Labels are requested after the episodes finish.
            sequence.observe(i, trajs)
            sup = sequence.at(i)
            start = time.perf_counter()
            labels = sup.label_batch(states)
            sup_us = (time.perf_counter() - start) * 1e6 / len(states)

            sup_return = None
            if evaluate_supervisor:
                sup_return = float(np.mean([rollout(env, sup.label, rs).total_reward for rs in seeds]))
            record = RoundRecord(
                index=i, params=params, states=states, labels_current=labels,
                loss_current=empirical_loss(params, states, labels, player.alpha_reg),
                learner_return=float(np.mean([t.total_reward for t in trajs])),
                rollout_seeds=seeds, supervisor_return=sup_return,
                timings={"learner_query_us": learner_us, "supervisor_query_us": sup_us},
            )
            records.append(record)
            params = update(player, records, params, seed=seed * 1_000_003 + i)
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(i, exc) from exc

    final = snapshot_final(sequence)
    if backfill:
        records = backfill_final_labels(records, final, player.alpha_reg)
    return RunResult(records, params, final, sequence, player.alpha_reg)


def backfill_final_labels(records: list, final_supervisor, alpha_reg: float) -> list:
    out = []
    for r in records:
        labels = final_supervisor.label_batch(r.states)
        out.append(replace(r, labels_final=labels,
                           loss_final=empirical_loss(r.params, r.states, labels, alpha_reg)))
    return out
