"""Deterministic ensemble of residual one-hidden-layer networks for one-step prediction.

Each member maps normalized ``(s, a)`` to a normalized state change::

    y = tanh(x W1 + b1) W2 + b2 + x L
    s' = s + y * out_std + out_mean

The linear skip ``L`` and the output layer start at zero, so an untrained
member predicts ``s' = s`` under identity normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .env import dynamics as true_dynamics


@dataclass
class TransitionBuffer:
    state_dim: int
    action_dim: int
    states: np.ndarray = None
    actions: np.ndarray = None
    next_states: np.ndarray = None
    episodes: np.ndarray = None

    def __post_init__(self):
        if self.states is None:
            self.states = np.empty((0, self.state_dim))
            self.actions = np.empty((0, self.action_dim))
            self.next_states = np.empty((0, self.state_dim))
            self.episodes = np.empty(0, dtype=int)

    def __len__(self):
        return len(self.states)

    def add(self, states, actions, next_states, episode: int):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        if states.shape != next_states.shape or states.shape[1] != self.state_dim:
            raise ValueError("states and next_states must both be (n, state_dim)")
        if actions.shape != (len(states), self.action_dim):
            raise ValueError("actions must be (n, action_dim)")
        if not all(np.all(np.isfinite(a)) for a in (states, actions, next_states)):
            raise ValueError("transitions must be finite")
        self.states = np.concatenate([self.states, states])
        self.actions = np.concatenate([self.actions, actions])
        self.next_states = np.concatenate([self.next_states, next_states])
        self.episodes = np.concatenate([self.episodes, np.full(len(states), episode, dtype=int)])

    def add_trajectory(self, traj, episode: int):
        self.add(traj.states[:-1], traj.applied_actions, traj.states[1:], episode)


@dataclass(frozen=True)
class Normalizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "Normalizer":
        d = state_dim + action_dim
        return cls(np.zeros(d), np.ones(d), np.zeros(state_dim), np.ones(state_dim))

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray, floor: float = 1e-6) -> "Normalizer":
        return cls(inputs.mean(0), np.maximum(inputs.std(0), floor),
                   targets.mean(0), np.maximum(targets.std(0), floor))

    def normalize_inputs(self, x):
        return (x - self.in_mean) / self.in_std

    def normalize_targets(self, y):
        return (y - self.out_mean) / self.out_std

    def denormalize_targets(self, z):
        return z * self.out_std + self.out_mean


@dataclass(frozen=True)
class DynamicsConfig:
    members: int = 3
    hidden: int = 32
    epochs: int = 100
    batch_size: int = 32
    step_size: float = 3e-3
    seed: int = 0
    holdout_fraction: float = 0.1


@dataclass(frozen=True, eq=False)
class DynamicsEnsemble:
    state_dim: int
    action_dim: int
    members: list  # list of dicts with W1, b1, W2, b2, L
    normalizer: Normalizer
    seeds: tuple = ()
    heldout_mse: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return len(self.members)

    @classmethod
    def untrained(cls, state_dim: int, action_dim: int, members: int = 3, hidden: int = 32, seed: int = 0):
        return cls(state_dim, action_dim,
                   [_init_member(state_dim + action_dim, hidden, state_dim, seed, m) for m in range(members)],
                   Normalizer.identity(state_dim, action_dim), tuple(range(members)))

    def _forward_normalized(self, m: int, x: np.ndarray) -> np.ndarray:
        p = self.members[m]
        return np.tanh(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"] + x @ p["L"]

    def predict_delta(self, m: int, states, actions) -> np.ndarray:
        x = self.normalizer.normalize_inputs(np.concatenate([states, actions], axis=-1))
        return self.normalizer.denormalize_targets(self._forward_normalized(m, x))

    def step_batch(self, states: np.ndarray, actions: np.ndarray, members: np.ndarray) -> np.ndarray:
        """Next states for rows of ``states``/``actions``; row k uses member ``members[k]``."""
        members = np.asarray(members)
        M, n = self.n_members, len(states)
        if n % M == 0 and np.array_equal(members, np.repeat(np.arange(M), n // M)):
            # the planner's member-major layout: one stacked forward pass for all members
            x = self.normalizer.normalize_inputs(np.concatenate([states, actions], axis=-1)).reshape(M, n // M, -1)
            W1, b1, W2, b2, L = self._stacked
            z = np.tanh(x @ W1 + b1) @ W2 + b2 + x @ L
            return states + self.normalizer.denormalize_targets(z.reshape(n, -1))
        out = np.empty_like(states)
        for m in range(M):
            rows = members == m
            if rows.any():
                out[rows] = states[rows] + self.predict_delta(m, states[rows], actions[rows])
        return out

    @cached_property
    def _stacked(self):
        W1, b1, W2, b2, L = (np.stack([p[k] for p in self.members]) for k in ("W1", "b1", "W2", "b2", "L"))
        return W1, b1[:, None, :], W2, b2[:, None, :], L

    def to_dict(self) -> dict:
        n = self.normalizer
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "members": [{k: v.tolist() for k, v in p.items()} for p in self.members],
            "normalizer": {k: getattr(n, k).tolist() for k in ("in_mean", "in_std", "out_mean", "out_std")},
            "seeds": list(self.seeds),
            "heldout_mse": list(self.heldout_mse),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsEnsemble":
        members = [{k: np.asarray(v, dtype=float) for k, v in p.items()} for p in d["members"]]
        norm = Normalizer(**{k: np.asarray(v, dtype=float) for k, v in d["normalizer"].items()})
        return cls(d["state_dim"], d["action_dim"], members, norm, tuple(d["seeds"]), tuple(d["heldout_mse"]))


def predict(ensemble: DynamicsEnsemble, member: int, state, action) -> np.ndarray:
    if not 0 <= member < ensemble.n_members:
        raise IndexError(f"member {member} out of range for an ensemble of {ensemble.n_members}")
    state = np.asarray(state, dtype=float)
    return state + ensemble.predict_delta(member, state[None], np.asarray(action, dtype=float)[None])[0]


def disagreement(ensemble: DynamicsEnsemble, state, action) -> float:
    """Largest pairwise distance between member predictions."""
    preds = np.array([predict(ensemble, m, state, action) for m in range(ensemble.n_members)])
    diffs = preds[:, None, :] - preds[None, :, :]
    return float(np.sqrt((diffs**2).sum(-1)).max())


def _init_member(n_in: int, hidden: int, n_out: int, seed: int, member: int) -> dict:
    rng = np.random.Generator(np.random.Philox(key=[int(seed), 5000 + member]))
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, hidden)),
        "b1": np.zeros(hidden),
        "W2": np.zeros((hidden, n_out)),
        "b2": np.zeros(n_out),
        "L": np.zeros((n_in, n_out)),
    }


def _train_member(p: dict, x: np.ndarray, y: np.ndarray, cfg: DynamicsConfig, rng) -> dict:
    p = {k: v.copy() for k, v in p.items()}
    mom = {k: np.zeros_like(v) for k, v in p.items()}
    vel = {k: np.zeros_like(v) for k, v in p.items()}
    n = len(x)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            h = np.tanh(xb @ p["W1"] + p["b1"])
            resid = h @ p["W2"] + p["b2"] + xb @ p["L"] - yb
            g = 2.0 * resid / resid.size
            dh = (g @ p["W2"].T) * (1.0 - h**2)
            grads = {"W2": h.T @ g, "b2": g.sum(0), "L": xb.T @ g, "W1": xb.T @ dh, "b1": dh.sum(0)}
            t += 1
            lr = cfg.step_size * (1.0 - 0.9 * t / total)
            for k, gk in grads.items():
                mom[k] = 0.9 * mom[k] + 0.1 * gk
                vel[k] = 0.999 * vel[k] + 0.001 * gk * gk
                p[k] -= lr * (mom[k] / (1 - 0.9**t)) / (np.sqrt(vel[k] / (1 - 0.999**t)) + 1e-8)
    return p


def fit_dynamics(buffer: TransitionBuffer, config: DynamicsConfig = DynamicsConfig()) -> DynamicsEnsemble:
    """Fit every member on the first 90% of the buffer; score it on the last 10%."""
    n = len(buffer)
    if n < 2 * config.batch_size:
        raise ValueError(f"buffer holds {n} transitions; need at least {2 * config.batch_size} "
                         f"(twice the batch size) to fit dynamics")
    n_hold = max(1, int(round(config.holdout_fraction * n)))
    n_train = n - n_hold
    inputs = np.concatenate([buffer.states, buffer.actions], axis=1)
    deltas = buffer.next_states - buffer.states
    norm = Normalizer.fit(inputs[:n_train], deltas[:n_train])
    x = norm.normalize_inputs(inputs)
    y = norm.normalize_targets(deltas)

    members, mses = [], []
    ensemble_seeds = tuple(config.seed * 1000 + m for m in range(config.members))
    for m, member_seed in enumerate(ensemble_seeds):
        rng = np.random.Generator(np.random.Philox(key=[member_seed, 17]))
        p = _init_member(inputs.shape[1], config.hidden, buffer.state_dim, member_seed, m)
        p = _train_member(p, x[:n_train], y[:n_train], config, rng)
        members.append(p)
    ens = DynamicsEnsemble(buffer.state_dim, buffer.action_dim, members, norm, ensemble_seeds)
    for m in range(config.members):
        pred = ens.predict_delta(m, buffer.states[n_train:], buffer.actions[n_train:])
        mses.append(float(np.mean((pred - deltas[n_train:]) ** 2)))
    return DynamicsEnsemble(buffer.state_dim, buffer.action_dim, members, norm, ensemble_seeds, tuple(mses))


class ExactModel:
    """Noise-free true dynamics exposed through the ensemble interface (one member)."""

    n_members = 1

    def __init__(self, env):
        self.env = env

    def step_batch(self, states, actions, members=None):
        return true_dynamics(self.env, states, actions)
