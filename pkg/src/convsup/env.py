"""Finite-horizon point-mass reaching environments.

State is ``(px, py, vx, vy)``, action is a 2-D force. Both environments are
double integrators with velocity damping; ``NonlinReach`` adds a bounded,
position-dependent drift to the velocity update::

    p' = p + dt * v
    v' = (1 - mu) * v + dt * clip(a) + dt * drift(p) + sigma * w
    r  = -||p - g||^2 - lam * ||clip(a)||^2

with ``drift(p) = drift_scale * (sin(pi * py), -sin(pi * px))`` for
``NonlinReach`` and zero otherwise. The reward is evaluated at the
pre-step position.

Randomness is never drawn inside :func:`step`. Start states and noise come
from counter-based Philox streams keyed by the rollout seed, so a rollout is
a pure function of ``(env, controller, seed)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

KINDS = ("LinReach", "NonlinReach")

# Philox key words separating the two per-seed streams.
_START_STREAM = 0
_NOISE_STREAM = 1


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "LinReach"
    horizon: int = 50
    dt: float = 0.1
    damping: float = 0.05
    noise_std: float = 0.02
    action_cost: float = 0.01
    goal: tuple[float, float] = (0.5, 0.25)
    action_low: tuple[float, float] = (-1.0, -1.0)
    action_high: tuple[float, float] = (1.0, 1.0)
    start_center: tuple[float, float] = (0.0, 0.0)
    start_width: float = 0.5
    drift_scale: float = 0.5
    state_dim: int = field(default=4, init=False)
    action_dim: int = field(default=2, init=False)

    def __post_init__(self):
        for name in ("goal", "action_low", "action_high", "start_center"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2:
                raise ValueError(f"{name} must have 2 entries, got {len(value)}")
            object.__setattr__(self, name, value)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.noise_std < 0 or self.action_cost < 0 or self.start_width < 0:
            raise ValueError("noise_std, action_cost and start_width must be nonnegative")
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be strictly below action_high")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high)

    @property
    def action_diameter(self) -> float:
        """Diameter of the action box (largest distance between two actions)."""
        return float(np.linalg.norm(self.high - self.low))

    @property
    def action_sup_norm(self) -> float:
        """Largest action norm inside the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.low), np.abs(self.high))))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("state_dim")
        d.pop("action_dim")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(**d)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (T+1, state_dim)
    actions: np.ndarray  # (T, action_dim), raw controller outputs
    applied_actions: np.ndarray  # (T, action_dim), clipped
    rewards: np.ndarray  # (T,)
    seed: int

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.applied_actions, other.applied_actions)
            and np.array_equal(self.rewards, other.rewards)
        )


def _stream(seed: int, word: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seeds must be nonnegative integers")
    return np.random.Generator(np.random.Philox(key=[int(seed), word]))


def noise_draws(env: EnvSpec, seed: int) -> np.ndarray:
    """Standard-normal velocity noise for every step of the rollout keyed by ``seed``."""
    return _stream(seed, _NOISE_STREAM).standard_normal((env.horizon, 2))


def reset(env: EnvSpec, seed: int) -> np.ndarray:
    rng = _stream(seed, _START_STREAM)
    half = env.start_width / 2.0
    pos = np.asarray(env.start_center) + rng.uniform(-half, half, size=2)
    return np.concatenate([pos, np.zeros(2)])


def clip_action(env: EnvSpec, action: np.ndarray) -> np.ndarray:
    return np.clip(action, env.low, env.high)


def drift(env: EnvSpec, positions: np.ndarray) -> np.ndarray:
    """Velocity drift of ``NonlinReach``; zero for ``LinReach``. Works on batches."""
    positions = np.asarray(positions, dtype=float)
    if env.kind == "LinReach":
        return np.zeros_like(positions)
    px, py = positions[..., 0], positions[..., 1]
    return env.drift_scale * np.stack([np.sin(np.pi * py), -np.sin(np.pi * px)], axis=-1)


def dynamics(env: EnvSpec, states: np.ndarray, actions: np.ndarray, noise: np.ndarray | float = 0.0) -> np.ndarray:
    """Vectorized transition on already-clipped actions; leading dims broadcast."""
    p, v = states[..., :2], states[..., 2:]
    p_next = p + env.dt * v
    v_next = (1.0 - env.damping) * v + env.dt * actions + env.dt * drift(env, p) + env.noise_std * noise
    return np.concatenate([p_next, v_next], axis=-1)


def reward(env: EnvSpec, states: np.ndarray, applied_actions: np.ndarray) -> np.ndarray:
    """Reward for (batches of) states and clipped actions."""
    err = states[..., :2] - np.asarray(env.goal)
    return -np.sum(err**2, axis=-1) - env.action_cost * np.sum(applied_actions**2, axis=-1)


def step(env: EnvSpec, state, action, noise_draw) -> tuple[np.ndarray, float]:
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    noise_draw = np.asarray(noise_draw, dtype=float)
    if state.shape != (env.state_dim,) or action.shape != (env.action_dim,):
        raise ValueError(f"expected state {(env.state_dim,)} and action {(env.action_dim,)}, "
                         f"got {state.shape} and {action.shape}")
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise ValueError(f"non-finite input to step: state={state}, action={action}")
    if noise_draw.shape not in ((), (2,)):
        raise ValueError(f"noise_draw is velocity noise of shape (2,), got {noise_draw.shape}")
    applied = clip_action(env, action)
    r = float(reward(env, state, applied))
    return dynamics(env, state, applied, noise_draw), r


def rollout(env: EnvSpec, controller: Callable[[np.ndarray], np.ndarray], seed: int) -> Trajectory:
    T = env.horizon
    noise = noise_draws(env, seed)
    states = np.empty((T + 1, env.state_dim))
    actions = np.empty((T, env.action_dim))
    applied = np.empty((T, env.action_dim))
    rewards = np.empty(T)
    states[0] = reset(env, seed)
    for t in range(T):
        a = np.asarray(controller(states[t]), dtype=float)
        if a.shape != (env.action_dim,):
            raise ValueError(f"controller returned shape {a.shape}, expected ({env.action_dim},)")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"controller returned non-finite action {a} at t={t}")
        actions[t] = a
        applied[t] = clip_action(env, a)
        rewards[t] = reward(env, states[t], applied[t])
        states[t + 1] = dynamics(env, states[t], applied[t], noise[t])
    return Trajectory(states, actions, applied, rewards, int(seed))


def random_controller(env: EnvSpec, seed: int) -> Callable[[np.ndarray], np.ndarray]:
    """Uniform-random actions over the box, reproducible from ``seed``."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed), 7]))

    def controller(_state):
        return rng.uniform(env.low, env.high)

    return controller


def pd_controller(env: EnvSpec, kp: float, kd: float) -> Callable[[np.ndarray], np.ndarray]:
    goal = np.asarray(env.goal)

    def controller(state):
        return kp * (goal - state[:2]) - kd * state[2:]

    return controller
