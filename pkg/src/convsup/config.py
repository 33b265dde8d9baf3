"""Experiment configuration: a versioned YAML document validated into dataclasses.

Every section maps onto one library dataclass, so unknown keys and bad values
are reported with the dotted name of the offending field::

    schema_version: 1
    rounds: 200
    seeds: [0, 1, 2]
    env: {kind: LinReach}
    policy: {kind: LinearAffine}
    supervisor:
      kind: Synthetic
      schedule: {kind: Harmonic, c: 0.4}
    player: {kind: DaggerAggregate, alpha_reg: 1.0}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import policy as pol
from .dynamics import DynamicsConfig
from .env import EnvSpec
from .imitation import PlayerConfig
from .supervisor import PlanConfig, RateSchedule

SCHEMA_VERSION = 1
SUPERVISOR_KINDS = ("Synthetic", "MpcCem")


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"config field '{field_name}': {reason}")
        self.field = field_name
        self.reason = reason


@dataclass(frozen=True)
class PolicySection:
    kind: str = "LinearAffine"
    radius: float = 50.0
    feature_clip: float = 10.0
    feature_scale: float = 0.1
    hidden: tuple = (20, 20)
    members: int = 5
    activation: str = "swish"

    def template(self, env: EnvSpec) -> pol.PolicyParams:
        kw = dict(radius=self.radius, feature_clip=self.feature_clip, feature_scale=self.feature_scale)
        if self.kind == "MlpEnsemble":
            kw.update(hidden=tuple(self.hidden), members=self.members, activation=self.activation)
        return pol.template_for(env, self.kind, **kw)


@dataclass(frozen=True)
class SupervisorSection:
    kind: str = "Synthetic"
    schedule: RateSchedule = RateSchedule()
    kp: float = 1.5
    kd: float = 1.8
    plan: PlanConfig = PlanConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    seed_rollouts: int = 1


@dataclass(frozen=True)
class FlagsSection:
    evaluate_supervisor_rollout: bool = False
    emit_prefix_comparators: bool = True
    checkpoint_every: int = 0  # 0 keeps only the final parameters


@dataclass(frozen=True)
class TimingSection:
    learner_queries: int = 1000
    supervisor_queries: int = 50
    train_rounds: int = 2
    checkpoint: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    rounds: int = 20
    seeds: tuple = (0,)
    output: str | None = None
    env: EnvSpec = EnvSpec()
    policy: PolicySection = PolicySection()
    supervisor: SupervisorSection = SupervisorSection()
    player: PlayerConfig = PlayerConfig()
    flags: FlagsSection = FlagsSection()
    timing: TimingSection = TimingSection()

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(int(s) for s in seeds))

    def to_dict(self) -> dict:
        return _plain(self)

    def digest(self) -> str:
        """Hash of every setting that influences non-timing outputs."""
        d = self.to_dict()
        for key in ("output", "seeds", "timing"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _coerce(name: str, value, annotation: str):
    """Check a scalar value against a field's annotation string."""
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(name, "must not be null")
    base = annotation.split("|")[0].strip()
    if base.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(name, "must be a list")
        return tuple(value)
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"must be a number, got {value!r}")
        return float(value)
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"must be an integer, got {value!r}")
        return value
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(name, f"must be true or false, got {value!r}")
        return value
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(name, f"must be a string, got {value!r}")
        return value
    return value


def _build(cls, data, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, "must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}" if prefix else unknown[0],
                          f"unknown field (allowed: {', '.join(sorted(fields))})")
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        default = fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name)
        else:
            kwargs[key] = _coerce(name, value, str(fields[key].type))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(prefix or "<root>", str(exc)) from exc


def _check(cfg: ExperimentConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {cfg.schema_version}")
    if cfg.rounds < 1:
        raise ConfigError("rounds", "must be at least 1")
    if not cfg.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds", "seeds must be nonnegative integers")
    if cfg.policy.kind not in pol.KINDS:
        raise ConfigError("policy.kind", f"must be one of {pol.KINDS}")
    if cfg.policy.activation not in pol.ACTIVATIONS:
        raise ConfigError("policy.activation", f"must be one of {pol.ACTIVATIONS}")
    sup = cfg.supervisor
    if sup.kind not in SUPERVISOR_KINDS:
        raise ConfigError("supervisor.kind", f"must be one of {SUPERVISOR_KINDS}")
    if sup.kind == "MpcCem":
        if sup.plan.elites >= sup.plan.population:
            raise ConfigError("supervisor.plan.elites",
                              f"CEM needs elites < population (got elites={sup.plan.elites}, "
                              f"population={sup.plan.population}); refitting to every sample never narrows the search")
        if sup.seed_rollouts < 1:
            raise ConfigError("supervisor.seed_rollouts", "at least one random rollout is needed to fit dynamics")
        # The first ensemble fit sees the seed rollouts plus one round of learner data.
        n_transitions = (sup.seed_rollouts + cfg.player.rollouts_per_round) * cfg.env.horizon
        if n_transitions < 2 * sup.dynamics.batch_size:
            raise ConfigError("supervisor.dynamics.batch_size",
                              f"first fit would see {n_transitions} transitions, fewer than twice the batch size")
    if cfg.flags.checkpoint_every < 0:
        raise ConfigError("flags.checkpoint_every", "must be nonnegative")
    if cfg.timing.learner_queries < 1000:
        raise ConfigError("timing.learner_queries", "at least 1000 learner queries are timed")
    if cfg.timing.supervisor_queries < 50:
        raise ConfigError("timing.supervisor_queries", "at least 50 supervisor queries are timed")
    if cfg.timing.train_rounds < 1:
        raise ConfigError("timing.train_rounds", "must be at least 1")


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if "schema_version" not in data:
        raise ConfigError("schema_version", "missing; add 'schema_version: 1'")
    cfg = _build(ExperimentConfig, data, "")
    _check(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from exc
    return config_from_dict(data)
