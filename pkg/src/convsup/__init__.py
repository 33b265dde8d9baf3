"""Imitation learning from a supervisor that improves over time."""

from .env import EnvSpec, Trajectory, rollout
from .imitation import PlayerConfig, RoundRecord, RunResult, run_loop
from .policy import LabeledDataset, PolicyParams
from .regret import RegretReport, regret_report
from .supervisor import MpcSequence, PlanConfig, RateSchedule, SyntheticSequence

__version__ = "0.1.0"
