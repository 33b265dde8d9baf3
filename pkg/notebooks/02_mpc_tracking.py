"""
A fast linear learner tracking a slow planning supervisor
=========================================================

The supervisor plans with the cross-entropy method through a small ensemble
of learned dynamics models, refit after every episode on everything the
learner has visited. The learner is a linear policy refit by DAgger.

This takes a few minutes; pass a smaller ``ROUNDS`` to shorten it.
"""

import sys
from pathlib import Path

import numpy as np

from convsup import policy as pol
from convsup.cli import execute, timing_report
from convsup.config import load_config
from convsup.env import rollout

ROUNDS = int(sys.argv[1]) if len(sys.argv) > 1 else 15
cfg = load_config(Path(__file__).parent.parent / "configs" / "mpc_tracking.yaml")

# %%
# One seed. ``supervisor_return`` is the supervisor acting from the same start
# state and noise as the learner's episode.

run = execute(cfg, seed=0, n_rounds=ROUNDS)
print(f"{'episode':>7} {'learner':>9} {'supervisor':>11} {'gap':>6}")
for r in run.records:
    gap = abs(r.learner_return - r.supervisor_return) / abs(r.supervisor_return)
    print(f"{r.index:>7} {r.learner_return:9.3f} {r.supervisor_return:11.3f} {gap:6.1%}")

# %%
# Query cost on identical states: one matrix-vector product against a full
# planning problem per state.

params, sup = run.final_params, run.final_supervisor
states = rollout(cfg.env, lambda s: pol.act(params, s), 7).states[:-1]
rep = timing_report(lambda s: pol.act(params, s), sup.label, states)
print(f"learner {rep.learner_us_mean:.1f} us/query, supervisor {rep.supervisor_us_mean / 1e3:.1f} ms/query, "
      f"ratio {rep.ratio:.0f}")
print("held-out model error per member:", np.round(sup.model.heldout_mse, 6))
