"""Small builders shared by the test modules."""

import numpy as np

from convsup import policy as pol
from convsup.env import EnvSpec
from convsup.imitation import PlayerConfig, RoundRecord, empirical_loss, run_loop
from convsup.supervisor import RateSchedule, SyntheticSequence

ENV = EnvSpec()
DELTA = ENV.action_diameter


def synthetic_run(schedule="Harmonic", player="DaggerAggregate", n_rounds=200, seed=0, c=0.4, rho=0.9,
                  alpha_reg=1.0, **player_kw):
    seq = SyntheticSequence(ENV, RateSchedule(schedule, c, rho))
    cfg = PlayerConfig(kind=player, alpha_reg=alpha_reg, **player_kw)
    return run_loop(ENV, seq, cfg, n_rounds, seed=seed)


def manual_records(params_list, states_list, labels_list, final_labels_list=None, alpha_reg=1.0):
    """Round records built directly from arrays, for reduced oracle instances."""
    out = []
    for i, (p, s, y) in enumerate(zip(params_list, states_list, labels_list), start=1):
        yf = None if final_labels_list is None else final_labels_list[i - 1]
        out.append(RoundRecord(
            index=i, params=p, states=s, labels_current=y,
            loss_current=empirical_loss(p, s, y, alpha_reg), learner_return=0.0, rollout_seeds=(i,),
            labels_final=yf, loss_final=None if yf is None else empirical_loss(p, s, yf, alpha_reg),
        ))
    return out


def linear_template(state_dim=4, action_dim=2, **kw):
    return pol.zeros("LinearAffine", state_dim, action_dim, **kw)


def random_ball_point(template, rng, scale=1.0):
    """A point strictly inside the parameter ball."""
    v = rng.normal(size=template.dim)
    v *= scale * rng.uniform(0, 0.99) * template.radius / np.linalg.norm(v)
    return template.with_theta(v)
