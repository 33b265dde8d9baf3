import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convsup import policy as pol
from convsup import regret as R
from convsup.imitation import PlayerConfig, empirical_loss, loss_gradient, update

from helpers import DELTA, ENV, linear_template, manual_records, random_ball_point, synthetic_run


def random_instance(n_rounds=6, n_states=30, seed=0, drift=0.3, template=None):
    """Records with random states, played parameters and a drifting labeler."""
    rng = np.random.default_rng(seed)
    t = template or linear_template()
    sd = t.state_dim
    W = rng.normal(size=(t.action_dim, sd))
    states = [rng.normal(0, 0.3, (n_states, sd)) for _ in range(n_rounds)]
    shifts = [drift * rng.normal(size=t.action_dim) for _ in range(n_rounds)]
    cur = [np.clip(s @ W.T + shifts[k], -1, 1) for k, s in enumerate(states)]
    fin = [np.clip(s @ W.T + shifts[-1], -1, 1) for s in states]
    params = [random_ball_point(t, rng, 0.05) for _ in range(n_rounds)]
    return manual_records(params, states, cur, fin)


# ----------------------------------------------------------------- comparators


@pytest.mark.parametrize("kind", R.COMPARATORS)
def test_comparator_beats_random_interior_points(kind):
    records = random_instance(seed=1)
    rng = np.random.default_rng(2)
    for round_index in (1, 4):
        comp = R.solve_comparator(kind, records, 1.0, round_index=round_index)
        assert comp.objective == pytest.approx(R.comparator_objective(kind, records, comp.params, 1.0, comp.rounds))
        for _ in range(100):
            other = random_ball_point(comp.params, rng, 0.2)
            assert comp.objective <= R.comparator_objective(kind, records, other, 1.0, comp.rounds) + 1e-12
            near = comp.params.with_theta(comp.params.theta + 1e-3 * rng.normal(size=comp.params.dim))
            assert comp.objective <= R.comparator_objective(kind, records, near, 1.0, comp.rounds) + 1e-12


@pytest.mark.parametrize("kind", R.COMPARATORS)
def test_interior_comparator_has_zero_gradient(kind):
    records = random_instance(seed=3)
    comp = R.solve_comparator(kind, records, 1.0, round_index=2)
    assert np.linalg.norm(comp.params.theta) < comp.params.radius
    source = "seq" if kind.endswith("Seq") else "final"
    labels = {r.index: (r.labels_current if source == "seq" else r.labels_final) for r in records}
    grad = sum(loss_gradient(comp.params, r.states, labels[r.index], 1.0) for r in records if r.index in comp.rounds)
    assert np.linalg.norm(grad) < 1e-8


def test_boundary_comparator_satisfies_kkt():
    """With a tiny ball the comparator sits on the sphere and the gradient points inward."""
    t = linear_template(radius=0.05)
    records = random_instance(seed=4, template=t)
    comp = R.solve_comparator("StaticSeq", records, 1e-3)
    theta = comp.params.theta
    assert np.linalg.norm(theta) == pytest.approx(0.05, rel=1e-10)
    grad = sum(loss_gradient(comp.params, r.states, r.labels_current, 1e-3) for r in records)
    cos = -grad @ theta / (np.linalg.norm(grad) * np.linalg.norm(theta))
    assert cos == pytest.approx(1.0, abs=1e-8)


def test_single_state_dynamic_comparator_closed_form():
    """One repeated state: the round loss is ||W phi - y||^2 + a||W||^2, minimized by y phi^T / (|phi|^2 + a)."""
    t = linear_template()
    s = np.array([0.05, -0.02, 0.1, 0.0])
    y = np.array([0.3, -0.4])
    records = manual_records([t], [np.tile(s, (7, 1))], [np.tile(y, (7, 1))], [np.tile(y, (7, 1))])
    comp = R.solve_comparator("DynamicFinal", records, 0.5, round_index=1)
    phi = pol.features(t, s)
    np.testing.assert_allclose(comp.params.weight_matrix, np.outer(y, phi) / (phi @ phi + 0.5), atol=1e-14)


def test_static_final_comparator_equals_final_dagger_fit(fixed_supervisor_run):
    """DAgger's last refit minimizes the aggregate loss, which is the static comparator's objective."""
    comp = R.solve_comparator("StaticFinal", fixed_supervisor_run.records, 1.0)
    np.testing.assert_allclose(comp.params.theta, fixed_supervisor_run.final_params.theta, atol=1e-10)


def test_comparator_argument_errors():
    records = random_instance()
    with pytest.raises(ValueError):
        R.solve_comparator("Hindsight", records, 1.0)
    with pytest.raises(ValueError):
        R.solve_comparator("DynamicSeq", records, 1.0)
    with pytest.raises(ValueError):
        R.solve_comparator("DynamicSeq", records, 1.0, round_index=99)


def test_missing_final_labels_is_reported():
    rec = random_instance()
    stripped = manual_records([r.params for r in rec], [r.states for r in rec], [r.labels_current for r in rec])
    with pytest.raises(ValueError, match="backfill"):
        R.static_regret(stripped, "final", 1.0)
    R.static_regret(stripped, "seq", 1.0)


def test_mlp_records_are_not_supported():
    p = pol.init_mlp(4, 2, 0, hidden=(4, 4), members=2)
    rec = random_instance()
    mlp = manual_records([p] * len(rec), [r.states for r in rec], [r.labels_current for r in rec],
                         [r.labels_final for r in rec])
    with pytest.raises(NotImplementedError):
        R.dynamic_regret(mlp, "seq", 1.0)


def test_quadratic_statistics_reproduce_loss():
    rec = random_instance(seed=6)[0]
    t = rec.params
    q = R.round_quadratic(rec, "seq", t)
    assert R.quadratic_objective(t.weight_matrix, q, 0.7) == pytest.approx(
        empirical_loss(t, rec.states, rec.labels_current, 0.7), rel=1e-12)


# ----------------------------------------------------------------- regret series


def test_regret_zero_when_the_comparator_is_played():
    rec = random_instance(n_rounds=1, seed=7)
    best = R.solve_comparator("StaticSeq", rec, 1.0).params
    rec = manual_records([best], [rec[0].states], [rec[0].labels_current], [rec[0].labels_final])
    assert R.static_regret(rec, "seq", 1.0)[0] == pytest.approx(0.0, abs=1e-12)
    assert R.dynamic_regret(rec, "seq", 1.0)[0] == pytest.approx(0.0, abs=1e-12)


def test_dynamic_gaps_nonnegative_and_dominate_static():
    rec = random_instance(n_rounds=8, seed=8)
    for source in ("seq", "final"):
        gaps = R.dynamic_losses(rec, source, 1.0)
        assert np.all(gaps >= -1e-12)
        assert np.all(R.dynamic_regret(rec, source, 1.0) >= R.static_regret(rec, source, 1.0) - 1e-10)


def test_greedy_on_a_steady_state_has_no_dynamic_regret_after_round_one():
    """Identical states and labels every round: the greedy player plays round i's comparator from round 2 on."""
    rng = np.random.default_rng(9)
    t = linear_template()
    states, labels = rng.normal(0, 0.2, (40, 4)), rng.uniform(-1, 1, (40, 2))
    cfg = PlayerConfig(kind="GreedyPerRound")
    params, records = random_ball_point(t, rng, 0.05), []
    for _ in range(5):
        records = manual_records([r.params for r in records] + [params], [states] * (len(records) + 1),
                                 [labels] * (len(records) + 1), [labels] * (len(records) + 1))
        params = update(cfg, records, params)
    gaps = R.dynamic_losses(records, "seq", 1.0)
    assert gaps[0] > 0
    np.testing.assert_allclose(gaps[1:], 0.0, atol=1e-12)


def test_dynamic_regret_against_grid_search_on_two_parameter_policy():
    """One state and one action dimension leave a weight and a bias; brute force the per-round minimum."""
    rng = np.random.default_rng(10)
    t = linear_template(state_dim=1, action_dim=1, feature_scale=1.0)
    n_rounds = 4
    states = [rng.uniform(-1, 1, (25, 1)) for _ in range(n_rounds)]
    labels = [np.clip(0.6 * s - 0.2 + 0.1 * rng.normal(size=s.shape), -1, 1) for s in states]
    params = [t.with_theta(rng.uniform(-1, 1, 2)) for _ in range(n_rounds)]
    rec = manual_records(params, states, labels, labels, alpha_reg=0.1)
    dyn = R.dynamic_regret(rec, "seq", 0.1)[-1]

    grid_total = 0.0
    for r in rec:
        x, y = r.states[:, 0], r.labels_current[:, 0]
        best = np.inf
        lo_w, hi_w, lo_b, hi_b = -3.0, 3.0, -3.0, 3.0
        for _ in range(4):  # successively refined grids around the running minimum
            w, b = np.meshgrid(np.linspace(lo_w, hi_w, 201), np.linspace(lo_b, hi_b, 201), indexing="ij")
            pred = w[..., None] * x + b[..., None]
            obj = np.mean((pred - y) ** 2, axis=-1) + 0.1 * (w**2 + b**2)
            k = np.unravel_index(np.argmin(obj), obj.shape)
            best = min(best, obj[k])
            sw, sb = (hi_w - lo_w) / 20, (hi_b - lo_b) / 20
            lo_w, hi_w, lo_b, hi_b = w[k] - sw, w[k] + sw, b[k] - sb, b[k] + sb
        grid_total += r.loss_current - best
    assert grid_total <= dyn + 1e-12
    assert dyn - grid_total < 1e-3


def test_prefix_comparators_bound_full_horizon_series():
    """A prefix comparator is optimal for its own prefix, so prefix regret is at least the full-horizon one."""
    rec = random_instance(n_rounds=10, seed=11)
    full = R.static_regret(rec, "seq", 1.0)
    prefix = R.static_regret(rec, "seq", 1.0, prefix_comparators=True)
    assert prefix[-1] == pytest.approx(full[-1], rel=1e-10, abs=1e-12)
    assert np.all(prefix >= full - 1e-10)


# ----------------------------------------------------------------- reduction


def extra_term_oracle(records, delta):
    out, total = [], 0.0
    for r in records:
        dists = [float(np.sqrt(sum((a - b) ** 2 for a, b in zip(yf, yc))))
                 for yf, yc in zip(r.labels_final, r.labels_current)]
        total += sum(dists) / len(dists)
        out.append(4 * delta * total)
    return np.array(out)


def test_extra_term_matches_loop_oracle():
    rec = random_instance(n_rounds=7, seed=12)
    np.testing.assert_allclose(R.extra_term(rec, DELTA), extra_term_oracle(rec, DELTA), rtol=0, atol=1e-12)


def test_fixed_supervisor_degenerates(fixed_supervisor_run):
    rec = fixed_supervisor_run.records
    assert np.all(R.extra_term(rec, DELTA) == 0.0)
    np.testing.assert_allclose(R.static_regret(rec, "final", 1.0), R.static_regret(rec, "seq", 1.0), atol=1e-12)
    np.testing.assert_allclose(R.dynamic_regret(rec, "final", 1.0), R.dynamic_regret(rec, "seq", 1.0), atol=1e-12)
    slack = R.verify_reduction(rec, 1.0, DELTA)
    np.testing.assert_allclose(slack["bound_slack_static"], 0.0, atol=1e-12)


def test_reduction_holds_on_harmonic_dagger(harmonic_dagger):
    rec = harmonic_dagger.records
    for prefix in (False, True):
        slack = R.verify_reduction(rec, 1.0, DELTA, prefix_comparators=prefix)
        assert np.min(slack["bound_slack_static"]) >= -1e-9
        assert np.min(slack["bound_slack_dynamic"]) >= -1e-9
    assert R.max_label_policy_distance(rec, 1.0) <= DELTA


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["Harmonic", "Sqrt", "Geometric", "Constant"]),
       st.sampled_from(["DaggerAggregate", "GreedyPerRound"]))
def test_reduction_slack_nonnegative_property(seed, schedule, player):
    rec = synthetic_run(schedule, player, 20, seed=seed).records
    slack = R.verify_reduction(rec, 1.0, DELTA)
    assert np.min(slack["bound_slack_static"]) >= -1e-9
    assert np.min(slack["bound_slack_dynamic"]) >= -1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reduction_slack_on_random_instances(seed):
    """Any labels inside the action box and any played policy whose outputs stay in the box satisfy the bound."""
    rng = np.random.default_rng(seed)
    t = linear_template(feature_scale=1.0)
    n_rounds = 6
    states = [rng.uniform(-0.3, 0.3, (15, 4)) for _ in range(n_rounds)]
    cur = [rng.uniform(-1, 1, (15, 2)) for _ in range(n_rounds)]
    fin = [np.clip(y + rng.normal(0, 0.3, y.shape), -1, 1) for y in cur]
    params = [t.with_theta(rng.uniform(-0.15, 0.15, t.dim)) for _ in range(n_rounds)]
    rec = manual_records(params, states, cur, fin)
    slack = R.verify_reduction(rec, 1.0, DELTA)
    assert np.min(slack["bound_slack_static"]) >= -1e-9
    assert np.min(slack["bound_slack_dynamic"]) >= -1e-9


def test_alternating_extra_term_grows_linearly():
    rec = synthetic_run("Alternating", "OGD", 200, seed=0, eta_offset=20.0).records
    extra = R.extra_term(rec, DELTA)
    assert R.sublinearity_stats(extra).loglog_slope >= 0.95
    assert extra[-1] / len(extra) >= 0.9 * 4 * DELTA * 0.4


# ----------------------------------------------------------------- sublinearity


def test_sublinearity_on_synthetic_series():
    n = np.arange(1, 201, dtype=float)
    assert R.sublinearity_stats(np.sqrt(n)).loglog_slope == pytest.approx(0.5, abs=0.02)
    assert R.sublinearity_stats(n).loglog_slope == pytest.approx(1.0, abs=0.02)
    # d log(log n) / d log n = 1 / log n, which ranges over [1/log 200, 1/log 100] on the fitted half
    log_slope = R.sublinearity_stats(np.log(n)).loglog_slope
    assert 1 / np.log(200) < log_slope < 1 / np.log(100)
    assert R.sublinearity_stats(n).avg_ratio == pytest.approx(1.0)
    assert R.sublinearity_stats(np.sqrt(n)).avg_ratio == pytest.approx(np.sqrt(20) / np.sqrt(200))


def test_sublinearity_edge_cases():
    assert R.sublinearity_stats(np.zeros(50)).loglog_slope == -np.inf
    with pytest.raises(ValueError):
        R.sublinearity_stats(np.ones(10))
    assert np.isnan(R.sublinearity_stats(np.r_[np.zeros(10), np.ones(40)]).avg_ratio)


def test_harmonic_dagger_is_sublinear(harmonic_dagger):
    rec = harmonic_dagger.records
    for series in (R.static_regret(rec, "final", 1.0), R.dynamic_regret(rec, "final", 1.0)):
        stats = R.sublinearity_stats(series)
        assert stats.loglog_slope < 0.9 and stats.avg_ratio < 0.25


# ----------------------------------------------------------------- diagnostics


def test_gradient_bounds_on_recorded_rounds(harmonic_dagger):
    check = R.gradient_bound_check(harmonic_dagger.records, 1.0, DELTA)
    G = np.sqrt(4 * 10.0**2 + 1)
    assert check["data_bound"] == pytest.approx(2 * G * DELTA)
    assert check["full_bound"] == pytest.approx(2 * G * DELTA + 2 * 50.0)
    assert np.all(check["data_grad_norm"] <= check["data_bound"])
    assert np.all(check["grad_norm"] <= check["full_bound"])


def test_predictability_zero_on_a_frozen_problem():
    rng = np.random.default_rng(13)
    t = linear_template()
    states, labels = rng.normal(0, 0.2, (30, 4)), rng.uniform(-1, 1, (30, 2))
    p = random_ball_point(t, rng, 0.05)
    rec = manual_records([p] * 12, [states] * 12, [labels] * 12)
    diag = R.predictability_diagnostic(rec, 1.0)
    np.testing.assert_array_equal(diag.gradient_variation, 0.0)
    assert diag.beta_hat is None and diag.alpha_exceeds_beta is None
    np.testing.assert_array_equal(diag.cesaro, 0.0)


def test_predictability_bounded_by_label_envelope():
    """Same states each round, labels from a converging sequence: g_i <= 2 G (f_i + f_{i+1})."""
    from convsup.supervisor import RateSchedule, SyntheticSequence

    sched = RateSchedule("Harmonic", 0.4)
    seq = SyntheticSequence(ENV, sched)
    states = np.random.default_rng(14).normal(0, 0.2, (40, 4)) + np.r_[ENV.goal, 0, 0]
    t = pol.template_for(ENV)
    rng = np.random.default_rng(15)
    params = [random_ball_point(t, rng, 0.05) for _ in range(15)]
    rec = manual_records(params, [states] * 15, [seq.at(i).label_batch(states) for i in range(1, 16)])
    probe = random_ball_point(t, rng, 0.1)
    diag = R.predictability_diagnostic(rec, 1.0, probes=[probe])
    G = t.jacobian_bound
    env_bound = np.array([2 * G * (sched.amplitude(i) + sched.amplitude(i + 1)) for i in range(1, 15)])
    assert np.all(diag.gradient_variation <= env_bound + 1e-12)


def test_predictability_cesaro_vanishes_with_common_seeding():
    rec = synthetic_run("Harmonic", "DaggerAggregate", 200, seed=0, round_seeding="common").records
    diag = R.predictability_diagnostic(rec, 1.0)
    assert diag.cesaro[-1] < 0.5 * diag.cesaro[18]
    assert diag.beta_hat is not None and diag.beta_hat >= 0
    assert np.all(diag.zeta >= 0)


def test_predictability_needs_ten_rounds():
    with pytest.raises(ValueError):
        R.predictability_diagnostic(random_instance(n_rounds=5), 1.0)


# ----------------------------------------------------------------- report


def test_report_serializes_and_is_consistent(harmonic_dagger):
    rep = R.regret_report(harmonic_dagger.records, 1.0, DELTA)
    d = json.loads(rep.to_json())
    assert len(d["static_final"]) == 200 and d["delta"] == pytest.approx(DELTA)
    np.testing.assert_allclose(rep.bound_slack_static, rep.static_seq + rep.extra_term - rep.static_final)
    rows = list(rep.long_rows())
    assert len(rows) == 200 * len(R.RegretReport.SERIES)
    assert {m for _, m, _ in rows} == set(R.RegretReport.SERIES)
    assert set(d["sublinearity"]) == {"static_seq", "static_final", "dynamic_seq", "dynamic_final", "extra_term"}


def test_short_report_skips_sublinearity():
    rep = R.regret_report(random_instance(n_rounds=5), 1.0, DELTA, prefix_comparators=False)
    assert rep.sublinearity == {} and rep.prefix_static_seq is None
    assert "prefix_static_seq" not in rep.to_dict()


def test_report_json_is_strict_for_degenerate_series(fixed_supervisor_run):
    rep = R.regret_report(fixed_supervisor_run.records, 1.0, DELTA)
    assert rep.sublinearity["extra_term"].loglog_slope == -np.inf
    d = json.loads(rep.to_json())
    assert d["sublinearity"]["extra_term"] == {"loglog_slope": None, "avg_ratio": None}
