"""Static and dynamic regret against the per-round and the final supervisor.

Every quantity is computed pathwise on recorded states: the per-round loss is

    l_i(theta, psi) = mean_{s in round i} ||pi_theta(s) - psi(s)||^2 + alpha_reg ||theta||^2

with ``psi`` either the round's own labeler (``"seq"``) or the last one
(``"final"``). For linear policies each loss is a quadratic in the weight
matrix ``W``::

    l_i(W) = tr(W H_i W^T) - 2 tr(W B_i) + c_i + alpha_reg ||W||^2

so comparators are ball-constrained ridge solutions of summed statistics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import policy as pol
from .imitation import empirical_loss, loss_gradient

COMPARATORS = ("StaticSeq", "StaticFinal", "DynamicSeq", "DynamicFinal")
SOURCES = ("seq", "final")


@dataclass(frozen=True)
class RoundQuadratic:
    H: np.ndarray  # F x F
    B: np.ndarray  # F x A
    c: float
    n: int


@dataclass(frozen=True, eq=False)
class Comparator:
    kind: str
    params: pol.PolicyParams
    objective: float
    rounds: tuple  # round indices the objective sums over


def _labels(record, source: str) -> np.ndarray:
    if source == "seq":
        return record.labels_current
    if source == "final":
        if record.labels_final is None:
            raise ValueError(f"round {record.index} has no final-supervisor labels; "
                             "snapshot the final supervisor and backfill before computing regret")
        return record.labels_final
    raise ValueError(f"label source must be one of {SOURCES}")


def _template(records) -> pol.PolicyParams:
    if not records:
        raise ValueError("no rounds recorded")
    p = records[0].params
    if p.kind != "LinearAffine":
        raise NotImplementedError("closed-form comparators are only available for LinearAffine policies")
    return p


def round_quadratic(record, source: str, template: pol.PolicyParams) -> RoundQuadratic:
    Phi = pol.features(template, record.states)
    Y = _labels(record, source)
    n = len(Phi)
    return RoundQuadratic(Phi.T @ Phi / n, Phi.T @ Y / n, float(np.sum(Y**2) / n), n)


def quadratic_objective(W: np.ndarray, q: RoundQuadratic, alpha_reg: float, n_rounds: int = 1) -> float:
    return float(np.sum((W @ q.H) * W) - 2.0 * np.sum(W * q.B.T) + q.c + n_rounds * alpha_reg * np.sum(W * W))


def _sum_quadratics(qs) -> RoundQuadratic:
    return RoundQuadratic(sum(q.H for q in qs), sum(q.B for q in qs), sum(q.c for q in qs), sum(q.n for q in qs))


def _solve(q: RoundQuadratic, n_rounds: int, alpha_reg: float, template: pol.PolicyParams) -> pol.PolicyParams:
    F = q.H.shape[0]
    W = pol.solve_ball_quadratic(q.H + n_rounds * alpha_reg * np.eye(F), q.B, template.radius)
    return template.with_theta(W.ravel())


def solve_comparator(kind: str, records, alpha_reg: float, round_index: int | None = None,
                     prefix: int | None = None) -> Comparator:
    """Best parameters in hindsight.

    Static kinds minimize the summed loss over rounds ``1..prefix`` (all rounds
    by default); dynamic kinds minimize round ``round_index``'s loss alone.
    """
    if kind not in COMPARATORS:
        raise ValueError(f"comparator kind must be one of {COMPARATORS}")
    template = _template(records)
    source = "seq" if kind.endswith("Seq") else "final"
    if kind.startswith("Static"):
        chosen = records[: (prefix or len(records))]
    else:
        if round_index is None:
            raise ValueError("dynamic comparators need a round_index")
        chosen = [r for r in records if r.index == round_index]
        if not chosen:
            raise ValueError(f"no record for round {round_index}")
    q = _sum_quadratics([round_quadratic(r, source, template) for r in chosen])
    params = _solve(q, len(chosen), alpha_reg, template)
    objective = sum(empirical_loss(params, r.states, _labels(r, source), alpha_reg) for r in chosen)
    return Comparator(kind, params, objective, tuple(r.index for r in chosen))


def comparator_objective(comparator_kind: str, records, params: pol.PolicyParams, alpha_reg: float,
                         rounds=None) -> float:
    source = "seq" if comparator_kind.endswith("Seq") else "final"
    rounds = set(rounds) if rounds is not None else {r.index for r in records}
    return sum(empirical_loss(params, r.states, _labels(r, source), alpha_reg) for r in records if r.index in rounds)


def played_losses(records, source: str, alpha_reg: float) -> np.ndarray:
    """``l_i(theta_i, psi)`` for every round."""
    return np.array([empirical_loss(r.params, r.states, _labels(r, source), alpha_reg) for r in records])


def static_regret(records, source: str, alpha_reg: float, prefix_comparators: bool = False) -> np.ndarray:
    """Cumulative static regret for every prefix length ``N' = 1..N``.

    With ``prefix_comparators=False`` every prefix is measured against the
    single comparator fit to all ``N`` rounds. Otherwise prefix ``N'`` uses
    the comparator fit to rounds ``1..N'``.
    """
    template = _template(records)
    played = played_losses(records, source, alpha_reg)
    if not prefix_comparators:
        comp = solve_comparator("StaticSeq" if source == "seq" else "StaticFinal", records, alpha_reg)
        comp_losses = np.array([empirical_loss(comp.params, r.states, _labels(r, source), alpha_reg)
                                for r in records])
        return np.cumsum(played - comp_losses)
    qs = [round_quadratic(r, source, template) for r in records]
    cum_played = np.cumsum(played)
    out = np.empty(len(records))
    total = None
    for k, q in enumerate(qs, start=1):
        total = q if total is None else RoundQuadratic(total.H + q.H, total.B + q.B, total.c + q.c, total.n + q.n)
        W = _solve(total, k, alpha_reg, template).weight_matrix
        out[k - 1] = cum_played[k - 1] - quadratic_objective(W, total, alpha_reg, k)
    return out


def dynamic_losses(records, source: str, alpha_reg: float) -> np.ndarray:
    """Per-round gap ``l_i(theta_i) - min_theta l_i(theta)``."""
    template = _template(records)
    played = played_losses(records, source, alpha_reg)
    best = np.empty(len(records))
    for k, r in enumerate(records):
        q = round_quadratic(r, source, template)
        params = _solve(q, 1, alpha_reg, template)
        best[k] = empirical_loss(params, r.states, _labels(r, source), alpha_reg)
    return played - best


def dynamic_regret(records, source: str, alpha_reg: float) -> np.ndarray:
    return np.cumsum(dynamic_losses(records, source, alpha_reg))


def label_displacement(records) -> np.ndarray:
    """``mean_t ||psi_N(s_t^i) - psi_i(s_t^i)||`` per round."""
    return np.array([np.mean(np.linalg.norm(_labels(r, "final") - r.labels_current, axis=1)) for r in records])


def extra_term(records, delta: float) -> np.ndarray:
    """Cumulative reduction term ``4 delta sum_{i <= N'} mean_t ||psi_N - psi_i||``."""
    return 4.0 * delta * np.cumsum(label_displacement(records))


def verify_reduction(records, alpha_reg: float, delta: float, prefix_comparators: bool = False) -> dict:
    """Right-hand side minus left-hand side of both reduction inequalities, per prefix."""
    extra = extra_term(records, delta)
    static = (static_regret(records, "seq", alpha_reg, prefix_comparators) + extra
              - static_regret(records, "final", alpha_reg, prefix_comparators))
    dynamic = dynamic_regret(records, "seq", alpha_reg) + extra - dynamic_regret(records, "final", alpha_reg)
    return {"bound_slack_static": static, "bound_slack_dynamic": dynamic, "extra_term": extra}


def max_label_policy_distance(records, alpha_reg: float) -> float:
    """Largest ``||psi(s) - pi(s)||`` entering the reduction's Cauchy-Schwarz step.

    The reduction's last step bounds this by the action diameter; the value is
    reported so a run where the learner left the action box can be flagged.
    """
    comp = solve_comparator("StaticFinal", records, alpha_reg).params
    worst = 0.0
    for r in records:
        worst = max(worst,
                    float(np.max(np.linalg.norm(_labels(r, "final") - pol.act_batch(r.params, r.states), axis=1))),
                    float(np.max(np.linalg.norm(r.labels_current - pol.act_batch(comp, r.states), axis=1))))
    return worst


# ----------------------------------------------------------------- sublinearity

@dataclass(frozen=True)
class SublinearityStats:
    loglog_slope: float
    avg_ratio: float


def sublinearity_stats(series, eps: float = 1e-12) -> SublinearityStats:
    """Log-log growth rate over the last half and the drop in average regret.

    ``avg_ratio`` compares ``R_N / N`` with ``R_{N/10} / (N/10)``; it is NaN
    when the early average is not positive. An all-zero series has slope
    ``-inf``.
    """
    r = np.asarray(series, dtype=float)
    N = len(r)
    if N < 20:
        raise ValueError("sublinearity statistics need at least 20 prefixes")
    if np.all(r == 0):
        return SublinearityStats(float("-inf"), float("nan"))
    n = np.arange(1, N + 1)
    tail = slice(N // 2 - 1, N)
    slope = np.polyfit(np.log(n[tail]), np.log(np.maximum(r[tail], eps)), 1)[0]
    k = N // 10
    early = r[k - 1] / k
    ratio = (r[-1] / N) / early if early > 0 else float("nan")
    return SublinearityStats(float(slope), float(ratio))


# ----------------------------------------------------------------- diagnostics

def gradient_bound_check(records, alpha_reg: float, delta: float) -> dict:
    """Loss-gradient norms at the played parameters against ``2 G delta (+ 2 alpha_reg R)``."""
    full, data_part = [], []
    for r in records:
        g = loss_gradient(r.params, r.states, r.labels_current, alpha_reg)
        full.append(np.linalg.norm(g))
        data_part.append(np.linalg.norm(g - 2.0 * alpha_reg * r.params.theta))
    p = records[0].params
    return {
        "grad_norm": np.array(full),
        "data_grad_norm": np.array(data_part),
        "data_bound": 2.0 * p.jacobian_bound * delta,
        "full_bound": 2.0 * p.jacobian_bound * delta + 2.0 * alpha_reg * p.radius,
    }


def strong_convexity_residual(params1, params2, states, labels, alpha_reg: float) -> float:
    """``l(t2) - l(t1) - grad l(t1).(t2 - t1) - (alpha/2)||t2 - t1||^2`` with ``alpha = 2 alpha_reg``."""
    d = params2.theta - params1.theta
    l1 = empirical_loss(params1, states, labels, alpha_reg)
    l2 = empirical_loss(params2, states, labels, alpha_reg)
    g1 = loss_gradient(params1, states, labels, alpha_reg)
    return float(l2 - l1 - g1 @ d - alpha_reg * d @ d)


@dataclass
class Predictability:
    gradient_variation: np.ndarray  # g_i, length N-1
    parameter_steps: np.ndarray  # ||theta_{i+1} - theta_i||
    beta_hat: float | None
    intercept: float | None
    zeta: np.ndarray
    cesaro: np.ndarray  # running mean of zeta
    alpha: float
    alpha_exceeds_beta: bool | None


def predictability_diagnostic(records, alpha_reg: float, probes=None) -> Predictability:
    """Round-to-round gradient variation regressed on parameter movement.

    ``g_i`` is the largest ``||grad l_{i+1}(theta) - grad l_i(theta)||`` over the
    probe parameters (each round with its own labels). The slope of ``g`` on
    ``||theta_{i+1} - theta_i||`` estimates the predictability constant and the
    clipped residuals ``zeta_i`` should have a vanishing running mean.
    """
    if len(records) < 10:
        raise ValueError("predictability diagnostic needs at least 10 rounds")
    if probes is None:
        probes = [records[-1].params, records[-1].params.with_theta(np.zeros_like(records[-1].params.theta))]
    grads = [[loss_gradient(p, r.states, r.labels_current, 0.0) for p in probes] for r in records]
    g = np.array([max(np.linalg.norm(a - b) for a, b in zip(grads[i + 1], grads[i]))
                  for i in range(len(records) - 1)])
    steps = np.array([np.linalg.norm(records[i + 1].params.theta - records[i].params.theta)
                      for i in range(len(records) - 1)])
    alpha = 2.0 * alpha_reg
    if np.max(steps) <= 1e-12 or np.ptp(steps) <= 1e-12:
        beta, intercept, zeta = None, None, g.copy()
    else:
        slope, intercept = np.polyfit(steps, g, 1)
        beta = max(float(slope), 0.0)
        zeta = np.maximum(g - beta * steps, 0.0)
    cesaro = np.cumsum(zeta) / np.arange(1, len(zeta) + 1)
    return Predictability(g, steps, beta, None if intercept is None else float(intercept), zeta, cesaro,
                          alpha, None if beta is None else bool(alpha > beta))


# ----------------------------------------------------------------- report

def _finite_or_none(x: float):
    """JSON has no infinities; a degenerate statistic (e.g. slope of an all-zero series) becomes null."""
    return float(x) if np.isfinite(x) else None


@dataclass
class RegretReport:
    prefixes: np.ndarray
    static_seq: np.ndarray
    static_final: np.ndarray
    dynamic_seq: np.ndarray
    dynamic_final: np.ndarray
    extra_term: np.ndarray
    bound_slack_static: np.ndarray
    bound_slack_dynamic: np.ndarray
    alpha_reg: float
    delta: float
    max_label_policy_distance: float
    prefix_static_seq: np.ndarray | None = None
    prefix_static_final: np.ndarray | None = None
    prefix_bound_slack_static: np.ndarray | None = None
    sublinearity: dict = field(default_factory=dict)

    SERIES = ("static_seq", "static_final", "dynamic_seq", "dynamic_final", "extra_term",
              "bound_slack_static", "bound_slack_dynamic", "prefix_static_seq", "prefix_static_final",
              "prefix_bound_slack_static")

    def to_dict(self) -> dict:
        out = {"alpha_reg": self.alpha_reg, "delta": self.delta,
               "max_label_policy_distance": self.max_label_policy_distance,
               "prefixes": self.prefixes.tolist(),
               "sublinearity": {k: {f: _finite_or_none(x) for f, x in asdict(v).items()}
                                for k, v in self.sublinearity.items()}}
        for name in self.SERIES:
            value = getattr(self, name)
            if value is not None:
                out[name] = value.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def long_rows(self):
        """``(prefix, metric, value)`` rows."""
        for name in self.SERIES:
            value = getattr(self, name)
            if value is None:
                continue
            for n, v in zip(self.prefixes, value):
                yield int(n), name, float(v)


def regret_report(records, alpha_reg: float, delta: float, prefix_comparators: bool = True) -> RegretReport:
    extra = extra_term(records, delta)
    s_seq = static_regret(records, "seq", alpha_reg)
    s_fin = static_regret(records, "final", alpha_reg)
    d_seq = dynamic_regret(records, "seq", alpha_reg)
    d_fin = dynamic_regret(records, "final", alpha_reg)
    report = RegretReport(
        prefixes=np.arange(1, len(records) + 1), static_seq=s_seq, static_final=s_fin,
        dynamic_seq=d_seq, dynamic_final=d_fin, extra_term=extra,
        bound_slack_static=s_seq + extra - s_fin, bound_slack_dynamic=d_seq + extra - d_fin,
        alpha_reg=alpha_reg, delta=delta,
        max_label_policy_distance=max_label_policy_distance(records, alpha_reg),
    )
    if prefix_comparators:
        p_seq = static_regret(records, "seq", alpha_reg, prefix_comparators=True)
        p_fin = static_regret(records, "final", alpha_reg, prefix_comparators=True)
        report.prefix_static_seq, report.prefix_static_final = p_seq, p_fin
        report.prefix_bound_slack_static = p_seq + extra - p_fin
    if len(records) >= 20:
        for name in ("static_seq", "static_final", "dynamic_seq", "dynamic_final", "extra_term"):
            report.sublinearity[name] = sublinearity_stats(getattr(report, name))
    return report
