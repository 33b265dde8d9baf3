"""Command-line runner: ``run``, ``timing-bench`` and ``compare``.

Artifacts of ``run`` (one directory per seed, under ``--out``)::

    rounds.csv        i, loss_vs_psi_i, loss_vs_psi_N, episode_return_learner, episode_return_supervisor
    round_timing.csv  wall-clock query latencies per round (kept apart so rounds.csv is reproducible)
    regret.csv        long format: prefix, metric, value
    regret.json       full regret report
    timing.json       latency summary
    params/           policy checkpoints (JSON)
    supervisor.json   final supervisor snapshot
    manifest.json     config hash, seed, schema version
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import policy as pol
from . import regret as rg
from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, load_config
from .dynamics import DynamicsEnsemble
from .env import rollout
from .imitation import RoundError, RunResult, rollout_seed, run_loop
from .supervisor import MpcSequence, MpcSupervisor, SyntheticSequence, SyntheticSupervisor

ROUND_COLUMNS = ("i", "loss_vs_psi_i", "loss_vs_psi_N", "episode_return_learner", "episode_return_supervisor")


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path: Path) -> tuple[list, list]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="")


# ----------------------------------------------------------------- run

def build_sequence(cfg: ExperimentConfig, seed: int):
    sup = cfg.supervisor
    if sup.kind == "Synthetic":
        return SyntheticSequence(cfg.env, sup.schedule, sup.kp, sup.kd)
    dyn_cfg = type(sup.dynamics)(**{**asdict(sup.dynamics), "seed": sup.dynamics.seed + seed})
    return MpcSequence(cfg.env, sup.plan, dyn_cfg, sup.seed_rollouts, seed=seed)


def execute(cfg: ExperimentConfig, seed: int, n_rounds: int | None = None, backfill: bool = True) -> RunResult:
    return run_loop(cfg.env, build_sequence(cfg, seed), cfg.player, n_rounds or cfg.rounds, seed=seed,
                    initial=cfg.policy.template(cfg.env),
                    evaluate_supervisor=cfg.flags.evaluate_supervisor_rollout, backfill=backfill)


def supervisor_snapshot(sup) -> dict:
    if isinstance(sup, SyntheticSupervisor):
        return {"kind": "Synthetic", "index": sup.index, "schedule": asdict(sup.schedule), "kp": sup.kp, "kd": sup.kd}
    return {"kind": "MpcCem", "index": sup.index, "seed": sup.seed, "plan": asdict(sup.config),
            "ensemble": sup.model.to_dict()}


def load_supervisor(d: dict, env):
    from .supervisor import PlanConfig, RateSchedule

    if d["kind"] == "Synthetic":
        return SyntheticSupervisor(env, RateSchedule(**d["schedule"]), d["index"], d["kp"], d["kd"])
    return MpcSupervisor(env, DynamicsEnsemble.from_dict(d["ensemble"]), PlanConfig(**d["plan"]), d["index"], d["seed"])


def write_run(cfg: ExperimentConfig, seed: int, result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    records = result.records
    write_csv(out / "rounds.csv", ROUND_COLUMNS,
              [[r.index, _num(r.loss_current), _num(r.loss_final), _num(r.learner_return), _num(r.supervisor_return)]
               for r in records])
    write_csv(out / "round_timing.csv", ("i", "learner_query_us", "supervisor_query_us"),
              [[r.index, _num(r.timings["learner_query_us"]), _num(r.timings["supervisor_query_us"])]
               for r in records])

    if cfg.policy.kind == "LinearAffine":
        report = rg.regret_report(records, cfg.player.alpha_reg, cfg.env.action_diameter,
                                  prefix_comparators=cfg.flags.emit_prefix_comparators)
        write_csv(out / "regret.csv", ("prefix", "metric", "value"),
                  [[n, m, _num(v)] for n, m, v in report.long_rows()])
        (out / "regret.json").write_text(report.to_json() + "\n", encoding="utf-8", newline="")
    else:
        write_csv(out / "regret.csv", ("prefix", "metric", "value"), [])
        write_json(out / "regret.json", {"skipped": "closed-form comparators need a LinearAffine policy"})

    learner = np.array([r.timings["learner_query_us"] for r in records])
    sup = np.array([r.timings["supervisor_query_us"] for r in records])
    write_json(out / "timing.json", {
        "learner_query_us_mean": float(learner.mean()), "learner_query_us_std": float(learner.std()),
        "supervisor_query_us_mean": float(sup.mean()), "supervisor_query_us_std": float(sup.std()),
        "ratio": float(sup.mean() / learner.mean()),
    })

    params_dir = out / "params"
    params_dir.mkdir(exist_ok=True)
    every = cfg.flags.checkpoint_every
    for r in records:
        if every and r.index % every == 0:
            (params_dir / f"round_{r.index:04d}.json").write_text(r.params.to_json() + "\n", encoding="utf-8")
    (params_dir / "final.json").write_text(result.final_params.to_json() + "\n", encoding="utf-8")
    write_json(out / "supervisor.json", supervisor_snapshot(result.final_supervisor))
    write_json(out / "manifest.json", {
        "schema_version": SCHEMA_VERSION, "name": cfg.name, "seed": seed, "rounds": len(records),
        "config_hash": cfg.digest(), "config": cfg.to_dict(),
    })


def cmd_run(cfg: ExperimentConfig, out: Path, log) -> int:
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        start = time.perf_counter()
        try:
            result = execute(cfg, seed)
        except RoundError as exc:
            print(f"error: seed {seed}: {exc}", file=sys.stderr)
            return 1
        write_run(cfg, seed, result, out / f"seed_{seed}")
        log(f"seed {seed}: {cfg.rounds} rounds in {time.perf_counter() - start:.1f}s -> {out / f'seed_{seed}'}")
    write_json(out / "manifest.json", {"schema_version": SCHEMA_VERSION, "name": cfg.name,
                                       "config_hash": cfg.digest(), "seeds": list(cfg.seeds)})
    return 0


# ----------------------------------------------------------------- timing

@dataclass
class TimingReport:
    learner_us_mean: float
    learner_us_std: float
    supervisor_us_mean: float
    supervisor_us_std: float
    learner_calls: int
    supervisor_calls: int
    horizon: int

    @property
    def ratio(self) -> float:
        return self.supervisor_us_mean / self.learner_us_mean

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(ratio=self.ratio,
                 learner_episode_ms=self.learner_us_mean * self.horizon / 1e3,
                 supervisor_episode_ms=self.supervisor_us_mean * self.horizon / 1e3)
        return d


def time_calls(fn, states, n_calls: int, warmup: int = 5) -> np.ndarray:
    """Per-call latency in microseconds, cycling through ``states``."""
    states = np.atleast_2d(states)
    for k in range(min(warmup, n_calls)):
        fn(states[k % len(states)])
    out = np.empty(n_calls)
    for k in range(n_calls):
        s = states[k % len(states)]
        t0 = time.perf_counter_ns()
        fn(s)
        out[k] = (time.perf_counter_ns() - t0) / 1e3
    return out


def timing_report(learner_fn, supervisor_fn, states, learner_calls: int = 1000, supervisor_calls: int = 50,
                  horizon: int = 50) -> TimingReport:
    """Latencies of two query functions measured on the same states."""
    lt = time_calls(learner_fn, states, learner_calls)
    st = time_calls(supervisor_fn, states, supervisor_calls)
    return TimingReport(float(lt.mean()), float(lt.std()), float(st.mean()), float(st.std()),
                        learner_calls, supervisor_calls, horizon)


def bench_subjects(cfg: ExperimentConfig, seed: int):
    """Learner parameters and supervisor to time, from a checkpoint or a short inline run."""
    ckpt = cfg.timing.checkpoint
    if ckpt:
        d = Path(ckpt)
        if not (d / "params" / "final.json").exists() or not (d / "supervisor.json").exists():
            raise FileNotFoundError(f"checkpoint {d} is missing params/final.json or supervisor.json")
        params = pol.PolicyParams.from_json((d / "params" / "final.json").read_text(encoding="utf-8"))
        sup = load_supervisor(json.loads((d / "supervisor.json").read_text(encoding="utf-8")), cfg.env)
        return params, sup
    result = execute(cfg, seed, n_rounds=min(cfg.timing.train_rounds, cfg.rounds), backfill=False)
    return result.final_params, result.final_supervisor


def cmd_timing(cfg: ExperimentConfig, out: Path, log) -> int:
    seed = cfg.seeds[0]
    try:
        params, sup = bench_subjects(cfg, seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    traj = rollout(cfg.env, lambda s: pol.act(params, s), rollout_seed(seed, 10**6, 0))
    states = traj.states[:-1]
    report = timing_report(lambda s: pol.act(params, s), sup.label, states,
                           cfg.timing.learner_queries, cfg.timing.supervisor_queries, cfg.env.horizon)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "timing_bench.json", report.to_dict())
    log(f"learner {report.learner_us_mean:.1f} +/- {report.learner_us_std:.1f} us, "
        f"supervisor {report.supervisor_us_mean:.1f} +/- {report.supervisor_us_std:.1f} us, "
        f"ratio {report.ratio:.1f}")
    return 0


# ----------------------------------------------------------------- compare

class SchemaMismatch(ValueError):
    pass


def run_dirs(path: Path) -> list[Path]:
    """A seed directory, or every seed directory below a run root."""
    if (path / "rounds.csv").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("*/rounds.csv"))
    if not found:
        raise FileNotFoundError(f"{path} holds no run artifacts")
    return found


def load_long(run_dir: Path) -> list[tuple[int, str, str]]:
    header, rows = read_csv(run_dir / "rounds.csv")
    out = [(int(row[0]), name, row[k]) for row in rows for k, name in enumerate(header) if k > 0 and row[k] != ""]
    if (run_dir / "regret.csv").exists():
        _, rows = read_csv(run_dir / "regret.csv")
        out += [(int(n), m, v) for n, m, v in rows]
    return out


def compare(paths, wide: bool = False) -> tuple[list, list]:
    """Merge runs into one table keyed by (run_id, round, metric)."""
    dirs = [d for p in paths for d in run_dirs(Path(p))]
    if len(dirs) < 2:
        raise ValueError("compare needs at least two runs")
    versions = {}
    for d in dirs:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        versions[d] = manifest.get("schema_version")
    if len(set(versions.values()) | {SCHEMA_VERSION}) > 1:
        raise SchemaMismatch("schema versions differ: " + ", ".join(f"{d}={v}" for d, v in versions.items()))
    used, rows = {}, []
    for d in dirs:
        base = f"{d.parent.name}/{d.name}"
        used[base] = used.get(base, 0) + 1
        run_id = base if used[base] == 1 else f"{base}#{used[base]}"
        rows += [(run_id, n, m, v) for n, m, v in load_long(d)]
    if not wide:
        return ["run_id", "round", "metric", "value"], [list(r) for r in rows]
    columns = sorted({(r[0], r[2]) for r in rows})
    cells = {(r[1], r[0], r[2]): r[3] for r in rows}
    rounds = sorted({r[1] for r in rows})
    header = ["round"] + [f"{run}:{metric}" for run, metric in columns]
    return header, [[n] + [cells.get((n, run, metric), "") for run, metric in columns] for n in rounds]


def cmd_compare(paths, out: Path, wide: bool, log) -> int:
    try:
        header, rows = compare(paths, wide)
    except (SchemaMismatch, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, header, rows)
    log(f"wrote {len(rows)} rows to {out}")
    return 0


# ----------------------------------------------------------------- entry point

def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convsup", description="Imitation from an improving supervisor")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "timing-bench"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default=None)
        s.add_argument("--seed-override", type=int, default=None)
        s.add_argument("--quiet", action="store_true")
    s = sub.add_parser("compare")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--wide", action="store_true")
    s.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    if args.command == "compare":
        return cmd_compare(args.runs, Path(args.out), args.wide, log)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed_override is not None:
        cfg = cfg.with_seeds([args.seed_override])
    out = Path(args.out or cfg.output or f"runs/{cfg.name}")
    if args.command == "run":
        return cmd_run(cfg, out, log)
    return cmd_timing(cfg, out, log)


if __name__ == "__main__":
    sys.exit(main())
