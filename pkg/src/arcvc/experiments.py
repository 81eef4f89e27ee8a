"""The four studies: risk comparison, reference study, penalty study and shaping.

Each study is a list of independent (config, seed) tasks.  Tasks run in a
process pool when more than one worker is requested; results are collected
in task order, so the CSVs do not depend on scheduling.  All CSVs start with
a ``# schema: <name>/v<k>`` line followed by a header row.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .environments import GridWorld, generate_layout, layout_to_text
from .metrics import RunRecord, epsilon_bar, success_rate, violation_rate
from .shaping import (DegenerateFitError, collect_shaping_samples, fit_shaped_model,
                      synthetic_samples, write_fit_csv, write_samples_csv, ShapingSample)
from .trainer import train

EPISODE_COLUMNS = RunRecord.columns()


@dataclass
class StudyResult:
    paths: dict[str, Path] = field(default_factory=dict)
    diverged: list[str] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, schema: str, columns: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    """Rows of a schema-tagged CSV as dicts of strings."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ValueError(f"{path} has no schema line")
        return list(csv.DictReader(fh))


def _mean_se(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


def _map(fn, tasks: list, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------- training task


@dataclass(frozen=True)
class TrainTask:
    cfg: ExperimentConfig
    seed: int
    label: str
    overrides: tuple = ()
    checkpoint_dir: str | None = None


@dataclass
class TrainOutcome:
    label: str
    seed: int
    records: list[RunRecord]
    diverged: bool
    error: str
    agent_nets: tuple[str, ...]


def _run_train(task: TrainTask) -> TrainOutcome:
    config = task.cfg.arcvc_config(task.seed, **dict(task.overrides))
    env = GridWorld(task.cfg.grid_config(task.seed))
    res = train(config, env, checkpoint_dir=task.checkpoint_dir)
    return TrainOutcome(task.label, task.seed, res.records, res.diverged, res.error,
                        tuple(res.agent.networks()))


def _episode_rows(outcome: TrainOutcome, extra: dict) -> list[dict]:
    rows = []
    for r in outcome.records:
        row = dict(extra)
        row.update(r.as_dict())
        rows.append(row)
    return rows


def _trailing(records, window: int, fn) -> float:
    if not records:
        return float("nan")
    return fn(records, min(window, len(records)))


def _checkpoint_dir(cfg: ExperimentConfig, *parts) -> str | None:
    if not cfg["experiment"]["checkpoint"]:
        return None
    return str(Path(cfg.out, "checkpoints", *map(str, parts)))


# --------------------------------------------------------------------------- risk comparison


def run_risk_comparison(cfg: ExperimentConfig) -> StudyResult:
    """Train each one-sided risk kind over all seeds; trailing-window rates per run."""
    kinds = cfg["risk_comparison"]["kinds"]
    window = cfg["risk_comparison"]["window"]
    tasks = [TrainTask(cfg, s, k, (("risk", cfg.risk_spec(k)),), _checkpoint_dir(cfg, k, s))
             for k in kinds for s in cfg.seeds]
    outcomes = _map(_run_train, tasks, cfg.workers)
    result = StudyResult()
    rows, episodes = [], []
    for k in kinds:
        runs = [o for o in outcomes if o.label == k]
        viol, succ = [], []
        for o in runs:
            v = _trailing(o.records, window, violation_rate)
            s = _trailing(o.records, window, success_rate)
            if o.diverged:
                result.diverged.append(f"{k}/seed{o.seed}: {o.error}")
            else:
                viol.append(v)
                succ.append(s)
            rows.append(dict(row_type="run", risk=k, seed=o.seed, n=1, violation_rate=v,
                             violation_se=0.0, success_rate=s, success_se=0.0,
                             diverged=o.diverged))
            episodes += _episode_rows(o, {"risk": k, "seed": o.seed})
        vm, vse = _mean_se(viol)
        sm, sse = _mean_se(succ)
        summary = dict(row_type="summary", risk=k, seed="all", n=len(viol), violation_rate=vm,
                       violation_se=vse, success_rate=sm, success_se=sse,
                       diverged=len(viol) < len(runs))
        rows.append(summary)
        result.summary.append(summary)
    cols = ["row_type", "risk", "seed", "n", "violation_rate", "violation_se",
            "success_rate", "success_se", "diverged"]
    result.paths["summary"] = write_csv(cfg.out / "risk_comparison.csv", "risk-comparison/v1", cols, rows)
    result.paths["episodes"] = write_csv(cfg.out / "risk_comparison_episodes.csv",
                                         "risk-comparison-episodes/v1", ["risk", "seed"] + EPISODE_COLUMNS,
                                         episodes)
    return result


# --------------------------------------------------------------------------- reference study


@dataclass(frozen=True)
class ReferenceTask:
    cfg: ExperimentConfig
    gamma: float
    repeat: int


def _run_reference(task: ReferenceTask) -> dict:
    cfg = task.cfg
    rs = cfg["reference_study"]
    seed = cfg.seeds[task.repeat % len(cfg.seeds)] + 1000 * (task.repeat // len(cfg.seeds))
    config = cfg.arcvc_config(seed, gamma=task.gamma)
    env = GridWorld(cfg.grid_config(seed))
    res = train(config, env)
    row = dict(row_type="run", gamma=task.gamma, repeat=task.repeat, seed=seed,
               eps_bar=float("nan"), eps_bar_se=0.0, eps_g=float("nan"), eps_pi=float("nan"),
               eps_g_se=float("nan"), eps_pi_se=float("nan"), n=1, diverged=res.diverged)
    if res.diverged:
        row["error"] = res.error
        return row
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    eb = epsilon_bar(res.agent.actor.forward, env, task.gamma, rs["n_states"], rs["n_episodes"], rng,
                     config.risk.f, tau=config.tau, stationary_steps=rs["stationary_steps"],
                     max_steps=rs["eval_max_steps"])
    row.update(eps_bar=eb.eps_bar, eps_g=eb.eps_g, eps_pi=eb.eps_pi,
               eps_g_se=eb.eps_g_se, eps_pi_se=eb.eps_pi_se)
    return row


def run_reference_study(cfg: ExperimentConfig) -> StudyResult:
    """Per discount factor and repeat: train, then measure the global-reference deviation."""
    rs = cfg["reference_study"]
    tasks = [ReferenceTask(cfg, g, r) for g in rs["gammas"] for r in range(rs["repeats"])]
    runs = _map(_run_reference, tasks, cfg.workers)
    result = StudyResult()
    rows = []
    for g in rs["gammas"]:
        block = [r for r in runs if r["gamma"] == g]
        for r in block:
            if r["diverged"]:
                result.diverged.append(f"gamma={g}/repeat{r['repeat']}: {r.pop('error', '')}")
        rows += block
        ok = [r for r in block if not r["diverged"]]
        m, se = _mean_se([r["eps_bar"] for r in ok])
        eg, eg_se = _mean_se([r["eps_g"] for r in ok])
        ep, ep_se = _mean_se([r["eps_pi"] for r in ok])
        summary = dict(row_type="summary", gamma=g, repeat="all", seed="all", eps_bar=m,
                       eps_bar_se=se, eps_g=eg, eps_pi=ep, eps_g_se=eg_se, eps_pi_se=ep_se,
                       n=len(ok), diverged=len(ok) < len(block))
        rows.append(summary)
        result.summary.append(summary)
    cols = ["row_type", "gamma", "repeat", "seed", "eps_bar", "eps_bar_se", "eps_g", "eps_pi",
            "eps_g_se", "eps_pi_se", "n", "diverged"]
    result.paths["summary"] = write_csv(cfg.out / "reference_study.csv", "reference-study/v1", cols, rows)
    return result


# --------------------------------------------------------------------------- penalty study


CONTROL_ARM = "control"


def run_penalty_study(cfg: ExperimentConfig) -> StudyResult:
    """Both penalty methods (and optionally an unpenalised control) on matched layouts.

    Every arm for a given seed shares the layout and the training seed.  The
    curve CSV holds one row per arm, layout and episode.
    """
    ps = cfg["penalty_study"]
    window = ps["window"]
    arms = list(ps["arms"]) + ([CONTROL_ARM] if ps["control"] else [])
    tasks = []
    for s in cfg.seeds:
        for arm in arms:
            if arm == CONTROL_ARM:
                ov = (("risk", cfg.risk_spec(lam=0.0)), ("penalty", "sample_based"))
            else:
                ov = (("penalty", arm),)
            tasks.append(TrainTask(cfg, s, arm, ov, _checkpoint_dir(cfg, arm, s)))
    outcomes = _map(_run_train, tasks, cfg.workers)
    result = StudyResult()
    curves, summary = [], []
    for o in outcomes:
        if o.diverged:
            result.diverged.append(f"{o.label}/layout{o.seed}: {o.error}")
        acc = 0.0
        for i, r in enumerate(o.records):
            acc += r.total_reward
            lo = max(0, i + 1 - window)
            flags = [x.violation for x in o.records[lo:i + 1]]
            row = dict(arm=o.label, layout=o.seed)
            row.update(r.as_dict())
            row.update(accumulated_reward=acc, running_violation_rate=sum(flags) / len(flags))
            curves.append(row)
        row = dict(arm=o.label, layout=o.seed, episodes=len(o.records),
                   violation_rate=_trailing(o.records, window, violation_rate),
                   success_rate=_trailing(o.records, window, success_rate),
                   accumulated_reward=acc, risk_network=("risk" in o.agent_nets), diverged=o.diverged)
        summary.append(row)
    result.summary = summary
    cols = ["arm", "layout"] + EPISODE_COLUMNS + ["accumulated_reward", "running_violation_rate"]
    result.paths["curves"] = write_csv(cfg.out / "penalty_study.csv", "penalty-study/v1", cols, curves)
    result.paths["summary"] = write_csv(
        cfg.out / "penalty_study_summary.csv", "penalty-study-summary/v1",
        ["arm", "layout", "episodes", "violation_rate", "success_rate", "accumulated_reward",
         "risk_network", "diverged"], summary)
    return result


# --------------------------------------------------------------------------- shaping


def run_shaping(cfg: ExperimentConfig) -> StudyResult:
    """Collect (B - J, risk) samples on gambler's ruin, or planted ones, and fit the bump.

    Raises ``DegenerateFitError`` when the samples cannot identify the fit.
    """
    s = cfg["shaping"]
    seed = cfg.seeds[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    if s["synthetic"]:
        z, y = synthetic_samples(s["planted_b"], s["planted_c"], noise=s["noise"], rng=rng)
        samples = [ShapingSample(float(a), float(b), 0) for a, b in zip(z, y)]
    else:
        samples = collect_shaping_samples(cfg.ruin_config(), s["n_per_state"], s["fortunes"], rng,
                                          n_value_episodes=s["n_value_episodes"], target=s["target"])
    result = StudyResult()
    result.paths["samples"] = cfg.out / "shaping_samples.csv"
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(result.paths["samples"], samples)
    fit = fit_shaped_model(samples)
    result.paths["fit"] = cfg.out / "shaping_fit.csv"
    write_fit_csv(result.paths["fit"], fit)
    result.summary.append(dict(b=fit.b, c=fit.c, rss=fit.rss, n=fit.n))
    return result


STUDIES = {
    "risk_comparison": run_risk_comparison,
    "reference_study": run_reference_study,
    "penalty_study": run_penalty_study,
    "shaping": run_shaping,
}


def run_experiment(cfg: ExperimentConfig) -> StudyResult:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.ini").write_text(cfg.as_text())
    if cfg.kind != "shaping" and cfg["experiment"]["layout"] == "fixed":
        gc = cfg.grid_config(cfg.seeds[0])
        (cfg.out / "layout.txt").write_text(layout_to_text(gc, generate_layout(gc)))
    return STUDIES[cfg.kind](cfg)


__all__ = ["StudyResult", "run_experiment", "run_risk_comparison", "run_reference_study",
           "run_penalty_study", "run_shaping", "read_csv", "write_csv", "DegenerateFitError"]
