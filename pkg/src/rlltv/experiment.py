"""Experiment orchestration: train, evaluate, run arms, compare, write artifacts.

An output directory holds

    config.txt          canonical config snapshot
    metrics.jsonl       one record per training session
    checkpoints/        agent tensors per session (plus ``.json`` sidecars)
    resume.pkl          full trainer snapshot for resuming a partial run
    train_trace.npz     market trace seen during burn-in and training
    eval_trace.npz      market trace with the trained agent deployed
    report.json/.txt    offline metrics per scorer
    sweep.csv           fixed-alpha sweep curve
    arm_ctr/, arm_rl/   cold-start cohort arms (optional)
    manifest.json       sha256 of every artifact plus an overall hash
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import market as M
from .config import ExperimentConfig, dump_config
from .dualrank import DualRankMixer
from .nn import ConfigError, NumericError
from .trainer import Agent, DayLog, Rollout, Trainer

log = logging.getLogger(__name__)

ARM_VERSION = 1
SCORERS = ("vanilla_ctr", "empirical", "supervised_lstm", "rl_ltv")


class ProtocolError(RuntimeError):
    """An experiment would violate the comparison protocol (e.g. overlapping cohorts)."""


# ---------------------------------------------------------------------------
# training


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def train(cfg: ExperimentConfig, out: Path) -> Trainer:
    """Run (or resume) the training sessions, writing metrics and checkpoints."""
    out.mkdir(parents=True, exist_ok=True)
    snapshot = dump_config(cfg)
    resume = out / "resume.pkl"
    trainer = None
    if resume.exists() and (out / "config.txt").exists() and (out / "config.txt").read_text() == snapshot:
        with open(resume, "rb") as fh:
            trainer = pickle.load(fh)
        log.info("resuming %s at session %d", out, trainer.session)
    if trainer is None:
        (out / "config.txt").write_text(snapshot)
        (out / "metrics.jsonl").write_text("")
        trainer = Trainer(cfg.sim, cfg.trainer)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    while trainer.session < cfg.run.sessions:
        try:
            rec = trainer.run_session()
        except NumericError:
            trainer.agent.save(out / "diagnostic.ckpt")
            raise
        name = f"session{rec.session:04d}.ckpt"
        trainer.agent.save(ckpt_dir / name)
        rec.eval_snapshot = name
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")
        with open(resume, "wb") as fh:
            pickle.dump(trainer, fh)
    trainer.agent.save(ckpt_dir / "final.ckpt")
    return trainer


# ---------------------------------------------------------------------------
# evaluation


def deploy(agent: Agent, state: M.MarketState, days: int) -> E.Trace:
    """Let the trained agent rank (dual mode, no exploration) on a copy of ``state``."""
    ro = Rollout(agent, state.copy(), noise=0.0, mode="dual")
    return E.Trace.from_logs([ro.step() for _ in range(days)], state.cfg.content_dim)


def eval_days(cfg: ExperimentConfig, trace: E.Trace) -> list[int]:
    e = cfg.eval
    return [d.day for d in trace.days[e.warmup_days:e.warmup_days + e.eval_days]]


def supervised_baseline(cfg: ExperimentConfig, agent: Agent, train_trace: E.Trace, critic_steps: int):
    e = cfg.eval
    sup = E.SupervisedLSTM(agent.model, agent.normalizer, seed=cfg.run.seed, lr=e.sup_lr, head_width=e.sup_head,
                           clip_norm=cfg.trainer.clip_norm)
    seqs, labels, mask = E.training_windows(train_trace, agent.normalizer, cfg.trainer.gamma, e.return_window,
                                            cfg.trainer.episode_len)
    steps = critic_steps if e.sup_steps is None else e.sup_steps
    sup.fit(seqs, labels, mask, steps, e.sup_batch, np.random.default_rng([cfg.run.seed, 43]))
    return sup


def empirical_scores(cfg: ExperimentConfig, train_trace: E.Trace, trace: E.Trace) -> list[np.ndarray]:
    from .mdp import S_DIM, XT_DIM
    col = S_DIM + XT_DIM + cfg.sim.content_dim
    J = train_trace.returns(cfg.trainer.gamma, cfg.eval.return_window)
    groups = np.concatenate([d.raw_obs[:, col:col + 3] for d in train_trace.days])
    hist = np.concatenate(J)
    ok = np.isfinite(hist)
    return [E.empirical_baseline(d.raw_obs[:, col:col + 3], groups[ok], hist[ok], cfg.eval.empirical_weights,
                                 cfg.eval.empirical_percentile) for d in trace.days]


@dataclass
class EvalResult:
    table: dict
    sweep: list
    lists: list
    J: list
    scores: dict


def evaluate(cfg: ExperimentConfig, agent: Agent, train_trace: E.Trace, trace: E.Trace,
             critic_steps: int) -> EvalResult:
    """Score the eval trace with every baseline and the agent; also the alpha sweep."""
    e = cfg.eval
    J = trace.returns(cfg.trainer.gamma, e.return_window)
    rng = np.random.default_rng([cfg.run.seed, 47])
    lists = E.eval_lists(trace, J, eval_days(cfg, trace), e.list_size, rng, e.cold_age, cfg.sim.content_dim)
    if not lists:
        raise ConfigError("evaluation window holds no scorable items")
    sup = supervised_baseline(cfg, agent, train_trace, critic_steps)
    q, y_rl = E.score_trace(agent.params, agent.model, agent.normalizer, trace)
    scores = {
        "vanilla_ctr": [d.y_ctr for d in trace.days],
        "empirical": empirical_scores(cfg, train_trace, trace),
        "supervised_lstm": sup.predict_trace(trace),
        "rl_ltv": q,
    }
    table = {}
    actual = E.pooled(lists, J)
    for name, sc in scores.items():
        row = {f"ndcg@{k}": v for k, v in E.ranking_metrics(lists, J, sc, trace, e.ks).items()}
        if name in ("supervised_lstm", "rl_ltv"):
            row["rmse"], row["mae"] = E.regression_metrics(E.pooled(lists, sc), actual)
        else:
            row["rmse"] = row["mae"] = math.nan
        table[name] = row
    table["supervised_lstm"]["diverged"] = float(sup.diverged)
    grid = np.round(np.arange(0.0, 1.0 + 1e-9, e.sweep_step), 10)
    sweep = E.alpha_sweep(grid, lists, J, scores["vanilla_ctr"], y_rl, trace, e.ks)
    scores["y_rl"] = y_rl
    return EvalResult(table, sweep, lists, J, scores)


def write_report(out: Path, result: EvalResult, ks=(10, 20, 50)) -> None:
    cols = ["rmse", "mae"] + [f"ndcg@{k}" for k in ks]
    with open(out / "report.json", "w") as fh:
        json.dump({"version": 1, "table": result.table, "sweep": result.sweep}, fh, indent=1, sort_keys=True)
    (out / "report.txt").write_text(E.format_table(result.table, cols) + "\n")
    E.write_csv(out / "sweep.csv", result.sweep)


# ---------------------------------------------------------------------------
# arms


def run_arms(cfg: ExperimentConfig, agent: Agent, state: M.MarketState, out: Path) -> tuple[Path, Path]:
    """Introduce a fresh cohort, split it at random into two disjoint halves,
    and give each half an equal reserved share of the recommendation budget.
    One half is ranked by the click model alone, the other by dual rank with
    the trained agent.  Each arm's per-item daily outcomes are written to
    its own directory."""
    e = cfg.eval
    st = state.copy()
    cohort = M.spawn_cohort(e.arm_cohort, st.day, st.cfg, st.world, st.next_id)
    M.add_items(st, cohort)
    rng = np.random.default_rng([cfg.run.seed, 53])
    perm = rng.permutation(cohort.item_ids)
    half = len(perm) // 2
    arms = {"ctr": np.sort(perm[:half]), "rl": np.sort(perm[half:2 * half])}
    budget = st.cfg.daily_budget * e.arm_budget_share
    ro = Rollout(agent, st, noise=0.0, mode="dual")
    rl_set = set(int(i) for i in arms["rl"])

    def only_rl_arm(ids, a):
        # the click-model arm and the rest of the market never see the policy score
        return np.array([x if int(i) in rl_set else 0.0 for i, x in zip(ids, a)])

    def list_price_elsewhere(ids, p):
        return np.array([x if int(i) in rl_set else cfg.trainer.price_value for i, x in zip(ids, p)])

    rows = {name: [] for name in arms}
    for _ in range(e.arm_days):
        live = set(int(i) for i in st.item_ids)
        pools = []
        taken = set()
        for name, ids in arms.items():
            alive = np.array([i for i in ids if int(i) in live], dtype=np.int64)
            taken |= set(int(i) for i in alive)
            if alive.size:
                pools.append(M.Pool(alive, budget))
        rest = np.array([i for i in st.item_ids if int(i) not in taken], dtype=np.int64)
        pools.append(M.Pool(rest, st.cfg.daily_budget - budget * len(pools)))
        logd = ro.step(pools=pools, alpha_override=only_rl_arm, price_override=list_price_elsewhere)
        r = logd.result
        for name, ids in arms.items():
            idset = set(int(i) for i in ids)
            for k, i in enumerate(r.item_ids):
                if int(i) in idset:
                    rows[name].append((r.day, int(i), r.pv_rec[k], r.pv_other[k], r.ipv[k], r.sls[k], r.gmv[k],
                                       r.price[k]))
    dirs = []
    for name, ids in arms.items():
        d = out / f"arm_{name}"
        d.mkdir(parents=True, exist_ok=True)
        meta = {"version": ARM_VERSION, "arm": name, "sim_seed": cfg.sim.seed, "cohort": [int(i) for i in ids],
                "budget": budget, "days": e.arm_days}
        (d / "arm.json").write_text(json.dumps(meta, sort_keys=True))
        with open(d / "outcomes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "item_id", "pv_rec", "pv_other", "ipv", "sls", "gmv", "price"])
            for row in rows[name]:
                w.writerow([row[0], row[1]] + [repr(float(x)) for x in row[2:]])
        dirs.append(d)
    return dirs[0], dirs[1]


def _arm_totals(d: Path) -> dict:
    tot = {"pv": 0.0, "pv_rec": 0.0, "ipv": 0.0, "sls": 0.0, "gmv": 0.0}
    with open(d / "outcomes.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            tot["pv_rec"] += float(row["pv_rec"])
            tot["pv"] += float(row["pv_rec"]) + float(row["pv_other"])
            tot["ipv"] += float(row["ipv"])
            tot["sls"] += float(row["sls"])
            tot["gmv"] += float(row["gmv"])
    return tot


def compare_arms(arm_dirs, baseline: str = "ctr") -> dict:
    """Per-arm cold-cohort totals and relative deltas (%) against the baseline arm.

    Arms must come from the same simulator seed and hold disjoint cohorts;
    passing the same directory twice is the degenerate self-comparison.
    """
    arm_dirs = [Path(d) for d in arm_dirs]
    if not arm_dirs:
        raise ConfigError("no arms given")
    metas = []
    for d in arm_dirs:
        try:
            meta = json.loads((d / "arm.json").read_text())
        except OSError as exc:
            raise ConfigError(f"not an arm directory: {d}") from exc
        if meta.get("version") != ARM_VERSION:
            raise ConfigError(f"{d}: unsupported arm format {meta.get('version')}")
        metas.append(meta)
    if len({m["sim_seed"] for m in metas}) != 1:
        raise ProtocolError("arms come from different simulator seeds")
    distinct = {}
    for d, m in zip(arm_dirs, metas):
        distinct.setdefault(d.resolve(), m)
    seen: set[int] = set()
    for m in distinct.values():
        overlap = seen & set(m["cohort"])
        if overlap:
            raise ProtocolError(f"cohorts overlap on {len(overlap)} items")
        seen |= set(m["cohort"])
    totals = {m["arm"]: _arm_totals(d) for d, m in zip(arm_dirs, metas)}
    base = totals.get(baseline, totals[metas[0]["arm"]])
    deltas = {}
    for name, t in totals.items():
        deltas[name] = {k: (100.0 * (t[k] - base[k]) / base[k] if base[k] else math.nan) for k in t}
    return {"totals": totals, "deltas_pct": deltas, "baseline": baseline if baseline in totals else metas[0]["arm"]}


# ---------------------------------------------------------------------------
# full run


def critic_updates(trainer: Trainer) -> int:
    """Adam steps taken by the critic so far (one per step of every sampled batch)."""
    return int(trainer.agent.opt_critic.step)


def write_manifest(out: Path) -> str:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.json", "resume.pkl"))
    entries = {str(p.relative_to(out)): _sha(p) for p in files}
    h = hashlib.sha256(json.dumps(entries, sort_keys=True).encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps({"files": entries, "hash": h}, indent=1, sort_keys=True))
    return h


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Train, deploy, evaluate and (optionally) run arms; returns the artifact directory."""
    cfg.validate()
    out = cfg.output_dir()
    trainer = train(cfg, out)
    train_trace = E.Trace.from_logs(trainer.logs, cfg.sim.content_dim)
    e = cfg.eval
    trace = deploy(trainer.agent, trainer.state, e.warmup_days + e.eval_days + e.return_window - 1)
    train_trace.save(out / "train_trace.npz")
    trace.save(out / "eval_trace.npz")
    result = evaluate(cfg, trainer.agent, train_trace, trace, critic_updates(trainer))
    write_report(out, result, e.ks)
    if e.arms:
        run_arms(cfg, trainer.agent, trainer.state, out)
    write_manifest(out)
    return out


ABLATIONS = {"x_i": "no_x_i", "x_t": "no_x_t", "recurrent": "no_recurrent"}


def ablated(cfg: ExperimentConfig, which: str) -> ExperimentConfig:
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {which!r}; choose from {sorted(ABLATIONS)}")
    tr = dataclasses.replace(cfg.trainer, **{ABLATIONS[which]: True})
    run = dataclasses.replace(cfg.run, name=f"{cfg.run.name}-no_{which}",
                              out_dir=None if cfg.run.out_dir is None else str(Path(cfg.run.out_dir) / f"no_{which}"))
    return ExperimentConfig(cfg.sim, tr, cfg.eval, run)


def ablation_study(cfg: ExperimentConfig, which=tuple(ABLATIONS), full_dir: Path | None = None) -> dict:
    """Train the full agent and each ablation on the same market seed, then
    rank the full agent's eval trace offline with every critic.

    ``full_dir`` reuses a finished full run instead of training it again."""
    full_dir = run_experiment(cfg) if full_dir is None else Path(full_dir)
    trace = E.Trace.load(full_dir / "eval_trace.npz")
    e = cfg.eval
    J = trace.returns(cfg.trainer.gamma, e.return_window)
    lists = E.eval_lists(trace, J, eval_days(cfg, trace), e.list_size, np.random.default_rng([cfg.run.seed, 47]),
                         e.cold_age, cfg.sim.content_dim)
    agents = {"full": Agent.load(full_dir / "checkpoints" / "final.ckpt")}
    for w in which:
        sub = ablated(cfg, w)
        t = train(sub, sub.output_dir())
        agents[f"no_{w}"] = t.agent
    table = {}
    # every critic scores the same records
    for name, agent in agents.items():
        q, _ = E.score_trace(agent.params, agent.model, agent.normalizer, trace)
        table[name] = {f"ndcg@{k}": v for k, v in E.ranking_metrics(lists, J, q, trace, e.ks).items()}
    with open(full_dir / "ablation.json", "w") as fh:
        json.dump(table, fh, indent=1, sort_keys=True)
    return table
