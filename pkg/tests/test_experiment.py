import csv
import json
from pathlib import Path

import numpy as np
import pytest

from rlltv import experiment as X
from rlltv.cli import main
from rlltv.config import load_config
from rlltv.trainer import Agent, Trainer

TINY = Path(__file__).parent / "data" / "tiny.cfg"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    cfg = load_config(TINY, {"run.out_dir": str(tmp_path_factory.mktemp("tiny") / "out")})
    return cfg, X.run_experiment(cfg)


def test_run_directory_layout(run):
    cfg, out = run
    for name in ("config.txt", "metrics.jsonl", "report.json", "report.txt", "sweep.csv", "train_trace.npz",
                 "eval_trace.npz", "manifest.json", "checkpoints/final.ckpt", "arm_ctr/outcomes.csv",
                 "arm_rl/outcomes.csv"):
        assert (out / name).exists(), name
    metrics = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["session"] for m in metrics] == [0, 1]
    report = json.loads((out / "report.json").read_text())
    assert set(report["table"]) == set(X.SCORERS)
    assert [r["alpha"] for r in report["sweep"]][::10] == [0.0, 0.5, 1.0]
    assert load_config(out / "config.txt") == cfg


def test_manifest_hashes_every_artifact(run):
    _, out = run
    man = json.loads((out / "manifest.json").read_text())
    assert "resume.pkl" not in man["files"]
    for rel, digest in man["files"].items():
        assert X._sha(out / rel) == digest


def test_rerun_is_byte_identical(run, tmp_path):
    cfg, out = run
    cfg2 = load_config(TINY, {"run.out_dir": str(tmp_path / "again")})
    out2 = X.run_experiment(cfg2)
    a = json.loads((out / "manifest.json").read_text())["files"]
    b = json.loads((out2 / "manifest.json").read_text())["files"]
    # config.txt records the output directory, everything else must match
    a.pop("config.txt")
    b.pop("config.txt")
    assert a == b


def test_interrupted_training_resumes_to_the_same_state(run, tmp_path, monkeypatch):
    cfg, out = run
    cfg2 = load_config(TINY, {"run.out_dir": str(tmp_path / "resumed")})
    real = Trainer.run_session

    def flaky(self):
        if self.session == 1:
            raise KeyboardInterrupt
        return real(self)

    monkeypatch.setattr(Trainer, "run_session", flaky)
    with pytest.raises(KeyboardInterrupt):
        X.train(cfg2, cfg2.output_dir())
    monkeypatch.setattr(Trainer, "run_session", real)
    X.train(cfg2, cfg2.output_dir())
    done = cfg2.output_dir()
    assert (done / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()
    assert (done / "checkpoints/final.ckpt").read_bytes() == (out / "checkpoints/final.ckpt").read_bytes()


def _totals(path):
    cols = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v))
    c = {k: np.array(v) for k, v in cols.items()}
    return {"pv": np.sum(c["pv_rec"] + c["pv_other"]), "pv_rec": c["pv_rec"].sum(), "ipv": c["ipv"].sum(),
            "sls": c["sls"].sum(), "gmv": c["gmv"].sum()}


def test_arm_comparison_matches_a_re_aggregation(run):
    _, out = run
    rep = X.compare_arms([out / "arm_ctr", out / "arm_rl"])
    base, rl = _totals(out / "arm_ctr/outcomes.csv"), _totals(out / "arm_rl/outcomes.csv")
    for k in base:
        assert rep["totals"]["rl"][k] == pytest.approx(rl[k], abs=1e-10)
        if base[k]:
            assert rep["deltas_pct"]["rl"][k] == pytest.approx(100 * (rl[k] - base[k]) / base[k], abs=1e-10)
    ctr = json.loads((out / "arm_ctr/arm.json").read_text())
    rlm = json.loads((out / "arm_rl/arm.json").read_text())
    assert not set(ctr["cohort"]) & set(rlm["cohort"]) and len(ctr["cohort"]) == len(rlm["cohort"])


def test_self_comparison_is_all_zero(run):
    _, out = run
    rep = X.compare_arms([out / "arm_ctr", out / "arm_ctr"])
    for k, v in rep["deltas_pct"]["ctr"].items():
        # a metric that is zero in the baseline has no relative change
        assert v == 0.0 if rep["totals"]["ctr"][k] else np.isnan(v)


def test_offline_commands_reproduce_the_report(run, tmp_path, capsys):
    _, out = run
    ck = str(out / "checkpoints/final.ckpt")
    assert main(["eval", "--checkpoint", ck, "--trace", str(out / "eval_trace.npz"), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e/report.json").read_bytes() == (out / "report.json").read_bytes()
    assert main(["sweep-alpha", "--checkpoint", ck, "--trace", str(out / "eval_trace.npz"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "s.csv").read_bytes() == (out / "sweep.csv").read_bytes()


def test_ablation_flags_reach_the_agent(run):
    cfg, out = run
    sub = X.ablated(cfg, "x_t")
    assert sub.trainer.no_x_t and sub.output_dir() == out / "no_x_t"
    with pytest.raises(Exception):
        X.ablated(cfg, "bogus")
    agent = Agent.load(out / "checkpoints/final.ckpt")
    assert not (agent.model.no_x_i or agent.model.no_x_t or agent.model.no_recurrent)
