"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``. The end-to-end criteria share three
desk-config runs (seeds 0, 1, 2) executed through the ``calibrl run`` CLI.
"""

from __future__ import annotations

import json
from fractions import Fraction
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit, logit

from calibrl import calibration as cal
from calibrl import diagnostics as diag
from calibrl import policy as pol
from calibrl import posthoc as ph
from calibrl import trainers as tr
from calibrl.calibration import PredictionRecord
from calibrl.harness import cli
from calibrl.harness.config import load_config
from calibrl.harness.pipeline import read_metrics
from calibrl.harness.report import read_table, tabulate
from calibrl.policy import VocabLayout, init_policy
from calibrl.synthworld import features_matrix, gold_vector, make_task_spec, monte_carlo_bayes_accuracy, sample_instances

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.toml"
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    """Print one verdict line per criterion, outside pytest's capture."""

    def emit(number: int, title: str, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return emit


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    runs, seconds = {}, {}
    for seed in SEEDS:
        out = base / f"seed{seed}"
        t0 = time.perf_counter()
        code = cli.main(["run", "--config", str(DESK), "--seed", str(seed), "--out", str(out)])
        seconds[seed] = time.perf_counter() - t0
        assert code == 0, f"calibrl run failed for seed {seed}"
        runs[seed] = out
    return runs, seconds


def _metric(run: Path, method: str, split: str, key: str, posthoc: str = "none") -> float:
    for row in read_metrics(run):
        if (row["method"], row["split"], row["posthoc"]) == (method, split, posthoc):
            return row[key]
    raise KeyError((method, split, posthoc))


def _mean(runs, method, split, key, posthoc="none") -> float:
    return float(np.mean([_metric(r, method, split, key, posthoc) for r in runs.values()]))


def _small_case(seed=0):
    spec = make_task_spec({"num_options": 4, "trace_length": 3})
    lay = VocabLayout.for_spec(spec)
    params = init_policy(8, lay, 3, np.random.default_rng(seed))
    params = params.with_flat(params.flat() * 1.5)
    insts = sample_instances(spec, 4, seed)
    return params, insts


# --- 1 ------------------------------------------------------------------------


def test_criterion_01_gradient_exactness(report):
    params, insts = _small_case()
    G = 4
    cfg = tr.TrainConfig(mode="calib_grpo", group_size=G, lam=0.3)
    X, gold = features_matrix(insts[:1]), gold_vector(insts[:1])
    gb = tr.sample_groups(params, X, gold, np.array([insts[0].id]), cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    theta = params.with_flat(params.flat() + 0.05 * rng.standard_normal(params.size))

    def neg(g):
        return g.with_flat(-g.flat())

    checks = {
        "sft": lambda p: tr.sft_grad(p, insts, "empty_trace")[::-1],
        "grpo_surrogate": lambda p: (
            -tr.grpo_surrogate_grad(p, params, gb, cfg)[1],
            neg(tr.grpo_surrogate_grad(p, params, gb, cfg)[0]),
        ),
        "combined": lambda p: tr.combined_loss_grad(p, params, gb, cfg)[:2],
    }
    results = {}
    for name, fn in checks.items():
        t0 = time.perf_counter()
        rep = pol.gradient_check(theta, fn, tolerance=1e-4)
        results[name] = (rep.max_rel_error, time.perf_counter() - t0)
    ok = all(err < 1e-4 and sec < 5 for err, sec in results.values())
    detail = ", ".join(f"{k} err={e:.1e} t={s:.2f}s" for k, (e, s) in results.items())
    assert report(1, "gradient exactness (H=8, G=4, K=4)", ok, detail)


# --- 2 ------------------------------------------------------------------------


def test_criterion_02_advantage_algebra(report):
    a = tr.group_advantages([1, 0, 0, 1])
    ex1 = np.max(np.abs(a - [1, -1, -1, 1])) <= 1e-7  # std + 1e-8 in the denominator
    ex2 = np.array_equal(tr.group_advantages([1, 1, 1, 1]), np.zeros(4))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(2000):
        G = int(rng.integers(2, 33))
        r = (rng.random(G) < rng.random()).astype(float)
        if r.std() > 0:
            worst = max(worst, abs(tr.group_advantages(r).mean()))
    ok = ex1 and ex2 and worst <= 1e-9
    assert report(2, "advantage algebra", ok, f"(1,0,0,1) ok={ex1}, all-equal ok={ex2}, max |mean|={worst:.1e}")


# --- 3 ------------------------------------------------------------------------


def test_criterion_03_decision_masking(report):
    rng = np.random.default_rng(0)
    spec = make_task_spec({"num_options": 4, "trace_length": 4})
    lay = VocabLayout.for_spec(spec)
    params = init_policy(8, lay, 4, rng)
    insts = sample_instances(spec, 50, 0)
    failures = 0
    for i in range(1000):
        G = int(rng.integers(2, 17))
        inst = insts[i % len(insts)]
        batch = pol.sample_batch(params, np.repeat(inst.features[None], G, axis=0), rng)
        adv = rng.standard_normal((G, batch.tokens.shape[1])) * rng.choice([1e-300, 1.0, 1e300])
        group = tr.RolloutGroup(inst, batch, tr.batch_rewards(batch, inst.gold), adv)
        before = group.advantages.copy()
        masked = tr.mask_decision_advantage(group)
        d = group.decision_index
        others = np.delete(np.arange(adv.shape[1]), d)
        zero_bits = np.all(masked.advantages[:, d].view(np.uint64) == 0)
        same = np.array_equal(masked.advantages[:, others].view(np.uint64), before[:, others].view(np.uint64))
        untouched = np.array_equal(group.advantages.view(np.uint64), before.view(np.uint64))
        failures += not (zero_bits and same and untouched)
    ok = failures == 0
    assert report(3, "decision-token masking", ok, f"{failures} failures over 1000 random groups")


# --- 4 ------------------------------------------------------------------------


def test_criterion_04_ece_estimator(report):
    rng = np.random.default_rng(0)
    exact = True
    for M in (1, 2, 3, 5, 10, 15, 50, 100):
        correct = rng.random(1000) < rng.random()
        recs = [PredictionRecord(i, 1.0, 0, 0 if c else 1, bool(c)) for i, c in enumerate(correct)]
        exact &= cal.ece(recs, M) == float(Fraction(int((~correct).sum()), correct.size))
    p = rng.uniform(0.3, 1.0, 10_000)
    c = rng.random(10_000) < p
    recs = [PredictionRecord(i, float(pi), 0, 0 if ci else 1, bool(ci)) for i, (pi, ci) in enumerate(zip(p, c))]
    t0 = time.perf_counter()
    val = cal.ece(recs, 15)
    sec = time.perf_counter() - t0
    ok = exact and val < 0.02 and sec < 1
    assert report(4, "ECE estimator", ok, f"1-a exact for all M={exact}, calibrated ECE={val:.4f}, t={sec:.3f}s")


# --- 5 ------------------------------------------------------------------------


def _grid_fit(y):
    grid = np.linspace(0, 1, 1001)
    cost = np.zeros_like(grid)
    back = []
    for yi in y:
        prev = np.minimum.accumulate(cost)
        arg = np.zeros(grid.size, dtype=int)
        for j in range(1, grid.size):
            arg[j] = j if cost[j] < prev[j - 1] else arg[j - 1]
        back.append(arg)
        cost = prev + (yi - grid) ** 2
    j = int(np.argmin(cost))
    out = [grid[j]]
    for arg in reversed(back[1:]):
        j = arg[j]
        out.append(grid[j])
    return np.array(out[::-1])


def test_criterion_05_isotonic_and_platt(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(1, 9))
        y = rng.random(n) if rng.random() < 0.5 else (rng.random(n) < 0.5).astype(float)
        worst = max(worst, float(np.max(np.abs(ph.pav(y) - _grid_fit(y)))))
    p = rng.uniform(0.02, 0.98, 10_000)
    y = rng.random(10_000) < expit(2 * logit(p) + 1)
    fit = ph.fit_platt((p, y))
    da, db = abs(fit.slope - 2) / 2, abs(fit.intercept - 1)
    ok = worst <= 1e-3 and da < 0.05 and db < 0.05
    detail = f"PAV vs grid max dev={worst:.1e}, Platt (a,b)=({fit.slope:.3f},{fit.intercept:.3f})"
    assert report(5, "isotonic/Platt correctness", ok, detail)


# --- 6 ------------------------------------------------------------------------


def test_criterion_06_extractor_certificate(report):
    cfg = load_config(DESK, environ={})
    lay = VocabLayout.for_spec(cfg.task)
    ex = diag.extractor_policy(lay, cfg.task.trace_length)
    insts = sample_instances(cfg.task, 500, 0)
    runs = [
        (diag.swap_study(ex, insts, rng=s).flip_ratio, diag.rollout_confidence_study(ex, insts, 64, rng=s).ratio)
        for s in (0, 1)
    ]
    ok = all(f == 1.0 and r == 1.0 for f, r in runs) and runs[0] == runs[1]
    assert report(6, "extraction-mechanism certificate", ok, f"(flip_ratio, ratio) per seed = {runs}")


# --- 7 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_grpo_overconfidence(report, desk_runs):
    runs, seconds = desk_runs
    ratios = []
    for run in runs.values():
        study = json.loads((run / "diagnostics" / "grpo_overconfidence.json").read_text())
        assert study["samples_per_instance"] == 64 and study["threshold"] == 0.99
        ratios.append(study["ratio"])
    mean = float(np.mean(ratios))
    slowest = max(seconds.values())
    ok = mean > 0.5 and slowest < 600
    detail = f"mean ratio={mean:.3f} (per seed {[round(r, 3) for r in ratios]}), slowest seed {slowest:.1f}s"
    assert report(7, "GRPO rollout overconfidence", ok, detail)


# --- 8 ------------------------------------------------------------------------


def _orderings(runs, split):
    acc = {m: _mean(runs, m, split, "accuracy") for m in ("base", "sft", "grpo", "ours")}
    ece = {m: _mean(runs, m, split, "ece") for m in ("base", "sft", "grpo", "ours")}
    checks = {
        "Acc(GRPO) >= Acc(Base)+3": acc["grpo"] >= acc["base"] + 0.03,
        "Acc(Ours) >= Acc(GRPO)-2": acc["ours"] >= acc["grpo"] - 0.02,
        "ECE(SFT) <= ECE(GRPO)-5": ece["sft"] <= ece["grpo"] - 0.05,
        "ECE(Ours) <= ECE(GRPO)-3": ece["ours"] <= ece["grpo"] - 0.03,
    }
    return acc, ece, checks


@pytest.mark.slow
def test_criterion_08_table_orderings(report, desk_runs):
    runs, _ = desk_runs
    cfg = load_config(DESK, environ={})
    bayes = monte_carlo_bayes_accuracy(cfg.task, 1_000_000)
    lines, ok = [f"Bayes acc={bayes:.3f}"], abs(bayes - 0.75) < 0.01
    for split in ("in_domain", "ood"):
        acc, ece, checks = _orderings(runs, split)
        ok &= all(checks.values())
        summary = " ".join(f"{m}:{100 * acc[m]:.1f}/{100 * ece[m]:.1f}" for m in acc)
        failed = [k for k, v in checks.items() if not v]
        lines.append(f"{split} acc/ece {summary}" + (f" FAILED {failed}" if failed else ""))
    assert report(8, "directional method orderings", ok, "; ".join(lines))


# --- 9 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_isotonic_posthoc(report, desk_runs):
    runs, _ = desk_runs
    wins = {}
    for method in ("grpo", "ours"):
        wins[method] = sum(
            _metric(r, method, "in_domain_heldout", "ece", "isotonic") < _metric(r, method, "in_domain_heldout", "ece")
            for r in runs.values()
        )
    rows = read_table(tabulate(list(runs.values())))
    variants = {(r["run"], r["method"], r["split"], r["posthoc"]) for r in rows}
    complete = all(
        (run.name, m, s, v) in variants
        for run in runs.values()
        for m in ("grpo", "ours")
        for s in ("in_domain_heldout", "ood")
        for v in ("platt", "isotonic")
    )
    ok = all(w >= 2 for w in wins.values()) and complete
    assert report(9, "isotonic post-hoc lowers held-out ECE", ok, f"seeds improved {wins} of 3, all variants tabulated={complete}")


# --- 10 -----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_determinism(report, desk_runs, tmp_path):
    runs, _ = desk_runs
    again = tmp_path / "seed0_again"
    assert cli.main(["run", "--config", str(DESK), "--seed", "0", "--out", str(again)]) == 0
    first = runs[0]
    same_metrics = (first / "metrics.jsonl").read_bytes() == (again / "metrics.jsonl").read_bytes()
    svgs = sorted(p.name for p in (first / "plots").glob("*.svg"))
    same_svgs = svgs == sorted(p.name for p in (again / "plots").glob("*.svg")) and all(
        (first / "plots" / n).read_bytes() == (again / "plots" / n).read_bytes() for n in svgs
    )
    ok = same_metrics and same_svgs and len(svgs) > 0
    assert report(10, "run determinism", ok, f"metrics identical={same_metrics}, {len(svgs)} SVGs identical={same_svgs}")


# --- supplementary end-to-end expectations (not numbered criteria) ------------


@pytest.mark.slow
def test_pipeline_rl_versus_sft_ordering(desk_runs):
    runs, _ = desk_runs
    assert _mean(runs, "grpo", "in_domain", "accuracy") >= _mean(runs, "sft", "in_domain", "accuracy")
    assert _mean(runs, "sft", "in_domain", "ece") < _mean(runs, "grpo", "in_domain", "ece")
    assert _mean(runs, "ours", "in_domain", "ece") < _mean(runs, "grpo", "in_domain", "ece")


@pytest.mark.slow
def test_calibration_aware_posterior_gap_smaller(desk_runs):
    runs, _ = desk_runs
    assert _mean(runs, "ours", "in_domain", "posterior_gap") < _mean(runs, "grpo", "in_domain", "posterior_gap")


@pytest.mark.slow
def test_grpo_mean_confidence_high(desk_runs):
    runs, _ = desk_runs
    means = [np.mean([r.p for r in cal.read_records(run / "records" / "grpo_in_domain.jsonl")]) for run in runs.values()]
    assert np.mean(means) > 0.9


@pytest.mark.slow
def test_grpo_swap_flip_ratio_reported(desk_runs):
    runs, _ = desk_runs
    for run in runs.values():
        doc = json.loads((run / "diagnostics" / "grpo_swap.json").read_text())
        assert "flip_ratio" in doc or "error" in doc


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
