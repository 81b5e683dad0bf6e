"""End-to-end comparison run: Base vs SFT vs GRPO vs calibration-aware GRPO.

Output directory layout::

    config.toml          resolved config snapshot
    MANIFEST.json        status (complete/incomplete) and finished stages
    data/*.jsonl         instance sets
    checkpoints/         <method>.bin + .json sidecars (best checkpoints)
    history/<mode>.jsonl per-epoch training history
    records/*.jsonl      prediction records behind every metric
    posthoc/*.json       fitted calibrators
    diagnostics/*.json   study reports (+ histogram CSVs)
    plots/*.svg          reliability diagrams
    metrics.jsonl        one line per (method, split, posthoc variant)
    report.csv           the same rows as a table
    run_record.json      config snapshot, metrics, artifact paths, wall-clock
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .. import calibration as cal
from .. import diagnostics as diag
from .. import posthoc
from .. import trainers as tr
from ..errors import DiagnosticError
from ..policy import PolicyParams, VocabLayout, init_policy
from ..synthworld import Instance, sample_instances, write_instances
from .config import RunConfig
from .plotting import render_reliability_svg

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METHODS = ("base", "sft", "grpo", "ours")
MODE_OF = {"sft": "sft", "grpo": "grpo", "ours": "calib_grpo"}
SPLITS = ("in_domain", "ood")
POSTHOC_METHODS = ("grpo", "ours")
POSTHOC_VARIANTS = ("platt", "isotonic")
HELDOUT = "in_domain_heldout"

# disjoint id ranges per data split
ID_BASE = {"train": 0, "val": 1_000_000, "eval": 2_000_000, "ood": 3_000_000, "pretrain": 4_000_000}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunRecord:
    config: dict
    metrics: list[dict]
    artifacts: dict[str, str]
    wall_clock: float
    format_version: int = FORMAT_VERSION
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config,
            "metrics": self.metrics,
            "diagnostics": self.diagnostics,
            "artifacts": self.artifacts,
            "wall_clock": self.wall_clock,
        }


def persist_records(records: Iterable[cal.PredictionRecord], path: str | Path) -> Path:
    """JSONL, one record per line, stable field order."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"could not create directory for {path}: {exc}") from exc
    return cal.write_records(records, path)


def _child_seed(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def metric_row(method: str, split: str, variant: str, report: cal.CalibrationReport, records_path: str) -> dict:
    row = {"method": method, "split": split, "posthoc": variant}
    row.update(report.metrics())
    row["records"] = records_path
    return row


class _Manifest:
    def __init__(self, out: Path):
        self.path = out / "MANIFEST.json"
        self.stages: list[str] = []
        self.write("incomplete")

    def write(self, status: str, failed: str | None = None, error: str | None = None) -> None:
        doc = {"status": status, "completed_stages": self.stages, "format_version": FORMAT_VERSION}
        if failed:
            doc["failed_stage"] = failed
            doc["error"] = error
        self.path.write_text(json.dumps(doc, indent=2) + "\n")

    @contextmanager
    def stage(self, name: str):
        log.info("stage %s", name)
        try:
            yield
        except Exception as exc:
            self.write("incomplete", failed=name, error=str(exc))
            raise StageError(name, exc) from exc
        self.stages.append(name)
        self.write("incomplete")


@dataclass
class Datasets:
    train: list[Instance]
    val: list[Instance]
    eval: list[Instance]
    ood: list[Instance]
    pretrain: list[Instance]


def make_datasets(config: RunConfig) -> Datasets:
    s, d = config.seed, config.data
    return Datasets(
        train=sample_instances(config.task, d.n_train, s, ID_BASE["train"]),
        val=sample_instances(config.task, d.n_val, s, ID_BASE["val"]),
        eval=sample_instances(config.task, d.n_eval, s, ID_BASE["eval"]),
        ood=sample_instances(config.ood_task, d.n_ood, s, ID_BASE["ood"]),
        pretrain=sample_instances(config.pretrain_task, config.warmup.n_instances, s, ID_BASE["pretrain"]),
    )


def make_base(config: RunConfig, data: Datasets) -> tuple[PolicyParams, list[float]]:
    layout = VocabLayout.for_spec(config.task)
    init = init_policy(config.hidden_dim, layout, config.task.trace_length, _child_seed(config.seed, 1))
    return tr.warmup_base(init, data.pretrain, data.val, config.warmup, _child_seed(config.seed, 2))


def calibration_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = _child_seed(seed, 7).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


def run_experiment(config: RunConfig, out: str | Path | None = None) -> RunRecord:
    """Run the full comparison and persist everything under ``out``.

    Deterministic given the config (including seed); only the wall-clock
    field of ``run_record.json`` differs between identical runs.
    """
    t0 = time.perf_counter()
    out = Path(out if out is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(out)
    (out / "config.toml").write_text(config.to_toml())
    artifacts: dict[str, str] = {"config": "config.toml"}
    ev = config.eval

    with manifest.stage("data"):
        data = make_datasets(config)
        for name in ("train", "val", "eval", "ood"):
            rel = f"data/{name}.jsonl"
            (out / "data").mkdir(exist_ok=True)
            write_instances(getattr(data, name), out / rel)
            artifacts[f"data/{name}"] = rel

    models: dict[str, PolicyParams] = {}
    with manifest.stage("base"):
        base, warm_accs = make_base(config, data)
        models["base"] = base
        artifacts["checkpoints/base"] = str(base.save(out / "checkpoints" / "base").relative_to(out))
        _write_jsonl(out / "history" / "warmup.jsonl", [{"step": i + 1, "check_accuracy": a} for i, a in enumerate(warm_accs)])

    select_on = data.val if ev.selection_split == "val" else data.eval
    for i, method in enumerate(("sft", "grpo", "ours"), start=1):
        mode = MODE_OF[method]
        with manifest.stage(f"train:{method}"):
            result = tr.train(
                mode, base, data.train, select_on, config.train[mode], _child_seed(config.seed, 10 + i)
            )
            models[method] = result.best
            artifacts[f"checkpoints/{method}"] = str(result.best.save(out / "checkpoints" / method).relative_to(out))
            result.final.save(out / "checkpoints" / f"{method}_final")
            rel = f"history/{mode}.jsonl"
            _write_jsonl(out / rel, result.history_dicts())
            artifacts[f"history/{method}"] = rel

    rows: list[dict] = []
    records: dict[tuple[str, str], list[cal.PredictionRecord]] = {}
    with manifest.stage("evaluate"):
        for method in METHODS:
            for split, insts in (("in_domain", data.eval), ("ood", data.ood)):
                recs = cal.extract_records(models[method], insts, split=split, method=method)
                records[(method, split)] = recs
                rel = f"records/{method}_{split}.jsonl"
                persist_records(recs, out / rel)
                rows.append(metric_row(method, split, "none", _report(recs, ev), rel))

    if config.posthoc.enabled:
        with manifest.stage("posthoc"):
            rows.extend(_posthoc(config, records, out, artifacts))

    diag_summary: dict = {}
    if config.diagnostics.studies:
        with manifest.stage("diagnostics"):
            diag_summary = _diagnostics(config, models, data, out, artifacts)

    with manifest.stage("plots"):
        for row in rows:
            recs = cal.read_records(out / row["records"])
            bins, hist = cal.reliability_bins(recs, ev.bins, ev.binning)
            name = f"{row['method']}_{row['split']}" + ("" if row["posthoc"] == "none" else f"_{row['posthoc']}")
            rel = f"plots/{name}.svg"
            title = f"{row['method']} / {row['split']}" + ("" if row["posthoc"] == "none" else f" / {row['posthoc']}")
            render_reliability_svg(bins, hist, out / rel, title=title, ece=row["ece"])
            artifacts[f"plots/{name}"] = rel

    with manifest.stage("report"):
        _write_jsonl(out / "metrics.jsonl", rows)
        artifacts["metrics"] = "metrics.jsonl"
        from .report import tabulate

        (out / "report.csv").write_text(tabulate([out], require_complete=False))
        artifacts["report"] = "report.csv"

    record = RunRecord(
        config=config.raw,
        metrics=rows,
        artifacts=artifacts,
        wall_clock=time.perf_counter() - t0,
        diagnostics=diag_summary,
    )
    (out / "run_record.json").write_text(json.dumps(record.to_json(), indent=2) + "\n")
    manifest.write("complete")
    return record


def _report(recs: Sequence[cal.PredictionRecord], ev) -> cal.CalibrationReport:
    return cal.calibration_report(recs, ev.bins, ev.threshold, ev.binning)


def _posthoc(config: RunConfig, records, out: Path, artifacts: dict) -> list[dict]:
    rows = []
    ev = config.eval
    (out / "posthoc").mkdir(exist_ok=True)
    for method in POSTHOC_METHODS:
        in_recs = records[(method, "in_domain")]
        fit_idx, held_idx = calibration_split(len(in_recs), config.posthoc.calibration_fraction, config.seed)
        fit_set = [in_recs[i] for i in fit_idx]
        held = [_with_split(in_recs[i], HELDOUT) for i in held_idx]
        rel = f"records/{method}_{HELDOUT}.jsonl"
        persist_records(held, out / rel)
        rows.append(metric_row(method, HELDOUT, "none", _report(held, ev), rel))
        targets = {HELDOUT: held, "ood": records[(method, "ood")]}
        for variant in POSTHOC_VARIANTS:
            try:
                fitted = posthoc.fit_platt(fit_set) if variant == "platt" else posthoc.fit_isotonic(fit_set)
            except Exception as exc:  # single-class calibration split
                log.warning("posthoc %s on %s skipped: %s", variant, method, exc)
                continue
            crel = f"posthoc/{method}_{variant}.json"
            posthoc.save_calibrator(fitted, out / crel)
            artifacts[crel[:-5]] = crel
            for split, recs in targets.items():
                new = posthoc.recalibrate_records(fitted, recs, variant)
                rrel = f"records/{method}_{split}_{variant}.jsonl"
                persist_records(new, out / rrel)
                rows.append(metric_row(method, split, variant, _report(new, ev), rrel))
    return rows


def _with_split(r: cal.PredictionRecord, split: str) -> cal.PredictionRecord:
    from dataclasses import replace

    return replace(r, split=split)


def _diagnostics(config: RunConfig, models, data: Datasets, out: Path, artifacts: dict) -> dict:
    dc = config.diagnostics
    summary: dict = {}
    (out / "diagnostics").mkdir(exist_ok=True)
    pool = data.train[: dc.n_instances]
    for j, method in enumerate(METHODS):
        entry: dict = {}
        if "overconfidence" in dc.studies:
            study = diag.rollout_confidence_study(
                models[method], pool, dc.samples_per_instance, dc.temperature,
                config.eval.threshold, _child_seed(config.seed, 30 + j),
            )
            rel = f"diagnostics/{method}_overconfidence.json"
            (out / rel).write_text(json.dumps(study.to_json()) + "\n")
            artifacts[rel[:-5]] = rel
            entry["overconfidence_ratio"] = study.ratio
        if "swap" in dc.studies:
            rel = f"diagnostics/{method}_swap.json"
            try:
                sw = diag.swap_study(models[method], data.eval, dc.confidence_floor, _child_seed(config.seed, 40 + j))
                (out / rel).write_text(json.dumps(sw.to_json()) + "\n")
                (out / f"diagnostics/{method}_swap_hist.csv").write_text(diag.histogram_csv(sw.flipped_confidences))
                entry["flip_ratio"] = sw.flip_ratio
                entry["swap_n"] = sw.n
            except DiagnosticError as exc:
                (out / rel).write_text(json.dumps({"error": str(exc), **_jsonable(exc.context)}) + "\n")
                entry["flip_ratio"] = None
            artifacts[rel[:-5]] = rel
        summary[method] = entry
    return summary


def _jsonable(d: dict) -> dict:
    return {k: v for k, v in d.items() if isinstance(v, (str, int, float, bool, type(None)))}


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_metrics(run_dir: str | Path) -> list[dict]:
    with (Path(run_dir) / "metrics.jsonl").open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
