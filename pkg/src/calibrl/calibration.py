"""Prediction records and calibration metrics.

ECE uses equal-mass bins by default: records are sorted by confidence
(ties broken by record id) and split into M contiguous bins whose sizes
differ by at most one. SCE and MCE are class-conditional plug-in
estimators over the full decision distribution.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import policy as pol
from .errors import ValidationError
from .synthworld import Instance, features_matrix

HIST_BUCKETS = 20


@dataclass
class PredictionRecord:
    id: int
    p: float
    predicted: int
    gold: int
    correct: bool
    dist: list[float] | None = None
    posterior: list[float] | None = None
    split: str = "in_domain"
    method: str = ""

    def to_json(self) -> dict:
        d = {
            "id": int(self.id),
            "p": float(self.p),
            "predicted": int(self.predicted),
            "gold": int(self.gold),
            "correct": bool(self.correct),
        }
        if self.dist is not None:
            d["dist"] = [float(v) for v in self.dist]
        if self.posterior is not None:
            d["posterior"] = [float(v) for v in self.posterior]
        d["split"] = self.split
        d["method"] = self.method
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PredictionRecord":
        return cls(
            id=int(d["id"]),
            p=float(d["p"]),
            predicted=int(d["predicted"]),
            gold=int(d["gold"]),
            correct=bool(d["correct"]),
            dist=d.get("dist"),
            posterior=d.get("posterior"),
            split=d.get("split", "in_domain"),
            method=d.get("method", ""),
        )


@dataclass
class BinSummary:
    index: int
    count: int
    confidence: float
    accuracy: float
    lo: float
    hi: float


@dataclass
class CalibrationReport:
    n: int
    accuracy: float
    ece: float
    sce: float | None
    mce: float | None
    overconfidence_ratio: float
    posterior_gap: float | None
    bins: list[BinSummary] = field(default_factory=list)
    histogram: list[int] = field(default_factory=list)
    num_bins: int = 10
    threshold: float = 0.99

    def metrics(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "ece": self.ece,
            "sce": self.sce,
            "mce": self.mce,
            "overconfidence_ratio": self.overconfidence_ratio,
            "posterior_gap": self.posterior_gap,
        }

    def to_json(self) -> dict:
        d = self.metrics()
        d.update(
            num_bins=self.num_bins,
            threshold=self.threshold,
            bins=[asdict(b) for b in self.bins],
            histogram=list(self.histogram),
        )
        return d

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        m = self.metrics()
        w.writerow(list(m))
        w.writerow(["" if v is None else v for v in m.values()])
        return buf.getvalue()


# --- record extraction ------------------------------------------------------


def extract_records(
    params: pol.PolicyParams,
    instances: Sequence[Instance],
    decoding: str = "greedy",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    split: str = "in_domain",
    method: str = "",
) -> list[PredictionRecord]:
    """One rollout per instance; confidence is the masked decision probability."""
    if decoding not in ("greedy", "sampled"):
        raise ValidationError("decoding must be 'greedy' or 'sampled'")
    if not instances:
        return []
    X = features_matrix(instances)
    temp = None if decoding == "greedy" else temperature
    if decoding == "sampled" and rng is None:
        raise ValidationError("sampled decoding needs an rng")
    batch = pol.sample_batch(params, X, rng if rng is not None else np.random.default_rng(0), temp)
    dists = pol.decision_distributions(params, X, batch.tokens[:, : batch.trace_len])
    pred = batch.decisions
    out = []
    for j, inst in enumerate(instances):
        out.append(
            PredictionRecord(
                id=inst.id,
                p=float(dists[j, pred[j]]),
                predicted=int(pred[j]),
                gold=inst.gold,
                correct=bool(pred[j] == inst.gold),
                dist=dists[j].tolist(),
                posterior=inst.posterior.tolist(),
                split=split,
                method=method,
            )
        )
    return out


def extract_record(params, instance: Instance, decoding: str = "greedy", rng=None, temperature: float = 1.0):
    return extract_records(params, [instance], decoding, rng, temperature)[0]


# --- array helpers ----------------------------------------------------------


def _arrays(records: Sequence[PredictionRecord]):
    if len(records) == 0:
        raise ValidationError("records must be non-empty")
    p = np.array([r.p for r in records], dtype=np.float64)
    correct = np.array([r.correct for r in records], dtype=np.float64)
    ids = np.array([r.id for r in records])
    return p, correct, ids


def _dists(records: Sequence[PredictionRecord], K: int | None = None) -> np.ndarray:
    if len(records) == 0:
        raise ValidationError("records must be non-empty")
    if any(r.dist is None for r in records):
        raise ValidationError("every record needs a decision distribution")
    d = np.array([r.dist for r in records], dtype=np.float64)
    if K is not None and d.shape[1] != K:
        raise ValidationError(f"distributions have {d.shape[1]} entries, expected K={K}")
    return d


def equal_mass_bins(values: np.ndarray, ids: np.ndarray, M: int) -> list[np.ndarray]:
    """Index arrays of M contiguous equal-count bins (empty bins dropped)."""
    if M < 1:
        raise ValidationError("number of bins must be ≥ 1")
    order = np.lexsort((ids, values))
    return [b for b in np.array_split(order, M) if b.size]


def fixed_width_bins(values: np.ndarray, M: int) -> list[np.ndarray]:
    if M < 1:
        raise ValidationError("number of bins must be ≥ 1")
    which = np.minimum((values * M).astype(int), M - 1)
    return [np.flatnonzero(which == m) for m in range(M) if np.any(which == m)]


def _partition(values, ids, M, binning):
    if binning == "equal_mass":
        return equal_mass_bins(values, ids, M)
    if binning == "fixed_width":
        return fixed_width_bins(values, M)
    raise ValidationError(f"unknown binning {binning!r}")


def ece_arrays(p, correct, ids, M: int = 10, binning: str = "equal_mass") -> float:
    # sum_b (n_b/n)|acc_b - conf_b| == sum_b |hits_b - mass_b| / n, and the
    # second form is exact for p == 1 (integer sums, one division)
    total = 0.0
    for b in _partition(p, ids, M, binning):
        total += abs(correct[b].sum() - p[b].sum())
    return float(total / p.size)


# --- metrics ----------------------------------------------------------------


def ece(records: Sequence[PredictionRecord], M: int = 10, binning: str = "equal_mass") -> float:
    p, correct, ids = _arrays(records)
    return ece_arrays(p, correct, ids, M, binning)


def reliability_bins(
    records: Sequence[PredictionRecord], M: int = 10, binning: str = "equal_mass"
) -> tuple[list[BinSummary], list[int]]:
    """Per-bin summaries on the ECE partition plus a 20-bucket histogram."""
    p, correct, ids = _arrays(records)
    bins = []
    for m, b in enumerate(_partition(p, ids, M, binning)):
        bins.append(
            BinSummary(
                index=m,
                count=int(b.size),
                confidence=float(p[b].mean()),
                accuracy=float(correct[b].mean()),
                lo=float(p[b].min()),
                hi=float(p[b].max()),
            )
        )
    hist, _ = np.histogram(np.clip(p, 0, 1), bins=np.linspace(0, 1, HIST_BUCKETS + 1))
    return bins, hist.astype(int).tolist()


def _classwise(records, M, K):
    d = _dists(records, K)
    n, K = d.shape
    gold = np.array([r.gold for r in records])
    ids = np.array([r.id for r in records])
    for k in range(K):
        pk = d[:, k]
        hit = (gold == k).astype(np.float64)
        for b in equal_mass_bins(pk, ids, M):
            yield k, b.size / n, hit[b].mean() - pk[b].mean()


def sce(records: Sequence[PredictionRecord], M: int = 10, K: int | None = None) -> float:
    """Static calibration error: class-averaged binned |frequency - probability|."""
    K = K or len(_dists(records)[0])
    return float(sum(w * abs(gap) for _, w, gap in _classwise(records, M, K)) / K)


def mce(records: Sequence[PredictionRecord], M: int = 10, K: int | None = None) -> float:
    """Marginal calibration error: root of the class-averaged binned squared gap."""
    K = K or len(_dists(records)[0])
    return float(np.sqrt(sum(w * gap * gap for _, w, gap in _classwise(records, M, K)) / K))


def overconfidence_ratio(records: Sequence[PredictionRecord], threshold: float = 0.99) -> float:
    p, _, _ = _arrays(records)
    return float(np.mean(p > threshold))


def posterior_gap(records: Sequence[PredictionRecord]) -> float:
    if len(records) == 0:
        raise ValidationError("records must be non-empty")
    if any(r.posterior is None for r in records):
        raise ValidationError("every record needs a Bayes posterior")
    return float(np.mean([abs(r.p - r.posterior[r.predicted]) for r in records]))


def accuracy(records: Sequence[PredictionRecord]) -> float:
    _, correct, _ = _arrays(records)
    return float(correct.mean())


def calibration_report(
    records: Sequence[PredictionRecord], bins: int = 10, threshold: float = 0.99, binning: str = "equal_mass"
) -> CalibrationReport:
    has_dist = all(r.dist is not None for r in records)
    has_post = all(r.posterior is not None for r in records)
    summaries, hist = reliability_bins(records, bins, binning)
    return CalibrationReport(
        n=len(records),
        accuracy=accuracy(records),
        ece=ece(records, bins, binning),
        sce=sce(records, bins) if has_dist else None,
        mce=mce(records, bins) if has_dist else None,
        overconfidence_ratio=overconfidence_ratio(records, threshold),
        posterior_gap=posterior_gap(records) if has_post else None,
        bins=summaries,
        histogram=hist,
        num_bins=bins,
        threshold=threshold,
    )


def evaluate_policy(
    params: pol.PolicyParams,
    instances: Sequence[Instance],
    bins: int = 10,
    threshold: float = 0.99,
    split: str = "in_domain",
    method: str = "",
) -> CalibrationReport:
    return calibration_report(extract_records(params, instances, split=split, method=method), bins, threshold)


# --- persistence ------------------------------------------------------------


def write_records(records: Iterable[PredictionRecord], path: str | Path) -> Path:
    path = Path(path)
    try:
        with path.open("w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_json()) + "\n")
    except OSError as exc:
        raise OSError(f"could not write records to {path}: {exc}") from exc
    return path


def read_records(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    out = []
    try:
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(PredictionRecord.from_json(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed record ({exc})") from exc
    except OSError as exc:
        raise OSError(f"could not read records from {path}: {exc}") from exc
    return out
