"""Post-hoc recalibration of scalar confidences: Platt scaling and isotonic regression.

Both calibrators map the confidence of the predicted label to a new
confidence; the predicted label itself is never changed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .calibration import PredictionRecord
from .errors import ValidationError


@dataclass(frozen=True)
class PlattParams:
    slope: float = 1.0
    intercept: float = 0.0
    clamp: float = 16.0

    def to_json(self) -> dict:
        return {"type": "platt", "params": {"slope": self.slope, "intercept": self.intercept, "clamp": self.clamp}}


@dataclass(frozen=True)
class IsotonicMap:
    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        b = np.asarray(self.breakpoints)
        v = np.asarray(self.values)
        if b.size == 0 or b.size != v.size:
            raise ValidationError("isotonic map needs matching, non-empty breakpoints and values")
        if np.any(np.diff(b) <= 0):
            raise ValidationError("isotonic breakpoints must be strictly ascending")
        if np.any(np.diff(v) < 0):
            raise ValidationError("isotonic values must be non-decreasing")

    def to_json(self) -> dict:
        return {"type": "isotonic", "params": {"breakpoints": list(self.breakpoints), "values": list(self.values)}}


def _check_prob(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValidationError("confidence must lie in [0, 1]")
    return p


def clamped_logit(p, clamp: float = 16.0) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = np.log(p) - np.log1p(-p)
    return np.clip(z, -clamp, clamp)


def _targets(records_or_pairs):
    if isinstance(records_or_pairs, tuple):
        p, y = records_or_pairs
        return _check_prob(p), np.asarray(y, dtype=np.float64), np.arange(len(p))
    p = _check_prob([r.p for r in records_or_pairs])
    y = np.array([r.correct for r in records_or_pairs], dtype=np.float64)
    ids = np.array([r.id for r in records_or_pairs])
    return p, y, ids


def fit_platt(records, clamp: float = 16.0, max_iter: int = 100, tol: float = 1e-10) -> PlattParams:
    """Fit ``sigmoid(a * logit(p) + b)`` to correctness by damped Newton.

    ``records`` is a sequence of PredictionRecord or a ``(p, correct)`` pair
    of arrays. Requires both correct and incorrect examples.
    """
    p, y, _ = _targets(records)
    if y.size == 0:
        raise ValidationError("calibration split is empty")
    if y.min() == y.max():
        missing = "incorrect" if y[0] == 1 else "correct"
        raise ValidationError(f"calibration split has no {missing} records")
    z = clamped_logit(p, clamp)
    Z = np.stack([z, np.ones_like(z)], axis=1)
    w = np.array([1.0, 0.0])

    def nll(w):
        s = Z @ w
        # log(1 + e^s) - y s, stable
        return float(np.mean(np.logaddexp(0.0, s) - y * s))

    f = nll(w)
    for _ in range(max_iter):
        q = expit(Z @ w)
        g = Z.T @ (q - y) / y.size
        Hm = (Z * (q * (1 - q))[:, None]).T @ Z / y.size + 1e-12 * np.eye(2)
        step = np.linalg.solve(Hm, g)
        t = 1.0
        while True:
            cand = w - t * step
            fc = nll(cand)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        done = abs(f - fc) < tol and np.max(np.abs(cand - w)) < 1e-8
        w, f = cand, fc
        if done:
            break
    return PlattParams(slope=float(w[0]), intercept=float(w[1]), clamp=clamp)


def apply_platt(params: PlattParams, p):
    p_arr = _check_prob(p)
    out = expit(params.slope * clamped_logit(p_arr, params.clamp) + params.intercept)
    return float(out) if np.ndim(p) == 0 else out


def pav(targets: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted pool-adjacent-violators: least-squares non-decreasing fit."""
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    # stack of blocks: (mean, weight, length)
    means, wts, lens = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        wts.append(wi)
        lens.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, l2 = means.pop(), wts.pop(), lens.pop()
            m1, w1, l1 = means.pop(), wts.pop(), lens.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            wts.append(wt)
            lens.append(l1 + l2)
    return np.repeat(means, lens)


def fit_isotonic(records) -> IsotonicMap:
    """Isotonic fit of correctness on confidence.

    Pairs are sorted by confidence (ties by record id); records sharing a
    confidence value are averaged into one weighted point before pooling.
    """
    p, y, ids = _targets(records)
    if y.size == 0:
        raise ValidationError("calibration split is empty")
    order = np.lexsort((ids, p))
    p, y = p[order], y[order]
    uniq, start, counts = np.unique(p, return_index=True, return_counts=True)
    sums = np.add.reduceat(y, start)
    fitted = pav(sums / counts, counts.astype(np.float64))
    return IsotonicMap(breakpoints=tuple(uniq.tolist()), values=tuple(np.clip(fitted, 0, 1).tolist()))


def apply_isotonic(m: IsotonicMap, p):
    """Right-continuous step interpolation, clamped to the end values."""
    p_arr = _check_prob(p)
    b = np.asarray(m.breakpoints)
    v = np.asarray(m.values)
    idx = np.clip(np.searchsorted(b, p_arr, side="right") - 1, 0, b.size - 1)
    out = v[idx]
    return float(out) if np.ndim(p) == 0 else out


def apply_calibrator(cal: PlattParams | IsotonicMap, p):
    return apply_platt(cal, p) if isinstance(cal, PlattParams) else apply_isotonic(cal, p)


def recalibrate_records(
    cal: PlattParams | IsotonicMap, records: Sequence[PredictionRecord], tag: str
) -> list[PredictionRecord]:
    """Copy records with recalibrated confidence; prediction unchanged.

    When a decision distribution is present, the predicted entry is set to
    the new confidence and the remaining mass is rescaled proportionally
    over the other options (uniformly if they held no mass).
    """
    p_new = np.atleast_1d(apply_calibrator(cal, [r.p for r in records])) if records else []
    out = []
    for r, q in zip(records, p_new):
        dist = None
        if r.dist is not None:
            d = np.asarray(r.dist, dtype=np.float64)
            rest = 1.0 - d[r.predicted]
            others = np.delete(np.arange(d.size), r.predicted)
            if rest > 0:
                d[others] *= (1.0 - q) / rest
            else:
                d[others] = (1.0 - q) / others.size
            d[r.predicted] = q
            dist = d.tolist()
        out.append(replace(r, p=float(q), dist=dist, method=f"{r.method}+{tag}" if r.method else tag))
    return out


def calibrator_to_json(cal: PlattParams | IsotonicMap) -> str:
    return json.dumps(cal.to_json(), sort_keys=True)


def calibrator_from_json(text: str) -> PlattParams | IsotonicMap:
    d = json.loads(text)
    kind, params = d.get("type"), d.get("params", {})
    if kind == "platt":
        return PlattParams(float(params["slope"]), float(params["intercept"]), float(params.get("clamp", 16.0)))
    if kind == "isotonic":
        return IsotonicMap(tuple(params["breakpoints"]), tuple(params["values"]))
    raise ValidationError(f"unknown calibrator type {kind!r}")


def save_calibrator(cal, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(calibrator_to_json(cal) + "\n")
    return path


def load_calibrator(path: str | Path):
    return calibrator_from_json(Path(path).read_text())
