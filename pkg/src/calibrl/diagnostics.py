"""Rollout overconfidence study and reasoning-swap study.

Also builds the hand-constructed *extractor* policy, whose decision head
copies the majority evidence token of the trace. It certifies both studies
end to end: every sampled decision is near-certain and every swap flips.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from .errors import DiagnosticError, ValidationError
from .synthworld import Instance, features_matrix


@dataclass
class ConfidenceStudy:
    ratio: float
    n: int
    threshold: float
    samples_per_instance: int
    confidences: list[float] = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return {
            "ratio": self.ratio,
            "n": self.n,
            "threshold": self.threshold,
            "samples_per_instance": self.samples_per_instance,
            "confidences": self.confidences,
        }


@dataclass
class SwapCase:
    instance_id: int
    donor_id: int
    original_prediction: int
    original_confidence: float
    donor_prediction: int
    spliced_distribution: list[float]

    @property
    def post_prediction(self) -> int:
        return int(np.argmax(self.spliced_distribution))

    @property
    def flipped(self) -> bool:
        return self.post_prediction == self.donor_prediction

    @property
    def post_confidence(self) -> float:
        return float(self.spliced_distribution[self.post_prediction])


@dataclass
class SwapStudy:
    flip_ratio: float
    n: int
    confidence_floor: float
    flipped_confidences: list[float]
    cases: list[SwapCase] = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return {
            "flip_ratio": self.flip_ratio,
            "n": self.n,
            "threshold": self.confidence_floor,
            "confidences": self.flipped_confidences,
        }


@dataclass
class SplicedInput:
    instance_id: int
    features: np.ndarray
    trace: np.ndarray


def extractor_policy(
    layout: pol.VocabLayout,
    trace_length: int,
    hidden_dim: int | None = None,
    evidence_scale: float = 0.01,
    sharpness: float = 60.0,
    first_token_gain: float = 3.0,
) -> pol.PolicyParams:
    """Policy whose decision deterministically extracts the trace's conclusion.

    Hidden units ``0..K-1`` hold ``tanh(x)``; units ``K..2K-1`` count
    occurrences of evidence ids ``0..K-1`` (each adds ``evidence_scale``).
    The first reasoning token is sampled from ``softmax(first_token_gain *
    tanh(x))``; later tokens copy the counted evidence, and the decision
    reads the counts with gain ``sharpness / evidence_scale``. Filler ids
    are never emitted.
    """
    K = layout.num_options
    H = hidden_dim or 2 * K
    if H < 2 * K:
        raise ValidationError(f"extractor needs hidden_dim ≥ 2K = {2 * K}")
    p = pol.init_policy(H, layout, trace_length, zero=True)
    gain = sharpness / evidence_scale
    for k in range(K):
        p.input_proj[k, k] = 1.0
        p.recurrent[K + k, K + k] = 1.0
        p.token_embed[k, K + k] = evidence_scale
        p.output_head[k, k] = first_token_gain
        p.output_head[K + k, k] = gain
        p.output_head[K + k, layout.option_id(k)] = gain
    p.output_bias[K : layout.num_reasoning] = -sharpness
    return p


def rollout_confidence_study(
    params: pol.PolicyParams,
    instances: list[Instance],
    samples_per_instance: int = 64,
    temperature: float = 1.0,
    threshold: float = 0.99,
    rng: np.random.Generator | int = 0,
) -> ConfidenceStudy:
    """Fraction of sampled rollouts whose decision probability exceeds ``threshold``."""
    if not instances:
        raise ValidationError("instance set is empty")
    if samples_per_instance < 1:
        raise ValidationError("samples_per_instance must be ≥ 1")
    rng = np.random.default_rng(rng)
    X = np.repeat(features_matrix(instances), samples_per_instance, axis=0)
    ids = np.repeat([i.id for i in instances], samples_per_instance)
    batch = pol.sample_batch(params, X, rng, temperature, ids)
    conf = batch.decision_probs
    return ConfidenceStudy(
        ratio=float(np.mean(conf > threshold)),
        n=int(conf.size),
        threshold=threshold,
        samples_per_instance=samples_per_instance,
        confidences=conf.tolist(),
    )


def swap_trace(
    instance: Instance, original: pol.Rollout, donor: pol.Rollout, allow_same_prediction: bool = False
) -> SplicedInput:
    """Pair the target instance's features with the donor's reasoning trace."""
    if original.decision_index != donor.decision_index:
        raise ValidationError("original and donor traces differ in length")
    if not allow_same_prediction and original.decision == donor.decision:
        raise ValidationError(
            f"donor predicts the same option ({donor.decision}) as the original; swaps need opposing predictions"
        )
    return SplicedInput(instance.id, instance.features.copy(), donor.trace.copy())


def evaluate_spliced(params: pol.PolicyParams, spliced: SplicedInput) -> np.ndarray:
    return pol.decision_distributions(params, spliced.features[None], spliced.trace[None])[0]


def swap_study(
    params: pol.PolicyParams,
    instances: list[Instance],
    confidence_floor: float = 0.9,
    rng: np.random.Generator | int = 0,
) -> SwapStudy:
    """Greedy-decode every instance, then splice an opposing donor trace into each confident one.

    Donors are drawn uniformly from the same pool among rollouts whose
    prediction differs. A case counts as flipped when the spliced argmax is
    the donor's prediction.
    """
    if not instances:
        raise ValidationError("instance set is empty")
    rng = np.random.default_rng(rng)
    X = features_matrix(instances)
    batch = pol.sample_batch(params, X, rng, None, [i.id for i in instances])
    pred = batch.decisions
    conf = batch.decision_probs
    eligible = np.flatnonzero(conf >= confidence_floor)
    if eligible.size == 0:
        raise DiagnosticError(
            f"no greedy prediction reaches the confidence floor {confidence_floor}",
            side="eligible",
            max_confidence=float(conf.max()),
        )
    T = batch.trace_len
    cases: list[SwapCase] = []
    spliced_X, spliced_traces, meta = [], [], []
    for j in eligible:
        donors = np.flatnonzero(pred != pred[j])
        if donors.size == 0:
            continue
        dn = int(donors[rng.integers(donors.size)])
        spliced_X.append(X[j])
        spliced_traces.append(batch.tokens[dn, :T])
        meta.append((j, dn))
    if not meta:
        raise DiagnosticError(
            "every greedy prediction names the same option; no opposing donor exists", side="donor"
        )
    dists = pol.decision_distributions(params, np.array(spliced_X), np.array(spliced_traces))
    for (j, dn), d in zip(meta, dists):
        cases.append(
            SwapCase(
                instance_id=instances[j].id,
                donor_id=instances[dn].id,
                original_prediction=int(pred[j]),
                original_confidence=float(conf[j]),
                donor_prediction=int(pred[dn]),
                spliced_distribution=d.tolist(),
            )
        )
    flipped = [c for c in cases if c.flipped]
    return SwapStudy(
        flip_ratio=len(flipped) / len(cases),
        n=len(cases),
        confidence_floor=confidence_floor,
        flipped_confidences=[c.post_confidence for c in flipped],
        cases=cases,
    )


def histogram_csv(confidences, buckets: int = 20) -> str:
    counts, edges = np.histogram(np.clip(confidences, 0, 1), bins=np.linspace(0, 1, buckets + 1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lo", "hi", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
    return buf.getvalue()
