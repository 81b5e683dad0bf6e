"""SFT, GRPO and calibration-aware GRPO on the tiny policy.

Losses are expressed as gradients w.r.t. the per-position logits and pushed
through :func:`calibrl.policy.backward`, so every trainer shares the same
exact backprop. The GRPO surrogate is *maximized*; the optimizer descends
``-surrogate + lam * CE``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal, Mapping, Sequence

import numpy as np

from . import policy as pol
from .calibration import evaluate_policy
from .errors import DiagnosticError, ValidationError
from .policy import PolicyParams, RolloutBatch
from .synthworld import Instance, features_matrix, gold_vector

log = logging.getLogger(__name__)

Mode = Literal["sft", "grpo", "calib_grpo"]


@dataclass
class TrainConfig:
    mode: str = "grpo"
    group_size: int = 8
    clip_eps: float = 0.2
    reward_normalization: str = "group"
    population_std: bool = True
    inner_updates: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    sampling_temperature: float = 1.0
    lam: float = 0.0
    std_epsilon: float = 1e-8
    sft_trace_policy: str = "reference_params"
    selection: str = "accuracy"
    eval_bins: int = 10
    overconfidence_threshold: float = 0.99

    def __post_init__(self) -> None:
        if self.mode not in ("sft", "grpo", "calib_grpo"):
            raise ValidationError(f"mode must be sft, grpo or calib_grpo, got {self.mode!r}")
        if self.group_size < 2:
            raise ValidationError("group_size must be ≥ 2")
        if not self.clip_eps > 0:
            raise ValidationError("clip_eps must be > 0")
        if self.lam < 0:
            raise ValidationError("lam must be ≥ 0")
        if self.reward_normalization not in ("group", "batch"):
            raise ValidationError("reward_normalization must be 'group' or 'batch'")
        if self.inner_updates < 1:
            raise ValidationError("inner_updates must be ≥ 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not self.sampling_temperature > 0:
            raise ValidationError("sampling_temperature must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be ≥ 0 and batch_size ≥ 1")
        if self.sft_trace_policy not in ("empty_trace", "reference_params"):
            raise ValidationError("sft_trace_policy must be 'empty_trace' or 'reference_params'")
        if self.selection not in ("accuracy", "last"):
            raise ValidationError("selection must be 'accuracy' or 'last'")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**data)


# --- rewards and advantages -------------------------------------------------


def reward(rollout: pol.Rollout, instance: Instance) -> int:
    return int(rollout.decision == instance.gold)


def batch_rewards(batch: RolloutBatch, gold: np.ndarray) -> np.ndarray:
    return (batch.decisions == gold).astype(np.float64)


def group_advantages(
    rewards,
    mode: str = "group",
    batch_stats: tuple[float, float] | None = None,
    std_epsilon: float = 1e-8,
    population_std: bool = True,
) -> np.ndarray:
    """Normalized rewards ``(r - mean) / (std + eps)``.

    ``rewards`` is (G,) for one group or (B, G) for a batch of groups. In
    ``group`` mode statistics are per group; in ``batch`` mode they are
    pooled over every reward passed (or taken from ``batch_stats``).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 2:
        raise ValidationError("group size must be ≥ 2")
    ddof = 0 if population_std else 1
    if mode == "group":
        mean = r.mean(axis=-1, keepdims=True)
        std = r.std(axis=-1, ddof=ddof, keepdims=True)
    elif mode == "batch":
        if batch_stats is not None:
            mean, std = batch_stats
        else:
            mean, std = r.mean(), r.std(ddof=ddof)
    else:
        raise ValidationError(f"unknown normalization mode {mode!r}")
    return (r - mean) / (std + std_epsilon)


@dataclass
class RolloutGroup:
    instance: Instance
    rollouts: RolloutBatch
    rewards: np.ndarray  # (G,)
    advantages: np.ndarray  # (G, T + 2)

    @property
    def decision_index(self) -> int:
        return self.rollouts.decision_index


def make_group(
    instance: Instance, rollouts: RolloutBatch, mode: str = "group", std_epsilon: float = 1e-8
) -> RolloutGroup:
    r = batch_rewards(rollouts, instance.gold)
    adv = group_advantages(r, mode, std_epsilon=std_epsilon)
    L = rollouts.tokens.shape[1]
    return RolloutGroup(instance, rollouts, r, np.repeat(adv[:, None], L, axis=1))


def mask_decision_advantage(group: RolloutGroup) -> RolloutGroup:
    adv = group.advantages.copy()
    adv[:, group.decision_index] = 0.0
    return replace(group, advantages=adv)


@dataclass
class GroupBatch:
    """B groups flattened group-major into one RolloutBatch of B*G rows."""

    rollouts: RolloutBatch
    gold: np.ndarray  # (B*G,)
    rewards: np.ndarray  # (B*G,)
    advantages: np.ndarray  # (B*G, L)
    group_size: int
    old_logprobs: np.ndarray | None = None

    @classmethod
    def from_groups(cls, groups: Sequence[RolloutGroup]) -> "GroupBatch":
        if not groups:
            raise ValidationError("no groups given")
        first = groups[0].rollouts
        G = len(first)
        if any(len(g.rollouts) != G for g in groups):
            raise ValidationError("all groups must have the same size")
        rb = RolloutBatch(
            instance_ids=np.concatenate([g.rollouts.instance_ids for g in groups]),
            X=np.concatenate([g.rollouts.X for g in groups]),
            tokens=np.concatenate([g.rollouts.tokens for g in groups]),
            logprobs=np.concatenate([g.rollouts.logprobs for g in groups]),
            trace_len=first.trace_len,
            layout=first.layout,
        )
        return cls(
            rollouts=rb,
            gold=np.repeat([g.instance.gold for g in groups], G),
            rewards=np.concatenate([g.rewards for g in groups]),
            advantages=np.concatenate([g.advantages for g in groups]),
            group_size=G,
        )


def _as_batch(groups) -> GroupBatch:
    return groups if isinstance(groups, GroupBatch) else GroupBatch.from_groups(groups)


# --- losses -----------------------------------------------------------------


def _surrogate_terms(gb: GroupBatch, new_lp: np.ndarray, old_lp: np.ndarray, eps: float):
    ratio = np.exp(new_lp - old_lp)
    if not np.all(np.isfinite(ratio)):
        raise DiagnosticError("non-finite probability ratio in surrogate")
    A = gb.advantages
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    terms = np.minimum(ratio * A, clipped * A)
    # gradient flows only where the unclipped branch is the active minimum
    active = ((A > 0) & (ratio < 1 + eps)) | ((A < 0) & (ratio > 1 - eps))
    return ratio, terms, active


def _old_logprobs(old_params: PolicyParams, gb: GroupBatch) -> np.ndarray:
    if gb.old_logprobs is not None:
        return gb.old_logprobs
    return pol.score_batch(old_params, gb.rollouts)


def _surrogate_dlogits(cache: pol.Cache, gb: GroupBatch, old_lp: np.ndarray, eps: float):
    new_lp = cache.token_logprobs()
    ratio, terms, active = _surrogate_terms(gb, new_lp, old_lp, eps)
    N, L = terms.shape
    surrogate = float(terms.mean())
    weights = np.where(active, gb.advantages * ratio, 0.0) / (N * L)
    return surrogate, pol.logprob_grad_logits(cache, weights)


def _calibration_dlogits(cache: pol.Cache, gb: GroupBatch, K: int):
    layout = gb.rollouts.layout
    d = gb.rollouts.decision_index
    logp = cache.logprobs[d][:, layout.option_offset :]
    N = logp.shape[0]
    target = np.full((N, K), 1.0 / K)
    correct = gb.rewards > 0.5
    target[correct] = 0.0
    target[correct, gb.gold[correct]] = 1.0
    ce = float(-(target * logp).sum(axis=1).mean())
    dl = np.zeros_like(cache.logprobs)
    dl[d][:, layout.option_offset :] = (np.exp(logp) - target) / N
    return ce, dl


def grpo_surrogate_grad(
    params: PolicyParams, old_params: PolicyParams, groups, config: TrainConfig
) -> tuple[PolicyParams, float]:
    """Gradient that ascends the clipped surrogate, and the surrogate value.

    Token terms are averaged within each rollout, then over rollouts and
    groups (all rollouts have T + 2 tokens, so this is a flat mean).
    """
    gb = _as_batch(groups)
    old_lp = _old_logprobs(old_params, gb)
    cache = pol.forward(params, gb.rollouts.X, gb.rollouts.tokens, gb.rollouts.trace_len)
    surrogate, dl = _surrogate_dlogits(cache, gb, old_lp, config.clip_eps)
    return pol.backward(params, cache, dl), surrogate


def decision_calibration_grad(
    params: PolicyParams, groups, lam: float, K: int
) -> tuple[PolicyParams, float]:
    """Gradient of ``lam * CE`` on the decision token, and the unscaled CE.

    Correct rollouts target one-hot(gold); incorrect ones target uniform.
    """
    if lam < 0:
        raise ValidationError("lam must be ≥ 0")
    gb = _as_batch(groups)
    cache = pol.forward(params, gb.rollouts.X, gb.rollouts.tokens, gb.rollouts.trace_len)
    ce, dl = _calibration_dlogits(cache, gb, K)
    if lam == 0:
        return params.zeros_like(), ce
    return pol.backward(params, cache, lam * dl), ce


def combined_loss_grad(
    params: PolicyParams, old_params: PolicyParams, groups, config: TrainConfig
) -> tuple[float, PolicyParams, float, float]:
    """``(loss, grad, surrogate, ce)`` for ``loss = -surrogate + lam * CE``."""
    gb = _as_batch(groups)
    old_lp = _old_logprobs(old_params, gb)
    cache = pol.forward(params, gb.rollouts.X, gb.rollouts.tokens, gb.rollouts.trace_len)
    surrogate, dl_s = _surrogate_dlogits(cache, gb, old_lp, config.clip_eps)
    ce, dl_c = _calibration_dlogits(cache, gb, params.layout.num_options)
    dl = -dl_s + config.lam * dl_c if config.lam > 0 else -dl_s
    loss = -surrogate + config.lam * ce
    return loss, pol.backward(params, cache, dl), surrogate, ce


def reference_traces(reference: PolicyParams, X: np.ndarray) -> np.ndarray:
    batch = pol.sample_batch(reference, X, np.random.default_rng(0), temperature=None)
    return batch.tokens[:, : batch.trace_len]


def sft_grad(
    params: PolicyParams,
    instances: Sequence[Instance] | tuple[np.ndarray, np.ndarray],
    gold_trace_policy: str = "empty_trace",
    reference: PolicyParams | None = None,
    traces: np.ndarray | None = None,
) -> tuple[PolicyParams, float]:
    """Cross-entropy ``-log p(gold)`` at the decision position, batch-averaged.

    ``empty_trace`` places the decision right after ``think_end``.
    ``reference_params`` conditions on the greedy trace of ``reference``
    (defaults to ``params`` itself; the trace is treated as fixed input).
    Precomputed ``traces`` override both.
    """
    if isinstance(instances, tuple):
        X, gold = instances
    else:
        if not instances:
            raise ValidationError("SFT batch must be non-empty")
        X, gold = features_matrix(instances), gold_vector(instances)
    layout = params.layout
    N = X.shape[0]
    if traces is None:
        if gold_trace_policy == "empty_trace":
            traces = np.zeros((N, 0), dtype=np.int64)
        elif gold_trace_policy == "reference_params":
            traces = reference_traces(reference if reference is not None else params, X)
        else:
            raise ValidationError(f"unknown gold_trace_policy {gold_trace_policy!r}")
    T = traces.shape[1]
    tokens = np.concatenate(
        [traces, np.full((N, 1), layout.think_end_id), (layout.option_offset + gold)[:, None]], axis=1
    )
    cache = pol.forward(params, X, tokens, T)
    weights = np.zeros(tokens.shape)
    weights[:, T + 1] = 1.0 / N
    loss = float(-(cache.token_logprobs()[:, T + 1]).mean())
    dl = -pol.logprob_grad_logits(cache, weights)
    return pol.backward(params, cache, dl), loss


def sequence_nll_grad(
    params: PolicyParams, X: np.ndarray, tokens: np.ndarray, trace_len: int | None = None
) -> tuple[PolicyParams, float]:
    """Teacher-forced NLL over every free position (think_end is forced)."""
    cache = pol.forward(params, X, tokens, trace_len)
    lp = cache.token_logprobs()
    N = X.shape[0]
    weights = np.full(tokens.shape, 1.0 / N)
    weights[:, cache.trace_len] = 0.0
    loss = float(-(lp * weights).sum())
    return pol.backward(params, cache, -pol.logprob_grad_logits(cache, weights)), loss


# --- optimizer --------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a flat parameter vector."""

    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        theta = theta * (1 - self.lr * self.wd) if self.wd else theta
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --- training loop ----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_reward: float
    surrogate_loss: float
    calibration_loss: float
    eval_accuracy: float
    eval_ece: float
    overconfidence_ratio: float


@dataclass
class TrainResult:
    final: PolicyParams
    best: PolicyParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def history_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.history]


def _evaluate(params, eval_instances, config) -> tuple[float, float, float]:
    rep = evaluate_policy(params, eval_instances, bins=config.eval_bins, threshold=config.overconfidence_threshold)
    return rep.accuracy, rep.ece, rep.overconfidence_ratio


def _better(cand: EpochRecord, best: EpochRecord | None) -> bool:
    if best is None:
        return True
    if cand.eval_accuracy != best.eval_accuracy:
        return cand.eval_accuracy > best.eval_accuracy
    return cand.eval_ece < best.eval_ece


def _check_finite(value: float, epoch: int, last_good: PolicyParams) -> None:
    if not np.isfinite(value):
        raise DiagnosticError(f"training diverged at epoch {epoch}", epoch=epoch, last_good=last_good)


def train(
    mode: str,
    init_params: PolicyParams,
    train_instances: Sequence[Instance],
    eval_instances: Sequence[Instance],
    config: TrainConfig,
    rng: np.random.Generator | int,
) -> TrainResult:
    """Run ``config.epochs`` epochs of ``mode`` training from ``init_params``.

    Each epoch shuffles the training set into minibatches of
    ``batch_size`` instances. RL modes snapshot the old policy per
    minibatch, sample ``group_size`` rollouts per instance and take
    ``inner_updates`` AdamW steps. Epoch 0 in the history is the
    untrained starting point. The best checkpoint maximizes eval accuracy,
    ties broken by lower ECE (``selection='last'`` keeps the final one).
    """
    config = replace(config, mode=mode)
    rng = np.random.default_rng(rng)
    params = init_params.snapshot()
    opt = AdamW(params.size, config.learning_rate, weight_decay=config.weight_decay)
    X_all = features_matrix(train_instances)
    gold_all = gold_vector(train_instances)
    ids_all = np.array([inst.id for inst in train_instances])
    n = len(train_instances)
    K = params.layout.num_options

    acc, ece_val, oc = _evaluate(params, eval_instances, config)
    start = EpochRecord(0, float("nan"), float("nan"), float("nan"), acc, ece_val, oc)
    history = [start]
    best, best_rec = params.snapshot(), start

    for epoch in range(1, config.epochs + 1):
        last_good = params.snapshot()
        order = rng.permutation(n)
        rewards_seen, surrogates, ces = [], [], []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            X, gold = X_all[idx], gold_all[idx]
            if mode == "sft":
                ref = params if config.sft_trace_policy == "reference_params" else None
                traces = (
                    reference_traces(ref, X)
                    if ref is not None
                    else np.zeros((len(idx), 0), dtype=np.int64)
                )
                for _ in range(config.inner_updates):
                    grad, loss = sft_grad(params, (X, gold), traces=traces)
                    _check_finite(loss, epoch, last_good)
                    params = params.with_flat(opt.step(params.flat(), grad.flat()))
                    surrogates.append(loss)
                continue
            gb = sample_groups(params, X, gold, ids_all[idx], config, rng)
            rewards_seen.append(gb.rewards.mean())
            old = params.snapshot()
            gb.old_logprobs = pol.score_batch(old, gb.rollouts)
            for _ in range(config.inner_updates):
                loss, grad, sur, ce = combined_loss_grad(params, old, gb, config)
                _check_finite(loss, epoch, last_good)
                params = params.with_flat(opt.step(params.flat(), grad.flat()))
                surrogates.append(sur)
                ces.append(ce)
        acc, ece_val, oc = _evaluate(params, eval_instances, config)
        rec = EpochRecord(
            epoch=epoch,
            mean_reward=float(np.mean(rewards_seen)) if rewards_seen else float("nan"),
            surrogate_loss=float(np.mean(surrogates)) if surrogates else float("nan"),
            calibration_loss=float(np.mean(ces)) if ces else float("nan"),
            eval_accuracy=acc,
            eval_ece=ece_val,
            overconfidence_ratio=oc,
        )
        history.append(rec)
        log.debug("%s epoch %d: acc=%.4f ece=%.4f", mode, epoch, acc, ece_val)
        if config.selection == "last" or _better(rec, best_rec):
            best, best_rec = params.snapshot(), rec
    return TrainResult(final=params, best=best, history=history, best_epoch=best_rec.epoch)


def sample_groups(
    params: PolicyParams,
    X: np.ndarray,
    gold: np.ndarray,
    ids: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> GroupBatch:
    """Sample G rollouts per instance and attach rewards and advantages."""
    G = config.group_size
    Xg = np.repeat(X, G, axis=0)
    goldg = np.repeat(gold, G)
    batch = pol.sample_batch(params, Xg, rng, config.sampling_temperature, np.repeat(ids, G))
    r = batch_rewards(batch, goldg)
    adv = group_advantages(
        r.reshape(-1, G),
        config.reward_normalization,
        std_epsilon=config.std_epsilon,
        population_std=config.population_std,
    ).ravel()
    L = batch.tokens.shape[1]
    A = np.repeat(adv[:, None], L, axis=1)
    if config.mode == "calib_grpo":
        A[:, batch.decision_index] = 0.0
    return GroupBatch(rollouts=batch, gold=goldg, rewards=r, advantages=A, group_size=G)


# --- base warm-up -----------------------------------------------------------


@dataclass
class WarmupConfig:
    """Short supervised warm-up that produces the frozen Base policy.

    Phase one (``extraction_steps``) teaches the policy to conclude: each
    demonstration picks a uniformly random option, repeats its evidence id
    through the trace and ends on that option, so the decision learns to
    read the trace rather than the features. Phase two uses demonstrations
    from a sharper-labelled copy of the task (evidence id = gold with
    probability ``trace_fidelity``) and stops as soon as greedy accuracy on
    the check set reaches ``1/K + margin``.
    """

    n_instances: int = 2000
    label_temperature: float = 0.05
    trace_fidelity: float = 1.0
    learning_rate: float = 1e-2
    batch_size: int = 64
    max_epochs: int = 30
    margin: float = 0.25
    extraction_steps: int = 300


def demonstration_tokens(layout: pol.VocabLayout, gold: np.ndarray, T: int, fidelity: float, rng) -> np.ndarray:
    N = gold.size
    K, R = layout.num_options, layout.num_reasoning
    trace = np.repeat(gold[:, None], T, axis=1)
    if fidelity < 1.0 and R > K:
        noisy = rng.random((N, T)) >= fidelity
        trace = np.where(noisy, rng.integers(K, R, size=(N, T)), trace)
    return np.concatenate(
        [trace, np.full((N, 1), layout.think_end_id), (layout.option_offset + gold)[:, None]], axis=1
    )


def warmup_base(
    init_params: PolicyParams,
    demo_instances: Sequence[Instance],
    check_instances: Sequence[Instance],
    config: WarmupConfig,
    rng: np.random.Generator | int,
) -> tuple[PolicyParams, list[float]]:
    """Return the warmed-up policy and the per-step check accuracies."""
    rng = np.random.default_rng(rng)
    params = init_params.snapshot()
    layout = params.layout
    T = params.trace_length
    X = features_matrix(demo_instances)
    gold = gold_vector(demo_instances)
    target = 1.0 / layout.num_options + config.margin
    opt = AdamW(params.size, config.learning_rate)
    for _ in range(config.extraction_steps):
        idx = rng.integers(0, len(gold), size=config.batch_size)
        conclusion = rng.integers(0, layout.num_options, size=idx.size)
        tokens = demonstration_tokens(layout, conclusion, T, config.trace_fidelity, rng)
        grad, loss = sequence_nll_grad(params, X[idx], tokens, T)
        if not np.isfinite(loss):
            raise DiagnosticError("warm-up diverged", last_good=params)
        params = params.with_flat(opt.step(params.flat(), grad.flat()))
    accs: list[float] = []
    for _ in range(config.max_epochs):
        order = rng.permutation(len(gold))
        for lo in range(0, len(gold), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            tokens = demonstration_tokens(layout, gold[idx], T, config.trace_fidelity, rng)
            grad, loss = sequence_nll_grad(params, X[idx], tokens, T)
            if not np.isfinite(loss):
                raise DiagnosticError("warm-up diverged", last_good=params)
            params = params.with_flat(opt.step(params.flat(), grad.flat()))
            acc = evaluate_policy(params, check_instances).accuracy
            accs.append(acc)
            if acc >= target:
                return params, accs
    return params, accs
