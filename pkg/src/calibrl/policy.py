"""Tiny autoregressive policy over reasoning tokens and one decision token.

The cell is a single tanh recurrence conditioned on the observed features
at every step::

    h_0 = tanh(x @ input_proj + hidden_bias)
    h_t = tanh(x @ input_proj + hidden_bias + h_{t-1} @ recurrent + token_embed[y_{t-1}])
    logits_t = h_t @ output_head + output_bias

A sequence has ``trace_len`` reasoning positions, then the forced
``think_end`` token, then the decision token. Every position is masked to
its structural token range and renormalized, so the decision distribution
is a proper distribution over the K options. All arithmetic is float64 and
gradients are derived by hand (backprop through time), batched over
sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DiagnosticError, ValidationError
from .synthworld import Instance

FORMAT_VERSION = 1

_PARAM_NAMES = ("input_proj", "hidden_bias", "recurrent", "token_embed", "output_head", "output_bias")

# position kinds
REASONING, THINK_END, DECISION = 0, 1, 2


@dataclass(frozen=True)
class VocabLayout:
    num_reasoning: int
    num_options: int

    def __post_init__(self) -> None:
        if self.num_options < 2:
            raise ValidationError("num_options must be ≥ 2")
        if self.num_reasoning < self.num_options:
            raise ValidationError("reasoning vocabulary must have at least num_options tokens")

    @property
    def think_end_id(self) -> int:
        return self.num_reasoning

    @property
    def option_offset(self) -> int:
        return self.num_reasoning + 1

    @property
    def vocab_size(self) -> int:
        return self.num_reasoning + 1 + self.num_options

    def option_id(self, k):
        return self.option_offset + k

    def option_index(self, token):
        return token - self.option_offset

    @property
    def masks(self) -> np.ndarray:
        """Boolean (3, V) table: allowed ids per position kind."""
        m = np.zeros((3, self.vocab_size), dtype=bool)
        m[REASONING, : self.num_reasoning] = True
        m[THINK_END, self.think_end_id] = True
        m[DECISION, self.option_offset :] = True
        return m

    @classmethod
    def for_spec(cls, spec) -> "VocabLayout":
        return cls(spec.reasoning_vocab_size, spec.num_options)


@dataclass
class PolicyParams:
    input_proj: np.ndarray  # (K, H)
    hidden_bias: np.ndarray  # (H,)
    recurrent: np.ndarray  # (H, H)
    token_embed: np.ndarray  # (V, H)
    output_head: np.ndarray  # (H, V)
    output_bias: np.ndarray  # (V,)
    layout: VocabLayout
    trace_length: int

    @property
    def hidden_dim(self) -> int:
        return self.hidden_bias.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in _PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValidationError(f"flat vector has length {vec.shape}, expected {self.size}")
        parts, i = {}, 0
        for name, a in zip(_PARAM_NAMES, self.arrays()):
            parts[name] = vec[i : i + a.size].reshape(a.shape).copy()
            i += a.size
        return PolicyParams(**parts, layout=self.layout, trace_length=self.trace_length)

    def snapshot(self) -> "PolicyParams":
        return self.with_flat(self.flat())

    def zeros_like(self) -> "PolicyParams":
        return self.with_flat(np.zeros(self.size))

    def save(self, path: str | Path) -> Path:
        """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.flat().astype("<f8").tofile(path.with_suffix(".bin"))
        meta = {
            "H": self.hidden_dim,
            "V": self.layout.vocab_size,
            "K": self.layout.num_options,
            "R": self.layout.num_reasoning,
            "T": self.trace_length,
            "format_version": FORMAT_VERSION,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        return path.with_suffix(".bin")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint format {meta.get('format_version')}")
        layout = VocabLayout(meta["R"], meta["K"])
        if layout.vocab_size != meta["V"]:
            raise ValidationError("checkpoint sidecar is inconsistent: V != R + 1 + K")
        template = init_policy(meta["H"], layout, meta["T"], zero=True)
        return template.with_flat(np.fromfile(path.with_suffix(".bin"), dtype="<f8"))


def init_policy(
    hidden_dim: int,
    layout: VocabLayout,
    trace_length: int,
    rng: np.random.Generator | int | None = None,
    zero: bool = False,
) -> PolicyParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init; ``zero=True`` gives all-zero params."""
    if hidden_dim < 2:
        raise ValidationError("hidden_dim must be ≥ 2")
    if trace_length < 0:
        raise ValidationError("trace_length must be ≥ 0")
    H, K, V = hidden_dim, layout.num_options, layout.vocab_size
    shapes = dict(
        input_proj=(K, H), hidden_bias=(H,), recurrent=(H, H),
        token_embed=(V, H), output_head=(H, V), output_bias=(V,),
    )
    if zero:
        arrays = {n: np.zeros(s) for n, s in shapes.items()}
    else:
        rng = np.random.default_rng(rng)
        scale = 1.0 / np.sqrt(H)
        arrays = {n: rng.uniform(-scale, scale, size=s) for n, s in shapes.items()}
    return PolicyParams(**arrays, layout=layout, trace_length=trace_length)


def position_kinds(trace_len: int) -> np.ndarray:
    kinds = np.full(trace_len + 2, REASONING)
    kinds[trace_len] = THINK_END
    kinds[trace_len + 1] = DECISION
    return kinds


def check_structure(layout: VocabLayout, tokens: np.ndarray, trace_len: int) -> None:
    """Raise if any row of ``tokens`` (N, L') violates the position masks."""
    tokens = np.atleast_2d(tokens)
    L = tokens.shape[1]
    if L > trace_len + 2:
        raise ValidationError(f"sequence length {L} exceeds trace_len + 2 = {trace_len + 2}")
    masks = layout.masks
    kinds = position_kinds(trace_len)[:L]
    if np.any(tokens < 0) or np.any(tokens >= layout.vocab_size):
        raise ValidationError("token id out of vocabulary range")
    ok = masks[kinds[None, :], tokens]
    if not ok.all():
        n, t = np.argwhere(~ok)[0]
        kind = ("reasoning", "think_end", "decision")[kinds[t]]
        raise ValidationError(
            f"token {tokens[n, t]} at position {t} is not allowed in a {kind} slot"
        )


def _masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


@dataclass
class Cache:
    """Activations of a teacher-forced batch forward pass."""

    X: np.ndarray  # (N, K)
    tokens: np.ndarray  # (N, L)
    trace_len: int
    hidden: np.ndarray  # (L, N, H)
    logprobs: np.ndarray  # (L, N, V) masked log-softmax, -inf outside mask

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)

    def token_logprobs(self) -> np.ndarray:
        L = self.tokens.shape[1]
        n = np.arange(self.tokens.shape[0])
        return np.stack([self.logprobs[t, n, self.tokens[:, t]] for t in range(L)], axis=1)


def _step_hidden(params: PolicyParams, base: np.ndarray, h_prev, tok_prev) -> np.ndarray:
    if h_prev is None:
        return np.tanh(base)
    return np.tanh(base + h_prev @ params.recurrent + params.token_embed[tok_prev])


def forward(params: PolicyParams, X: np.ndarray, tokens: np.ndarray, trace_len: int | None = None) -> Cache:
    """Teacher-forced pass over ``tokens`` (N, L'); L' may be a prefix length.

    The distribution at position t depends on tokens before t only, so the
    last supplied token's value never enters the activations.
    """
    if trace_len is None:
        trace_len = params.trace_length
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    L = tokens.shape[1]
    masks = params.layout.masks
    kinds = position_kinds(trace_len)
    base = X @ params.input_proj + params.hidden_bias
    hs, lps = [], []
    h = None
    for t in range(L):
        h = _step_hidden(params, base, h, tokens[:, t - 1] if t else None)
        hs.append(h)
        logits = h @ params.output_head + params.output_bias
        lps.append(_masked_log_softmax(logits, masks[kinds[t]]))
    return Cache(X=X, tokens=tokens, trace_len=trace_len, hidden=np.stack(hs), logprobs=np.stack(lps))


def backward(params: PolicyParams, cache: Cache, dlogits: np.ndarray) -> PolicyParams:
    """Gradient of a scalar loss given its gradient w.r.t. the logits.

    ``dlogits`` has shape (L, N, V). Entries outside the position masks must
    be zero (the masked softmax does not depend on those logits).
    """
    L, N, H = cache.hidden.shape
    g = params.zeros_like()
    hs = cache.hidden
    dh_next = np.zeros((N, H))
    for t in range(L - 1, -1, -1):
        dl = dlogits[t]
        h = hs[t]
        g.output_head += h.T @ dl
        g.output_bias += dl.sum(axis=0)
        dh = dl @ params.output_head.T + dh_next
        da = dh * (1.0 - h * h)
        g.input_proj += cache.X.T @ da
        g.hidden_bias += da.sum(axis=0)
        if t > 0:
            g.recurrent += hs[t - 1].T @ da
            np.add.at(g.token_embed, cache.tokens[:, t - 1], da)
            dh_next = da @ params.recurrent.T
    return g


def logprob_grad_logits(cache: Cache, weights: np.ndarray) -> np.ndarray:
    """dlogits for ``sum_{n,t} weights[n, t] * log pi(token[n, t])``."""
    L = cache.tokens.shape[1]
    probs = cache.probs
    out = -probs * weights.T[:, :, None]
    n = np.arange(cache.tokens.shape[0])
    for t in range(L):
        out[t, n, cache.tokens[:, t]] += weights[:, t]
    return out


@dataclass
class Rollout:
    instance_id: int
    tokens: np.ndarray  # (T + 2,)
    logprobs: np.ndarray  # (T + 2,)
    decision_index: int
    layout: VocabLayout = field(repr=False)

    @property
    def decision_prob(self) -> float:
        return float(np.exp(self.logprobs[self.decision_index]))

    @property
    def decision(self) -> int:
        return int(self.layout.option_index(self.tokens[self.decision_index]))

    @property
    def trace(self) -> np.ndarray:
        return self.tokens[: self.decision_index - 1]

    def to_json(self) -> dict:
        return {
            "instance_id": int(self.instance_id),
            "tokens": self.tokens.tolist(),
            "logprobs": self.logprobs.tolist(),
            "decision_index": int(self.decision_index),
            "decision_prob": self.decision_prob,
        }


@dataclass
class RolloutBatch:
    """N rollouts as arrays; row n belongs to ``instance_ids[n]``."""

    instance_ids: np.ndarray
    X: np.ndarray
    tokens: np.ndarray
    logprobs: np.ndarray
    trace_len: int
    layout: VocabLayout

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def decision_index(self) -> int:
        return self.trace_len + 1

    @property
    def decisions(self) -> np.ndarray:
        return self.tokens[:, self.decision_index] - self.layout.option_offset

    @property
    def decision_probs(self) -> np.ndarray:
        return np.exp(self.logprobs[:, self.decision_index])

    def rollout(self, n: int) -> Rollout:
        return Rollout(
            instance_id=int(self.instance_ids[n]),
            tokens=self.tokens[n].copy(),
            logprobs=self.logprobs[n].copy(),
            decision_index=self.decision_index,
            layout=self.layout,
        )

    def rollouts(self) -> list[Rollout]:
        return [self.rollout(n) for n in range(len(self))]


def sample_batch(
    params: PolicyParams,
    X: np.ndarray,
    rng: np.random.Generator,
    temperature: float | None = 1.0,
    instance_ids: np.ndarray | None = None,
) -> RolloutBatch:
    """Sample one rollout per row of ``X``.

    ``temperature=None`` (or 0) decodes greedily, lowest index on ties.
    Uniforms are drawn as an (N, T + 2) block so row n consumes the same
    draws whatever the batch size. Stored log-probabilities are the
    untempered masked ones.
    """
    if temperature is not None and temperature < 0:
        raise ValidationError("temperature must be > 0")
    greedy = temperature is None or temperature == 0
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    T = params.trace_length
    L = T + 2
    masks = params.layout.masks
    kinds = position_kinds(T)
    U = None if greedy else rng.random((N, L))
    base = X @ params.input_proj + params.hidden_bias
    tokens = np.zeros((N, L), dtype=np.int64)
    logprobs = np.zeros((N, L))
    rows = np.arange(N)
    h = None
    for t in range(L):
        h = _step_hidden(params, base, h, tokens[:, t - 1] if t else None)
        logits = h @ params.output_head + params.output_bias
        mask = masks[kinds[t]]
        lp = _masked_log_softmax(logits, mask)
        if kinds[t] == THINK_END:
            tok = np.full(N, params.layout.think_end_id)
        elif greedy:
            tok = np.argmax(lp, axis=1)
        else:
            tp = _masked_log_softmax(logits / temperature, mask)
            cdf = np.cumsum(np.exp(tp), axis=1)
            tok = (cdf <= U[:, t : t + 1] * cdf[:, -1:]).sum(axis=1)
            # guard against landing on a masked id through rounding at the top
            allowed = np.flatnonzero(mask)
            tok = np.clip(tok, allowed[0], allowed[-1])
        tokens[:, t] = tok
        logprobs[:, t] = lp[rows, tok]
    ids = np.arange(N) if instance_ids is None else np.asarray(instance_ids)
    return RolloutBatch(ids, X, tokens, logprobs, T, params.layout)


def sample_rollout(
    params: PolicyParams, instance: Instance, temperature: float | None, rng: np.random.Generator
) -> Rollout:
    return sample_batch(params, instance.features[None], rng, temperature, [instance.id]).rollout(0)


def forward_next_token_dist(params: PolicyParams, instance: Instance, prefix: Sequence[int]) -> np.ndarray:
    """Masked next-token distribution (length V) after ``prefix``."""
    prefix = np.asarray(prefix, dtype=np.int64)
    T = params.trace_length
    if prefix.size > T + 1:
        raise ValidationError(f"prefix length {prefix.size} exceeds T + 1 = {T + 1}")
    if prefix.size:
        check_structure(params.layout, prefix[None], T)
    # append a dummy token; its value is never read
    padded = np.concatenate([prefix, [0]])[None]
    cache = forward(params, instance.features[None], padded, T)
    return cache.probs[-1, 0]


def score_batch(params: PolicyParams, batch: RolloutBatch) -> np.ndarray:
    check_structure(params.layout, batch.tokens, batch.trace_len)
    return forward(params, batch.X, batch.tokens, batch.trace_len).token_logprobs()


def score_rollout(params: PolicyParams, instance: Instance, rollout: Rollout) -> np.ndarray:
    """Teacher-forced per-token log-probabilities of ``rollout`` under ``params``."""
    trace_len = rollout.decision_index - 1
    check_structure(params.layout, rollout.tokens[None], trace_len)
    return forward(params, instance.features[None], rollout.tokens[None], trace_len).token_logprobs()[0]


def decision_distributions(
    params: PolicyParams, X: np.ndarray, traces: np.ndarray, masked: bool = True
) -> np.ndarray:
    """Decision distributions (N, K) given each row's features and trace.

    With ``masked=False`` the option entries of the full-vocabulary softmax
    are returned instead (they need not sum to 1).
    """
    X = np.atleast_2d(X)
    traces = np.asarray(traces, dtype=np.int64).reshape(X.shape[0], -1)
    T = traces.shape[1]
    layout = params.layout
    N = X.shape[0]
    tokens = np.concatenate(
        [traces, np.full((N, 1), layout.think_end_id), np.full((N, 1), layout.option_offset)], axis=1
    )
    check_structure(layout, tokens, T)
    cache = forward(params, X, tokens, T)
    if masked:
        return cache.probs[-1][:, layout.option_offset :]
    h = cache.hidden[-1]
    logits = h @ params.output_head + params.output_bias
    full = np.exp(logits - logits.max(axis=1, keepdims=True))
    full /= full.sum(axis=1, keepdims=True)
    return full[:, layout.option_offset :]


def decision_distribution(
    params: PolicyParams, instance: Instance, trace: Sequence[int], masked: bool = True
) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.int64)
    if trace.shape != (params.trace_length,):
        raise ValidationError(
            f"trace must have length T={params.trace_length}, got {trace.shape[0] if trace.ndim else 0}"
        )
    return decision_distributions(params, instance.features[None], trace[None], masked)[0]


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_coords: int
    worst_index: int


def gradient_check(
    params: PolicyParams,
    loss_and_grad: Callable[[PolicyParams], tuple[float, PolicyParams]],
    tolerance: float = 1e-4,
    n_coords: int = 256,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient with central finite differences.

    Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    At least 200 coordinates (or all, if fewer) are checked.
    """
    loss, grad = loss_and_grad(params)
    if not np.isfinite(loss):
        raise DiagnosticError("loss is not finite at the check point", loss=loss)
    analytic = grad.flat()
    theta = params.flat()
    n = theta.size
    n_coords = min(max(n_coords, 200), n)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=n_coords, replace=False))
    worst, worst_i = 0.0, -1
    for i in idx:
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        lp = loss_and_grad(params.with_flat(tp))[0]
        lm = loss_and_grad(params.with_flat(tm))[0]
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise DiagnosticError("loss became non-finite under perturbation", coordinate=int(i))
        numeric = (lp - lm) / (2 * step)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst, worst_i = rel, int(i)
    return GradCheckReport(max_rel_error=worst, passed=worst < tolerance, n_coords=n_coords, worst_index=worst_i)
