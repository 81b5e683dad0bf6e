"""Synthetic multiple-choice decision tasks with known Bayes posteriors.

Each instance has latent per-option scores ``u ~ N(mu, s^2 I)``. The gold
label is drawn from ``softmax(u / label_temperature)``, so the label noise
(aleatoric uncertainty) is controlled by one temperature and the Bayes
posterior is available in closed form when observations are noise-free.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import softmax
from scipy.stats import qmc, norm

from .errors import ValidationError

# Fixed node set for the noisy-observation posterior integral.
POSTERIOR_NODES = 4096
_POSTERIOR_NODE_SEED = 20240917

_SHIFTABLE = ("latent_mean", "latent_scale", "label_temperature", "obs_noise")
_FROZEN = ("num_options", "trace_length", "reasoning_vocab_size", "latent_dim")


@dataclass(frozen=True)
class TaskSpec:
    num_options: int = 4
    latent_dim: int = 4
    label_temperature: float = 0.8
    obs_noise: float = 0.0
    latent_mean: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    latent_scale: float = 1.0
    trace_length: int = 4
    reasoning_vocab_size: int = 8
    seed_namespace: int = 0

    def __post_init__(self) -> None:
        _validate(self)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["latent_mean"] = list(self.latent_mean)
        return d


@dataclass
class Instance:
    id: int
    latent: np.ndarray
    features: np.ndarray
    gold: int
    posterior: np.ndarray = field(repr=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": int(self.id),
            "u": self.latent.tolist(),
            "x_obs": self.features.tolist(),
            "gold": int(self.gold),
            "posterior": self.posterior.tolist(),
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Instance":
        return cls(
            id=int(d["id"]),
            latent=np.asarray(d["u"], dtype=np.float64),
            features=np.asarray(d["x_obs"], dtype=np.float64),
            gold=int(d["gold"]),
            posterior=np.asarray(d["posterior"], dtype=np.float64),
        )


def _validate(spec: TaskSpec) -> None:
    if spec.num_options < 2:
        raise ValidationError("num_options must be ≥ 2")
    if not spec.label_temperature > 0:
        raise ValidationError("label_temperature must be > 0")
    if spec.obs_noise < 0:
        raise ValidationError("obs_noise must be ≥ 0")
    if not spec.latent_scale > 0:
        raise ValidationError("latent_scale must be > 0")
    if spec.trace_length < 1:
        raise ValidationError("trace_length must be ≥ 1")
    if spec.reasoning_vocab_size < spec.num_options:
        raise ValidationError("reasoning_vocab_size must be ≥ num_options")
    if spec.latent_dim != spec.num_options:
        raise ValidationError("latent_dim must equal num_options (one score per option)")
    if len(spec.latent_mean) != spec.num_options:
        raise ValidationError(
            f"latent_mean must have length num_options={spec.num_options}, got {len(spec.latent_mean)}"
        )
    if not (0 <= spec.seed_namespace < 2**64):
        raise ValidationError("seed_namespace must be a 64-bit unsigned integer")


def make_task_spec(config: Mapping[str, Any] | None = None) -> TaskSpec:
    """Build a validated TaskSpec, filling unspecified keys with defaults.

    Defaults: K=4, label_temperature=0.8, obs_noise=0, trace_length=4,
    reasoning_vocab_size=2K, latent_mean=0, latent_scale=1.
    """
    config = dict(config or {})
    known = {f.name for f in dataclasses.fields(TaskSpec)}
    unknown = set(config) - known
    if unknown:
        raise ValidationError(f"unknown task keys: {sorted(unknown)}")
    k = int(config.get("num_options", 4))
    if k < 2:
        raise ValidationError("num_options must be ≥ 2")
    mean = config.get("latent_mean", 0.0)
    if np.isscalar(mean):
        mean = (float(mean),) * k
    return TaskSpec(
        num_options=k,
        latent_dim=int(config.get("latent_dim", k)),
        label_temperature=float(config.get("label_temperature", 0.8)),
        obs_noise=float(config.get("obs_noise", 0.0)),
        latent_mean=tuple(float(m) for m in mean),
        latent_scale=float(config.get("latent_scale", 1.0)),
        trace_length=int(config.get("trace_length", 4)),
        reasoning_vocab_size=int(config.get("reasoning_vocab_size", 2 * k)),
        seed_namespace=int(config.get("seed_namespace", 0)),
    )


def shift_spec(spec: TaskSpec, shift: Mapping[str, Any]) -> TaskSpec:
    """Return an OOD variant of ``spec``.

    Only the latent mean/scale, label temperature and observation noise may
    change. ``latent_mean`` may be given as a vector or as a scalar offset
    added to every coordinate (``latent_mean_offset``).
    """
    bad = [k for k in shift if k in _FROZEN]
    if bad:
        raise ValidationError(f"shift may not change {', '.join(bad)} (policy vocabulary depends on it)")
    allowed = set(_SHIFTABLE) | {"latent_mean_offset"}
    unknown = [k for k in shift if k not in allowed]
    if unknown:
        raise ValidationError(f"unknown shift keys: {unknown}")
    updates = {k: v for k, v in shift.items() if k in _SHIFTABLE}
    if "latent_mean" in updates:
        m = updates["latent_mean"]
        updates["latent_mean"] = (
            (float(m),) * spec.num_options if np.isscalar(m) else tuple(float(v) for v in m)
        )
    if "latent_mean_offset" in shift:
        base = np.asarray(updates.get("latent_mean", spec.latent_mean), dtype=np.float64)
        updates["latent_mean"] = tuple((base + float(shift["latent_mean_offset"])).tolist())
    for key in ("latent_scale", "label_temperature", "obs_noise"):
        if key in updates:
            updates[key] = float(updates[key])
    # fresh namespace so shifted streams never reuse source draws
    ns = np.random.SeedSequence([spec.seed_namespace, 0x5F1F7]).generate_state(1, np.uint64)[0]
    updates["seed_namespace"] = int(ns)
    return dataclasses.replace(spec, **updates)


def instance_rng(spec: TaskSpec, seed: int, instance_id: int) -> np.random.Generator:
    """Counter-based stream for one instance, keyed by (namespace, seed, id)."""
    key = np.random.SeedSequence([spec.seed_namespace, int(seed)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(instance_id), 0]))


def sample_instances(
    spec: TaskSpec, n: int, seed: int = 0, start_id: int = 0
) -> list[Instance]:
    """Draw ``n`` instances with ids ``start_id .. start_id + n - 1``.

    Every instance is a pure function of (spec, seed, id), so any slice of
    the id range can be generated independently.
    """
    if n <= 0:
        raise ValidationError("n must be ≥ 1")
    k = spec.num_options
    mean = np.asarray(spec.latent_mean, dtype=np.float64)
    u = np.empty((n, k))
    x = np.empty((n, k))
    gold = np.empty(n, dtype=np.int64)
    for j in range(n):
        rng = instance_rng(spec, seed, start_id + j)
        draws = rng.standard_normal(2 * k)
        v = rng.random()
        u[j] = mean + spec.latent_scale * draws[:k]
        x[j] = u[j] + spec.obs_noise * draws[k:] if spec.obs_noise > 0 else u[j]
        probs = softmax(u[j] / spec.label_temperature)
        gold[j] = min(int(np.searchsorted(np.cumsum(probs), v, side="right")), k - 1)
    post = _posterior_batch(spec, u, x)
    return [
        Instance(id=start_id + j, latent=u[j], features=x[j], gold=int(gold[j]), posterior=post[j])
        for j in range(n)
    ]


def _posterior_nodes(k: int) -> np.ndarray:
    # scrambled Sobol points pushed through the normal inverse CDF
    sampler = qmc.Sobol(d=k, scramble=True, seed=_POSTERIOR_NODE_SEED)
    pts = sampler.random(POSTERIOR_NODES)
    return norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))


def _posterior_batch(spec: TaskSpec, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    tau = spec.label_temperature
    if spec.obs_noise == 0:
        return softmax(u / tau, axis=-1)
    s2 = spec.latent_scale**2
    n2 = spec.obs_noise**2
    mean = np.asarray(spec.latent_mean)
    # u | x is Gaussian with shrunk mean and reduced isotropic variance
    post_mean = (s2 * x + n2 * mean) / (s2 + n2)
    post_sd = np.sqrt(s2 * n2 / (s2 + n2))
    z = _posterior_nodes(spec.num_options)
    out = np.empty_like(x)
    for j in range(x.shape[0]):
        out[j] = softmax((post_mean[j] + post_sd * z) / tau, axis=-1).mean(axis=0)
    return out


def bayes_posterior(spec: TaskSpec, instance: Instance) -> np.ndarray:
    """Label distribution given what the policy observes.

    With noise-free observations this is ``softmax(u / tau)``. Otherwise it
    integrates the softmax over ``u | x_obs`` with a fixed set of 4096
    quasi-Monte-Carlo nodes.
    """
    k = spec.num_options
    if instance.latent.shape != (k,) or instance.features.shape != (k,):
        raise ValidationError(
            f"instance {instance.id} has dimension {instance.features.shape[0]}, spec expects {k}"
        )
    return _posterior_batch(spec, instance.latent[None], instance.features[None])[0]


def monte_carlo_bayes_accuracy(spec: TaskSpec, n: int = 1_000_000, seed: int = 0) -> float:
    """Expected accuracy of the argmax-posterior predictor (noise-free case)."""
    rng = np.random.default_rng(seed)
    u = np.asarray(spec.latent_mean) + spec.latent_scale * rng.standard_normal((n, spec.num_options))
    return float(softmax(u / spec.label_temperature, axis=1).max(axis=1).mean())


def features_matrix(instances: Sequence[Instance]) -> np.ndarray:
    return np.stack([inst.features for inst in instances])


def gold_vector(instances: Sequence[Instance]) -> np.ndarray:
    return np.array([inst.gold for inst in instances], dtype=np.int64)


def write_instances(instances: Iterable[Instance], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json()) + "\n")
    return path


def read_instances(path: str | Path) -> list[Instance]:
    with Path(path).open() as fh:
        return [Instance.from_json(json.loads(line)) for line in fh if line.strip()]


def spec_to_toml(spec: TaskSpec) -> str:
    import tomli_w

    return tomli_w.dumps({"task": spec.to_dict()})


def spec_from_toml(text: str) -> TaskSpec:
    import tomli

    data = tomli.loads(text)
    if "task" not in data:
        raise ValidationError("TOML document has no [task] table")
    return make_task_spec(data["task"])
