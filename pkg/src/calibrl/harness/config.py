"""Run configuration: TOML tables, defaults, and ``CALIBRL_`` env overrides.

Layout of a config file::

    seed = 0
    output_dir = "runs/desk"
    [task]          # TaskSpec fields
    [ood]           # shift applied to [task] for the OOD split
    [data]          # n_train, n_val, n_eval, n_ood
    [model]         # hidden_dim
    [warmup]        # WarmupConfig fields + pretrain_label_temperature
    [train]         # TrainConfig fields shared by every mode
    [train.sft]     # per-mode overrides (also train.grpo, train.calib_grpo)
    [eval]          # bins, threshold, binning
    [posthoc]       # enabled, calibration_fraction
    [diagnostics]   # studies, samples_per_instance, n_instances, ...

Environment variables ``CALIBRL_<KEY>`` override top-level keys and
``CALIBRL_<TABLE>__<KEY>`` (double underscore for nesting) override table
entries, e.g. ``CALIBRL_TRAIN__GRPO__LEARNING_RATE=0.002``.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from ..errors import ValidationError
from ..synthworld import TaskSpec, make_task_spec, shift_spec
from ..trainers import TrainConfig, WarmupConfig

ENV_PREFIX = "CALIBRL_"
MODES = ("sft", "grpo", "calib_grpo")

_TRAIN_ALIASES = {"G": "group_size", "epsilon": "clip_eps", "lambda": "lam", "lr": "learning_rate"}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/desk",
    "task": {
        "num_options": 4,
        "label_temperature": 0.375,
        "obs_noise": 0.0,
        "latent_scale": 1.0,
        "latent_mean": [0.0, 0.0, 0.0, 0.0],
        "trace_length": 4,
        "reasoning_vocab_size": 8,
        "seed_namespace": 11,
    },
    "ood": {"latent_mean_offset": 0.5, "label_temperature": 0.45},
    "data": {"n_train": 500, "n_val": 2000, "n_eval": 2000, "n_ood": 2000},
    "model": {"hidden_dim": 16},
    "warmup": {
        "pretrain_label_temperature": 0.05,
        "n_instances": 2000,
        "learning_rate": 1e-2,
        "batch_size": 64,
        "max_epochs": 30,
        "margin": 0.25,
        "extraction_steps": 300,
        "trace_fidelity": 1.0,
    },
    "train": {
        "group_size": 8,
        "clip_eps": 0.2,
        "reward_normalization": "group",
        "inner_updates": 1,
        "batch_size": 32,
        "sampling_temperature": 1.0,
        "selection": "accuracy",
        "sft": {"epochs": 5, "learning_rate": 1e-2, "sft_trace_policy": "reference_params"},
        "grpo": {"epochs": 20, "learning_rate": 1e-3, "lam": 0.0},
        "calib_grpo": {"epochs": 20, "learning_rate": 1e-3, "lam": 0.02},
    },
    "eval": {"bins": 10, "threshold": 0.99, "binning": "equal_mass", "selection_split": "val"},
    "posthoc": {"enabled": True, "calibration_fraction": 0.3},
    "diagnostics": {
        "studies": ["overconfidence", "swap"],
        "samples_per_instance": 64,
        "n_instances": 200,
        "temperature": 1.0,
        "confidence_floor": 0.9,
    },
}


@dataclass
class EvalConfig:
    bins: int = 10
    threshold: float = 0.99
    binning: str = "equal_mass"
    # "test" reproduces selecting checkpoints on the eval set; it leaks test data
    selection_split: str = "val"


@dataclass
class PosthocConfig:
    enabled: bool = True
    calibration_fraction: float = 0.3


@dataclass
class DiagnosticsConfig:
    studies: list[str] = field(default_factory=lambda: ["overconfidence", "swap"])
    samples_per_instance: int = 64
    n_instances: int = 200
    temperature: float = 1.0
    confidence_floor: float = 0.9


@dataclass
class DataConfig:
    n_train: int = 500
    n_val: int = 2000
    n_eval: int = 2000
    n_ood: int = 2000


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    task: TaskSpec
    ood_shift: dict
    data: DataConfig
    hidden_dim: int
    warmup: WarmupConfig
    pretrain_label_temperature: float
    train: dict[str, TrainConfig]
    eval: EvalConfig
    posthoc: PosthocConfig
    diagnostics: DiagnosticsConfig
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def ood_task(self) -> TaskSpec:
        return shift_spec(self.task, self.ood_shift)

    @property
    def pretrain_task(self) -> TaskSpec:
        return shift_spec(self.task, {"label_temperature": self.pretrain_label_temperature})

    def to_toml(self) -> str:
        return tomli_w.dumps(self.raw)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_env_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX) :].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = _parse_env_value(value)
    return out


def _dataclass_from(cls, table: Mapping, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**table)


def _train_configs(table: Mapping) -> dict[str, TrainConfig]:
    shared = {_TRAIN_ALIASES.get(k, k): v for k, v in table.items() if not isinstance(v, Mapping)}
    shared.pop("seed", None)
    shared.pop("mode", None)
    out = {}
    for mode in MODES:
        per = {_TRAIN_ALIASES.get(k, k): v for k, v in table.get(mode, {}).items()}
        out[mode] = TrainConfig.from_mapping({**shared, **per, "mode": mode})
    unknown = [k for k, v in table.items() if isinstance(v, Mapping) and k not in MODES]
    if unknown:
        raise ValidationError(f"unknown [train] sub-tables: {unknown}")
    return out


def build_config(data: Mapping) -> RunConfig:
    """Validate a merged config mapping into a RunConfig."""
    data = _merge(DEFAULTS, data)
    known = set(DEFAULTS)
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    task = make_task_spec(data["task"])
    # validate the shift eagerly so bad configs fail before any work
    shift_spec(task, data["ood"])
    warm = dict(data["warmup"])
    pre_tau = float(warm.pop("pretrain_label_temperature"))
    if pre_tau <= 0:
        raise ValidationError("pretrain_label_temperature must be > 0")
    ev = _dataclass_from(EvalConfig, data["eval"], "eval")
    if ev.bins < 1:
        raise ValidationError("eval.bins must be ≥ 1")
    if ev.binning not in ("equal_mass", "fixed_width"):
        raise ValidationError(f"eval.binning must be equal_mass or fixed_width, got {ev.binning!r}")
    if ev.selection_split not in ("val", "test"):
        raise ValidationError(f"eval.selection_split must be val or test, got {ev.selection_split!r}")
    ph = _dataclass_from(PosthocConfig, data["posthoc"], "posthoc")
    if not 0 < ph.calibration_fraction < 1:
        raise ValidationError("posthoc.calibration_fraction must lie in (0, 1)")
    dg = _dataclass_from(DiagnosticsConfig, data["diagnostics"], "diagnostics")
    bad = set(dg.studies) - {"overconfidence", "swap"}
    if bad:
        raise ValidationError(f"unknown diagnostics studies: {sorted(bad)}")
    dc = _dataclass_from(DataConfig, data["data"], "data")
    if min(dc.n_train, dc.n_val, dc.n_eval, dc.n_ood) < 1:
        raise ValidationError("data sizes must be ≥ 1")
    model = data["model"]
    if set(model) - {"hidden_dim"}:
        raise ValidationError(f"unknown keys in [model]: {sorted(set(model) - {'hidden_dim'})}")
    seed = int(data["seed"])
    if not 0 <= seed < 2**64:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    return RunConfig(
        seed=seed,
        output_dir=Path(data["output_dir"]),
        task=task,
        ood_shift=dict(data["ood"]),
        data=dc,
        hidden_dim=int(model["hidden_dim"]),
        warmup=_dataclass_from(WarmupConfig, warm, "warmup"),
        pretrain_label_temperature=pre_tau,
        train=_train_configs(data["train"]),
        eval=ev,
        posthoc=ph,
        diagnostics=dg,
        raw=data,
    )


def load_config(
    path: str | Path | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then the TOML file, then env vars, then explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
    data = _merge(data, env_overrides(environ))
    data = _merge(data, overrides or {})
    return build_config(data)
