"""Run configuration: one JSON document with five sections.

Parsing fills in every default, rejects unknown keys and coerces integer
literals in float fields, so ``dumps(parse(x))`` is a canonical form and
``parse(dumps(parse(x))) == parse(x)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .evaluate import ExperimentSpec, VariantSpec, default_convergence_spec
from .model import ModelConfig
from .sample import SamplerConfig
from .synth import GenParams
from .train import TrainConfig

# model fields that follow the data generator instead of being set directly
DERIVED_MODEL_FIELDS = ("T_v", "T_a", "T_r", "P_v", "P_a", "d_c")


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 48
    heads: int = 4
    layers: int = 2
    mlp_hidden: int = 96
    rope_base: float = 100.0
    t_freq: int = 32
    eps_skip: bool = True


@dataclass(frozen=True)
class ExperimentSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    checkpoints: int = 200
    clips_per_eval: int = 16
    n_train: int = 1024
    data_seed: int = 11
    eval_seed: int = 99
    sample_seed: int = 5


@dataclass(frozen=True)
class RunConfig:
    gen_params: GenParams = field(default_factory=GenParams)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    @property
    def mcfg(self) -> ModelConfig:
        return ModelConfig.from_gen(self.gen_params, **asdict(self.model))

    def experiment_spec(self, out: str | None = None) -> ExperimentSpec:
        e = self.experiment
        base = default_convergence_spec(
            seeds=tuple(e.seeds),
            checkpoints=e.checkpoints,
            clips_per_eval=e.clips_per_eval,
            out=out,
            gen=self.gen_params,
            model=self.mcfg,
            n_train=e.n_train,
            data_seed=e.data_seed,
            eval_seed=e.eval_seed,
            sample_seed=e.sample_seed,
        )
        variants = tuple(VariantSpec(v.name, self.train, self.sampler) for v in base.variants)
        return replace(base, variants=variants)


def _coerce(value, default, where: str):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(type(default), value, where)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_coerce(v, default[0] if default else 0, f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported field type")


def _build(cls, data: dict, where: str):
    proto = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {k: _coerce(v, getattr(proto, k), f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(data: dict | str) -> RunConfig:
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except ValueError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if isinstance(data.get("model"), dict):
        clash = sorted(set(data["model"]) & set(DERIVED_MODEL_FIELDS))
        if clash:
            raise ConfigError(f"model: {', '.join(clash)} follow gen_params; set them there")
    cfg = _build(RunConfig, data, "config")
    if len(cfg.experiment.seeds) < 1:
        raise ConfigError("experiment.seeds must not be empty")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def _plain(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _plain(getattr(x, f.name)) for f in fields(x)}
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    return x


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(_plain(cfg), indent=2, sort_keys=True) + "\n"

