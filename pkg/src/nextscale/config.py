"""JSON run configuration for the command-line stages.

Each stage reads one JSON object whose sections map onto the library's
config dataclasses; a missing file or section means library defaults.
Unknown keys are rejected recursively, and every rejection names the file
and line of the offending key.  The CLI flags --seed and --out override the
top-level "seed" key and supply the output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError, ContractError, VocabularyError
from .model import PretrainConfig, SamplerConfig, VarConfig
from .personalize import FinetuneConfig
from .synthetic import SyntheticSpec
from .tokenizer import AutoencoderConfig, ScaleSchedule, TokenizerTrainConfig


@dataclass(frozen=True)
class SampleParams:
    prompt: str = "a circle on dark"
    count: int = 4

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("sample count must be positive")


@dataclass(frozen=True)
class AnalyzeParams:
    eps: float = 1e-8

    def __post_init__(self):
        if not self.eps > 0.0:
            raise ConfigError("eps must be positive")


@dataclass(frozen=True)
class ScaleProbeParams:
    noise_seed: int = 0
    images: int = 20
    dumps: int = 1  # corrupted decodes of the first image(s) as PPM

    def __post_init__(self):
        if self.images < 1 or self.dumps < 0:
            raise ConfigError("images must be >= 1 and dumps >= 0")


@dataclass(frozen=True)
class EvalParams:
    subject_samples: int = 8
    class_samples: int = 16
    prompts: tuple[str, ...] = ()

    def __post_init__(self):
        if self.subject_samples < 2 or self.class_samples < 1:
            raise ConfigError("need >= 2 subject samples and >= 1 class sample")


@dataclass(frozen=True)
class RunConfig:
    stage: str
    seed: int
    out: str | None
    inputs: dict[str, str]
    sections: dict[str, object]

    def section(self, name: str):
        return self.sections[name]


_SECTION_TYPES = {
    "corpus": SyntheticSpec,
    "autoencoder": AutoencoderConfig,
    "tokenizer": TokenizerTrainConfig,
    "model": VarConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "sampler": SamplerConfig,
    "sample": SampleParams,
    "analyze": AnalyzeParams,
    "scales": ScaleProbeParams,
    "eval": EvalParams,
}

# stage -> (required input names, allowed section names)
STAGES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "pretrain-tokenizer": ((), ("corpus", "autoencoder", "tokenizer")),
    "pretrain-var": (("tokenizer",), ("corpus", "model", "pretrain")),
    "finetune": (("tokenizer", "model"), ("corpus", "finetune")),
    "sample": (("tokenizer", "model"), ("sampler", "sample")),
    "analyze-weights": (("original", "tuned"), ("analyze",)),
    "analyze-scales": (("tokenizer",), ("corpus", "scales")),
    "evaluate": (("tokenizer", "model"), ("corpus", "sampler", "eval")),
    "selfcheck": ((), ()),
}

_TOP_KEYS = ("seed", "corpus_seed", "inputs")


def _line_of(text: str, key: str) -> int:
    probe = f'"{key}"'
    i = text.find(probe)
    return text.count("\n", 0, i) + 1 if i >= 0 else 1


def _err(path: str, text: str, key: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}:{_line_of(text, key)}: {msg}")


def _scalar_ok(type_name: str, value) -> bool:
    if type_name.startswith("bool"):
        return isinstance(value, bool)
    if isinstance(value, bool):  # bools are ints in Python; reject for numbers
        return False
    if type_name.startswith("int"):
        return isinstance(value, int) or value is None and "None" in type_name
    if type_name.startswith("float"):
        return isinstance(value, (int, float))
    if type_name.startswith("str"):
        return isinstance(value, str)
    return True


def _coerce_field(f: dataclasses.Field, value, path: str, text: str):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if f.name == "schedule":
        try:
            return ScaleSchedule(tuple(tuple(e) for e in value))
        except (TypeError, ContractError) as e:
            raise _err(path, text, f.name, f"bad schedule: {e}") from None
    if t.startswith("SamplerConfig"):
        if not isinstance(value, dict):
            raise _err(path, text, f.name, f"{f.name} must be a JSON object")
        return _build(SamplerConfig, value, path, text, f.name)
    if t.startswith("Mapping"):
        if not isinstance(value, dict):
            raise _err(path, text, f.name, f"{f.name} must be a JSON object")
        return {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    if t.startswith("tuple"):
        if not isinstance(value, list):
            raise _err(path, text, f.name, f"{f.name} must be a JSON array")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if value is None and "None" in t:
        return None
    if not _scalar_ok(t, value):
        raise _err(path, text, f.name, f"{f.name} must be of type {t}")
    return value


def _build(dc_type, data: dict, path: str, text: str, section: str):
    names = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise _err(
            path, text, unknown[0],
            f"unknown key {unknown[0]!r} in section {section!r}",
        )
    kwargs = {k: _coerce_field(names[k], v, path, text) for k, v in data.items()}
    try:
        return dc_type(**kwargs)
    except (ConfigError, ContractError, VocabularyError) as e:
        raise _err(path, text, section, f"invalid section {section!r}: {e}") from None


def load_run_config(
    stage: str,
    config_path: str | None,
    seed: int | None,
    out: str | None,
) -> RunConfig:
    """Parse, validate, and build every section the stage allows."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    required_inputs, allowed_sections = STAGES[stage]
    if config_path is None:
        text, path = "{}", "<defaults>"
    else:
        path = str(config_path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a JSON object")

    allowed_top = set(_TOP_KEYS) | set(allowed_sections)
    unknown = sorted(set(data) - allowed_top)
    if unknown:
        raise _err(
            path, text, unknown[0],
            f"unknown key {unknown[0]!r} for stage {stage!r}",
        )

    for key in ("seed", "corpus_seed"):
        if key in data and (isinstance(data[key], bool) or not isinstance(data[key], int)):
            raise _err(path, text, key, f"{key} must be an integer")
    inputs = data.get("inputs", {})
    if not isinstance(inputs, dict) or not all(
        isinstance(v, str) for v in inputs.values()
    ):
        raise _err(path, text, "inputs", "inputs must map names to path strings")
    bad = sorted(set(inputs) - set(required_inputs))
    if bad:
        raise _err(
            path, text, bad[0],
            f"unknown input {bad[0]!r} for stage {stage!r}",
        )
    missing = sorted(set(required_inputs) - set(inputs))
    if missing:
        raise ConfigError(
            f"{path}: stage {stage!r} needs inputs {missing} under \"inputs\""
        )

    sections: dict[str, object] = {}
    for name in allowed_sections:
        body = data.get(name, {})
        if not isinstance(body, dict):
            raise _err(path, text, name, f"section {name!r} must be a JSON object")
        sections[name] = _build(_SECTION_TYPES[name], body, path, text, name)
    sections["corpus_seed"] = data.get("corpus_seed", 7)

    return RunConfig(
        stage=stage,
        seed=seed if seed is not None else data.get("seed", 0),
        out=out,
        inputs=dict(inputs),
        sections=sections,
    )
