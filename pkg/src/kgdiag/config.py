"""Run configuration: strict dataclass schema loaded from a single YAML file.

Unknown keys are rejected up front so typos fail before any work starts.
Relative paths resolve against the ``--workdir`` root (default: the config
file's directory); the fully resolved config is written next to a run's
outputs so the run can be reproduced from one artifact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import yaml

from .encoders import EncoderConfig
from .errors import ConfigError
from .kb import KnowledgeBaseProfile, SectionRule
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DatasetConfig:
    records: str = "records.jsonl"
    labels: str = "labels.json"
    train_ratio: float = 0.7
    val_fraction: float = 0.1
    split_seed: int = 0
    stopwords: str | None = None
    split_files: dict[str, str] | None = None  # externally supplied split ids


@dataclass
class KbProfileConfig:
    kb_id: str = ""
    access_mode: str = "local_file"
    endpoint: str = ""
    section_rules: list[dict[str, str]] = field(default_factory=list)

    def to_profile(self) -> KnowledgeBaseProfile:
        rules = tuple(
            SectionRule(r.get("pattern", ""), r.get("action", "keep"))
            for r in self.section_rules
        )
        return KnowledgeBaseProfile(self.kb_id, self.access_mode, self.endpoint, rules)


@dataclass
class KbConfig:
    cache_dir: str = "kb_cache"
    rate_per_sec: float = 1.0
    retries: int = 3
    profiles: list[KbProfileConfig] = field(default_factory=list)


@dataclass
class ExtractionConfig:
    backend: str = "dictionary"  # dictionary | llm_one_shot_cot
    symptom_terms: str | None = None
    treatment_terms: str | None = None
    endpoint: str | None = None
    model: str = "gpt-4"
    api_key_env: str = "KGDIAG_COMPLETION_API_KEY"
    max_tokens: int = 4096
    template: str | None = None
    audit_log: str | None = None


@dataclass
class NormalizationConfig:
    provider: str = "none"  # none | fixture | http
    fixture_dir: str | None = None
    endpoint: str | None = None
    api_key_env: str = "KGDIAG_CONCEPT_API_KEY"
    cache_dir: str | None = None


@dataclass
class GraphConfig:
    path: str = "graph.json"
    embeddings: str = "embeddings.bin"
    hierarchy_scheme: str = "none"  # none | icd9 | ems_protocol
    hierarchy_sidecar: str | None = None
    hierarchy_codes: str | None = None  # JSON list: label index -> code
    node_encoder: str = "hashing"  # hashing | transformers
    node_encoder_hidden: int = 64
    node_encoder_model: str = "bert-base-uncased"


@dataclass
class EvalConfig:
    k: int = 1
    threshold: float = 0.5


@dataclass
class RunConfig:
    output_dir: str = "out"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    kb: KbConfig = field(default_factory=KbConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    normalization: NormalizationConfig = field(default_factory=NormalizationConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_PATH_FIELDS = {
    ("output_dir",),
    ("dataset", "records"),
    ("dataset", "labels"),
    ("dataset", "stopwords"),
    ("kb", "cache_dir"),
    ("extraction", "symptom_terms"),
    ("extraction", "treatment_terms"),
    ("extraction", "template"),
    ("extraction", "audit_log"),
    ("normalization", "fixture_dir"),
    ("normalization", "cache_dir"),
    ("graph", "path"),
    ("graph", "embeddings"),
    ("graph", "hierarchy_sidecar"),
    ("graph", "hierarchy_codes"),
}


def _coerce(value: Any, annotation: Any, where: str) -> Any:
    origin = get_origin(annotation)
    if origin is None:
        if dataclasses.is_dataclass(annotation):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            return _build_dataclass(annotation, value, where)
        if annotation in (int, float, str, bool):
            if annotation is float and isinstance(value, int):
                value = float(value)
            if annotation is int and isinstance(value, bool):
                raise ConfigError(f"{where}: expected int, got bool")
            if not isinstance(value, annotation):
                raise ConfigError(
                    f"{where}: expected {annotation.__name__}, got {type(value).__name__}"
                )
            return value
        if annotation is Any:
            return value
        return value
    args = get_args(annotation)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = args[0] if args else Any
        return tuple(_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return {str(k): _coerce(v, args[1], f"{where}.{k}") for k, v in value.items()}
    if str(origin) in ("typing.Union", "types.UnionType") or origin is type(None):
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: null not allowed")
        for arg in args:
            if arg is type(None):
                continue
            return _coerce(value, arg, where)
    return value


def _build_dataclass(cls, data: dict, where: str):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(value, hints[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _resolve_paths(config: RunConfig, workdir: Path) -> None:
    for trail in _PATH_FIELDS:
        obj: Any = config
        for part in trail[:-1]:
            obj = getattr(obj, part)
        value = getattr(obj, trail[-1])
        if value is None:
            continue
        path = Path(value)
        if not path.is_absolute():
            path = workdir / path
        setattr(obj, trail[-1], str(path))
    if config.dataset.split_files:
        config.dataset.split_files = {
            k: str(v if Path(v).is_absolute() else workdir / v)
            for k, v in config.dataset.split_files.items()
        }
    for profile in config.kb.profiles:
        # Endpoints are URLs except in local_file mode, where they are paths.
        if profile.access_mode == "local_file" and not Path(profile.endpoint).is_absolute():
            profile.endpoint = str(workdir / profile.endpoint)


def load_config(path: str | Path, workdir: str | Path | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    config = _build_dataclass(RunConfig, raw, "config")
    root = Path(workdir) if workdir is not None else path.parent
    _resolve_paths(config, root.resolve())
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    if config.extraction.backend not in ("dictionary", "llm_one_shot_cot"):
        raise ConfigError(f"unknown extraction backend {config.extraction.backend!r}")
    if config.extraction.backend == "llm_one_shot_cot" and not config.extraction.endpoint:
        raise ConfigError("llm_one_shot_cot backend requires extraction.endpoint")
    if config.normalization.provider not in ("none", "fixture", "http"):
        raise ConfigError(f"unknown normalization provider {config.normalization.provider!r}")
    if config.normalization.provider == "fixture" and not config.normalization.fixture_dir:
        raise ConfigError("fixture normalization requires normalization.fixture_dir")
    if config.normalization.provider == "http" and not config.normalization.endpoint:
        raise ConfigError("http normalization requires normalization.endpoint")
    if config.graph.hierarchy_scheme not in ("none", "icd9", "ems_protocol"):
        raise ConfigError(f"unknown hierarchy scheme {config.graph.hierarchy_scheme!r}")
    if config.graph.hierarchy_scheme == "ems_protocol" and not config.graph.hierarchy_sidecar:
        raise ConfigError("ems_protocol hierarchy requires graph.hierarchy_sidecar")
    if config.graph.node_encoder not in ("hashing", "transformers"):
        raise ConfigError(f"unknown node encoder {config.graph.node_encoder!r}")
    seen = set()
    for profile in config.kb.profiles:
        if profile.kb_id in seen:
            raise ConfigError(f"duplicate kb_id {profile.kb_id!r}")
        seen.add(profile.kb_id)


def dump_config(config: RunConfig, path: str | Path) -> None:
    payload = dataclasses.asdict(config)

    def _plain(obj):
        if isinstance(obj, dict):
            return {k: _plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [_plain(v) for v in obj]
        return obj

    Path(path).write_text(
        yaml.safe_dump(_plain(payload), sort_keys=True, default_flow_style=False),
        encoding="utf-8",
    )
