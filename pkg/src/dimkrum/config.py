"""Experiment configuration and its flat ``section.key = value`` text format.

Grammar, one entry per line::

    # comment
    section.key = value

Values are JSON literals (``10``, ``1e-3``, ``true``, ``[0, 3]``, ``"iid"``) or
bare words, which are read as strings.  Unknown keys and type errors are
reported with their line number.  ``.json`` files holding the nested form
produced by :meth:`ExperimentConfig.to_dict` are accepted as well.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dimkrum.attacks import AdaptiveSpec, AttackSpec
from dimkrum.core import ContractError

AGGREGATORS = ("fedavg", "median", "rfa", "crfl", "foolsgold", "residual", "krum", "multikrum", "bulyan", "dimkrum")
PARTITIONS = ("iid", "dirichlet")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 200
    num_classes: int = 2
    sentence_length: int = 20
    embed_dim: int = 16
    pooling: str = "mean"
    signal_tokens_per_class: int = 10
    num_triggers: int = 5
    train_size: int = 4000
    test_size: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 10
    rounds: int = 15
    local_iters: int = 500
    lr: float = 0.5
    batch_size: int = 32
    optimizer: str = "sgd"
    adam_eps: float = 1e-8
    partition: str = "iid"
    alpha_dirichlet: float = 0.9
    num_malicious: int = 1
    # None -> the first num_malicious clients
    malicious_indices: tuple[int, ...] | None = None


@dataclass(frozen=True)
class AggregatorConfig:
    name: str = "dimkrum"
    rho: float = 1e-3
    alpha: float = 0.9
    lam: float = 5.0
    crfl_noise_std: float = 0.01
    crfl_bound_slope: float = 0.05
    crfl_bound_intercept: float = 2.0
    gm_tol: float = 1e-9
    gm_max_iter: int = 1000


@dataclass(frozen=True)
class RunConfig:
    repeats: int = 1
    seed: int = 0
    out_dir: str = "runs/default"
    dump_updates: bool = False
    threads: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    adaptive: AdaptiveSpec = field(default_factory=AdaptiveSpec)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        validate(self)

    def malicious(self) -> tuple[int, ...]:
        if self.fed.malicious_indices is not None:
            return tuple(self.fed.malicious_indices)
        return tuple(range(self.fed.num_malicious))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(self)}

    def to_text(self) -> str:
        lines = [f"# schema_version = {SCHEMA_VERSION}"]
        for section, obj in _sections(self):
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{_key_name(f.name)} = {json.dumps(_jsonable(getattr(obj, f.name)))}")
        return "\n".join(lines) + "\n"

    def with_value(self, dotted_key: str, value) -> "ExperimentConfig":
        """Copy with one ``section.key`` replaced; ``value`` is coerced to the field type."""
        return self.with_values({dotted_key: value})

    def with_values(self, changes: dict) -> "ExperimentConfig":
        """Copy with several ``section.key`` entries replaced at once, validated together."""
        parts = {s: dataclasses.asdict(o) for s, o in _sections(self)}
        for dotted_key, value in changes.items():
            section, key = _split_key(dotted_key, None)
            parts[section][key] = _coerce(value, _field_types(section)[key], dotted_key, None)
        return from_dict(parts)


_SECTION_TYPES = {
    "task": TaskConfig,
    "fed": FedConfig,
    "aggregator": AggregatorConfig,
    "attack": AttackSpec,
    "adaptive": AdaptiveSpec,
    "run": RunConfig,
}
_KEY_ALIASES = {("aggregator", "lambda"): "lam"}


def _key_name(field_name: str) -> str:
    return "lambda" if field_name == "lam" else field_name


def _sections(cfg: ExperimentConfig):
    return [(name, getattr(cfg, name)) for name in _SECTION_TYPES]


def _field_types(section: str) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(_SECTION_TYPES[section])}


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _where(lineno):
    return f"line {lineno}: " if lineno is not None else ""


def _split_key(dotted: str, lineno) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"{_where(lineno)}key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in _SECTION_TYPES:
        raise ConfigError(f"{_where(lineno)}unknown section {section!r} in key {dotted!r}")
    key = _KEY_ALIASES.get((section, key), key)
    if key not in _field_types(section):
        raise ConfigError(f"{_where(lineno)}unknown key {dotted!r}")
    return section, key


def _coerce(value: Any, ftype: str, key: str, lineno):
    bad = ConfigError(f"{_where(lineno)}{key}: cannot use {value!r} as {ftype}")
    optional = "None" in ftype
    if value is None:
        if optional:
            return None
        raise bad
    try:
        if ftype.startswith("tuple"):
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise bad
            return tuple(int(v) for v in value)
        if ftype.startswith("bool"):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise bad
        if ftype.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise bad
            return int(value)
        if ftype.startswith("float"):
            if isinstance(value, bool):
                raise bad
            return float(value)
        if ftype.startswith("str"):
            if not isinstance(value, str):
                raise bad
            return value
    except (TypeError, ValueError) as exc:
        raise bad from exc
    raise bad


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def from_dict(data: dict, lines: dict | None = None) -> ExperimentConfig:
    """Build a config from the nested dict form; ``lines`` maps dotted keys to line numbers."""
    lines = lines or {}
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        raw = data.get(section, {}) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        types = _field_types(section)
        vals = {}
        for key, value in raw.items():
            dotted = f"{section}.{key}"
            _, fname = _split_key(dotted, lines.get(dotted))
            vals[fname] = _coerce(value, types[fname], dotted, lines.get(dotted))
        try:
            kwargs[section] = cls(**vals)
        except ContractError as exc:
            first = min((lines[k] for k in lines if k.startswith(section + ".")), default=None)
            raise ConfigError(f"{_where(first)}{section}: {exc}") from exc
    unknown = set(data) - set(_SECTION_TYPES) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    return ExperimentConfig(**kwargs)


def parse_text(text: str) -> ExperimentConfig:
    nested: dict[str, dict] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        section, fname = _split_key(key, lineno)
        dotted = f"{section}.{fname}"
        if dotted in lines:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {lines[dotted]})")
        lines[dotted] = lineno
        nested.setdefault(section, {})[fname] = _parse_value(value)
    return from_dict(nested, lines)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            return from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    return parse_text(text)


def validate(cfg: ExperimentConfig) -> None:
    t, f, a = cfg.task, cfg.fed, cfg.aggregator
    if a.name not in AGGREGATORS:
        raise ConfigError(f"aggregator.name: unknown aggregator {a.name!r} (choose from {', '.join(AGGREGATORS)})")
    if f.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"fed.optimizer: unknown optimizer {f.optimizer!r}")
    if f.adam_eps <= 0:
        raise ConfigError("fed.adam_eps must be positive")
    if f.partition not in PARTITIONS:
        raise ConfigError(f"fed.partition: unknown partition {f.partition!r}")
    if f.n_clients < 2:
        raise ConfigError("fed.n_clients must be at least 2")
    if f.rounds < 1 or f.local_iters < 0 or f.batch_size < 1 or f.lr < 0:
        raise ConfigError("fed.rounds >= 1, fed.local_iters >= 0, fed.batch_size >= 1, fed.lr >= 0 required")
    if f.alpha_dirichlet <= 0:
        raise ConfigError("fed.alpha_dirichlet must be positive")
    mal = cfg.malicious()
    if f.malicious_indices is not None and len(mal) != f.num_malicious:
        raise ConfigError("fed.malicious_indices must list exactly fed.num_malicious clients")
    if not 2 * len(mal) < f.n_clients:
        raise ConfigError("fed.num_malicious must be below n_clients / 2")
    if len(set(mal)) != len(mal) or any(not 0 <= i < f.n_clients for i in mal):
        raise ConfigError("fed.malicious_indices must be distinct client indices")
    if not 0 <= cfg.attack.target_label < t.num_classes:
        raise ConfigError("attack.target_label must be a class index")
    if not 0 < a.rho <= 1 or not 0 <= a.alpha < 1 or a.lam < 0:
        raise ConfigError("aggregator.rho in (0,1], aggregator.alpha in [0,1), aggregator.lambda >= 0 required")
    if cfg.run.repeats < 1 or cfg.run.threads < 1:
        raise ConfigError("run.repeats and run.threads must be at least 1")
    if t.num_triggers < 1 or (cfg.attack.kind == "badsent" and t.num_triggers < 4):
        raise ConfigError("task.num_triggers too small for the configured attack")
