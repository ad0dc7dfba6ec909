"""Run configuration: dataclass plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .synthstream import DEFAULT_MODALITIES, ModalitySpec

STRATEGIES = ("retcop", "seqft", "er", "rehearsal_only", "odid_only", "mof")
REPLAY_STRATEGIES = ("retcop", "er", "rehearsal_only", "mof")
DISTILL_STRATEGIES = ("retcop", "odid_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "retcop"
    stages: tuple[ModalitySpec, ...] = tuple(DEFAULT_MODALITIES.values())
    steps_per_stage: int = 2000
    batch_size: int = 24
    buffer_capacity: int = 256
    replay_fraction: float = 0.25
    n_clusters: int = 64
    lambda_weight: float = 1.0
    distill_temperature: float = 1.0
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    learn_temperature: bool = True
    hidden_dim: int = 64
    embed_dim: int = 16
    pool_size: int = 2048
    n_test: int = 1000
    n_probe_train: int = 1000
    checkpoint_every: int = 0
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        ids = [s.modality_id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise ConfigError("stage modality ids must be distinct")
        dims = {(s.image_dim, s.text_dim) for s in self.stages}
        if len(dims) != 1:
            raise ConfigError("all stages must share image_dim and text_dim")
        checks = [
            (self.steps_per_stage >= 1, "steps_per_stage must be >= 1"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.buffer_capacity >= 1, "buffer_capacity must be >= 1"),
            (0.0 <= self.replay_fraction < 1.0, "replay_fraction must lie in [0, 1)"),
            (self.n_clusters >= 1, "n_clusters must be >= 1"),
            (self.lambda_weight >= 0.0, "lambda_weight must be >= 0"),
            (self.distill_temperature > 0.0, "distill_temperature must be > 0"),
            (self.learning_rate > 0.0, "learning_rate must be > 0"),
            (self.warmup_steps >= 0, "warmup_steps must be >= 0"),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (self.hidden_dim >= 1 and self.embed_dim >= 1, "network dims must be >= 1"),
            (self.pool_size >= 1, "pool_size must be >= 1"),
            (self.n_test >= max(s.n_classes for s in self.stages), "n_test too small"),
            (self.n_probe_train >= 10 * max(s.n_classes for s in self.stages), "n_probe_train too small"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def uses_replay(self) -> bool:
        return self.strategy in REPLAY_STRATEGIES

    @property
    def uses_distill(self) -> bool:
        return self.strategy in DISTILL_STRATEGIES

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical_text(self) -> str:
        """Deterministic text form; output_dir is left out so it never affects results."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "output_dir":
                continue
            value = getattr(self, f.name)
            if f.name == "stages":
                value = ";".join(_spec_text(s) for s in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return f"{self.strategy}-{self.config_hash()[:12]}"


SPEC_FIELDS = [f.name for f in dataclasses.fields(ModalitySpec)]


def _spec_text(spec: ModalitySpec) -> str:
    return ",".join(f"{n}:{getattr(spec, n)}" for n in SPEC_FIELDS)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def coerce_field(name: str, raw: str, typ: str):
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def modality_spec_from_kv(kv: dict[str, str], source: str = "<spec>") -> ModalitySpec:
    types = {f.name: f.type for f in dataclasses.fields(ModalitySpec)}
    unknown = set(kv) - set(types)
    if unknown:
        raise ConfigError(f"{source}: unknown modality keys {sorted(unknown)}")
    try:
        return ModalitySpec(**{k: coerce_field(k, v, types[k]) for k, v in kv.items()})
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_modality_spec(path) -> ModalitySpec:
    path = Path(path)
    return modality_spec_from_kv(parse_kv(path.read_text(), str(path)), str(path))


def _parse_stage(entry: str, base: Path) -> ModalitySpec:
    entry = entry.strip()
    if entry.isdigit():
        mid = int(entry)
        if mid not in DEFAULT_MODALITIES:
            raise ConfigError(f"no built-in modality {mid}; known: {sorted(DEFAULT_MODALITIES)}")
        return DEFAULT_MODALITIES[mid]
    if ":" in entry:
        kv = dict(part.split(":", 1) for part in entry.split(","))
        return modality_spec_from_kv(kv, entry)
    path = Path(entry)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"stage spec file not found: {path}")
    return load_modality_spec(path)


def config_from_kv(kv: dict[str, str], base: Path = Path("."), source: str = "<config>") -> RunConfig:
    unknown = set(kv) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    values = {}
    for key, raw in kv.items():
        if key == "stages":
            sep = ";" if (";" in raw or ":" in raw) else ","
            values[key] = tuple(_parse_stage(e, base) for e in raw.split(sep) if e.strip())
        else:
            values[key] = coerce_field(key, raw, _FIELD_TYPES[key])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    return config_from_kv(parse_kv(path.read_text(), str(path)), path.parent, str(path))


def config_from_text(text: str) -> RunConfig:
    return config_from_kv(parse_kv(text))
