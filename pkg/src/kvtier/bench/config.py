"""Experiment configuration and the flat ``key = value`` config file format."""

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from enum import Enum

from ..cache import Policy
from ..flash import DeviceConfig

__all__ = [
    "Strategy",
    "WorkloadConfig",
    "StrategyConfig",
    "CacheSettings",
    "ModelShape",
    "ExperimentConfig",
    "ConfigError",
    "parse_config_text",
    "load_config",
    "format_config",
]


class ConfigError(ValueError):
    pass


class Strategy(Enum):
    NO_CLUSTER = "no_cluster"
    STATIC = "static"
    LOCAL = "local"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class WorkloadConfig:
    seed: int = 0
    dim: int = 64
    heads: int = 1
    layers: int = 1
    prefill_len: int = 2048
    decode_len: int = 8192
    components: int = 16
    drift_rate: float = 0.05
    query_temperature: float = 4.0
    spread: float = 0.25
    mean_radius: float = 4.0
    topic_prob: float = 0.5
    topic_switch: float = 1.0 / 64

    def validate(self, n_clusters=1):
        if self.dim < 1 or self.heads < 1 or self.layers < 1:
            raise ConfigError("dim, heads and layers must be >= 1")
        if self.decode_len < 1:
            raise ConfigError("decode_len must be >= 1")
        if self.prefill_len < n_clusters:
            raise ConfigError("prefill_len must be >= clusters")
        if self.drift_rate < 0:
            raise ConfigError("drift_rate must be >= 0")
        if self.components < 1:
            raise ConfigError("components must be >= 1")
        if not 0 <= self.topic_prob <= 1 or not 0 <= self.topic_switch <= 1:
            raise ConfigError("topic_prob and topic_switch must be probabilities")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.ADAPTIVE
    clusters: int = 32
    topk: int = 8
    topk_ratio: float = 0.0
    fetch_budget: int = 0
    oracle_m: int = 32
    alpha: float = 1.5
    tau: float = -1.0
    buffer_budget: int = 16
    local_window: int = 128
    layout: str = "dual_head"
    pairing: str = "correlation"
    warmup: int = 64
    similarity: str = "dot"
    hot_buffers: int = 64
    repack_oracle: bool = False

    @property
    def selection(self):
        """``budget`` if fetch_budget is set, else ``ratio`` if topk_ratio is set, else ``topk``."""
        if self.fetch_budget > 0:
            return "budget"
        if self.topk_ratio > 0:
            return "ratio"
        return "topk"

    @property
    def calibrate(self):
        """A negative ``tau`` means: derive the threshold from ``alpha``."""
        return self.tau < 0

    def validate(self):
        if self.fetch_budget < 0 or self.topk < 0 or not 0 <= self.topk_ratio <= 1:
            raise ConfigError("fetch_budget, topk and topk_ratio must be non-negative")
        if self.selection == "topk" and self.topk < 1:
            raise ConfigError("topk must be >= 1 when no budget or ratio is set")
        if self.clusters < 1:
            raise ConfigError("clusters must be >= 1")
        if self.oracle_m < 1:
            raise ConfigError("oracle_m must be >= 1")
        if self.buffer_budget < 0:
            raise ConfigError("buffer_budget must be >= 0")
        if self.layout not in ("dual_head", "sequence"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.pairing not in ("correlation", "none"):
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.similarity not in ("dot", "cosine"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.local_window < 1:
            raise ConfigError("local_window must be >= 1")


@dataclass(frozen=True)
class CacheSettings:
    cache_ratio: float = 0.2
    reserved_fraction: float = 0.2
    retention_horizon: int = 16
    policy: Policy = Policy.CLUSTER_ALIGNED
    virtualize: bool = False


@dataclass(frozen=True)
class ModelShape:
    layers: int
    kv_heads: int
    head_dim: int
    bytes_per_element: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"ModelShape.{f.name} must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    cache: CacheSettings = field(default_factory=CacheSettings)
    bytes_per_element: int = 2
    compute_seconds: float = 2.0e-4
    qkv_seconds: float = 5.0e-5

    def validate(self):
        self.workload.validate(self.strategy.clusters)
        self.strategy.validate()
        if self.bytes_per_element not in (2, 4, 8):
            raise ConfigError("bytes_per_element must be 2, 4 or 8")
        if not 0 <= self.cache.cache_ratio <= 1:
            raise ConfigError("cache_ratio must be in [0, 1]")
        n = self.workload.prefill_len + self.workload.decode_len
        if self.strategy.oracle_m > self.workload.prefill_len:
            raise ConfigError("oracle_m must not exceed prefill_len")
        if n < self.strategy.clusters:
            raise ConfigError("not enough entries for the cluster count")
        return self

    def replace(self, **changes):
        """Copy with flat-key overrides, e.g. ``replace(seed=3, buffer_budget=0)``."""
        text = format_config(self)
        overrides = {k: _render(v) for k, v in changes.items()}
        return parse_config_text(text, overrides)


# section, field name for every flat key
def _key_table():
    table = {}
    for section, cls in (("workload", WorkloadConfig), ("strategy", StrategyConfig),
                         ("device", DeviceConfig), ("cache", CacheSettings)):
        for f in fields(cls):
            table[f.name] = (section, f)
    for f in fields(ExperimentConfig):
        if f.name not in ("workload", "strategy", "device", "cache"):
            table[f.name] = (None, f)
    return table


_KEYS = _key_table()


def _coerce(f, raw):
    t = f.type
    try:
        if t in (int, "int"):
            try:
                return int(raw)
            except ValueError:
                x = float(raw)
                if not x.is_integer():
                    raise
                return int(x)
        if t in (float, "float"):
            return float(raw)
        if t in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t in (str, "str"):
            return raw.strip()
        if t in (Strategy, "Strategy"):
            return Strategy(raw.strip().lower())
        if t in (Policy, "Policy"):
            return Policy(raw.strip().lower())
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {f.name}")


def _render(v):
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text, overrides=None):
    """Parse flat ``key = value`` lines (``#`` starts a comment)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[kvtier]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = dict(cp["kvtier"])
    for key, raw in (overrides or {}).items():
        values[key] = raw
    unknown = sorted(k for k in values if k not in _KEYS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    sections = {"workload": {}, "strategy": {}, "device": {}, "cache": {}, None: {}}
    for key, raw in values.items():
        section, f = _KEYS[key]
        sections[section][key] = _coerce(f, raw)
    try:
        cfg = ExperimentConfig(
            workload=WorkloadConfig(**sections["workload"]),
            strategy=StrategyConfig(**sections["strategy"]),
            device=DeviceConfig(**sections["device"]),
            cache=CacheSettings(**sections["cache"]),
            **sections[None],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path, overrides=None):
    with open(path) as fh:
        return parse_config_text(fh.read(), overrides)


def format_config(cfg):
    """Render every key; ``parse_config_text(format_config(c)) == c``."""
    lines = []
    for part in (cfg.workload, cfg.strategy, cfg.device, cfg.cache):
        lines.append(f"# {type(part).__name__}")
        for f in fields(part):
            lines.append(f"{f.name} = {_render(getattr(part, f.name))}")
    lines.append("# experiment")
    for f in fields(cfg):
        if not dataclasses.is_dataclass(getattr(cfg, f.name)):
            lines.append(f"{f.name} = {_render(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
