"""Application configuration loaded from a TOML file.

Example::

    log_level = "INFO"

    [gateway]
    mode = "http"
    timeout = 30
    [gateway.chat]
    endpoint = "http://localhost:8000/v1/chat/completions"
    model = "assistant-24b"

    [retrieval]
    k = 10
    kbs = ["papers"]

    [kbs]
    papers = "indexes/"          # directory holding papers.idx.npz

    [service]
    port = 8080
    clock = "real"               # or "logical" for reproducible timings
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .chunker import ChunkConfig
from .conversation import TokenBudget
from .corpus import CleaningConfig
from .gateway import GatewayConfig
from .retrieval import RetrievalConfig

CLOCKS = ("real", "logical")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and the offending key."""


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    clock: str = "real"
    max_sessions: int = 1000
    hallucination_check: bool = True

    def __post_init__(self) -> None:
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {CLOCKS}")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")
        if not 0 <= self.port < 65536:
            raise ValueError("port out of range")


@dataclass
class AppConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    budget: TokenBudget = field(default_factory=TokenBudget)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    kbs: dict[str, Path] = field(default_factory=dict)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    log_level: str = "INFO"
    source: str = "<defaults>"

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any], source: str = "<dict>", base_dir: Path | None = None, env=None) -> "AppConfig":
        known = {"gateway", "retrieval", "chunk", "budget", "cleaning", "kbs", "service", "log_level"}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) {unknown}")
        base_dir = base_dir or Path.cwd()

        def section(name: str, build):
            try:
                return build(dict(obj.get(name, {})))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: [{name}] {exc}") from exc

        kbs: dict[str, Path] = {}
        for kb_id, path in dict(obj.get("kbs", {})).items():
            if not isinstance(path, str):
                raise ConfigError(f"{source}: [kbs] {kb_id} must be a path string")
            p = Path(path)
            p = p if p.is_absolute() else base_dir / p
            if not (p / f"{kb_id}.idx.npz").exists():
                raise ConfigError(f"{source}: [kbs] {kb_id}: no index file {p / (kb_id + '.idx.npz')}")
            kbs[kb_id] = p

        gateway = section("gateway", lambda d: GatewayConfig.from_dict(d, env=env))
        if gateway.prompt_dir and not Path(gateway.prompt_dir).is_dir():
            raise ConfigError(f"{source}: [gateway] prompt_dir {gateway.prompt_dir!r} is not a directory")
        level = obj.get("log_level", "INFO")
        if not isinstance(level, str) or level.upper() not in LOG_LEVELS:
            raise ConfigError(f"{source}: log_level {level!r} is not a logging level")
        return cls(
            gateway=gateway,
            retrieval=section("retrieval", RetrievalConfig.from_dict),
            chunk=section("chunk", ChunkConfig.from_dict),
            budget=section("budget", TokenBudget.from_dict),
            cleaning=section("cleaning", CleaningConfig.from_dict),
            kbs=kbs,
            service=section("service", lambda d: _service(d)),
            log_level=level.upper(),
            source=source,
        )

    @classmethod
    def load(cls, path: str | Path, env=None) -> "AppConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                obj = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(obj, source=str(path), base_dir=path.parent, env=env)


def _service(d: dict) -> ServiceConfig:
    unknown = set(d) - set(ServiceConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown keys: {sorted(unknown)}")
    return ServiceConfig(**d)
