"""Line-oriented ``key = value`` configuration files.

Broker example::

    listen = 127.0.0.1:5658
    source.0.dir = /var/lib/lcap/mdt0
    source.0.mdt_id = 0
    hwm = 4096
    batch = 256
    eq_limit = 1024
    auto_ack_no_groups = false
    pipeline = compensation, reorder
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from lcap.preprocess import DEFAULT_MAX_SPAN, UnknownModule, load_pipeline
from lcap.wire import DEFAULT_PORT


class ConfigError(ValueError):
    pass


def parse_lines(text: str, origin: str = "<config>") -> list[tuple[int, str, str]]:
    """Split ``key = value`` lines; ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        out.append((lineno, key.strip(), value.strip()))
    return out


def parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_addr(addr: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        return addr or "127.0.0.1", default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad address {addr!r}") from None


@dataclass
class SourceConfig:
    dir: Path
    mdt_id: int


@dataclass
class BrokerConfig:
    listen: tuple[str, int] = ("127.0.0.1", DEFAULT_PORT)
    sources: list[SourceConfig] = field(default_factory=list)
    hwm: int = 4096
    batch: int = 256
    eq_limit: int = 1024
    auto_ack_no_groups: bool = False
    pipeline: list[str] = field(default_factory=list)
    max_span: int = DEFAULT_MAX_SPAN
    poll_interval: float = 0.02
    ack_interval: float = 0.05
    shutdown_grace: float = 2.0

    @classmethod
    def load(cls, path) -> BrokerConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> BrokerConfig:
        cfg = cls()
        sources: dict[str, dict[str, str]] = {}
        ints = {"hwm", "batch", "eq_limit", "max_span"}
        floats = {"poll_interval", "ack_interval", "shutdown_grace"}
        for lineno, key, value in parse_lines(text, origin):
            where = f"{origin}:{lineno}"
            try:
                if m := re.fullmatch(r"source\.([^.]+)\.(dir|mdt_id)", key):
                    sources.setdefault(m[1], {})[m[2]] = value
                elif key == "listen":
                    cfg.listen = parse_addr(value)
                elif key in ints:
                    n = int(value)
                    if n < 1:
                        raise ConfigError(f"{key} must be positive")
                    setattr(cfg, key, n)
                elif key in floats:
                    setattr(cfg, key, float(value))
                elif key == "auto_ack_no_groups":
                    cfg.auto_ack_no_groups = parse_bool(value)
                elif key == "pipeline":
                    cfg.pipeline = load_pipeline(value.split(","))
                else:
                    raise ConfigError(f"unknown key {key!r}")
            except (ConfigError, UnknownModule, ValueError) as exc:
                raise ConfigError(f"{where}: {exc}") from None
        seen = set()
        for name, entry in sources.items():
            if set(entry) != {"dir", "mdt_id"}:
                raise ConfigError(f"{origin}: source.{name} needs both dir and mdt_id")
            try:
                mdt_id = int(entry["mdt_id"])
            except ValueError:
                raise ConfigError(f"{origin}: source.{name}.mdt_id is not an integer") from None
            if mdt_id in seen:
                raise ConfigError(f"{origin}: mdt_id {mdt_id} configured twice")
            seen.add(mdt_id)
            cfg.sources.append(SourceConfig(Path(entry["dir"]), mdt_id))
        if not cfg.sources:
            raise ConfigError(f"{origin}: no source configured")
        return cfg
