"""Deployment configuration files.

Flat ``key = value`` text, one cVM per block; a new ``name`` line starts the
next block::

    name = kv
    heap_size = 1M
    stack_count = 4
    stack_size = 64K
    program = kv_server
    args = 1000
    allow key=kv.*,rights=rw,peer=client
"""

from __future__ import annotations

import fnmatch
import os
import shlex
from dataclasses import dataclass, field

from capvm.errors import CapvmError, Err

KEYS = ("name", "heap_size", "stack_count", "stack_size", "disk_image", "program", "args", "allow")
RIGHTS = {"r", "w", "rw"}


class ConfigError(CapvmError):
    def __init__(self, detail: str, path: str | None = None, line: int | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(Err.CONFIG_INVALID, where + detail)
        self.line = line


@dataclass(frozen=True)
class AclEntry:
    key: str       # fnmatch pattern
    rights: str    # "r", "w" or "rw"
    peer: str = "*"

    def matches(self, key: bytes | str, peer: str | None = None) -> bool:
        if isinstance(key, bytes):
            key = key.decode("utf-8", "replace")
        if not fnmatch.fnmatchcase(key, self.key):
            return False
        return peer is None or self.peer == "*" or fnmatch.fnmatchcase(peer, self.peer)


@dataclass
class DeploymentConfig:
    name: str
    heap_size: int
    stack_count: int = 4
    stack_size: int = 64 * 1024
    disk_image: str | None = None
    program: str = "hello"
    args: list[str] = field(default_factory=list)
    allowed_keys: list[AclEntry] = field(default_factory=list)

    @property
    def programs(self) -> list[str]:
        return [p.strip() for p in self.program.split(",") if p.strip()]

    def validate(self) -> None:
        if self.heap_size <= 0:
            raise ConfigError(f"{self.name}: heap_size must be positive")
        if self.stack_count < 1:
            raise ConfigError(f"{self.name}: stack_count must be at least 1")
        if self.stack_size < 256 or self.stack_size % 16:
            raise ConfigError(f"{self.name}: stack_size must be a multiple of 16, >= 256")
        if not self.programs:
            raise ConfigError(f"{self.name}: no program")


def parse_size(text: str) -> int:
    t = text.strip().upper()
    mult = 1
    if t.endswith("K"):
        mult, t = 1024, t[:-1]
    elif t.endswith("M"):
        mult, t = 1024 * 1024, t[:-1]
    value = int(t, 0) * mult
    if value < 0:
        raise ValueError(text)
    return value


def parse_allow(text: str) -> AclEntry:
    fields = {}
    for part in text.replace(",", " ").split():
        k, sep, v = part.partition("=")
        if not sep:
            raise ValueError(f"bad allow field {part!r}")
        fields[k.strip()] = v.strip()
    unknown = set(fields) - {"key", "rights", "peer"}
    if unknown or "key" not in fields:
        raise ValueError(f"allow needs key=..., got {text!r}")
    rights = fields.get("rights", "r")
    if rights not in RIGHTS:
        raise ValueError(f"rights must be r, w or rw, got {rights!r}")
    return AclEntry(fields["key"], rights, fields.get("peer", "*"))


def parse_config(text: str, path: str | None = None) -> list[DeploymentConfig]:
    base_dir = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    blocks: list[tuple[int, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split(None, 1)
        if head[0] == "allow" and len(head) == 2 and not head[1].startswith("="):
            key, value = "allow", head[1]
        else:
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"expected key = value, got {line!r}", path, lineno)
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", path, lineno)
        if key == "name":
            blocks.append((lineno, {"name": value, "allowed_keys": []}))
            continue
        if not blocks:
            raise ConfigError("first key must be name", path, lineno)
        cur = blocks[-1][1]
        try:
            if key in ("heap_size", "stack_size"):
                cur[key] = parse_size(value)
            elif key == "stack_count":
                cur[key] = int(value, 0)
            elif key == "args":
                cur[key] = shlex.split(value)
            elif key == "allow":
                cur["allowed_keys"].append(parse_allow(value))
            elif key == "disk_image":
                cur[key] = value if os.path.isabs(value) else os.path.join(base_dir, value)
            else:
                cur[key] = value
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", path, lineno) from None
    if not blocks:
        raise ConfigError("no cVM defined", path)
    configs = []
    for lineno, fields in blocks:
        if "heap_size" not in fields:
            raise ConfigError(f"{fields['name']}: heap_size missing", path, lineno)
        cfg = DeploymentConfig(**fields)
        try:
            cfg.validate()
        except ConfigError as e:
            raise ConfigError(e.detail, path, lineno) from None
        configs.append(cfg)
    return configs


def load_config(path: str) -> list[DeploymentConfig]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    return parse_config(text, path)
