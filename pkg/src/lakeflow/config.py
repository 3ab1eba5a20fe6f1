"""INI configuration shared by the command line tools.

Example::

    [catalog]
    url = http://127.0.0.1:8642
    port = 8642

    [proxy]
    env = HTTPS_PROXY

    [rse]
    name = LAKE-A
    base_path = /srv/lake
    protocols = davs:1:3, root:2:1

    [policy]
    upload = weighted
    download = fallback
    seed = 42

    [checksum]
    schema = legacy

    [replay]
    scale = 0.1

Command line flags always win over file values.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from lakeflow.catalog.models import RSE, InvalidRequest, ProtocolEntry
from lakeflow.checksums import ChecksumSchema
from lakeflow.transfer import Mode

CONFIG_ENV = "LAKEFLOW_CONFIG"
DEFAULT_JOURNAL = "lakeflow-catalog.jsonl"


class ConfigError(ValueError):
    pass


def parse_protocols(text: str) -> tuple:
    """``"davs:1:3, root:2:1"`` -> ProtocolEntry tuple (scheme:priority[:weight])."""
    entries = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        bits = part.split(":")
        if len(bits) not in (2, 3):
            raise ConfigError(f"protocol entry must be scheme:priority[:weight], got {part!r}")
        try:
            weight = Fraction(bits[2]) if len(bits) == 3 else Fraction(1)
            entries.append(ProtocolEntry(bits[0], int(bits[1]), weight))
        except (ValueError, ZeroDivisionError, InvalidRequest) as exc:
            raise ConfigError(f"bad protocol entry {part!r}: {exc}") from None
    return tuple(entries)


@dataclass
class Config:
    catalog_url: Optional[str] = None
    catalog_journal: str = DEFAULT_JOURNAL
    catalog_host: str = "127.0.0.1"
    catalog_port: int = 8642
    proxy_env: str = "HTTPS_PROXY"
    rse_name: Optional[str] = None
    rse_base_path: Optional[str] = None
    rse_protocols: tuple = field(default_factory=tuple)
    upload_policy: Mode = Mode.WEIGHTED_RANDOM
    download_policy: Mode = Mode.PRIORITY_WITH_FALLBACK
    policy_seed: Optional[int] = None
    checksum_schema: ChecksumSchema = ChecksumSchema.LEGACY
    replay_scale: float = 0.1

    @property
    def catalog_target(self) -> str:
        return self.catalog_url or self.catalog_journal

    def rse(self) -> Optional[RSE]:
        if not self.rse_name:
            return None
        if not self.rse_base_path:
            raise ConfigError("[rse] needs base_path when name is set")
        return RSE(self.rse_name, self.rse_base_path, self.rse_protocols)


def load_config(path=None) -> Config:
    """Read ``path`` (or $LAKEFLOW_CONFIG); a missing default yields plain defaults."""
    explicit = path is not None
    path = path or os.environ.get(CONFIG_ENV)
    cfg = Config()
    if not path:
        return cfg
    path = Path(path)
    if not path.exists():
        if explicit:
            raise ConfigError(f"config file {path} not found")
        return cfg
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
        get = parser.get
        cfg.catalog_url = get("catalog", "url", fallback=None) or None
        cfg.catalog_journal = get("catalog", "journal", fallback=cfg.catalog_journal)
        cfg.catalog_host = get("catalog", "host", fallback=cfg.catalog_host)
        cfg.catalog_port = parser.getint("catalog", "port", fallback=cfg.catalog_port)
        cfg.proxy_env = get("proxy", "env", fallback=cfg.proxy_env)
        cfg.rse_name = get("rse", "name", fallback=None)
        cfg.rse_base_path = get("rse", "base_path", fallback=None)
        cfg.rse_protocols = parse_protocols(get("rse", "protocols", fallback=""))
        cfg.upload_policy = Mode.parse(get("policy", "upload", fallback=cfg.upload_policy.value))
        cfg.download_policy = Mode.parse(get("policy", "download", fallback=cfg.download_policy.value))
        seed = get("policy", "seed", fallback=None)
        cfg.policy_seed = int(seed) if seed not in (None, "") else None
        cfg.checksum_schema = ChecksumSchema.parse(get("checksum", "schema", fallback="legacy"))
        cfg.replay_scale = parser.getfloat("replay", "scale", fallback=cfg.replay_scale)
    except ConfigError:
        raise
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg
