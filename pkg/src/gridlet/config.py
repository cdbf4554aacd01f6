"""Cluster configuration: a system-wide file plus a per-user override.

Both files use ``key = value`` lines. Cluster fields live under dotted keys::

    site = s
    log_root = ~/.gridlet
    catalog.central = 127.0.0.1:7100
    cluster.s.gateway = 127.0.0.1:7001
    cluster.s.power = 1
    cluster.s.max_run = 8
    cluster.p.gateway = 127.0.0.1:7002
    cluster.p.power = 2
    cluster.p.max_run = 8

The user file overrides matching keys one by one. A ``clusters = a,b`` key
replaces the active cluster list wholesale, which is how a cluster is added,
removed or swapped for a single account.
"""

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import MissingSystemConfig, ParseError, UnknownCluster

ENV_CONFIG = "GRIDLET_CONFIG"
ENV_RC = "GRIDLET_RC"
DEFAULT_SYSTEM_PATH = "/usr/local/gridlet/GPARAM"
DEFAULT_USER_PATH = "~/.gridletrc"

CLUSTER_FIELDS = ("gateway", "power", "max_run", "order", "site", "root", "catalog")
PATH_KEYS = ("log_root", "token_file", "state_dir", "catalog.local_store")


@dataclass(frozen=True)
class ClusterDescriptor:
    name: str
    gateway: str
    relative_power: Fraction
    max_run: int
    order: int
    site: str = ""
    # only used when this process hosts the simulated gateway
    root: str = ""
    catalog: str = ""

    def __post_init__(self):
        if not self.name or "/" in self.name or " " in self.name:
            raise ValueError(f"bad cluster name {self.name!r}")
        if self.relative_power <= 0:
            raise ValueError(f"cluster {self.name}: relative_power must be > 0")
        if self.max_run < 1:
            raise ValueError(f"cluster {self.name}: max_run must be >= 1")
        if not self.site:
            object.__setattr__(self, "site", self.name)

    @property
    def address(self):
        return parse_address(self.gateway)


@dataclass(frozen=True)
class ThroughputDefaults:
    streams: int = 5
    base_rate: float = 7e6
    diurnal_factor: float = 2.0
    period: float = 86400.0
    phase: float = 0.0


@dataclass
class Configuration:
    clusters: list
    site: str = ""
    central_catalog: str = ""
    local_catalog: str = ""
    local_store: str = ""
    subscribe_kinds: tuple = ("data",)
    subscribe_collections: tuple = ()
    subscribe_sites: tuple = ()
    spider_interval: float = 86400.0
    transfer: ThroughputDefaults = field(default_factory=ThroughputDefaults)
    log_root: str = ""
    token_file: str = ""
    state_dir: str = ""
    raw: dict = field(default_factory=dict)

    def cluster(self, name):
        for c in self.clusters:
            if c.name == name:
                return c
        raise UnknownCluster(f"no cluster named {name!r} in configuration")

    def cluster_for_site(self, site):
        """Resolve a site or cluster name to its descriptor."""
        for c in self.clusters:
            if c.name == site:
                return c
        for c in self.clusters:
            if c.site == site:
                return c
        raise UnknownCluster(f"no cluster or site named {site!r} in configuration")

    @property
    def names(self):
        return [c.name for c in self.clusters]

    def endpoint(self, value):
        """Catalog endpoints may name a cluster instead of a host:port."""
        if not value:
            return ""
        for c in self.clusters:
            if c.name == value:
                return c.gateway
        return value


def parse_address(text):
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"bad gateway address {text!r}, expected host:port")
    return host, int(port)


def parse_lines(text, path="<string>"):
    """Parse ``key = value`` text into an ordered dict. Blank lines and ``#``
    comments are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ParseError(path, lineno, "expected key = value")
        if not key or any(ch.isspace() for ch in key):
            raise ParseError(path, lineno, f"bad key {key!r}")
        if key.startswith("cluster."):
            parts = key.split(".")
            if len(parts) != 3 or not parts[1]:
                raise ParseError(path, lineno, f"expected cluster.<name>.<field>, got {key!r}")
            if parts[2] not in CLUSTER_FIELDS:
                raise ParseError(path, lineno, f"unknown cluster field {parts[2]!r}")
        out[key] = (value.strip(), path, lineno)
    return out


def _split_list(value):
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _resolve_path(value, base):
    p = Path(os.path.expanduser(value))
    if not p.is_absolute():
        p = Path(base) / p
    return str(p)


def build_config(merged):
    """Turn merged ``{key: (value, path, line)}`` entries into a Configuration."""

    def get(key, default=""):
        return merged[key][0] if key in merged else default

    def convert(key, fn, default):
        if key not in merged:
            return default
        value, path, line = merged[key]
        try:
            return fn(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ParseError(path, line, f"{key}: {exc}") from None

    defined = []
    for key in merged:
        if key.startswith("cluster."):
            name = key.split(".")[1]
            if name not in defined:
                defined.append(name)
    if "clusters" in merged:
        active = list(_split_list(get("clusters")))
        for name in active:
            if name not in defined:
                value, path, line = merged["clusters"]
                raise ParseError(path, line, f"cluster {name!r} listed but not described")
    else:
        active = defined

    clusters = []
    for index, name in enumerate(active):
        k = f"cluster.{name}."
        if k + "gateway" not in merged:
            raise ParseError("<merged>", 0, f"cluster {name!r} has no gateway")
        try:
            clusters.append(ClusterDescriptor(
                name=name,
                gateway=get(k + "gateway"),
                relative_power=convert(k + "power", Fraction, Fraction(1)),
                max_run=convert(k + "max_run", int, 1),
                order=convert(k + "order", int, index),
                site=get(k + "site"),
                root=get(k + "root"),
                catalog=get(k + "catalog"),
            ))
        except ValueError as exc:
            value, path, line = merged[k + "gateway"]
            raise ParseError(path, line, str(exc)) from None
        convert(k + "gateway", parse_address, None)
    if not clusters:
        raise ParseError("<merged>", 0, "configuration describes no clusters")
    orders = [c.order for c in clusters]
    if len(set(orders)) != len(orders):
        raise ParseError("<merged>", 0, f"duplicate cluster order values {orders}")
    clusters.sort(key=lambda c: c.order)

    transfer = ThroughputDefaults(
        streams=convert("transfer.streams", int, 5),
        base_rate=convert("transfer.base_rate", float, 7e6),
        diurnal_factor=convert("transfer.diurnal_factor", float, 2.0),
        period=convert("transfer.period", float, 86400.0),
        phase=convert("transfer.phase", float, 0.0),
    )
    if transfer.streams < 1:
        raise ParseError("<merged>", 0, "transfer.streams must be >= 1")

    for key in ("catalog.central", "catalog.local"):
        if key in merged and merged[key][0] not in active:
            convert(key, parse_address, None)

    paths = {}
    for key in PATH_KEYS:
        if key in merged:
            value, path, _ = merged[key]
            base = os.path.dirname(os.path.abspath(path)) if path != "<string>" else os.getcwd()
            paths[key] = _resolve_path(value, base)
    log_root = paths.get("log_root") or _resolve_path("~/.gridlet", "/")

    return Configuration(
        clusters=clusters,
        site=get("site"),
        central_catalog=get("catalog.central"),
        local_catalog=get("catalog.local"),
        local_store=paths.get("catalog.local_store", ""),
        subscribe_kinds=_split_list(get("catalog.subscribe.kinds", "data")),
        subscribe_collections=_split_list(get("catalog.subscribe.collections")),
        subscribe_sites=_split_list(get("catalog.subscribe.sites")),
        spider_interval=convert("catalog.spider_interval", float, 86400.0),
        transfer=transfer,
        log_root=log_root,
        token_file=paths.get("token_file") or os.path.join(log_root, "token"),
        state_dir=paths.get("state_dir") or log_root,
        raw={k: v[0] for k, v in merged.items()},
    )


def load_config(system_path=None, user_path=None):
    """Load the system configuration and apply the user's override file.

    Missing ``system_path`` falls back to ``$GRIDLET_CONFIG`` and then the
    built-in default location; the same goes for ``user_path`` with
    ``$GRIDLET_RC``. A missing user file is not an error.
    """
    system_path = system_path or os.environ.get(ENV_CONFIG) or DEFAULT_SYSTEM_PATH
    user_path = user_path or os.environ.get(ENV_RC) or os.path.expanduser(DEFAULT_USER_PATH)
    system_path, user_path = os.fspath(system_path), os.fspath(user_path)
    try:
        with open(system_path, encoding="utf-8") as f:
            merged = parse_lines(f.read(), system_path)
    except FileNotFoundError:
        raise MissingSystemConfig(f"system configuration not found: {system_path}") from None
    try:
        with open(user_path, encoding="utf-8") as f:
            merged.update(parse_lines(f.read(), user_path))
    except FileNotFoundError:
        pass
    return build_config(merged)
