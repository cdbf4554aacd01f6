"""Start simulated gateways for every cluster in a configuration."""

import os

from .auth import TokenStore
from .catalog import CatalogStore
from .gateway import Gateway, serve


def build_gateways(config, clock, only=None):
    """Gateway objects (not yet listening) keyed by bind address."""
    authority = TokenStore(config.token_file)
    sim_root = os.path.join(config.state_dir, "sim")
    out = {}
    for c in config.clusters:
        if only and c.name not in only:
            continue
        root = c.root or os.path.join(sim_root, c.name, "files")
        store = CatalogStore(c.catalog or os.path.join(sim_root, c.name, "catalog"))
        store.create("site", c.site)
        out[c.gateway] = Gateway(c.name, clock, slots=c.max_run, relative_power=c.relative_power,
                                 storage_root=root, catalog=store, authority=authority)
    central = config.central_catalog
    if central and central not in config.names and central not in out and (not only or "central" in only):
        store = CatalogStore(os.path.join(sim_root, "central", "catalog")).create("central")
        out[central] = Gateway("central", clock, catalog=store, authority=authority)
    return out


def serve_configuration(config, clock, only=None):
    return [serve(addr, gw) for addr, gw in build_gateways(config, clock, only).items()]
