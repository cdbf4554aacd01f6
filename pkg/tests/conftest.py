import pytest

from gridlet.auth import TokenStore
from gridlet.catalog import CatalogInstance
from gridlet.clock import VirtualClock
from gridlet.config import build_config, parse_lines
from gridlet.gateway import Gateway, serve
from gridlet.logs import Logbook

T0 = 1_700_000_000.0


def make_config(text):
    return build_config(parse_lines(text))


class Grid:
    """A handful of simulated gateways on localhost sharing one virtual clock."""

    def __init__(self, tmp_path, clusters, central=True, start=T0):
        self.tmp = tmp_path
        self.clock = VirtualClock(start)
        self.tokens = TokenStore(tmp_path / "token")
        self.token = self.tokens.issue(self.clock.now()).token
        self.gateways = {}
        self.servers = {}
        self.catalogs = {}
        lines = [f"log_root = {tmp_path / 'logs'}", f"token_file = {tmp_path / 'token'}",
                 f"state_dir = {tmp_path / 'state'}", f"site = {clusters[0][0]}"]
        for order, (name, power, slots) in enumerate(clusters):
            cat = CatalogInstance("site", name)
            gw = Gateway(name, self.clock, slots=slots, relative_power=power,
                         storage_root=tmp_path / "sites" / name, catalog=cat,
                         authority=self.tokens)
            srv = serve("127.0.0.1:0", gw)
            self.gateways[name], self.servers[name], self.catalogs[name] = gw, srv, cat
            lines += [f"cluster.{name}.gateway = {srv.address}",
                      f"cluster.{name}.power = {power}",
                      f"cluster.{name}.max_run = {slots}",
                      f"cluster.{name}.order = {order}"]
        if central:
            self.central = CatalogInstance("central")
            gw = Gateway("central", self.clock, catalog=self.central, authority=self.tokens)
            srv = serve("127.0.0.1:0", gw)
            self.servers["central"] = srv
            lines.append(f"catalog.central = {srv.address}")
            lines.append(f"catalog.local = {clusters[0][0]}")
        self.config_text = "\n".join(lines) + "\n"
        self.config = make_config(self.config_text)
        self.logbook = Logbook(tmp_path / "logs")

    def root(self, name):
        return self.tmp / "sites" / name

    def write_file(self, site, path, data):
        full = self.root(site) / path.lstrip("/")
        full.parent.mkdir(parents=True, exist_ok=True)
        full.write_bytes(data)
        return full

    def config_file(self):
        p = self.tmp / "GPARAM"
        p.write_text(self.config_text)
        return p

    def stop(self, name):
        self.servers[name].stop()

    def close(self):
        for srv in self.servers.values():
            try:
                srv.stop()
            except Exception:
                pass


@pytest.fixture
def grid_factory(tmp_path):
    made = []

    def factory(clusters=(("s", 1, 4), ("p", 2, 4)), central=True, sub="g"):
        d = tmp_path / f"{sub}{len(made)}"
        d.mkdir()
        g = Grid(d, list(clusters), central)
        made.append(g)
        return g

    yield factory
    for g in made:
        g.close()


@pytest.fixture
def grid(grid_factory):
    return grid_factory()


@pytest.fixture
def rng():
    import random
    return random.Random(20031)


# acceptance verdicts, one line per criterion, echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
