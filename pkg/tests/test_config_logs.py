import multiprocessing
import os
import re
from fractions import Fraction

import pytest

from gridlet.auth import WEEK, AuthToken, TokenStore
from gridlet.broker import Broker
from gridlet.config import load_config
from gridlet.errors import MissingSystemConfig, ParseError, TokenFileUnwritable
from gridlet.logs import Logbook

SYSTEM = """\
# two clusters
site = s
log_root = /var/tmp/gl
cluster.s.gateway = 10.0.0.1:7001
cluster.s.power = 1
cluster.s.max_run = 8
cluster.p.gateway = 10.0.0.2:7001
cluster.p.power = 2
cluster.p.max_run = 8
"""

JOB_LINE = re.compile(r"^\S+ \S+/\d+$")


@pytest.fixture
def system(tmp_path):
    p = tmp_path / "GPARAM"
    p.write_text(SYSTEM)
    return p


def test_no_user_file_is_system_verbatim(system, tmp_path):
    cfg = load_config(system, tmp_path / "absent")
    assert cfg.names == ["s", "p"]
    assert cfg.cluster("p").relative_power == Fraction(2)
    assert cfg.raw == {k.strip(): v.strip() for k, v in
                       (l.split("=", 1) for l in SYSTEM.splitlines() if "=" in l)}


def test_override_one_field_only(system, tmp_path):
    user = tmp_path / "rc"
    user.write_text("cluster.p.max_run = 2\n")
    base = load_config(system, tmp_path / "absent")
    cfg = load_config(system, user)
    assert cfg.cluster("p").max_run == 2
    diff = {k for k in set(base.raw) | set(cfg.raw) if base.raw.get(k) != cfg.raw.get(k)}
    assert diff == {"cluster.p.max_run"}
    assert cfg.cluster("s") == base.cluster("s")
    assert cfg.site == base.site and cfg.log_root == base.log_root


def test_deterministic(system, tmp_path):
    user = tmp_path / "rc"
    user.write_text("cluster.s.power = 3/2\n")
    assert load_config(system, user) == load_config(system, user)


def test_cluster_list_replaced_wholesale(system, tmp_path):
    user = tmp_path / "rc"
    user.write_text("clusters = p\n")
    assert load_config(system, user).names == ["p"]
    user.write_text("clusters = s,unm\n")
    with pytest.raises(ParseError):
        load_config(system, user)


def test_env_paths(system, tmp_path, monkeypatch):
    user = tmp_path / "rc"
    user.write_text("site = p\n")
    monkeypatch.setenv("GRIDLET_CONFIG", str(system))
    monkeypatch.setenv("GRIDLET_RC", str(user))
    assert load_config().site == "p"


def test_missing_system(tmp_path):
    with pytest.raises(MissingSystemConfig):
        load_config(tmp_path / "nope", tmp_path / "rc")


@pytest.mark.parametrize("bad, line", [
    ("cluster.s.power = fast\n", 1),
    ("\n\njust words\n", 3),
    ("cluster.s.max_run = 0\n", None),
    ("cluster.x.power = 1\n", None),
    ("catalog.central = hub\n", 1),
])
def test_parse_errors_name_the_line(system, tmp_path, bad, line):
    user = tmp_path / "rc"
    user.write_text(bad)
    with pytest.raises(ParseError) as info:
        load_config(system, user)
    if line is not None:
        assert info.value.line == line and info.value.path == str(user)


def test_relative_paths_resolve_against_file(tmp_path):
    p = tmp_path / "GPARAM"
    p.write_text("cluster.s.gateway = h:1\nlog_root = logs\n")
    cfg = load_config(p, tmp_path / "absent")
    assert cfg.log_root == str(tmp_path / "logs")
    assert os.path.isabs(cfg.token_file)


def test_third_cluster_via_override_shows_in_ping(grid_factory):
    g = grid_factory([("s", 1, 2), ("p", 2, 2), ("unm", 1, 2)])
    system = g.tmp / "GPARAM"
    lines = g.config_text.splitlines()
    system.write_text("\n".join(l for l in lines if "cluster.unm." not in l) + "\n")
    user = g.tmp / "rc"
    user.write_text("\n".join(l for l in lines if "cluster.unm." in l) + "\n")
    two = Broker(load_config(system, g.tmp / "absent"), g.token, g.clock)
    three = Broker(load_config(system, user), g.token, g.clock)
    assert [r.cluster for r in two.ping()] == ["s", "p"]
    rows = three.ping()
    assert [r.cluster for r in rows] == ["s", "p", "unm"] and all(r.reachable for r in rows)


# tokens

def test_default_lifetime_is_a_week(tmp_path):
    tok = TokenStore(tmp_path / "t").issue(100.0)
    assert tok.lifetime_seconds == WEEK == 604800
    assert AuthToken.loads(tok.dumps()) == tok


def test_token_boundary(tmp_path):
    store = TokenStore(tmp_path / "t")
    tok = store.issue(1000.0)
    assert store.check(tok.token, 1000.0 + 604799) is None
    assert store.check(tok.token, 1000.0 + 604800) == "token expired"
    assert store.check("nope", 1000.0) == "invalid token"


def test_reissue_rejects_old(tmp_path):
    store = TokenStore(tmp_path / "t")
    old = store.issue(0.0)
    new = store.issue(0.0)
    assert store.check(old.token, 1.0) == "invalid token"
    assert store.check(new.token, 1.0) is None
    assert oct(os.stat(tmp_path / "t").st_mode & 0o777) == "0o600"


def test_token_unwritable(tmp_path):
    (tmp_path / "file").write_text("")
    with pytest.raises(TokenFileUnwritable):
        TokenStore(tmp_path / "file" / "t").issue(0.0)


# logs

def test_job_line_format(tmp_path):
    book = Logbook(tmp_path)
    book.job(1.7e9, "s/17")
    lines = open(book.jobs_path).read().splitlines()
    assert lines == ["2023-11-14T22:13:20Z s/17"]
    assert JOB_LINE.match(lines[0])


def test_transfer_file_per_day(tmp_path):
    book = Logbook(tmp_path)
    book.transfer(0.0, "gcopy", "s:/a b", "p:/a b", 3, "ok")
    path = os.path.join(book.transfer_dir, "1970-01-01.log")
    assert open(path).read() == "1970-01-01T00:00:00Z gcopy s:/a%20b p:/a%20b 3 ok\n"


def test_empty_field_rejected_file_untouched(tmp_path):
    book = Logbook(tmp_path)
    book.command(1.0, "ping", "ALL")
    before = open(book.commands_path, "rb").read()
    for fields in ([], ["ping", ""], [""]):
        with pytest.raises(ValueError):
            book.append("commands", fields, 2.0)
    assert open(book.commands_path, "rb").read() == before


def _hammer(args):
    root, i = args
    Logbook(root).command(1.7e9 + i, f"cmd{i}", "x" * 5000, str(i))


def test_concurrent_appends_keep_lines_whole(tmp_path):
    with multiprocessing.get_context("fork").Pool(16) as pool:
        pool.map(_hammer, [(str(tmp_path), i) for i in range(100)])
    lines = open(Logbook(tmp_path).commands_path).read().splitlines()
    assert len(lines) == 100
    pat = re.compile(r"^\S+ cmd(\d+) x{5000} (\d+)$")
    seen = set()
    for line in lines:
        m = pat.match(line)
        assert m and m.group(1) == m.group(2)
        seen.add(int(m.group(1)))
    assert seen == set(range(100))
