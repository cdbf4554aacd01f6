"""Acceptance suite: nine criteria, each reported as one PASS/FAIL line."""

import contextlib
import io
import math
import os
import random
import re
import select
import socket
import time
from dataclasses import replace
from fractions import Fraction


from gridlet.auth import WEEK
from gridlet.broker import Broker, QueueSnapshot, select_least_loaded
from gridlet.catalog import (CatalogStore, FileRecord, Subscription,
                             replicate)
from gridlet.cli import main
from gridlet.config import ClusterDescriptor
from gridlet.errors import AuthExpired
from gridlet.protocol import GatewayClient
from gridlet.transfer import ThroughputModel, Transfers

from conftest import ACCEPTANCE, T0


@contextlib.contextmanager
def criterion(n, title):
    info = {}
    try:
        yield info
    except BaseException as exc:
        line = f"FAIL {n}. {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE[n] = line
        print(line)
        raise
    detail = " ".join(f"{k}={v}" for k, v in info.items())
    line = f"PASS {n}. {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[n] = line
    print(line)


# 1

def brute_force_choice(snaps, descs):
    """Scan every candidate; compare loads by integer cross-multiplication."""
    by = {d.name: d for d in descs}
    cands = []
    for s in snaps:
        d = by[s.cluster]
        num = (s.running + s.waiting - d.max_run) * d.relative_power.denominator
        den = d.relative_power.numerator
        cands.append((num, den, d.order, d.name))
    winners = [c for c in cands
               if all(c[0] * o[1] <= o[0] * c[1] for o in cands)]
    return min(winners, key=lambda c: c[2])[3]


def test_1_load_index_correctness():
    rng = random.Random(1)
    cases = []
    for _ in range(1000):
        n = rng.randint(1, 8)
        orders = rng.sample(range(100), n)
        descs = [ClusterDescriptor(f"c{i}", f"h{i}:1", Fraction(rng.randint(1, 12), rng.randint(1, 6)),
                                   rng.randint(1, 64), orders[i]) for i in range(n)]
        # small counts make exact ties common
        snaps = [QueueSnapshot(d.name, rng.randint(0, 10), rng.randint(0, 10)) for d in descs]
        cases.append((snaps, descs))
    with criterion(1, "load-index selection matches brute-force oracle") as info:
        t0 = time.perf_counter()
        agree = sum(select_least_loaded(s, d) == brute_force_choice(s, d) for s, d in cases)
        elapsed = time.perf_counter() - t0
        info.update(agree=f"{agree}/1000", seconds=f"{elapsed:.3f}")
        assert agree == 1000
        assert elapsed < 1.0


# 2

def test_2_calibration_two_clusters(grid_factory):
    g = grid_factory([("slow", 1, 4), ("fast", 2, 4)], central=False)
    b = Broker(g.config, g.token, g.clock)
    script = b"#GRIDLET nominal=60\necho calibrate\n"
    with criterion(2, "power 1 vs 2 calibration, completed ratio fast:slow in [1.7, 2.3]") as info:
        wall = time.perf_counter()
        # one job every 2 s against a combined capacity of one job per 5 s
        for _ in range(200):
            b.submit_least_loaded(script)
            for gw in g.gateways.values():
                gw.step(1)
        mid = {n: gw.conservation()[3] for n, gw in g.gateways.items()}
        while any(sum(gw.conservation()[1:3]) for gw in g.gateways.values()):
            g.gateways["slow"].step(5)
            g.gateways["fast"].catch_up()
        done = {n: gw.conservation()[3] for n, gw in g.gateways.items()}
        wall = time.perf_counter() - wall
        ratio = done["fast"] / done["slow"]
        info.update(fast=done["fast"], slow=done["slow"], ratio=f"{ratio:.3f}",
                    ratio_during_stream=f"{mid['fast'] / mid['slow']:.3f}", wall_s=f"{wall:.2f}")
        assert done["fast"] + done["slow"] == 200
        assert 1.7 <= ratio <= 2.3
        assert wall < 10


# 3

def test_3_data_aware_placement(grid_factory):
    g = grid_factory([("s", 1, 4), ("p", 2, 6), ("unm", 1, 2)])
    rng = random.Random(3)
    lone = FileRecord("lone.root", "p", "h", "/d", 1, "data", "", 1.0, "p")
    g.central.offer(lone)
    for site in ("s", "p", "unm"):
        g.central.offer(FileRecord("everywhere.root", site, "h", "/d", 1, "data", "", 1.0, site))
    b = Broker(g.config, g.token, g.clock)
    script = b"#GRIDLET nominal=50\necho x\n"

    def shuffle_load():
        for name in g.gateways:
            for _ in range(rng.randint(0, 4)):
                b.submit(name, b"#GRIDLET nominal=%d\necho y\n" % rng.randint(1, 400))
        g.gateways["s"].step(rng.uniform(0, 120))
        for gw in g.gateways.values():
            gw.catch_up()

    with criterion(3, "data-aware placement") as info:
        single = 0
        for _ in range(100):
            shuffle_load()
            single += b.submit_data_aware(script, "lone.root").cluster == "p"
        same = 0
        for _ in range(100):
            shuffle_load()
            snaps = b.probe_all(g.config.clusters)
            expect = select_least_loaded(snaps, g.config.clusters)
            same += b.submit_data_aware(script, "everywhere.root").cluster == expect
        info.update(single_replica=f"{single}/100", all_replicas_match=f"{same}/100")
        assert single == 100 and same == 100


# 4

def merge_newest_wins(local_recs, central_recs, sub):
    """Oracle: per (lfn, site) the larger mtime wins, ties to central.

    Local records only take part when they are data or already known to
    central (anything else never leaves the site)."""
    out = dict(central_recs)
    for key, rec in local_recs.items():
        if rec.kind != "data" and key not in central_recs:
            continue
        if key not in out or rec.mtime > out[key].mtime:
            out[key] = rec
    return {k: replace(v, synced=True) for k, v in out.items() if sub.matches(v)}


def snapshot(directory):
    return {name: open(os.path.join(directory, name), "rb").read()
            for name in sorted(os.listdir(directory)) if name != "lock"}


def test_4_replication_convergence(tmp_path):
    rng = random.Random(4)
    sub = Subscription.of(kinds=["data"])
    results = []
    with criterion(4, "replication converges to newest-wins merge; third cycle writes nothing") as info:
        for trial in range(20):
            local_store = CatalogStore(tmp_path / f"local{trial}").create("site", "s")
            central_store = CatalogStore(tmp_path / f"central{trial}").create("central")
            n_keys = rng.randint(1, 55)
            now = 1000.0
            # a few rounds of edits, with sync cycles interleaved, then edits again
            for _round in range(rng.randint(1, 4)):
                with local_store.write() as local, central_store.write() as central:
                    for _ in range(rng.randint(0, 400)):
                        now += rng.choice([0.0, 0.5, 1.0, 3.0])
                        lfn = f"f{rng.randrange(n_keys)}" + rng.choice([".root", ".prdf", ".sh"])
                        kind = "script" if lfn.endswith(".sh") else "data"
                        if rng.random() < 0.5:
                            site, target = "s", local
                        else:
                            site, target = rng.choice(["s", "p", "unm"]), central
                        r = FileRecord(lfn, site, "h", "/d", rng.randrange(10**9), kind, "",
                                       now - rng.choice([0.0, 0.0, 2.0]), site,
                                       synced=target is central)
                        target.register(r) if target is local else target.offer(r)
                    if rng.random() < 0.5:
                        now += 1
                        replicate(local, central, sub, now)
            with local_store.read() as local, central_store.read() as central:
                distinct = len(set(local.records) | set(central.records))
                assert distinct <= 500
                oracle = merge_newest_wins(local.records, central.records, sub)
            for _ in range(2):
                now += 1
                with local_store.write() as local, central_store.write() as central:
                    replicate(local, central, sub, now)
            with local_store.read() as local, central_store.read() as central:
                lsub = {k: v for k, v in local.records.items() if sub.matches(v)}
                csub = {k: v for k, v in central.records.items() if sub.matches(v)}
            before = (snapshot(local_store.directory), snapshot(central_store.directory))
            now += 1
            with local_store.write() as local, central_store.write() as central:
                replicate(local, central, sub, now)
            after = (snapshot(local_store.directory), snapshot(central_store.directory))
            results.append((lsub == csub, csub == oracle, before == after, distinct))
        equal = sum(r[0] for r in results)
        oracle_ok = sum(r[1] for r in results)
        idem = sum(r[2] for r in results)
        info.update(trials=len(results), subsets_equal=equal, oracle_match=oracle_ok,
                    third_cycle_unchanged=idem, max_records=max(r[3] for r in results))
        assert equal == oracle_ok == idem == len(results)


# 5

def rate_formula(t, base, f, period, phase):
    return base * (f + 1 + (f - 1) * math.cos(2 * math.pi * (t - phase) / period)) / (2 * f)


def numeric_elapsed(total, start, base, f, period, phase, dt=1e-3):
    """March the rate curve forward in small midpoint steps until ``total`` bytes have moved."""
    moved, t = 0.0, start
    while True:
        step = rate_formula(t + dt / 2, base, f, period, phase) * dt
        if moved + step >= total:
            return t - start + dt * (total - moved) / step
        moved += step
        t += dt


def test_5_transfer_fidelity_and_timing(grid):
    rng = random.Random(5)
    sizes = [4 * 1024 * 1024] * 15 + [1024 * 1024 - 7, 1024 * 1024 + 7, 2 * 1024 * 1024]
    assert sum(sizes) == 64 * 1024 * 1024
    for i, n in enumerate(sizes):
        grid.write_file("s", f"/synthetic/part{i:02d}.dat", rng.randbytes(n))
    total = sum(sizes)
    with criterion(5, "64 MiB copy, 5 streams, byte-identical, modeled timing") as info:
        flat = Transfers(grid.config, grid.token, grid.clock, model=ThroughputModel(7e6, 1.0))
        rep = flat.execute_copy("s:/synthetic", "p:/flat", streams=5)
        identical = all((grid.root("p") / "flat" / f"part{i:02d}.dat").read_bytes() ==
                        (grid.root("s") / "synthetic" / f"part{i:02d}.dat").read_bytes()
                        for i in range(len(sizes)))
        flat_err = abs(rep.elapsed - total / 7e6) / (total / 7e6)

        # start on the falling slope of the daily curve so the swing matters
        period = 86400.0
        start = (math.floor(grid.clock.now() / period) + 1) * period + period / 4
        grid.clock.set(start)
        model = ThroughputModel(7e6, 2.0, period, 0.0)
        wavy = Transfers(grid.config, grid.token, grid.clock, model=model)
        rep2 = wavy.execute_copy("s:/synthetic", "p:/wavy", streams=5)
        expect = numeric_elapsed(total, start, 7e6, 2.0, period, 0.0)
        wavy_err = abs(rep2.elapsed - expect) / expect
        info.update(bytes=rep.bytes, constant_err=f"{flat_err:.2e}", diurnal_err=f"{wavy_err:.2e}",
                    diurnal_elapsed=f"{rep2.elapsed:.3f}s")
        assert identical and rep.bytes == rep2.bytes == total
        assert flat_err <= 0.01
        assert wavy_err <= 0.02


# 6

def test_6_auth_lifecycle(grid):
    with criterion(6, "token accepted at +604799 s, rejected at +604800 s") as info:
        tok = grid.tokens.issue(grid.clock.now())
        assert tok.lifetime_seconds == WEEK
        addr = grid.config.cluster("s").gateway
        grid.clock.set(tok.issued_at + 604799)
        with GatewayClient(addr, tok.token) as c:
            ok = c.qstat() == (0, 0)
        grid.clock.set(tok.issued_at + 604800)
        try:
            with GatewayClient(addr, tok.token) as c:
                c.qstat()
            rejected = False
        except AuthExpired:
            rejected = True
        info.update(accepted_before=ok, rejected_at_expiry=rejected)
        assert ok and rejected


# 7

def test_7_log_formats(grid):
    cfg = grid.config_file()

    def run(*args):
        out, err = io.StringIO(), io.StringIO()
        code = main(["--config", str(cfg), "--rc", str(grid.tmp / "none"),
                     "--clock", str(grid.clock.now()), *args], out=out, err=err)
        assert code == 0, (args, err.getvalue())
        return out.getvalue()

    script = grid.tmp / "job.sh"
    script.write_text("#GRIDLET nominal=20\necho session\n")
    for name in ("a.root", "b.root", "c.root"):
        grid.write_file("s", f"/run7/{name}", name.encode() * 100)
    with criterion(7, "log formats after a scripted session") as info:
        run("proxw")
        run("ping")
        run("sub", str(script))
        run("gsub-s", str(script))
        run("sub", "p", str(script))
        copied = run("copy", "s:/run7", "p:")
        grid.gateways["s"].step(60)
        assert run("get") == "session\n"
        book = grid.logbook
        jobs = open(book.jobs_path).read().splitlines()
        commands = open(book.commands_path).read().splitlines()
        trans = []
        for name in os.listdir(book.transfer_dir):
            trans += open(os.path.join(book.transfer_dir, name)).read().splitlines()
        n_copied = copied.count("copied ")
        jobs_ok = sum(bool(re.match(r"^\S+ \S+/\d+$", l)) for l in jobs)
        cmd_ok = sum(bool(re.match(r"^\S+ \S+( \S+)*$", l)) for l in commands)
        info.update(jobs=f"{jobs_ok}/{len(jobs)}", commands=f"{cmd_ok}/{len(commands)}",
                    transfer_lines=len(trans), files_copied=n_copied)
        assert len(jobs) == jobs_ok == 3
        assert cmd_ok == len(commands) >= 6
        assert n_copied == 3 and len(trans) == 3
        assert all(l.split()[-1] == "ok" for l in trans)


# 8

def test_8_link_release_round_trip(tmp_path):
    cfg = tmp_path / "GPARAM"
    store = tmp_path / "store"
    cfg.write_text(f"site = s\nlog_root = {tmp_path / 'logs'}\ncatalog.local_store = {store}\n"
                   "cluster.s.gateway = 127.0.0.1:1\n")
    data = tmp_path / "data"
    for i in range(20):
        sub = data / f"run{i % 3}"
        sub.mkdir(parents=True, exist_ok=True)
        (sub / f"dAu_{i:02d}.prdf").write_bytes(b"z" * i)
    for i in range(7):
        (data / f"pp_{i}.prdf").write_bytes(b"p")
    work = tmp_path / "work"
    work.mkdir()

    def run(*args):
        out, err = io.StringIO(), io.StringIO()
        code = main(["--config", str(cfg), "--rc", str(tmp_path / "none"), "--clock", str(T0),
                     *args], out=out, err=err)
        return code, out.getvalue()

    with criterion(8, "link 20 by substring, release all, rescan finds nothing") as info:
        assert run("spider", str(data)) == (0, "added=27 updated=0 removed=0\n")
        code, out = run("link", "--substr", "dAu_", "--dir", str(work), "--user", "analyst")
        linked = len([p for p in work.iterdir() if p.is_symlink()])
        code2, out2 = run("release", "--all", "--user", "analyst")
        left_disk = [p for p in work.rglob("*")]
        left_links = len(CatalogStore(store).load().links)
        rescan = run("spider", str(data))[1].strip()
        info.update(linked=linked, released=out2.strip(), links_on_disk=len(left_disk),
                    link_records=left_links, rescan=rescan)
        assert code == code2 == 0 and linked == 20
        assert left_disk == [] and left_links == 0
        assert rescan == "added=0 updated=0 removed=0"


# 9

class RawConnection:
    """Socket speaking the wire protocol, checking reply framing per request."""

    def __init__(self, address):
        host, port = address.rsplit(":", 1)
        self.sock = socket.create_connection((host, int(port)), timeout=10)
        self.buf = bytearray()

    def _fill(self):
        chunk = self.sock.recv(65536)
        if not chunk:
            raise EOFError("gateway closed the connection")
        self.buf += chunk

    def readline(self):
        while b"\n" not in self.buf:
            self._fill()
        i = self.buf.index(b"\n") + 1
        line, self.buf = bytes(self.buf[:i]), self.buf[i:]
        return line

    def read(self, n):
        while len(self.buf) < n:
            self._fill()
        data, self.buf = bytes(self.buf[:n]), self.buf[n:]
        return data

    def pending(self):
        if self.buf:
            return True
        ready, _, _ = select.select([self.sock], [], [], 0)
        return bool(ready)

    def ask(self, line, body=b""):
        self.sock.sendall(line + b"\n" + body)
        head = self.readline()[:-1].decode()
        kind = head.split(" ", 1)[0]
        assert kind in ("OK", "ERR"), head
        verb = line.split(b" ", 1)[0]
        if kind == "OK" and verb in (b"FETCH", b"RUN"):
            self.read(int(head[3:]))
        # the gateway writes each reply in one piece, so anything left over is a second reply
        assert not self.pending(), f"extra data after reply to {line!r}"
        return head

    def drain(self):
        """Everything the gateway sends until it closes the connection."""
        data = bytes(self.buf)
        while True:
            chunk = self.sock.recv(65536)
            if not chunk:
                return data
            data += chunk

    def close(self):
        self.sock.close()


def test_9_gateway_conservation_fuzz(grid_factory):
    g = grid_factory([("s", 1, 3)], central=False)
    gw = g.gateways["s"]
    rng = random.Random(9)
    addr = g.config.cluster("s").gateway
    conn = RawConnection(addr)
    assert conn.ask(f"AUTH {g.token}".encode()) == "OK"
    known = []
    stats = {"requests": 1, "replies": 1, "advances": 0, "max_running": 0}
    violations = []

    def check():
        submitted, waiting, running, done = gw.conservation()
        if submitted != waiting + running + done:
            violations.append(("conservation", submitted, waiting, running, done))
        if running > 3:
            violations.append(("slots", running))
        stats["max_running"] = max(stats["max_running"], running)

    with criterion(9, "10,000-event gateway fuzz: conservation, slot bound, one reply per request") as info:
        for _ in range(10_000):
            r = rng.random()
            line, body = None, b""
            if r < 0.12:
                gw.step(rng.choice([0.5, 1, 5, 20, 60]))
                stats["advances"] += 1
            elif r < 0.40:
                script = b"#GRIDLET nominal=%d\necho %d\n" % (rng.randint(1, 120), rng.randrange(1000))
                line, body = b"SUBMIT %d" % len(script), script
            elif r < 0.47:
                line, body = b"SUBMIT 3", b"  \n"
            elif r < 0.57:
                line = b"QSTAT"
            elif r < 0.69:
                jid = rng.choice(known) if known and rng.random() < 0.8 else "s/%d" % rng.randint(900, 999)
                line = b"STATUS " + jid.encode()
            elif r < 0.79:
                jid = rng.choice(known) if known else "s/1"
                line = b"FETCH " + jid.encode()
            elif r < 0.86:
                cmd = rng.choice([b"qstat -a\n", b"hostname\n", b"rm -rf /\n", b"qstat -z\n", b"echo hi\n"])
                line, body = b"RUN %d" % len(cmd), cmd
            elif r < 0.90:
                line = b"PING"
            elif r < 0.95:
                line = rng.choice([b"", b"qstat", b"SUBMIT", b"STATUS", b"FETCH a b", b"BOGUS 1",
                                   b"SUBMIT x", b"\xff\xfe", b"PING extra words", b"RUN"])
            else:
                line = b"AUTH wrong-token"
            if line is None:
                check()
                continue
            head = conn.ask(line, body)
            stats["requests"] += 1
            stats["replies"] += 1
            if line == b"AUTH wrong-token":
                assert head.startswith("ERR 401")
                assert conn.ask(f"AUTH {g.token}".encode()) == "OK"
                stats["requests"] += 1
                stats["replies"] += 1
            if head.startswith("OK job="):
                known.append(head[len("OK job="):])
            check()
        assert conn.ask(b"QUIT") == "OK bye"
        stats["requests"] += 1
        stats["replies"] += 1
        trailing = conn.drain()
        conn.close()
        info.update(violations=len(violations), jobs=len(known), **stats)
        assert violations == []
        assert trailing == b""
        assert stats["requests"] == stats["replies"]
