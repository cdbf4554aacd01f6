"""``gridlet`` command line.

Exit codes: 0 success, 1 usage, 2 not found / no match / not locally
available, 3 gateway or network trouble, 4 authentication.
"""

import argparse
import getpass
import logging
import os
import sys
import time

from . import __version__
from .auth import WEEK, TokenStore
from .broker import Broker, load_index
from .catalog import (CatalogStore, RemoteCatalog, Subscription, link_files, release_files,
                      replicate, show_linked, spider_scan)
from .clock import RealtimeClock, VirtualClock
from .config import load_config
from .errors import (EXIT_NOT_FOUND, EXIT_OK, EXIT_USAGE, AuthError,
                     GridletError, PartialFailure, UsageError)
from .logs import Logbook
from .transfer import Transfers

log = logging.getLogger("gridlet")

# verbs that take a cluster as their first argument get <verb>-<cluster> aliases
CLUSTER_VERBS = ("ping", "run", "sub", "jobs", "load")

# the original script names, mapped onto verbs
LEGACY = {
    "gproxw": ["proxw"],
    "gping": ["ping"],
    "gsub": ["sub"],
    "gsub-data": ["sub-data"],
    "gget": ["get"],
    "gstat": ["stat"],
    "gcopy": ["copy"],
    "ma_LinkLocalFile": ["link"],
    "ma_LinkFileList": ["link", "--list"],
    "ma_LinkFileSubstr": ["link", "--substr"],
    "ma_ShowLinkedFiles": ["linked"],
    "ma_ReleaseFile": ["release"],
    "ma_ReleaseHereFiles": ["release", "--here"],
    "ma_ReleaseAllFiles": ["release", "--all"],
}
LEGACY_CLUSTER_PREFIX = {"gping-": "ping", "grun-": "run", "gsub-": "sub",
                         "gjobs-": "jobs", "gchk-": "load"}


def build_parser():
    p = argparse.ArgumentParser(prog="gridlet", description="Multi-cluster data and job toolkit.")
    p.add_argument("--version", action="version", version=f"gridlet {__version__}")
    p.add_argument("--config", help="system configuration file (default $GRIDLET_CONFIG)")
    p.add_argument("--rc", help="per-user override file (default $GRIDLET_RC or ~/.gridletrc)")
    p.add_argument("--clock", type=float, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", metavar="command")

    s = sub.add_parser("proxw", help="issue an access token (valid one week)")
    s.add_argument("--lifetime", type=float, default=WEEK)

    s = sub.add_parser("ping", help="test availability of all or one cluster")
    s.add_argument("cluster", nargs="?")

    s = sub.add_parser("load", help="probe queues and show the load index")
    s.add_argument("cluster", nargs="?")

    s = sub.add_parser("run", help="run one command on a cluster")
    s.add_argument("cluster")
    s.add_argument("command", nargs=argparse.REMAINDER)

    s = sub.add_parser("sub", help="submit a job script (to CLUSTER, or the least loaded)")
    s.add_argument("args", nargs="+", metavar="[CLUSTER] SCRIPT")

    s = sub.add_parser("sub-data", help="submit next to a file's replica")
    s.add_argument("script")
    s.add_argument("lfn")

    s = sub.add_parser("jobs", help="queue listing of a cluster")
    s.add_argument("cluster")
    s.add_argument("param", nargs=argparse.REMAINDER)

    s = sub.add_parser("get", help="output of a finished job (default: last submitted)")
    s.add_argument("job_id", nargs="?")

    s = sub.add_parser("stat", help="state of a job (default: last submitted)")
    s.add_argument("job_id", nargs="?")

    s = sub.add_parser("copy", help="copy files between sites")
    s.add_argument("source", metavar="FROMSITE:FROMLOCATION")
    s.add_argument("dest", metavar="TOSITE:[TOLOCATION]")
    s.add_argument("pattern", nargs="?", default="", help="wild-card pattern, quote it")
    s.add_argument("--streams", type=int)

    s = sub.add_parser("link", help="soft-link locally available files")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("lfn", nargs="?")
    g.add_argument("--list", dest="list_file", metavar="FILE")
    g.add_argument("--substr", metavar="SUBSTRING")
    s.add_argument("--dir", default=".")
    s.add_argument("--user")

    s = sub.add_parser("linked", help="files linked by the current user")
    s.add_argument("--user")

    s = sub.add_parser("release", help="release linked files")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("lfn", nargs="?")
    g.add_argument("--here", action="store_true")
    g.add_argument("--all", action="store_true")
    s.add_argument("--user")

    s = sub.add_parser("spider", help="scan directories into the local site catalog")
    s.add_argument("roots", nargs="+")
    s.add_argument("--site")

    sub.add_parser("sync", help="one replication cycle with the central catalog")

    s = sub.add_parser("lookup", help="where is a file")
    s.add_argument("lfn")

    s = sub.add_parser("task", help="transfer tasks")
    tsub = s.add_subparsers(dest="task_verb", metavar="action")
    t = tsub.add_parser("define")
    t.add_argument("source", metavar="FROMSITE:FROMLOCATION")
    t.add_argument("dest", metavar="TOSITE:[TOLOCATION]")
    t.add_argument("--pattern", default="")
    t.add_argument("--collection", default="")
    t.add_argument("--streams", type=int)
    t = tsub.add_parser("activate")
    t.add_argument("task_id")
    tsub.add_parser("run")
    tsub.add_parser("list")

    s = sub.add_parser("serve", help="run simulated gateways for the configured clusters")
    s.add_argument("--only", action="append", help="serve just these clusters (repeatable)")
    s.add_argument("--speedup", type=float, default=1.0)
    return p


def _verb_index(argv):
    takes_value = {"--config", "--rc", "--clock"}
    i = 0
    while i < len(argv):
        a = argv[i]
        if a in takes_value:
            i += 2
            continue
        if a.startswith("-"):
            i += 1
            continue
        return i
    return None


def expand_aliases(argv, cluster_names):
    """Rewrite ``gsub-p x`` / ``sub-p x`` / ``ma_ReleaseAllFiles`` forms into verbs."""
    i = _verb_index(argv)
    if i is None:
        return argv
    verb = argv[i]
    if verb in LEGACY:
        return argv[:i] + LEGACY[verb] + argv[i + 1:]
    for prefix, base in LEGACY_CLUSTER_PREFIX.items():
        if verb.startswith(prefix) and verb[len(prefix):] in cluster_names:
            return argv[:i] + [base, verb[len(prefix):]] + argv[i + 1:]
    base, sep, name = verb.partition("-")
    if sep and base in CLUSTER_VERBS and name in cluster_names:
        return argv[:i] + [base, name] + argv[i + 1:]
    return argv


class App:
    def __init__(self, config, clock, out, err):
        self.config = config
        self.clock = clock
        self.out = out
        self.err = err
        self.logbook = Logbook(config.log_root)
        self.tokens = TokenStore(config.token_file)

    def say(self, text=""):
        self.out.write(text + "\n")

    def write_bytes(self, data):
        self.out.flush()
        buf = getattr(self.out, "buffer", None)
        if buf is not None:
            buf.write(data)
            buf.flush()
        else:
            self.out.write(data.decode("utf-8", "replace"))

    def token(self):
        cur = self.tokens.current()
        if cur is None:
            raise AuthError(401, "no token; run 'gridlet proxw' first")
        return cur.token

    def broker(self):
        return Broker(self.config, self.token(), self.clock, self.logbook, note_commands=False)

    def transfers(self):
        return Transfers(self.config, self.token(), self.clock, self.logbook)

    def store(self):
        if not self.config.local_store:
            raise UsageError("catalog.local_store is not configured")
        return CatalogStore(self.config.local_store).create("site", self.config.site or self.config.clusters[0].site)

    def subscription(self):
        c = self.config
        return Subscription.of(c.subscribe_kinds, c.subscribe_collections, c.subscribe_sites)

    # verbs

    def do_proxw(self, a):
        tok = self.tokens.issue(self.clock.now(), a.lifetime)
        self.say(f"token issued, valid until {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(tok.expires_at))}")

    def do_ping(self, a):
        rows = self.broker().ping(a.cluster)
        self.say(f"clusters={len(self.config.clusters)} site={self.config.site or '-'}")
        for r in rows:
            d = self.config.cluster(r.cluster)
            state = "up" if r.reachable else "down"
            self.say(f"{r.cluster}\t{r.gateway}\t{state}\t{r.rtt * 1000:.1f}ms\t"
                     f"power={d.relative_power}\tmax_run={d.max_run}")

    def do_load(self, a):
        b = self.broker()
        descs = [self.config.cluster(a.cluster)] if a.cluster else self.config.clusters
        snaps = {s.cluster: s for s in b.probe_all(descs)}
        for d in descs:
            s = snaps.get(d.name)
            if s is None:
                self.say(f"{d.name}\tdown")
            else:
                self.say(f"{d.name}\trun={s.running}\twait={s.waiting}\tL={load_index(s, d).value}")

    def do_run(self, a):
        if not a.command:
            raise UsageError("run: missing command")
        self.write_bytes(self.broker().run_remote(a.cluster, " ".join(a.command)))

    def _read_script(self, path):
        try:
            with open(path, "rb") as f:
                return f.read()
        except OSError as exc:
            raise UsageError(f"cannot read job script {path}: {exc}") from None

    def _report_job(self, rec):
        self.say(f"job={rec.job_id} cluster={rec.cluster} state={rec.state}")

    def do_sub(self, a):
        if len(a.args) == 2:
            cluster, path = a.args
            rec = self.broker().submit(cluster, self._read_script(path), os.path.basename(path))
        elif len(a.args) == 1:
            path = a.args[0]
            rec = self.broker().submit_least_loaded(self._read_script(path), os.path.basename(path))
        else:
            raise UsageError("usage: sub [CLUSTER] SCRIPT")
        self._report_job(rec)

    def do_sub_data(self, a):
        lfn = os.path.basename(a.lfn.rstrip("/"))
        rec = self.broker().submit_data_aware(self._read_script(a.script), lfn,
                                              os.path.basename(a.script))
        self._report_job(rec)

    def do_jobs(self, a):
        self.out.write(self.broker().list_queue(a.cluster, " ".join(a.param) or None))

    def do_get(self, a):
        self.write_bytes(self.broker().job_output(a.job_id))

    def do_stat(self, a):
        st = self.broker().job_status(a.job_id)
        self.say(f"{st.job_id} {st.state}" + (f" ({st.note})" if st.note else ""))

    def do_copy(self, a):
        try:
            rep = self.transfers().execute_copy(a.source, a.dest, a.pattern, a.streams)
        except PartialFailure as exc:
            rep = exc.report
            for name, why in rep.failed:
                self.err.write(f"failed {name}: {why}\n")
            self._copy_summary(rep)
            raise
        self._copy_summary(rep)

    def _copy_summary(self, rep):
        for name in rep.files:
            self.say(f"copied {name}")
        self.say(f"files={len(rep.files)} bytes={rep.bytes} elapsed={rep.elapsed:.3f}s")

    def _user(self, a):
        return a.user or os.environ.get("USER") or getpass.getuser()

    def do_link(self, a):
        kw = {}
        if a.list_file:
            with open(a.list_file) as f:
                kw["lfns"] = [l.strip() for l in f if l.strip()]
        elif a.substr is not None:
            kw["substring"] = a.substr
        else:
            kw["lfn"] = a.lfn
        with self.store().write() as cat:
            rep = link_files(cat, a.dir, self._user(a), self.clock.now(), **kw)
        for l in rep.linked:
            self.say(f"linked {l.lfn} -> {l.link_path}")
        for name in rep.missing:
            self.err.write(f"not locally available: {name}\n")
        return EXIT_NOT_FOUND if rep.missing and not rep.linked else EXIT_OK

    def do_linked(self, a):
        with self.store().read() as cat:
            for l in show_linked(cat, self._user(a)):
                self.say(f"{l.lfn}\t{l.link_path}")

    def do_release(self, a):
        if a.all:
            kw = {"all": True}
        elif a.here:
            kw = {"here": os.getcwd()}
        else:
            kw = {"lfn": a.lfn}
        with self.store().write() as cat:
            n = release_files(cat, self._user(a), **kw)
        self.say(f"released {n}")

    def do_spider(self, a):
        site = a.site or self.config.site or self.config.clusters[0].site
        with self.store().write() as cat:
            rep = spider_scan(cat, site, a.roots, self.clock.now())
        self.say(f"added={rep.added} updated={rep.updated} removed={rep.removed}")
        for e in rep.errors:
            self.err.write(e + "\n")
        return EXIT_NOT_FOUND if rep.errors else EXIT_OK

    def do_sync(self, a):
        if not self.config.central_catalog:
            raise UsageError("catalog.central is not configured")
        central = RemoteCatalog(self.config.endpoint(self.config.central_catalog), self.token())
        with self.store().write() as cat:
            rep = replicate(cat, central, self.subscription(), self.clock.now())
        self.say(f"pulled={rep.pulled} pushed={rep.pushed} adopted={rep.adopted}")

    def do_lookup(self, a):
        hits = self.broker().locate(a.lfn)
        if not hits:
            self.err.write(f"{a.lfn}: not in any catalog\n")
            return EXIT_NOT_FOUND
        for r in hits:
            self.say(f"{r.site}\t{r.host}\t{r.path}\t{r.size_bytes}")

    def do_task(self, a):
        tr = self.transfers() if a.task_verb == "run" else Transfers(self.config, None, self.clock, self.logbook)
        if a.task_verb == "define":
            from .transfer import split_endpoint
            fs, fl = split_endpoint(a.source)
            ts, tl = split_endpoint(a.dest)
            t = tr.define_task(fs, ts, fl, tl, a.collection, a.pattern, a.streams)
            self.say(f"{t.id} {t.state}")
        elif a.task_verb == "activate":
            t = tr.activate_task(a.task_id)
            self.say(f"{t.id} {t.state}")
        elif a.task_verb == "run":
            results = tr.run_activated_tasks()
            for tid, outcome in results:
                self.say(f"{tid} {outcome}")
            return 3 if any(o != "done" for _, o in results) else EXIT_OK
        elif a.task_verb == "list":
            for t in tr.tasks.all():
                self.say(f"{t.id}\t{t.state}\t{t.from_site}:{t.from_location}\t"
                         f"{t.to_site}:{t.to_location}\t{t.pattern or '*'}\t{t.bytes_moved}")
        else:
            raise UsageError("usage: task define|activate|run|list")

    def do_serve(self, a):
        from .sim import serve_configuration
        servers = serve_configuration(self.config, RealtimeClock(a.speedup), only=a.only)
        for srv in servers:
            self.say(f"serving {srv.gateway.name} on {srv.address}")
        self.out.flush()
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            for srv in servers:
                srv.stop()


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    opts = argparse.ArgumentParser(add_help=False)
    opts.add_argument("--config")
    opts.add_argument("--rc")
    opts.add_argument("--clock", type=float)
    opts.add_argument("-v", "--verbose", action="store_true")
    known, _ = opts.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if known.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(known.config, known.rc)
    except GridletError as exc:
        if any(x in argv for x in ("-h", "--help", "--version")):
            try:
                parser.parse_args(argv)
            except SystemExit as done:
                return EXIT_USAGE if done.code else EXIT_OK
        err.write(f"gridlet: {exc}\n")
        return exc.exit_code

    argv = expand_aliases(argv, set(config.names))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if not args.verb:
        parser.print_usage(err)
        return EXIT_USAGE

    clock = VirtualClock(args.clock) if args.clock is not None else RealtimeClock()
    app = App(config, clock, out, err)
    i = _verb_index(argv)
    try:
        app.logbook.command(clock.now(), *[x for x in argv[i:] if x])
    except GridletError as exc:
        err.write(f"gridlet: {exc}\n")
        return exc.exit_code
    try:
        code = getattr(app, "do_" + args.verb.replace("-", "_"))(args)
    except GridletError as exc:
        out.flush()
        err.write(f"gridlet {args.verb}: {exc}\n")
        return exc.exit_code
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
