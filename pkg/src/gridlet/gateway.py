"""Simulated cluster gateway.

A gateway fronts one cluster: a batch queue with a fixed number of run slots
whose jobs take ``nominal / relative_power`` virtual seconds, a file store
confined to one directory, and optionally a catalog. Clients talk to it over
the line protocol described in :mod:`gridlet.protocol`.
"""

import collections
import logging
import os
import queue as queue_mod
import re
import shlex
import socket
import socketserver
import threading
from dataclasses import dataclass
from urllib.parse import unquote

from .catalog import FileRecord, MemoryHandle
from .errors import BindFailed, GatewayDown, InvalidRecord, RemoteError
from .protocol import CHUNK_SIZE, MAX_BODY, MAX_LINE, GatewayClient, dec_path

log = logging.getLogger(__name__)

DEFAULT_NOMINAL = 60.0
_NOMINAL_RE = re.compile(rb"^#GRIDLET\s+nominal=([0-9]+(?:\.[0-9]*)?)\s*$", re.M)


def nominal_seconds(script):
    m = _NOMINAL_RE.search(script)
    return float(m.group(1)) if m else DEFAULT_NOMINAL


@dataclass
class SimJob:
    job_id: str
    seq: int
    script: bytes
    nominal_seconds: float
    submitted_at: float
    started_at: float = None
    finished_at: float = None
    output: bytes = b""
    state: str = "wait"


class CommandError(Exception):
    pass


class SimQueue:
    """Slots, a FIFO wait list and a virtual-time completion rule."""

    def __init__(self, name, slots, relative_power, now=0.0):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        if relative_power <= 0:
            raise ValueError("relative_power must be > 0")
        self.name = name
        self.slots = int(slots)
        self.relative_power = relative_power
        self.now = float(now)
        self.waiting = collections.deque()
        self.running = {}
        self.done = {}
        self.submitted = 0

    def service_time(self, job):
        return job.nominal_seconds / float(self.relative_power)

    def submit(self, script, now):
        self.advance_to(now)
        self.submitted += 1
        job = SimJob(f"{self.name}/{self.submitted}", self.submitted, bytes(script),
                     nominal_seconds(script), self.now)
        self.waiting.append(job)
        self._admit(self.now)
        self.advance_to(self.now)
        return job

    def _admit(self, at):
        while self.waiting and len(self.running) < self.slots:
            job = self.waiting.popleft()
            job.state = "run"
            job.started_at = at
            job.finished_at = at + self.service_time(job)
            self.running[job.job_id] = job

    def advance_to(self, t):
        """Process every completion up to virtual time ``t``; returns completed ids."""
        completed = []
        t = max(float(t), self.now)
        while self.running:
            job = min(self.running.values(), key=lambda j: (j.finished_at, j.seq))
            if job.finished_at > t:
                break
            del self.running[job.job_id]
            self.now = job.finished_at
            job.state = "done"
            job.output = self._job_output(job)
            self.done[job.job_id] = job
            completed.append(job.job_id)
            self._admit(job.finished_at)
        self.now = t
        return completed

    def state_of(self, job_id):
        if job_id in self.done:
            return "done"
        if job_id in self.running:
            return "run"
        if any(j.job_id == job_id for j in self.waiting):
            return "wait"
        return "unknown"

    def counts(self):
        return len(self.running), len(self.waiting)

    def _job_output(self, job):
        out = []
        for line in job.script.decode("utf-8", "replace").splitlines():
            try:
                out.append(run_command(line, self))
            except CommandError as exc:
                out.append(f"{exc}\n")
        return "".join(out).encode("utf-8")

    def qstat_text(self, args=()):
        mode = "all"
        only = None
        for arg in args:
            if arg == "-a":
                mode = "all"
            elif arg == "-r":
                mode = "run"
            elif arg == "-i":
                mode = "wait"
            elif arg.startswith("-"):
                raise CommandError(f"qstat: invalid option -- '{arg.lstrip('-')}'")
            else:
                only = arg
        rows = []
        if mode in ("all", "run"):
            rows += [(j, "R") for j in sorted(self.running.values(), key=lambda j: j.seq)]
        if mode in ("all", "wait"):
            rows += [(j, "Q") for j in self.waiting]
        if only is not None:
            rows = [(j, s) for j, s in rows if j.job_id == only]
            if not rows:
                raise CommandError(f"qstat: Unknown Job Id {only}")
        lines = [f"{'Job ID':<24} S {'Queued':>12} {'Started':>12}",
                 f"{'-' * 24} - {'-' * 12} {'-' * 12}"]
        for job, s in rows:
            started = f"{job.started_at:.1f}" if job.started_at is not None else "-"
            lines.append(f"{job.job_id:<24} {s} {job.submitted_at:>12.1f} {started:>12}")
        return "\n".join(lines) + "\n"


def parse_qstat_counts(text):
    """Count running and waiting rows in :meth:`SimQueue.qstat_text` output."""
    run = wait = 0
    for line in text.splitlines()[2:]:
        parts = line.split()
        if len(parts) >= 2:
            run += parts[1] == "R"
            wait += parts[1] == "Q"
    return run, wait


def run_command(line, queue=None, site=""):
    """Execute one whitelisted command line and return its output text."""
    line = line.strip()
    if not line or line.startswith("#"):
        return ""
    try:
        argv = shlex.split(line)
    except ValueError as exc:
        raise CommandError(f"sh: {exc}") from None
    cmd, args = argv[0], argv[1:]
    if cmd == "echo":
        return " ".join(args) + "\n"
    if cmd in ("sleep", "true", ":"):
        # virtual time only; nothing waits on the wall clock
        return ""
    if cmd == "hostname":
        return (site or (queue.name if queue else "")) + "\n"
    if cmd == "qstat":
        if queue is None:
            raise CommandError("qstat: no queue on this gateway")
        return queue.qstat_text(args)
    raise CommandError(f"sh: {cmd}: command not allowed")


class Gateway:
    """Protocol front end for one simulated cluster (or a catalog-only hub)."""

    def __init__(self, name, clock, slots=None, relative_power=1, storage_root=None,
                 catalog=None, authority=None):
        self.name = name
        self.clock = clock
        self.queue = SimQueue(name, slots, relative_power, clock.now()) if slots else None
        self.storage_root = os.path.realpath(storage_root) if storage_root else None
        if self.storage_root:
            os.makedirs(self.storage_root, exist_ok=True)
        if catalog is not None and not hasattr(catalog, "write"):
            catalog = MemoryHandle(catalog)
        self.catalog = catalog
        self.authority = authority
        self.lock = threading.RLock()

    def __repr__(self):
        return f"Gateway({self.name!r})"

    # simulation driving

    def catch_up(self):
        if self.queue is None:
            return []
        with self.lock:
            return self.queue.advance_to(self.clock.now())

    def step(self, seconds):
        """Advance the clock by ``seconds`` and process completions."""
        with self.lock:
            self.clock.advance(seconds)
            return self.catch_up()

    def conservation(self):
        q = self.queue
        with self.lock:
            return q.submitted, len(q.waiting), len(q.running), len(q.done)

    # protocol

    def session(self):
        return Session(self)

    def resolve(self, wire_path):
        if self.storage_root is None:
            raise RemoteError(501, "no file store on this gateway")
        path = dec_path(wire_path)
        if not path.startswith("/"):
            raise RemoteError(400, f"path must be absolute: {path}")
        full = os.path.realpath(os.path.join(self.storage_root, path.lstrip("/")))
        if full != self.storage_root and not full.startswith(self.storage_root + os.sep):
            raise RemoteError(403, f"path escapes storage root: {path}")
        return full


class _Closing(Exception):
    pass


class Session:
    """Per-connection protocol state. ``handle`` maps one request to one reply."""

    def __init__(self, gateway):
        self.gw = gateway
        self.token = None
        self.closing = False

    def serve(self, rfile, wfile):
        while not self.closing:
            line = rfile.readline(MAX_LINE + 1)
            if not line:
                return
            if not line.endswith(b"\n"):
                wfile.write(b"ERR 400 line too long or truncated\n")
                wfile.flush()
                return
            try:
                reply = self.handle(line[:-1], rfile)
            except _Closing:
                return
            wfile.write(reply)
            wfile.flush()

    def handle(self, raw, rfile):
        try:
            return self._dispatch(raw, rfile)
        except RemoteError as exc:
            return f"ERR {exc.code} {exc.text}\n".encode()
        except _Closing:
            raise
        except Exception as exc:  # never leave a request unanswered
            log.exception("gateway %s: internal error", self.gw.name)
            return f"ERR 500 internal error: {type(exc).__name__}\n".encode()

    def _read_body(self, rfile, n):
        data = rfile.read(n)
        if len(data) != n:
            raise _Closing()
        return data

    def _length(self, text):
        if not text.isdigit():
            raise RemoteError(400, f"bad length {text!r}")
        n = int(text)
        if n > MAX_BODY:
            self.closing = True
            raise RemoteError(413, "payload too large")
        return n

    def _dispatch(self, raw, rfile):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise RemoteError(400, "request is not UTF-8") from None
        if line.endswith("\r"):
            line = line[:-1]
        verb, _, rest = line.partition(" ")
        args = rest.split(" ") if rest else []
        gw = self.gw

        if verb == "AUTH":
            if len(args) != 1 or not args[0]:
                raise RemoteError(400, "usage: AUTH <token>")
            if gw.authority is not None:
                reason = gw.authority.check(args[0], gw.clock.now())
                if reason:
                    raise RemoteError(401, reason)
            self.token = args[0]
            return b"OK\n"
        if verb == "QUIT":
            self.closing = True
            return b"OK bye\n"
        handler = getattr(self, "verb_" + verb.replace("-", "_").lower(), None) if verb.isupper() else None
        if handler is None:
            raise RemoteError(400, f"unknown verb {verb[:32]!r}")
        if self.token is None:
            self._skip_body(verb, args, rfile)
            raise RemoteError(401, "auth required")
        if gw.authority is not None:
            reason = gw.authority.check(self.token, gw.clock.now())
            if reason:
                self._skip_body(verb, args, rfile)
                raise RemoteError(401, reason)
        return handler(args, rfile, rest)

    def _skip_body(self, verb, args, rfile):
        n = None
        if verb in ("SUBMIT", "RUN") and len(args) == 1 and args[0].isdigit():
            n = int(args[0])
        elif verb == "PUT" and len(args) == 3 and args[2].isdigit():
            n = int(args[2])
        if n is not None:
            if n > MAX_BODY:
                self.closing = True
                return
            self._read_body(rfile, n)

    # queue verbs

    def _queue(self):
        if self.gw.queue is None:
            raise RemoteError(501, "not a compute gateway")
        return self.gw.queue

    def verb_ping(self, args, rfile, rest):
        return f"OK {self.gw.name}\n".encode()

    def verb_qstat(self, args, rfile, rest):
        q = self._queue()
        with self.gw.lock:
            self.gw.catch_up()
            r, w = q.counts()
        return f"OK run={r} wait={w}\n".encode()

    def verb_submit(self, args, rfile, rest):
        if len(args) != 1:
            raise RemoteError(400, "usage: SUBMIT <len>")
        n = self._length(args[0])
        script = self._read_body(rfile, n)
        q = self._queue()
        if not script.strip():
            raise RemoteError(400, "empty script")
        with self.gw.lock:
            job = q.submit(script, self.gw.clock.now())
        return f"OK job={job.job_id}\n".encode()

    def verb_status(self, args, rfile, rest):
        if len(args) != 1:
            raise RemoteError(400, "usage: STATUS <job-id>")
        q = self._queue()
        with self.gw.lock:
            self.gw.catch_up()
            state = q.state_of(args[0])
        return f"OK state={state}\n".encode()

    def verb_fetch(self, args, rfile, rest):
        if len(args) != 1:
            raise RemoteError(400, "usage: FETCH <job-id>")
        q = self._queue()
        with self.gw.lock:
            self.gw.catch_up()
            state = q.state_of(args[0])
            if state == "unknown":
                raise RemoteError(404, f"unknown job {args[0]}")
            if state != "done":
                raise RemoteError(409, "not done")
            out = q.done[args[0]].output
        return f"OK {len(out)}\n".encode() + out

    def verb_run(self, args, rfile, rest):
        if len(args) != 1:
            raise RemoteError(400, "usage: RUN <len>")
        n = self._length(args[0])
        body = self._read_body(rfile, n).decode("utf-8", "replace")
        out = []
        with self.gw.lock:
            self.gw.catch_up()
            for line in body.splitlines():
                try:
                    out.append(run_command(line, self.gw.queue, self.gw.name))
                except CommandError as exc:
                    raise RemoteError(422, str(exc)) from None
        data = "".join(out).encode("utf-8")
        return f"OK {len(data)}\n".encode() + data

    # file verbs

    def verb_list(self, args, rfile, rest):
        if len(args) != 1:
            raise RemoteError(400, "usage: LIST <path>")
        full = self.gw.resolve(args[0])
        if os.path.isfile(full):
            entries = [(os.path.basename(full), os.path.getsize(full))]
        elif os.path.isdir(full):
            entries = []
            for name in sorted(os.listdir(full)):
                p = os.path.join(full, name)
                if os.path.isfile(p) and not name.startswith(".gridlet-part"):
                    entries.append((name, os.path.getsize(p)))
        else:
            raise RemoteError(404, f"no such path {dec_path(args[0])}")
        lines = "".join(f"{n}\t{s}\n" for n, s in entries)
        return f"OK {len(entries)}\n{lines}".encode()

    def verb_get(self, args, rfile, rest):
        if len(args) != 3 or not args[1].isdigit() or not args[2].isdigit():
            raise RemoteError(400, "usage: GET <path> <offset> <count>")
        full = self.gw.resolve(args[0])
        offset, count = int(args[1]), min(int(args[2]), MAX_BODY)
        try:
            with open(full, "rb") as f:
                f.seek(offset)
                data = f.read(count)
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
            raise RemoteError(404, f"no such file {dec_path(args[0])}") from None
        return f"OK {len(data)}\n".encode() + data

    def verb_put(self, args, rfile, rest):
        if len(args) != 3 or not args[1].isdigit() or not args[2].isdigit():
            self._skip_body("PUT", args, rfile)
            raise RemoteError(400, "usage: PUT <path> <offset> <len>")
        n = self._length(args[2])
        data = self._read_body(rfile, n)
        full = self.gw.resolve(args[0])
        if os.path.isdir(full):
            raise RemoteError(409, f"{dec_path(args[0])} is a directory")
        try:
            os.makedirs(os.path.dirname(full), exist_ok=True)
            fd = os.open(full, os.O_WRONLY | os.O_CREAT, 0o644)
        except (NotADirectoryError, FileExistsError):
            raise RemoteError(409, f"cannot create {dec_path(args[0])}") from None
        try:
            os.pwrite(fd, data, int(args[1]))
        finally:
            os.close(fd)
        return b"OK\n"

    def verb_pull(self, args, rfile, rest):
        if len(args) != 4 or not args[3].isdigit() or int(args[3]) < 1:
            raise RemoteError(400, "usage: PULL <src-gateway> <src-path> <dst-path> <streams>")
        src_gw, src_path, dst_path, streams = args[0], dec_path(args[1]), args[2], int(args[3])
        dst = self.gw.resolve(dst_path)
        size = pull_file(src_gw, src_path, dst, streams, self.token)
        return f"OK {size}\n".encode()

    # catalog verbs

    def _catalog(self):
        if self.gw.catalog is None:
            raise RemoteError(501, "no catalog on this gateway")
        return self.gw.catalog

    def verb_cat_lookup(self, args, rfile, rest):
        if len(args) != 1 or not args[0]:
            raise RemoteError(400, "usage: CAT-LOOKUP <lfn>")
        with self._catalog().read() as cat:
            hits = cat.find(unquote(args[0]))
        lines = "".join(r.to_line() + "\n" for r in hits)
        return f"OK {len(hits)}\n{lines}".encode()

    def verb_cat_register(self, args, rfile, rest):
        try:
            rec = FileRecord.from_line(rest)
        except InvalidRecord as exc:
            raise RemoteError(400, str(exc)) from None
        with self._catalog().write() as cat:
            stored = cat.offer(rec) if cat.tier == "central" else cat.register(rec)
        return f"OK {stored.to_line()}\n".encode()

    def verb_cat_sync(self, args, rfile, rest):
        try:
            wm = float(args[0]) if len(args) == 1 else None
        except ValueError:
            wm = None
        if wm is None:
            raise RemoteError(400, "usage: CAT-SYNC <watermark>")
        with self._catalog().read() as cat:
            recs = sorted(cat.changed_since(wm), key=lambda r: r.key)
        data = "".join(r.to_line() + "\n" for r in recs).encode("utf-8")
        return f"OK {len(data)}\n".encode() + data


def pull_file(src_gateway, src_path, dst, streams, token, chunk_size=CHUNK_SIZE):
    """Fetch ``src_path`` from another gateway into local file ``dst``.

    Up to ``streams`` GET ranges are in flight at once, each on its own
    connection. The file appears under its final name only once every byte
    has landed and the size matches.
    """
    try:
        with GatewayClient(src_gateway, token) as c:
            entries = c.list(src_path)
    except GatewayDown as exc:
        raise RemoteError(502, f"source unreachable: {exc}") from None
    except RemoteError as exc:
        raise RemoteError(exc.code, f"source: {exc.text}") from None
    if len(entries) != 1 or entries[0][0] != os.path.basename(src_path.rstrip("/")):
        raise RemoteError(404, f"source is not a file: {src_path}")
    size = entries[0][1]

    os.makedirs(os.path.dirname(dst), exist_ok=True)
    tmp = os.path.join(os.path.dirname(dst), f".gridlet-part.{os.path.basename(dst)}.{threading.get_ident()}")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
    errors = []
    try:
        os.ftruncate(fd, size)
        offsets = queue_mod.SimpleQueue()
        for off in range(0, size, chunk_size):
            offsets.put(off)

        def worker():
            try:
                with GatewayClient(src_gateway, token) as c:
                    while not errors:
                        try:
                            off = offsets.get_nowait()
                        except queue_mod.Empty:
                            return
                        data = c.get(src_path, off, min(chunk_size, size - off))
                        if len(data) != min(chunk_size, size - off):
                            raise RemoteError(502, f"short read at offset {off}")
                        os.pwrite(fd, data, off)
            except Exception as exc:
                errors.append(exc)

        n = max(1, min(streams, (size + chunk_size - 1) // chunk_size))
        threads = [threading.Thread(target=worker, daemon=True) for _ in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        if os.fstat(fd).st_size != size:
            raise RemoteError(500, "size mismatch after transfer")
    except GatewayDown as exc:
        os.close(fd)
        os.unlink(tmp)
        raise RemoteError(502, f"source unreachable: {exc}") from None
    except BaseException:
        os.close(fd)
        os.unlink(tmp)
        raise
    os.close(fd)
    os.replace(tmp, dst)
    return size


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        self.server.track(self.connection, True)
        try:
            self.server.gateway.session().serve(self.rfile, self.wfile)
        except (ConnectionError, OSError):
            pass
        finally:
            self.server.track(self.connection, False)


class GatewayServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, gateway):
        self.gateway = gateway
        self._conns = set()
        self._conns_lock = threading.Lock()
        super().__init__(address, _Handler)
        self._thread = None

    def track(self, conn, add):
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(conn)

    @property
    def address(self):
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                        name=f"gateway-{self.gateway.name}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        """Stop accepting and drop every open session, like a downed host."""
        self.shutdown()
        self.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


def serve(bind, gateway):
    """Start ``gateway`` on ``bind`` (``host:port``; port 0 picks a free one)."""
    host, _, port = bind.rpartition(":")
    try:
        server = GatewayServer((host, int(port)), gateway)
    except OSError as exc:
        raise BindFailed(f"cannot bind {bind}: {exc}") from None
    return server.start()
