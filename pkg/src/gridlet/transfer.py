"""Wide-area data movement between cluster gateways.

Copies are third-party: the orchestrating host only sends control lines and
each destination gateway pulls the bytes from the source itself. Transfer
tasks can be described ahead of time, activated, and then run in one batch
(the nightly job).
"""

import contextlib
import fcntl
import json
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field

from scipy.optimize import brentq

from .catalog import FileRecord, guess_kind
from .config import parse_address
from .errors import (BadState, GatewayDown, GridletError, NoMatch, PartialFailure,
                     RemoteError, UnknownCluster, UnknownSite, UnknownTask, UsageError)
from .protocol import GatewayClient

DEFAULT_STREAMS = 5
TASK_STATES = ("described", "activated", "running", "done", "failed")


@dataclass(frozen=True)
class ThroughputModel:
    """Aggregate link ceiling with a smooth daily swing.

    The rate peaks at ``base_rate`` at ``phase`` and bottoms out at
    ``base_rate / diurnal_factor`` half a period later.
    """

    base_rate: float = 7e6
    diurnal_factor: float = 1.0
    period: float = 86400.0
    phase: float = 0.0

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be > 0")
        if self.diurnal_factor < 1:
            raise ValueError("diurnal_factor must be >= 1")
        if self.period <= 0:
            raise ValueError("period must be > 0")


def effective_rate(model, t):
    f = model.diurnal_factor
    c = math.cos(2 * math.pi * (t - model.phase) / model.period)
    return model.base_rate * (f + 1 + (f - 1) * c) / (2 * f)


def bytes_between(model, t0, t1):
    """Closed-form integral of :func:`effective_rate` over ``[t0, t1]``."""
    return _bytes_over(model, t0, t1 - t0)


def _bytes_over(model, t0, span):
    f, p = model.diurnal_factor, model.period
    w = 2 * math.pi / p
    mid = t0 + span / 2 - model.phase
    # sin(b) - sin(a) as a product, so short intervals keep their precision
    wave = 2 * math.cos(w * mid) * math.sin(w * span / 2) / w
    return model.base_rate / (2 * f) * ((f + 1) * span + (f - 1) * wave)


def transfer_time(model, start, nbytes):
    """Seconds needed to move ``nbytes`` starting at time ``start``."""
    if nbytes <= 0:
        return 0.0
    lo = nbytes / model.base_rate
    if model.diurnal_factor == 1:
        return lo
    def short(e):
        return _bytes_over(model, start, e) - nbytes

    if short(lo) >= 0:
        return lo
    # rounding can leave the exact upper bound a hair short
    hi = lo * model.diurnal_factor
    while short(hi) < 0:
        hi *= 1 + 1e-9
        hi += 1e-12
    return brentq(short, lo, hi, xtol=1e-12, rtol=1e-14)


# glob: only * and ? are special
def glob_to_regex(pattern):
    out = []
    for ch in pattern:
        if ch == "*":
            out.append(".*")
        elif ch == "?":
            out.append(".")
        else:
            out.append(re.escape(ch))
    return re.compile("".join(out) + r"\Z", re.S)


def glob_match(pattern, name):
    return not pattern or glob_to_regex(pattern).match(name) is not None


def split_endpoint(text):
    """``site:/path`` -> (site, path); the path may be empty (``site:``)."""
    site, sep, location = text.partition(":")
    if not sep or not site:
        raise UsageError(f"expected SITE:LOCATION, got {text!r}")
    if location and not location.startswith("/"):
        raise UsageError(f"location must be an absolute path: {location!r}")
    return site, location


@dataclass
class CopyReport:
    files: list = field(default_factory=list)
    bytes: int = 0
    elapsed: float = 0.0
    failed: list = field(default_factory=list)


@dataclass
class TransferTask:
    id: str
    from_site: str
    to_site: str
    from_location: str
    to_location: str
    collection: str = ""
    pattern: str = ""
    streams: int = DEFAULT_STREAMS
    state: str = "described"
    created: float = 0.0
    activated_at: float = None
    finished_at: float = None
    bytes_moved: int = 0
    note: str = ""


class TaskStore:
    """Transfer tasks kept in a JSON file (or only in memory when path is None)."""

    def __init__(self, path=None):
        self.path = path
        self._mem = {"next_id": 1, "tasks": []}

    def _load(self):
        if self.path is None:
            return self._mem
        try:
            with open(self.path) as f:
                return json.load(f)
        except FileNotFoundError:
            return {"next_id": 1, "tasks": []}

    def _save(self, data):
        if self.path is None:
            self._mem = data
            return
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            f.write(json.dumps(data, sort_keys=True))
        os.replace(tmp, self.path)

    @contextlib.contextmanager
    def edit(self):
        if self.path is None:
            yield self._mem
            return
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        with open(self.path + ".lock", "a") as lf:
            fcntl.flock(lf, fcntl.LOCK_EX)
            data = self._load()
            yield data
            self._save(data)

    def all(self):
        return [TransferTask(**t) for t in self._load()["tasks"]]

    def get(self, task_id):
        for t in self.all():
            if t.id == task_id:
                return t
        raise UnknownTask(f"no transfer task {task_id!r}")

    def add(self, task_fields):
        with self.edit() as data:
            task = TransferTask(id=f"t{data['next_id']}", **task_fields)
            data["next_id"] += 1
            data["tasks"].append(asdict(task))
        return task

    def put(self, task):
        with self.edit() as data:
            for i, t in enumerate(data["tasks"]):
                if t["id"] == task.id:
                    data["tasks"][i] = asdict(task)
                    return task
        raise UnknownTask(f"no transfer task {task.id!r}")


class Transfers:
    """Copy engine bound to one configuration, token and clock."""

    def __init__(self, config, token, clock, logbook=None, model=None, tasks=None):
        self.config = config
        self.token = token
        self.clock = clock
        self.logbook = logbook
        t = config.transfer
        self.model = model or ThroughputModel(t.base_rate, t.diurnal_factor, t.period, t.phase)
        self.default_streams = t.streams
        self.tasks = tasks or TaskStore(os.path.join(config.state_dir, "transfer-tasks.json")
                                        if config.state_dir else None)

    def _site(self, name):
        try:
            return self.config.cluster_for_site(name)
        except UnknownCluster:
            raise UnknownSite(f"unknown site {name!r}") from None

    def _client(self, cluster):
        return GatewayClient(cluster.gateway, self.token)

    # immediate copy

    def execute_copy(self, src, dst, pattern="", streams=None, label="gcopy",
                     collection="", on_file=None):
        """Copy the files of one source directory to a destination directory.

        ``src`` and ``dst`` are ``site:/location``; an empty destination
        location mirrors the source path. Each matched file is pulled by the
        destination gateway and registered in its site catalog once landed.
        """
        src_site, src_loc = split_endpoint(src)
        dst_site, dst_loc = split_endpoint(dst)
        if not src_loc:
            raise UsageError("source location is required")
        dst_loc = dst_loc or src_loc
        streams = self.default_streams if streams is None else int(streams)
        if streams < 1:
            raise UsageError("streams must be >= 1")
        s, d = self._site(src_site), self._site(dst_site)

        with self._client(s) as sc:
            try:
                entries = sc.list(src_loc)
            except RemoteError as exc:
                if exc.code == 404:
                    raise NoMatch(f"{src}: {exc.text}") from None
                raise
            wanted = None
            if collection:
                wanted = set()
                for line in sc.cat_sync(-1.0):
                    rec = FileRecord.from_line(line)
                    if (rec.site == s.site and rec.location.rstrip("/") == src_loc.rstrip("/")
                            and rec.collection == collection):
                        wanted.add(rec.lfn)
        matched = [(n, size) for n, size in entries
                   if glob_match(pattern, n) and (wanted is None or n in wanted)]
        if not matched:
            raise NoMatch(f"no files in {src} match {pattern or '*'!r}")

        report = CopyReport()
        dhost = parse_address(d.gateway)[0]
        with self._client(d) as dc:
            for name, size in matched:
                src_path = os.path.join(src_loc, name)
                dst_path = os.path.join(dst_loc, name)
                t0 = self.clock.now()
                wall = time.monotonic()
                try:
                    moved = dc.pull(s.gateway, src_path, dst_path, streams)
                except RemoteError as exc:
                    report.failed.append((name, str(exc)))
                    self._log(label, s, src_path, d, dst_path, 0, "failed")
                    continue
                except GatewayDown as exc:
                    # the destination itself went away; nothing else can land
                    pending = [n for n, _ in matched if n not in report.files]
                    report.failed += [(n, str(exc)) for n in pending
                                      if n not in dict(report.failed)]
                    self._log(label, s, src_path, d, dst_path, 0, "failed")
                    break
                if self.clock.virtual:
                    dt = transfer_time(self.model, t0, moved)
                    self.clock.advance(dt)
                else:
                    dt = time.monotonic() - wall
                report.elapsed += dt
                rec = FileRecord(lfn=name, site=d.site, host=dhost, location=dst_loc,
                                 size_bytes=moved, kind=guess_kind(name), collection=collection,
                                 mtime=self.clock.now(), origin=d.site)
                try:
                    dc.cat_register(rec.to_line())
                except RemoteError as exc:
                    if exc.code != 501:
                        raise
                report.files.append(name)
                report.bytes += moved
                self._log(label, s, src_path, d, dst_path, moved, "ok")
                if on_file is not None:
                    on_file(name, moved)
        if report.failed:
            raise PartialFailure(report)
        return report

    def _log(self, label, s, src_path, d, dst_path, nbytes, status):
        if self.logbook is not None:
            self.logbook.transfer(self.clock.now(), label, f"{s.site}:{src_path}",
                                  f"{d.site}:{dst_path}", nbytes, status)

    # tasks

    def define_task(self, from_site, to_site, from_location, to_location="", collection="",
                    pattern="", streams=None):
        self._site(from_site)
        self._site(to_site)
        if not from_location.startswith("/"):
            raise UsageError(f"location must be absolute: {from_location!r}")
        to_location = to_location or from_location
        if not to_location.startswith("/"):
            raise UsageError(f"location must be absolute: {to_location!r}")
        streams = self.default_streams if streams is None else int(streams)
        if streams < 1:
            raise UsageError("streams must be >= 1")
        return self.tasks.add(dict(
            from_site=from_site, to_site=to_site, from_location=from_location,
            to_location=to_location, collection=collection, pattern=pattern,
            streams=streams, created=self.clock.now()))

    def activate_task(self, task_id):
        task = self.tasks.get(task_id)
        if task.state not in ("described", "failed"):
            raise BadState(f"task {task_id} is {task.state}; only described or failed tasks can be activated")
        task.state = "activated"
        task.activated_at = self.clock.now()
        task.bytes_moved = 0
        task.finished_at = None
        task.note = ""
        return self.tasks.put(task)

    def run_activated_tasks(self):
        """Run every activated task in id order; returns ``[(id, outcome), ...]``."""
        def order(t):
            return int(t.id[1:]) if t.id[1:].isdigit() else t.id
        outcomes = []
        for task in sorted((t for t in self.tasks.all() if t.state == "activated"), key=order):
            task.state = "running"
            self.tasks.put(task)

            def progress(name, nbytes, task=task):
                task.bytes_moved += nbytes
                self.tasks.put(task)

            try:
                self.execute_copy(f"{task.from_site}:{task.from_location}",
                                  f"{task.to_site}:{task.to_location}",
                                  task.pattern, task.streams, label=task.id,
                                  collection=task.collection, on_file=progress)
                task.state = "done"
                task.note = ""
            except GridletError as exc:
                task.state = "failed"
                task.note = str(exc)
            task.finished_at = self.clock.now()
            self.tasks.put(task)
            outcomes.append((task.id, task.state if task.state == "done" else f"failed: {task.note}"))
        return outcomes
