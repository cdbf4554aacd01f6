"""Job submission across several clusters.

The broker probes each cluster's queue just before a decision and sends the
job to the cluster with the smallest load index

    L = (running + waiting - max_run) / relative_power

or, for data-aware submission, to the least loaded cluster holding a replica
of the input file.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction

from .catalog import CatalogStore, RemoteCatalog, lookup
from .errors import (AuthError, FileUnknown, GatewayDown, MismatchedCluster,
                     NoClusterAvailable, NotDone, RemoteError, SubmitRejected,
                     UnknownCluster, UnknownJob, UsageError)
from .protocol import GatewayClient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QueueSnapshot:
    cluster: str
    running: int
    waiting: int
    probed_at: float = 0.0

    def __post_init__(self):
        if self.running < 0 or self.waiting < 0:
            raise ValueError("queue counts must be non-negative")


@dataclass(frozen=True)
class LoadIndex:
    cluster: str
    value: Fraction


@dataclass
class JobRecord:
    job_id: str
    cluster: str
    script_name: str = ""
    state: str = "unknown"
    submitted_at: float = 0.0
    output: bytes = None


@dataclass
class JobStatus:
    job_id: str
    cluster: str
    state: str
    note: str = ""


@dataclass
class PingRow:
    cluster: str
    gateway: str
    reachable: bool
    rtt: float
    detail: str = ""


def load_index(snap, desc):
    if snap.cluster != desc.name:
        raise MismatchedCluster(f"snapshot of {snap.cluster!r} used with descriptor {desc.name!r}")
    return LoadIndex(desc.name, Fraction(snap.running + snap.waiting - desc.max_run)
                     / Fraction(desc.relative_power))


def select_least_loaded(snaps, descs):
    """Name of the reachable cluster with minimum L; ties go to the earliest in config.

    A cluster without a snapshot (or with ``None``) counts as unreachable.
    """
    by_name = {d.name: d for d in descs}
    best = None
    for snap in snaps:
        if snap is None or snap.cluster not in by_name:
            continue
        d = by_name[snap.cluster]
        key = (load_index(snap, d).value, d.order)
        if best is None or key < best[0]:
            best = (key, d.name)
    if best is None:
        raise NoClusterAvailable("no reachable cluster to choose from")
    return best[1]


def job_cluster(job_id):
    name, sep, seq = job_id.rpartition("/")
    if not sep or not name or not seq.isdigit():
        raise UnknownJob(f"malformed job id {job_id!r}, expected <gateway>/<seq>")
    return name


class Broker:
    def __init__(self, config, token, clock, logbook=None, catalogs=None, timeout=30.0,
                 note_commands=True):
        self.config = config
        self.token = token
        self.clock = clock
        self.logbook = logbook
        self.timeout = timeout
        self._catalogs = catalogs
        # the CLI logs whole invocations itself and turns these notes off
        self.note_commands = note_commands

    def _client(self, desc):
        return GatewayClient(desc.gateway, self.token, timeout=self.timeout)

    def _note(self, command, *params):
        if self.logbook is not None and self.note_commands:
            self.logbook.command(self.clock.now(), command, *params)

    def _targets(self, cluster):
        if cluster is None or cluster == "ALL":
            return list(self.config.clusters)
        return [self.config.cluster(cluster)]

    # availability and load

    def ping(self, cluster=None):
        targets = self._targets(cluster)

        def one(desc):
            t0 = time.monotonic()
            try:
                with self._client(desc) as c:
                    name = c.ping()
                return PingRow(desc.name, desc.gateway, True, time.monotonic() - t0, name)
            except (GatewayDown, RemoteError) as exc:
                return PingRow(desc.name, desc.gateway, False, time.monotonic() - t0, str(exc))

        with ThreadPoolExecutor(max_workers=len(targets)) as pool:
            rows = list(pool.map(one, targets))
        self._note("ping", cluster or "ALL")
        return rows

    def probe_load(self, cluster):
        desc = self.config.cluster(cluster)
        with self._client(desc) as c:
            running, waiting = c.qstat()
        return QueueSnapshot(desc.name, running, waiting, self.clock.now())

    def probe_all(self, descs):
        """Probe concurrently; unreachable clusters are left out of the result."""

        def one(desc):
            try:
                return self.probe_load(desc.name)
            except GatewayDown as exc:
                log.info("cluster %s unreachable: %s", desc.name, exc)
                return None

        with ThreadPoolExecutor(max_workers=max(1, len(descs))) as pool:
            return [s for s in pool.map(one, descs) if s is not None]

    def choose(self, descs=None):
        descs = list(self.config.clusters if descs is None else descs)
        return select_least_loaded(self.probe_all(descs), descs)

    # submission

    def submit(self, cluster, script, script_name=""):
        if isinstance(script, str):
            script = script.encode("utf-8")
        if not script.strip():
            raise UsageError("job script is empty")
        desc = self.config.cluster(cluster)
        try:
            with self._client(desc) as c:
                job_id = c.submit(script)
                state = c.status(job_id)
        except AuthError:
            raise
        except RemoteError as exc:
            raise SubmitRejected(f"{desc.name}: {exc}") from None
        now = self.clock.now()
        if self.logbook is not None:
            self.logbook.job(now, job_id)
        self._note("submit", desc.name, script_name or f"{len(script)}-bytes")
        return JobRecord(job_id, desc.name, script_name, state, now)

    def submit_least_loaded(self, script, script_name=""):
        return self.submit(self.choose(), script, script_name)

    def catalogs(self):
        if self._catalogs is not None:
            return self._catalogs
        out = []
        if self.config.local_store:
            out.append(CatalogStore(self.config.local_store))
        elif self.config.local_catalog:
            out.append(RemoteCatalog(self.config.endpoint(self.config.local_catalog), self.token))
        if self.config.central_catalog:
            out.append(RemoteCatalog(self.config.endpoint(self.config.central_catalog), self.token))
        return out

    def locate(self, lfn):
        """Catalog records for ``lfn``, local catalog first."""
        catalogs = self.catalogs()
        for i, cat in enumerate(catalogs):
            try:
                hits = lookup(lfn, [cat])
            except (GatewayDown, FileNotFoundError) as exc:
                if i == len(catalogs) - 1:
                    raise GatewayDown(f"catalog unreachable: {exc}") from None
                log.warning("catalog %s unavailable, trying next: %s", cat, exc)
                continue
            if hits:
                return hits
        return []

    def replica_clusters(self, lfn):
        recs = self.locate(lfn)
        if not recs:
            raise FileUnknown(f"{lfn} is not known to any catalog")
        sites = {r.site for r in recs}
        clusters = [c for c in self.config.clusters if c.site in sites or c.name in sites]
        if not clusters:
            raise FileUnknown(f"{lfn} only has replicas at unconfigured sites: {sorted(sites)}")
        return clusters

    def submit_data_aware(self, script, lfn, script_name=""):
        clusters = self.replica_clusters(lfn)
        if len(clusters) == len(self.config.clusters):
            return self.submit_least_loaded(script, script_name)
        return self.submit(self.choose(clusters), script, script_name)

    # tracking

    def resolve_job(self, job_id=None):
        if job_id is None:
            job_id = self.logbook.last_job() if self.logbook is not None else None
            if job_id is None:
                raise UnknownJob("no job submitted yet")
        try:
            desc = self.config.cluster(job_cluster(job_id))
        except UnknownCluster:
            raise UnknownJob(f"{job_id}: gateway not in configuration") from None
        return job_id, desc

    def job_status(self, job_id=None):
        job_id, desc = self.resolve_job(job_id)
        self._note("stat", job_id)
        try:
            with self._client(desc) as c:
                return JobStatus(job_id, desc.name, c.status(job_id))
        except GatewayDown as exc:
            return JobStatus(job_id, desc.name, "unknown", str(exc))

    def job_output(self, job_id=None):
        job_id, desc = self.resolve_job(job_id)
        self._note("get", job_id)
        try:
            with self._client(desc) as c:
                return c.fetch(job_id)
        except RemoteError as exc:
            if exc.code == 409:
                raise NotDone(f"{job_id} has not finished") from None
            if exc.code == 404:
                raise UnknownJob(f"{job_id}: {exc.text}") from None
            raise

    def jobs(self):
        """JobRecords reconstructed from the jobs log, oldest first."""
        if self.logbook is None:
            return []
        out = []
        for stamp, job_id in self.logbook.read_jobs():
            try:
                cluster = job_cluster(job_id)
            except UnknownJob:
                continue
            when = datetime.strptime(stamp, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
            out.append(JobRecord(job_id, cluster, state="unknown", submitted_at=when.timestamp()))
        return out

    def run_remote(self, cluster, command):
        desc = self.config.cluster(cluster)
        self._note("run", desc.name, command if isinstance(command, str) else command.decode())
        with self._client(desc) as c:
            return c.run(command)

    def list_queue(self, cluster, param=None):
        desc = self.config.cluster(cluster)
        command = "qstat" + (f" {param}" if param else "")
        self._note("jobs", desc.name, *([param] if param else []))
        with self._client(desc) as c:
            return c.run(command).decode("utf-8")
