"""User log files kept under ``<log-root>/CLUSTERS``.

* ``commands``: one line per performed operation, ``<time> <command> <params...>``
* ``jobs``: one line per submitted job, ``<time> <gateway-name>/<seq>``
* ``DataTransLogs/YYYY-MM-DD.log``: one line per transferred file

Each line is written with a single ``write`` on an ``O_APPEND`` descriptor so
concurrent processes never interleave partial lines.
"""

import os
from datetime import datetime, timezone
from urllib.parse import quote

from .errors import LogUnwritable

KINDS = ("commands", "jobs", "transfer")
# characters left readable in logged parameters; everything else is %-escaped
_SAFE = "/:*?=.,-_@+~"


def iso_utc(t):
    return datetime.fromtimestamp(t, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def escape_field(text):
    return quote(str(text), safe=_SAFE)


class Logbook:
    def __init__(self, root):
        self.root = os.path.join(str(root), "CLUSTERS")

    @property
    def commands_path(self):
        return os.path.join(self.root, "commands")

    @property
    def jobs_path(self):
        return os.path.join(self.root, "jobs")

    @property
    def transfer_dir(self):
        return os.path.join(self.root, "DataTransLogs")

    def path_for(self, which, when):
        if which == "commands":
            return self.commands_path
        if which == "jobs":
            return self.jobs_path
        if which == "transfer":
            day = datetime.fromtimestamp(when, timezone.utc).strftime("%Y-%m-%d")
            return os.path.join(self.transfer_dir, day + ".log")
        raise ValueError(f"unknown log {which!r}; expected one of {KINDS}")

    def append(self, which, fields, when):
        fields = [str(f) for f in fields]
        if not fields or any(not f for f in fields):
            raise ValueError(f"refusing to log empty field(s): {fields!r}")
        path = self.path_for(which, when)
        line = " ".join([iso_utc(when)] + [escape_field(f) for f in fields]) + "\n"
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line.encode("utf-8"))
            finally:
                os.close(fd)
        except OSError as exc:
            raise LogUnwritable(f"cannot append to {path}: {exc}") from None
        return line

    def command(self, when, command, *params):
        return self.append("commands", [command, *params], when)

    def job(self, when, job_id):
        return self.append("jobs", [job_id], when)

    def transfer(self, when, label, src, dst, nbytes, status):
        return self.append("transfer", [label, src, dst, nbytes, status], when)

    def read_jobs(self):
        """Replay the jobs log as ``[(timestamp, job_id), ...]`` in file order."""
        try:
            with open(self.jobs_path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        except FileNotFoundError:
            return []
        out = []
        for line in lines:
            parts = line.split()
            if len(parts) == 2:
                out.append((parts[0], parts[1]))
        return out

    def last_job(self):
        jobs = self.read_jobs()
        return jobs[-1][1] if jobs else None
