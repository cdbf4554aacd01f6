"""Week-long access tokens standing in for a grid proxy.

The client issues a token into a small file; gateways read the same file to
decide whether an ``AUTH`` line is acceptable. Reissuing replaces the file, so
the previous token stops working immediately.
"""

import os
import secrets
import tempfile
from dataclasses import dataclass

from .errors import TokenFileUnwritable

WEEK = 7 * 24 * 3600


@dataclass(frozen=True)
class AuthToken:
    token: str
    issued_at: float
    lifetime_seconds: float = WEEK

    @property
    def expires_at(self):
        return self.issued_at + self.lifetime_seconds

    def valid_at(self, now):
        return now < self.issued_at + self.lifetime_seconds

    def dumps(self):
        return (f"token={self.token}\nissued_at={self.issued_at!r}\n"
                f"lifetime_seconds={self.lifetime_seconds!r}\n")

    @classmethod
    def loads(cls, text):
        fields = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(fields["token"], float(fields["issued_at"]), float(fields["lifetime_seconds"]))


class TokenStore:
    def __init__(self, path):
        self.path = str(path)
        self._cache = None
        self._cache_key = None

    def issue(self, now, lifetime=WEEK):
        tok = AuthToken(secrets.token_hex(16), float(now), float(lifetime))
        directory = os.path.dirname(self.path) or "."
        try:
            os.makedirs(directory, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=directory, prefix=".token.")
            with os.fdopen(fd, "w") as f:
                f.write(tok.dumps())
            os.chmod(tmp, 0o600)
            os.replace(tmp, self.path)
        except OSError as exc:
            raise TokenFileUnwritable(f"cannot write token file {self.path}: {exc}") from None
        return tok

    def current(self):
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            return None
        key = (st.st_mtime_ns, st.st_size, st.st_ino)
        if key != self._cache_key:
            with open(self.path) as f:
                self._cache = AuthToken.loads(f.read())
            self._cache_key = key
        return self._cache

    def check(self, token, now):
        """Return None when ``token`` is acceptable at ``now``, else a reason."""
        cur = self.current()
        if cur is None or not secrets.compare_digest(cur.token, token):
            return "invalid token"
        if not cur.valid_at(now):
            return "token expired"
        return None
