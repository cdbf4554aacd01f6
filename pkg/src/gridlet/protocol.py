"""Client side of the gateway control protocol.

Requests are single UTF-8 lines terminated by ``\\n``. Binary payloads are
announced by a length on the request or reply line and follow it raw::

    SUBMIT 12\\n#!/bin/sh...      ->  OK job=s/3
    FETCH s/3                     ->  OK 6\\nhello\\n
    LIST /data                    ->  OK 2\\na.root\\t100\\nb.root\\t200\\n

Every request gets exactly one ``OK ...`` or ``ERR <code> <text>`` reply.
Paths travel percent-encoded so names may contain spaces.
"""

import socket
from urllib.parse import quote, unquote

from .errors import (AuthError, AuthExpired, GatewayDown, ProtocolError,
                     RemoteError, RemoteNotFound)
from .config import parse_address

MAX_LINE = 65536
MAX_BODY = 1 << 30
CHUNK_SIZE = 4 * 1024 * 1024


def enc_path(path):
    return quote(path, safe="/")


def dec_path(text):
    return unquote(text)


def error_for(code, text):
    if code == 401:
        return (AuthExpired if "expired" in text else AuthError)(code, text)
    if code == 404:
        return RemoteNotFound(code, text)
    return RemoteError(code, text)


class GatewayClient:
    """One authenticated session with a gateway.

    Use as a context manager; connection failures surface as GatewayDown.
    """

    def __init__(self, address, token=None, timeout=30.0):
        self.address = parse_address(address) if isinstance(address, str) else tuple(address)
        self.token = token
        self.timeout = timeout
        self.sock = None
        self.rfile = None

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"GatewayClient({self.address[0]}:{self.address[1]})"

    def connect(self):
        try:
            self.sock = socket.create_connection(self.address, timeout=self.timeout)
        except OSError as exc:
            raise GatewayDown(f"gateway {self.address[0]}:{self.address[1]} unreachable: {exc}") from None
        self.rfile = self.sock.makefile("rb")
        if self.token is not None:
            self.request(f"AUTH {self.token}")
        return self

    def close(self):
        if self.sock is not None:
            try:
                self.rfile.close()
                self.sock.close()
            finally:
                self.sock = None
                self.rfile = None

    # framing

    def _send(self, line, body=None):
        data = line.encode("utf-8") + b"\n"
        if body is not None:
            data += body
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise GatewayDown(f"{self}: send failed: {exc}") from None

    def _readline(self):
        try:
            line = self.rfile.readline(MAX_LINE + 1)
        except OSError as exc:
            raise GatewayDown(f"{self}: receive failed: {exc}") from None
        if not line.endswith(b"\n"):
            raise GatewayDown(f"{self}: connection closed")
        return line[:-1].decode("utf-8", "replace")

    def _readexact(self, n):
        try:
            data = self.rfile.read(n)
        except OSError as exc:
            raise GatewayDown(f"{self}: receive failed: {exc}") from None
        if len(data) != n:
            raise GatewayDown(f"{self}: connection closed mid-payload")
        return data

    def request(self, line, body=None):
        """Send one request and return the text after ``OK``."""
        if self.sock is None:
            raise ProtocolError("client is not connected")
        self._send(line, body)
        reply = self._readline()
        if reply == "OK" or reply.startswith("OK "):
            return reply[3:]
        if reply.startswith("ERR "):
            code, _, text = reply[4:].partition(" ")
            try:
                code = int(code)
            except ValueError:
                raise ProtocolError(f"malformed reply {reply!r}") from None
            raise error_for(code, text)
        raise ProtocolError(f"malformed reply {reply!r}")

    def request_payload(self, line, body=None):
        head = self.request(line, body)
        try:
            n = int(head)
        except ValueError:
            raise ProtocolError(f"expected payload length, got {head!r}") from None
        return self._readexact(n)

    def request_lines(self, line):
        head = self.request(line)
        try:
            n = int(head)
        except ValueError:
            raise ProtocolError(f"expected line count, got {head!r}") from None
        return [self._readline() for _ in range(n)]

    # verbs

    def ping(self):
        return self.request("PING")

    def qstat(self):
        fields = dict(part.split("=", 1) for part in self.request("QSTAT").split())
        return int(fields["run"]), int(fields["wait"])

    def submit(self, script):
        reply = self.request(f"SUBMIT {len(script)}", script)
        if not reply.startswith("job="):
            raise ProtocolError(f"unexpected SUBMIT reply {reply!r}")
        return reply[4:]

    def status(self, job_id):
        reply = self.request(f"STATUS {job_id}")
        return reply.partition("=")[2]

    def fetch(self, job_id):
        return self.request_payload(f"FETCH {job_id}")

    def run(self, command):
        if isinstance(command, str):
            command = command.encode("utf-8")
        return self.request_payload(f"RUN {len(command)}", command)

    def list(self, path):
        out = []
        for line in self.request_lines(f"LIST {enc_path(path)}"):
            name, _, size = line.rpartition("\t")
            out.append((name, int(size)))
        return out

    def get(self, path, offset, count):
        return self.request_payload(f"GET {enc_path(path)} {offset} {count}")

    def put(self, path, offset, data):
        self.request(f"PUT {enc_path(path)} {offset} {len(data)}", data)

    def pull(self, src_gateway, src_path, dst_path, streams):
        reply = self.request(f"PULL {src_gateway} {enc_path(src_path)} {enc_path(dst_path)} {streams}")
        return int(reply)

    def cat_lookup(self, lfn):
        return self.request_lines(f"CAT-LOOKUP {quote(lfn, safe='')}")

    def cat_register(self, record_line):
        return self.request(f"CAT-REGISTER {record_line}")

    def cat_sync(self, watermark):
        return self.request_payload(f"CAT-SYNC {float(watermark)!r}").decode("utf-8").splitlines()
