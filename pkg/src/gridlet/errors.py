"""Exception classes shared by all gridlet modules.

Every error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_FOUND = 2
EXIT_NETWORK = 3
EXIT_AUTH = 4


class GridletError(Exception):
    exit_code = EXIT_USAGE


class UsageError(GridletError):
    exit_code = EXIT_USAGE


class ParseError(GridletError):
    def __init__(self, path, line, reason):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class MissingSystemConfig(GridletError):
    pass


class TokenFileUnwritable(GridletError):
    exit_code = EXIT_AUTH


class LogUnwritable(GridletError):
    pass


# catalog

class InvalidRecord(GridletError):
    pass


class UnreadableRoot(GridletError):
    pass


class NotLocallyAvailable(GridletError):
    exit_code = EXIT_NOT_FOUND


class BrokenLink(GridletError):
    exit_code = EXIT_NOT_FOUND


class PeerUnreachable(GridletError):
    exit_code = EXIT_NETWORK


# gateway / network

class GatewayDown(GridletError):
    exit_code = EXIT_NETWORK


class ProtocolError(GridletError):
    exit_code = EXIT_NETWORK


class RemoteError(GridletError):
    """An ``ERR <code> <text>`` reply relayed from a gateway."""

    exit_code = EXIT_USAGE

    def __init__(self, code, text):
        super().__init__(f"ERR {code} {text}")
        self.code = code
        self.text = text


class AuthError(RemoteError):
    exit_code = EXIT_AUTH


class AuthExpired(AuthError):
    pass


class RemoteNotFound(RemoteError):
    exit_code = EXIT_NOT_FOUND


class BindFailed(GridletError):
    exit_code = EXIT_NETWORK


# broker

class MismatchedCluster(GridletError):
    pass


class NoClusterAvailable(GridletError):
    exit_code = EXIT_NETWORK


class SubmitRejected(GridletError):
    exit_code = EXIT_NETWORK


class UnknownJob(GridletError):
    exit_code = EXIT_NOT_FOUND


class NotDone(GridletError):
    exit_code = EXIT_NOT_FOUND


class FileUnknown(GridletError):
    exit_code = EXIT_NOT_FOUND


class UnknownCluster(GridletError):
    exit_code = EXIT_USAGE


# transfer

class UnknownSite(GridletError):
    exit_code = EXIT_USAGE


class UnknownTask(GridletError):
    exit_code = EXIT_NOT_FOUND


class BadState(GridletError):
    pass


class NoMatch(GridletError):
    exit_code = EXIT_NOT_FOUND


class PartialFailure(GridletError):
    exit_code = EXIT_NETWORK

    def __init__(self, report):
        names = ", ".join(name for name, _ in report.failed)
        super().__init__(f"{len(report.failed)} file(s) failed: {names}")
        self.report = report
