"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the command line front end can map
failures to its documented codes without a lookup table.
"""


class SitevecError(Exception):
    exit_code = 4


class ValidationError(SitevecError, ValueError):
    exit_code = 4


class DataError(SitevecError):
    exit_code = 4


class CorruptionError(DataError):
    pass


class LayoutError(SitevecError):
    exit_code = 3


class CompatibilityError(SitevecError):
    exit_code = 3


class ShapeError(SitevecError, ValueError):
    exit_code = 4


class NumericError(SitevecError, FloatingPointError):
    exit_code = 4


class DegenerateClassError(SitevecError, ValueError):
    exit_code = 4

    def __init__(self, class_name, message=None):
        self.class_name = class_name
        super().__init__(message or f"class {class_name!r} has no positives or no negatives")


class BackendError(SitevecError):
    exit_code = 2

    def __init__(self, identifier, message):
        self.identifier = identifier
        super().__init__(f"[{identifier}] {message}")


class FetchError(SitevecError):
    """Base for network failures; ``reason`` is a short machine-readable tag."""

    exit_code = 2
    reason = "network"

    def __init__(self, url, message=""):
        self.url = url
        super().__init__(f"{url}: {message}" if message else url)


class NetworkError(FetchError):
    reason = "network"


class FetchTimeout(FetchError):
    reason = "timeout"


class HTTPStatusError(FetchError):
    reason = "http"

    def __init__(self, url, status):
        self.status = status
        super().__init__(url, f"HTTP {status}")


class RedirectError(FetchError):
    reason = "redirect"


class CertificateError(FetchError):
    reason = "certificate"
