"""Bounded HTTP retrieval of homepages."""
from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .dataset import is_homepage
from .errors import (
    CertificateError,
    FetchError,
    FetchTimeout,
    HTTPStatusError,
    NetworkError,
    RedirectError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_USER_AGENT = "sitevec/0.1 (+research crawler)"
_CHUNK = 64 * 1024
_META_CHARSET = re.compile(rb"""<meta[^>]+charset\s*=\s*["']?\s*([A-Za-z0-9_\-:.]+)""", re.I)


@dataclass(frozen=True)
class FetchConfig:
    timeout: float = 10.0
    max_redirects: int = 5
    max_body: int = 5 * 1024 * 1024
    user_agent: str = DEFAULT_USER_AGENT
    insecure: bool = False

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValidationError("timeout must be positive")
        if self.max_redirects < 0:
            raise ValidationError("max_redirects must be >= 0")
        if self.max_body <= 0:
            raise ValidationError("max_body must be positive")


@dataclass(frozen=True)
class FetchResult:
    final_url: str
    status: int
    html: str
    elapsed: float
    truncated: bool = False


def _header_charset(content_type: str | None) -> str | None:
    if not content_type:
        return None
    m = re.search(r"charset\s*=\s*[\"']?([^\s;\"']+)", content_type, re.I)
    return m.group(1) if m else None


def decode_body(body: bytes, content_type: str | None = None) -> str:
    """Header charset, then ``<meta charset>``, then UTF-8 with replacement."""
    candidates = [_header_charset(content_type)]
    m = _META_CHARSET.search(body[:4096])
    if m:
        candidates.append(m.group(1).decode("ascii", "ignore"))
    for enc in candidates:
        if not enc:
            continue
        try:
            return body.decode(enc, errors="replace")
        except LookupError:
            continue
    return body.decode("utf-8", errors="replace")


def _session(config: FetchConfig) -> requests.Session:
    s = requests.Session()
    s.max_redirects = config.max_redirects
    s.headers["User-Agent"] = config.user_agent
    # trust_env stays on so HTTP(S)_PROXY are honoured
    return s


def fetch_homepage(url: str, config: FetchConfig = FetchConfig(), *, allow_non_homepage=False) -> FetchResult:
    """Download ``url`` and return its decoded body, truncated at ``max_body`` bytes."""
    if not allow_non_homepage and not is_homepage(url):
        raise ValidationError(f"not a homepage URL: {url}")
    start = time.monotonic()
    with _session(config) as session:
        try:
            resp = session.get(
                url, timeout=config.timeout, stream=True, allow_redirects=True, verify=not config.insecure
            )
        except requests.exceptions.TooManyRedirects as exc:
            raise RedirectError(url, str(exc)) from None
        except requests.exceptions.SSLError as exc:
            raise CertificateError(url, str(exc)) from None
        except requests.exceptions.Timeout as exc:
            raise FetchTimeout(url, str(exc)) from None
        except requests.exceptions.RequestException as exc:
            raise NetworkError(url, str(exc)) from None
        with resp:
            if resp.status_code >= 400:
                raise HTTPStatusError(url, resp.status_code)
            if resp.is_redirect:
                # redirect without a usable Location header
                raise RedirectError(url, f"unresolved redirect (HTTP {resp.status_code})")
            chunks, size, truncated = [], 0, False
            try:
                for chunk in resp.iter_content(_CHUNK):
                    room = config.max_body - size
                    if len(chunk) >= room:
                        chunks.append(chunk[:room])
                        size += room
                        truncated = len(chunk) > room or truncated
                        break
                    chunks.append(chunk)
                    size += len(chunk)
                    if time.monotonic() - start > config.timeout:
                        raise FetchTimeout(url, "body download exceeded timeout")
            except requests.exceptions.Timeout as exc:
                raise FetchTimeout(url, str(exc)) from None
            except requests.exceptions.RequestException as exc:
                raise NetworkError(url, str(exc)) from None
            if size == config.max_body and not truncated:
                truncated = next(resp.iter_content(1), b"") != b""
            html = decode_body(b"".join(chunks), resp.headers.get("Content-Type"))
            return FetchResult(
                final_url=resp.url,
                status=resp.status_code,
                html=html,
                elapsed=time.monotonic() - start,
                truncated=truncated,
            )


def probe_status(
    urls: list[str], config: FetchConfig = FetchConfig(), parallelism: int = 8
) -> dict[str, str | None]:
    """Map each URL to None when accessible, otherwise to a failure reason tag."""
    if parallelism < 1:
        raise ValidationError("parallelism must be >= 1")

    def probe(url):
        try:
            fetch_homepage(url, config, allow_non_homepage=True)
        except HTTPStatusError as exc:
            return f"http_{exc.status}"
        except FetchError as exc:
            return exc.reason
        except ValidationError:
            return "invalid_url"
        return None

    unique = list(dict.fromkeys(urls))
    if parallelism == 1:
        results = [probe(u) for u in unique]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(probe, unique))
    return dict(zip(unique, results))


def probe_accessible(
    urls: list[str], config: FetchConfig = FetchConfig(), parallelism: int = 8
) -> dict[str, bool]:
    """Timeouts, 4xx and 5xx all count as inaccessible."""
    return {u: reason is None for u, reason in probe_status(urls, config, parallelism).items()}
