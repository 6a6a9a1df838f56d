"""Homepage HTML and URL to structured feature inputs.

Everything here is a pure function of ``(html, url)``.  Parsing uses the
standard-library backend of BeautifulSoup so results do not depend on which
optional parsers are installed.
"""
from __future__ import annotations

import ipaddress
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from urllib.parse import unquote, urljoin, urlsplit

from bs4 import BeautifulSoup, NavigableString, Tag
from bs4.element import PreformattedString

from .errors import DataError, ValidationError

MAX_SENTENCES = 100
MAX_LINK_TOKENS = 50
N_TLDS = 19
N_METATAGS = 30

OVERLAY_MARKERS = ("popup", "modal", "cookie")

_SKIP_TAGS = frozenset(
    {"script", "style", "template", "noscript", "head", "title", "meta", "link", "iframe", "object", "svg"}
)
_BLOCK_TAGS = frozenset(
    {
        "address", "article", "aside", "blockquote", "body", "br", "caption", "dd", "details", "dialog",
        "div", "dl", "dt", "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4",
        "h5", "h6", "header", "hgroup", "hr", "html", "li", "main", "nav", "ol", "option", "p", "pre",
        "section", "summary", "table", "tbody", "td", "tfoot", "th", "thead", "tr", "ul", "button",
    }
)
_ASCII_TERMINATORS = ".!?"
_CJK_TERMINATORS = "。！？"
_WS = re.compile(r"\s+")
_WORD = re.compile(r"[^\W_]+")
_DOMAIN_SPLIT = re.compile(r"[.\-_]")


def _read_table(name: str, path, expected: int) -> tuple[str, ...]:
    if path is None:
        text = resources.files("sitevec.data").joinpath(name).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    entries = tuple(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )
    if len(entries) != expected:
        raise DataError(f"{name}: expected {expected} entries, found {len(entries)}")
    if len(set(entries)) != expected:
        raise DataError(f"{name}: duplicate entries")
    return entries


def load_tlds(path=None) -> tuple[str, ...]:
    """The 19 generic TLDs (with leading dot), in feature order."""
    table = _read_table("tlds.v1.txt", path, N_TLDS)
    if any(not t.startswith(".") or len(t) <= 3 for t in table):
        # two-letter labels are country codes
        raise DataError("TLD table entries must be dotted generic TLDs")
    return table


def load_metatags(path=None) -> tuple[str, ...]:
    return _read_table("metatags.v1.txt", path, N_METATAGS)


DEFAULT_TLDS = load_tlds()
DEFAULT_METATAGS = load_metatags()


@dataclass(frozen=True)
class ExtractedPage:
    sentences: tuple[str, ...] = ()
    title: str | None = None
    description: str | None = None
    keywords: str | None = None
    link_tokens: tuple[str, ...] = ()
    metatag_flags: tuple[bool, ...] = field(default=(False,) * N_METATAGS)
    tld_index: int | None = None
    domain_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.sentences) > MAX_SENTENCES:
            raise ValidationError(f"at most {MAX_SENTENCES} sentences allowed")
        if len(self.link_tokens) > MAX_LINK_TOKENS:
            raise ValidationError(f"at most {MAX_LINK_TOKENS} link tokens allowed")
        if len(self.metatag_flags) != N_METATAGS:
            raise ValidationError(f"metatag_flags must have {N_METATAGS} entries")
        if self.tld_index is not None and not 0 <= self.tld_index < N_TLDS:
            raise ValidationError(f"tld_index out of range: {self.tld_index}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sentences", "link_tokens", "metatag_flags", "domain_tokens"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractedPage":
        return cls(
            sentences=tuple(d.get("sentences", ())),
            title=d.get("title"),
            description=d.get("description"),
            keywords=d.get("keywords"),
            link_tokens=tuple(d.get("link_tokens", ())),
            metatag_flags=tuple(bool(x) for x in d.get("metatag_flags", (False,) * N_METATAGS)),
            tld_index=d.get("tld_index"),
            domain_tokens=tuple(d.get("domain_tokens", ())),
        )


def _parse(html: str) -> BeautifulSoup:
    return BeautifulSoup(html, "html.parser")


def _is_overlay(tag: Tag) -> bool:
    classes = tag.get("class") or []
    if isinstance(classes, str):
        classes = [classes]
    ident = tag.get("id") or ""
    hay = (" ".join(classes) + " " + ident).lower()
    return any(m in hay for m in OVERLAY_MARKERS)


def _strip_soup(soup: BeautifulSoup) -> None:
    for div in soup.find_all("div"):
        if div.decomposed:
            continue
        if _is_overlay(div):
            div.decompose()


def strip_overlays(html: str) -> str:
    """Remove ``div`` subtrees whose class or id mentions popup, modal or cookie."""
    soup = _parse(html)
    _strip_soup(soup)
    return str(soup)


def _split_sentences(text: str) -> list[str]:
    out, start, n = [], 0, len(text)
    i = 0
    while i < n:
        ch = text[i]
        if ch in _CJK_TERMINATORS or ch in _ASCII_TERMINATORS:
            j = i
            while j + 1 < n and (text[j + 1] in _ASCII_TERMINATORS or text[j + 1] in _CJK_TERMINATORS):
                j += 1
            # ASCII terminators only end a sentence before whitespace ("3.14", "a.com" stay whole)
            if ch in _CJK_TERMINATORS or j + 1 == n or text[j + 1].isspace():
                out.append(text[start : j + 1])
                start = j + 1
            i = j + 1
            continue
        i += 1
    out.append(text[start:])
    return [s.strip() for s in out if s.strip()]


def _text_blocks(root: Tag) -> list[str]:
    blocks, current = [], []

    def flush():
        if current:
            text = _WS.sub(" ", "".join(current)).strip()
            if text:
                blocks.append(text)
            current.clear()

    stack = [(root, False)]
    while stack:
        node, leaving = stack.pop()
        if leaving:
            flush()
            continue
        if isinstance(node, NavigableString):
            if not isinstance(node, PreformattedString):
                current.append(str(node))
            continue
        if not isinstance(node, Tag):
            continue
        name = (node.name or "").lower()
        if name in _SKIP_TAGS:
            continue
        if name in _BLOCK_TAGS:
            flush()
            stack.append((node, True))
        stack.extend((child, False) for child in reversed(node.contents))
    flush()
    return blocks


def _sentences_from_soup(soup: BeautifulSoup) -> tuple[str, ...]:
    out = []
    for block in _text_blocks(soup):
        for s in _split_sentences(block):
            out.append(s)
            if len(out) == MAX_SENTENCES:
                return tuple(out)
    return tuple(out)


def extract_sentences(html: str) -> list[str]:
    """Visible text split into at most 100 sentences, in document order."""
    return list(_sentences_from_soup(_parse(html)))


def _clean(text: str | None) -> str | None:
    if text is None:
        return None
    text = _WS.sub(" ", text).strip()
    return text or None


def _meta_content(soup: BeautifulSoup, name: str) -> str | None:
    for meta in soup.find_all("meta"):
        if (meta.get("name") or "").strip().lower() == name:
            value = _clean(meta.get("content"))
            if value:
                return value
    return None


def _metadata_from_soup(soup):
    title_tag = soup.find("title")
    title = _clean(title_tag.get_text()) if title_tag else None
    return title, _meta_content(soup, "description"), _meta_content(soup, "keywords")


def extract_metadata(html: str) -> tuple[str | None, str | None, str | None]:
    """``(title, description, keywords)``; each None when missing or blank."""
    return _metadata_from_soup(_parse(html))


def _link_tokens_from_soup(soup, base_url: str) -> tuple[str, ...]:
    counts = Counter()
    for a in soup.find_all("a", href=True):
        href = a["href"].strip()
        if not href or href.startswith("#"):
            continue
        try:
            parts = urlsplit(urljoin(base_url, href))
        except ValueError:
            continue
        if parts.scheme not in ("http", "https"):
            continue
        counts.update(w.lower() for w in _WORD.findall(unquote(parts.path)))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(w for w, _ in ranked[:MAX_LINK_TOKENS])


def extract_link_tokens(html: str, base_url: str) -> list[str]:
    """The 50 most frequent words across anchor URL paths, ties broken alphabetically."""
    return list(_link_tokens_from_soup(_parse(html), base_url))


def _metatag_flags_from_soup(soup, table) -> tuple[bool, ...]:
    present = {(m.get("name") or "").strip().lower() for m in soup.find_all("meta")}
    return tuple(name in present for name in table)


def metatag_flags(html: str, table=DEFAULT_METATAGS) -> list[bool]:
    return list(_metatag_flags_from_soup(_parse(html), table))


def _host(url: str) -> str:
    try:
        host = urlsplit(url).hostname
    except ValueError as exc:
        raise ValidationError(f"unparsable URL {url!r}: {exc}") from None
    if not host:
        raise ValidationError(f"URL has no host: {url!r}")
    return host.lower().rstrip(".")


def _is_ip(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
    except ValueError:
        return False
    return True


def tld_index(url: str, table=DEFAULT_TLDS) -> int | None:
    host = _host(url)
    if _is_ip(host) or "." not in host:
        return None
    suffix = host[host.rfind(".") :]
    try:
        return table.index(suffix)
    except ValueError:
        return None


def tokenize_domain(url: str) -> list[str]:
    """Domain words: drop ``www.`` and the final label, split on ``.``, ``-`` and ``_``."""
    host = _host(url)
    if _is_ip(host):
        return [host]
    if host.startswith("www."):
        host = host[4:]
    if "." in host:
        host = host[: host.rfind(".")]
    return [t for t in _DOMAIN_SPLIT.split(host) if t]


def extract_page(html: str, url: str, tlds=DEFAULT_TLDS, metatags=DEFAULT_METATAGS) -> ExtractedPage:
    """Overlay stripping followed by every extractor, on a single parse."""
    soup = _parse(html)
    _strip_soup(soup)
    title, description, keywords = _metadata_from_soup(soup)
    return ExtractedPage(
        sentences=_sentences_from_soup(soup),
        title=title,
        description=description,
        keywords=keywords,
        link_tokens=_link_tokens_from_soup(soup, url),
        metatag_flags=_metatag_flags_from_soup(soup, metatags),
        tld_index=tld_index(url, tlds),
        domain_tokens=tuple(tokenize_domain(url)),
    )
