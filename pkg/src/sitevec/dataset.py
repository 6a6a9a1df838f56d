"""Curlie-style label files, class vectors and the processed-record store.

On-disk files are UTF-8, start with a ``# <kind> v1`` comment line and then a
header row.  Tab-separated files are the primary format; label records can
also be read from JSON lines.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, TextIO
from urllib.parse import urlsplit

import numpy as np

from .errors import CorruptionError, DataError, ValidationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"

CLASS_ORDER = (
    "Arts",
    "Business",
    "Computers",
    "Games",
    "Health",
    "Home",
    "News",
    "Recreation",
    "References",
    "Science",
    "Shopping",
    "Society",
    "Sports",
    "KidsAndTeens",
)
N_CLASSES = len(CLASS_ORDER)
VISUAL_DIM = 512

# Keys are lowercased with every non-alphanumeric character removed.
_CLASS_ALIASES = {
    "art": "Arts",
    "arts": "Arts",
    "business": "Business",
    "computers": "Computers",
    "computer": "Computers",
    "games": "Games",
    "health": "Health",
    "home": "Home",
    "news": "News",
    "recreation": "Recreation",
    "reference": "References",
    "references": "References",
    "science": "Science",
    "shopping": "Shopping",
    "society": "Society",
    "sports": "Sports",
    "kidsandteens": "KidsAndTeens",
    "kidsteens": "KidsAndTeens",
}
_EXCLUDED_TOP = {"regional"}


def normalize_class_name(segment: str) -> str | None:
    """Canonical class id for a top-level path segment, or None if unknown."""
    key = re.sub(r"[^0-9a-z]", "", segment.lower())
    return _CLASS_ALIASES.get(key)


@dataclass(frozen=True)
class LabelRecord:
    url: str
    uid: int
    label: str
    lang: str


class LabelParse(NamedTuple):
    records: list[LabelRecord]
    skipped: int


def _schema_line(kind: str) -> str:
    return f"# {kind} {SCHEMA_VERSION}"


def _check_schema(line: str, kind: str) -> None:
    parts = line[1:].split()
    if len(parts) != 2 or parts[0] != kind:
        raise DataError(f"expected '# {kind} <version>' schema line, got {line!r}")
    if parts[1] != SCHEMA_VERSION:
        raise DataError(f"{kind} schema {parts[1]} not supported (need {SCHEMA_VERSION})")


def _is_absolute_url(url: str) -> bool:
    parts = urlsplit(url)
    return bool(parts.scheme and parts.netloc)


def _record_from_fields(url, uid, label, lang) -> LabelRecord | None:
    try:
        uid = int(uid)
    except (TypeError, ValueError):
        return None
    if not isinstance(url, str) or not _is_absolute_url(url):
        return None
    if not isinstance(label, str) or "/" not in label or not all(label.split("/")):
        return None
    if not isinstance(lang, str) or not lang:
        return None
    return LabelRecord(url=url, uid=uid, label=label, lang=lang)


def _raise_on_duplicates(records: list[LabelRecord]) -> None:
    counts = Counter(r.uid for r in records)
    dupes = sorted(uid for uid, n in counts.items() if n > 1)
    if dupes:
        raise ValidationError(f"duplicate uids: {dupes}")


LABEL_HEADER = ("url", "uid", "label", "lang")


def parse_label_records(stream: TextIO) -> LabelParse:
    """Read ``labels.tsv`` records from an open text stream.

    Lines that do not form a valid record are counted in ``skipped``.  A
    duplicated uid is a hard error because it breaks joins with the content
    and class files.
    """
    records = []
    skipped = 0
    for lineno, raw in enumerate(stream):
        line = raw.rstrip("\n").rstrip("\r")
        if lineno == 0 and line.startswith("#"):
            _check_schema(line, "labels")
            continue
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if tuple(fields) == LABEL_HEADER:
            continue
        rec = _record_from_fields(*fields) if len(fields) == 4 else None
        if rec is None:
            skipped += 1
            continue
        records.append(rec)
    if skipped:
        logger.warning("skipped %d malformed label lines", skipped)
    _raise_on_duplicates(records)
    return LabelParse(records, skipped)


def parse_label_records_jsonl(stream: TextIO) -> LabelParse:
    records = []
    skipped = 0
    for lineno, raw in enumerate(stream):
        line = raw.strip()
        if lineno == 0 and line.startswith("#"):
            _check_schema(line, "labels")
            continue
        if not line:
            continue
        try:
            obj = json.loads(line)
            rec = _record_from_fields(obj["url"], obj["uid"], obj["label"], obj["lang"])
        except (ValueError, KeyError, TypeError):
            rec = None
        if rec is None:
            skipped += 1
            continue
        records.append(rec)
    _raise_on_duplicates(records)
    return LabelParse(records, skipped)


def write_label_records(records: Iterable[LabelRecord], stream: TextIO) -> None:
    stream.write(_schema_line("labels") + "\n")
    stream.write("\t".join(LABEL_HEADER) + "\n")
    for r in records:
        stream.write(f"{r.url}\t{r.uid}\t{r.label}\t{r.lang}\n")


def is_homepage(url: str) -> bool:
    """True for URLs whose path is empty or "/" with no query or fragment."""
    try:
        parts = urlsplit(url)
    except ValueError as exc:
        raise ValidationError(f"unparsable URL {url!r}: {exc}") from None
    if not parts.scheme or not parts.netloc:
        raise ValidationError(f"not an absolute URL: {url!r}")
    if parts.query or parts.fragment or url.rstrip().endswith(("?", "#")):
        return False
    return parts.path in ("", "/")


class LabelMapping:
    """Lookup from (lang, label path) to the English label path."""

    def __init__(self, entries: dict[tuple[str, str], str] | None = None):
        self.entries = dict(entries or {})

    def __len__(self):
        return len(self.entries)

    def resolve(self, label: str, lang: str) -> str | None:
        if lang == "en":
            return label
        return self.entries.get((lang, label))

    @classmethod
    def read(cls, stream: TextIO) -> "LabelMapping":
        entries = {}
        for lineno, raw in enumerate(stream):
            line = raw.rstrip("\n")
            if lineno == 0 and line.startswith("#"):
                _check_schema(line, "mapping")
                continue
            if not line or line == "lang\tsource_path\tenglish_path":
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"mapping line {lineno + 1}: expected 3 fields")
            lang, src, eng = fields
            if not eng.startswith("Top/"):
                raise DataError(f"mapping line {lineno + 1}: English path must start with 'Top/'")
            entries[(lang, src)] = eng
        return cls(entries)

    def write(self, stream: TextIO) -> None:
        stream.write(_schema_line("mapping") + "\n")
        stream.write("lang\tsource_path\tenglish_path\n")
        for (lang, src), eng in sorted(self.entries.items()):
            stream.write(f"{lang}\t{src}\t{eng}\n")


def resolve_english_label(label: str, lang: str, mapping: LabelMapping) -> str | None:
    return mapping.resolve(label, lang)


def _frozen(flags: np.ndarray) -> np.ndarray:
    flags.flags.writeable = False
    return flags


def class_vector_from_labels(english_paths: Iterable[str]) -> np.ndarray | None:
    """Boolean vector over ``CLASS_ORDER`` from English label paths.

    ``Regional`` and unknown top-level segments are ignored.  Returns None
    when nothing maps to one of the 14 classes.
    """
    flags = np.zeros(N_CLASSES, dtype=bool)
    for path in english_paths:
        segments = path.split("/")
        if len(segments) < 2 or not segments[1]:
            raise ValidationError(f"label path has no top-level segment: {path!r}")
        if segments[1].lower() in _EXCLUDED_TOP:
            continue
        name = normalize_class_name(segments[1])
        if name is not None:
            flags[CLASS_ORDER.index(name)] = True
    return _frozen(flags) if flags.any() else None


def class_names(flags: np.ndarray) -> list[str]:
    return [c for c, f in zip(CLASS_ORDER, flags) if f]


def multilabel_share(vectors: Iterable[np.ndarray]) -> float:
    """Fraction of class vectors with two or more flags set."""
    total = multi = 0
    for v in vectors:
        total += 1
        multi += int(np.count_nonzero(v) >= 2)
    return multi / total if total else 0.0


def duplicate_urls(records: Iterable[LabelRecord]) -> dict[str, list[int]]:
    """URLs that appear under more than one uid, mapped to their uids."""
    by_url = defaultdict(set)
    for r in records:
        by_url[r.url].add(r.uid)
    return {u: sorted(ids) for u, ids in by_url.items() if len(ids) > 1}


def homepage_class_vectors(
    records: Iterable[LabelRecord], mapping: LabelMapping
) -> dict[str, np.ndarray]:
    """Keep homepages, translate labels to English and build one vector per URL.

    Records whose label has no English equivalent are dropped, as are URLs
    left with no class after ``Regional`` is removed.
    """
    paths = defaultdict(list)
    for r in records:
        if not is_homepage(r.url):
            continue
        eng = mapping.resolve(r.label, r.lang)
        if eng is not None:
            paths[r.url].append(eng)
    out = {}
    for url, p in paths.items():
        vec = class_vector_from_labels(p)
        if vec is not None:
            out[url] = vec
    return out


# --- processed records -----------------------------------------------------


@dataclass(frozen=True)
class ProcessedRecord:
    uid: int
    html: str
    classes: np.ndarray
    visual: np.ndarray | None = None
    lang: str | None = None

    def __post_init__(self):
        if len(self.classes) != N_CLASSES:
            raise ValidationError(f"uid {self.uid}: class vector must have {N_CLASSES} flags")
        if self.visual is not None and len(self.visual) != VISUAL_DIM:
            raise ValidationError(f"uid {self.uid}: visual vector must have {VISUAL_DIM} values")


def read_content(stream: TextIO) -> Iterator[tuple[int, str]]:
    """Yield ``(uid, html)`` from ``content.jsonl``."""
    for lineno, raw in enumerate(stream):
        line = raw.strip()
        if lineno == 0 and line.startswith("#"):
            _check_schema(line, "content")
            continue
        if not line:
            continue
        try:
            obj = json.loads(line)
            yield int(obj["uid"]), str(obj["html"])
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"content line {lineno + 1}: {exc}") from None


def write_content(items: Iterable[tuple[int, str]], stream: TextIO) -> None:
    stream.write(_schema_line("content") + "\n")
    for uid, html in items:
        stream.write(json.dumps({"uid": uid, "html": html}, ensure_ascii=False) + "\n")


class ClassTable(NamedTuple):
    uids: np.ndarray
    flags: np.ndarray
    langs: list[str | None]


def read_classes(stream: TextIO) -> ClassTable:
    """Read ``classes.tsv``: uid, 14 binary flags and an optional ``lang`` column."""
    uids, rows, langs = [], [], []
    has_lang = False
    for lineno, raw in enumerate(stream):
        line = raw.rstrip("\n")
        if lineno == 0 and line.startswith("#"):
            _check_schema(line, "classes")
            continue
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "uid":
            if tuple(fields[1 : 1 + N_CLASSES]) != CLASS_ORDER:
                raise DataError("classes header does not match the canonical class order")
            has_lang = len(fields) == N_CLASSES + 2 and fields[-1] == "lang"
            continue
        want = N_CLASSES + 1 + int(has_lang)
        if len(fields) != want:
            raise DataError(f"classes line {lineno + 1}: expected {want} fields, got {len(fields)}")
        try:
            uids.append(int(fields[0]))
            row = [int(f) for f in fields[1 : 1 + N_CLASSES]]
        except ValueError:
            raise DataError(f"classes line {lineno + 1}: non-integer field") from None
        if any(v not in (0, 1) for v in row):
            raise DataError(f"classes line {lineno + 1}: flags must be 0 or 1")
        rows.append(row)
        langs.append(fields[-1] or None if has_lang else None)
    flags = np.array(rows, dtype=bool).reshape(-1, N_CLASSES)
    uid_arr = np.array(uids, dtype=np.int64)
    if len(set(uids)) != len(uids):
        counts = Counter(uids)
        raise ValidationError(f"duplicate uids: {sorted(u for u, n in counts.items() if n > 1)}")
    return ClassTable(uid_arr, flags, langs)


def write_classes(
    uids: Iterable[int], flags: np.ndarray, stream: TextIO, langs: list[str | None] | None = None
) -> None:
    stream.write(_schema_line("classes") + "\n")
    header = ["uid", *CLASS_ORDER] + (["lang"] if langs is not None else [])
    stream.write("\t".join(header) + "\n")
    for i, uid in enumerate(uids):
        cells = [str(int(uid))] + [str(int(f)) for f in flags[i]]
        if langs is not None:
            cells.append(langs[i] or "")
        stream.write("\t".join(cells) + "\n")


# --- visual sidecar ----------------------------------------------------------

VISUAL_MAGIC = b"SVVIS001"
_VISUAL_RECORD = VISUAL_DIM * 4


def write_visual_store(vectors: dict[int, np.ndarray], bin_path, idx_path) -> None:
    """Write ``visual.bin`` (little-endian float32 records) and its text index."""
    with open(bin_path, "wb") as fb, open(idx_path, "w", encoding="utf-8") as fi:
        fb.write(VISUAL_MAGIC)
        fi.write(_schema_line("visual-idx") + "\n")
        fi.write("uid\toffset\n")
        offset = len(VISUAL_MAGIC)
        for uid in sorted(vectors):
            vec = np.asarray(vectors[uid], dtype="<f4")
            if vec.shape != (VISUAL_DIM,):
                raise ValidationError(f"uid {uid}: visual vector must have {VISUAL_DIM} values")
            fb.write(vec.tobytes())
            fi.write(f"{uid}\t{offset}\n")
            offset += _VISUAL_RECORD


class VisualStore:
    """Read access to a visual sidecar; records are read lazily by uid."""

    def __init__(self, bin_path, idx_path):
        self.bin_path = Path(bin_path)
        self.offsets: dict[int, int] = {}
        with open(idx_path, encoding="utf-8") as fi:
            for lineno, raw in enumerate(fi):
                line = raw.rstrip("\n")
                if lineno == 0 and line.startswith("#"):
                    _check_schema(line, "visual-idx")
                    continue
                if not line or line == "uid\toffset":
                    continue
                uid, off = line.split("\t")
                self.offsets[int(uid)] = int(off)
        with open(self.bin_path, "rb") as fb:
            if fb.read(len(VISUAL_MAGIC)) != VISUAL_MAGIC:
                raise CorruptionError(f"{self.bin_path}: bad magic")
        self._size = self.bin_path.stat().st_size

    def __contains__(self, uid):
        return uid in self.offsets

    def __len__(self):
        return len(self.offsets)

    def get(self, uid: int) -> np.ndarray | None:
        off = self.offsets.get(uid)
        if off is None:
            return None
        if off + _VISUAL_RECORD > self._size:
            raise DataError(f"uid {uid}: visual record truncated")
        with open(self.bin_path, "rb") as fb:
            fb.seek(off)
            buf = fb.read(_VISUAL_RECORD)
        if len(buf) != _VISUAL_RECORD:
            raise DataError(f"uid {uid}: visual record truncated")
        vec = np.frombuffer(buf, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(vec)):
            raise DataError(f"uid {uid}: visual record has non-finite values")
        return vec


def load_processed(
    content: TextIO, classes: TextIO, visual: VisualStore | None = None
) -> list[ProcessedRecord]:
    """Join content, classes and (optional) visual vectors on uid."""
    table = read_classes(classes)
    index = {int(u): i for i, u in enumerate(table.uids)}
    out = []
    for uid, html in read_content(content):
        i = index.get(uid)
        if i is None:
            continue
        vis = visual.get(uid) if visual is not None else None
        out.append(ProcessedRecord(uid, html, table.flags[i], vis, table.langs[i]))
    return out
