"""Feature layout, text encoder backends and assembly of model inputs."""
from __future__ import annotations

import hashlib
import json
import logging
import socket
import struct
import subprocess
import sys
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO, Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .dataset import VISUAL_DIM, VisualStore
from .errors import BackendError, CorruptionError, DataError, LayoutError, ValidationError
from .extract import N_METATAGS, N_TLDS, ExtractedPage

logger = logging.getLogger(__name__)

TEXT_DIM = 768


@dataclass(frozen=True)
class FeatureLayout:
    """Ordered, contiguous blocks of the model input vector."""

    version: str
    blocks: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [n for n, _ in self.blocks]
        if len(set(names)) != len(names):
            raise LayoutError("duplicate block names")
        if any(size <= 0 for _, size in self.blocks):
            raise LayoutError("block sizes must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.blocks)

    @property
    def total(self) -> int:
        return sum(size for _, size in self.blocks)

    @property
    def offsets(self) -> dict[str, int]:
        out, pos = {}, 0
        for name, size in self.blocks:
            out[name] = pos
            pos += size
        return out

    def size(self, name: str) -> int:
        return dict(self.blocks)[name]

    def slice(self, name: str) -> slice:
        if name not in self.names:
            raise ValidationError(f"unknown block {name!r}")
        start = self.offsets[name]
        return slice(start, start + self.size(name))

    def subset(self, names: Sequence[str]) -> "FeatureLayout":
        """Layout restricted to ``names`` (kept in the given order)."""
        unknown = [n for n in names if n not in self.names]
        if unknown:
            raise ValidationError(f"unknown blocks: {unknown}")
        if len(set(names)) != len(names):
            raise ValidationError("repeated block names")
        if tuple(names) == self.names:
            return self
        return FeatureLayout(f"{self.version}[{'+'.join(names)}]", tuple((n, self.size(n)) for n in names))

    def column_index(self, other: "FeatureLayout") -> np.ndarray:
        """Columns of ``self`` that make up each block of ``other`` (a subset)."""
        return np.concatenate(
            [np.arange(self.slice(n).start, self.slice(n).stop) for n in other.names]
        ) if other.blocks else np.zeros(0, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"version": self.version, "blocks": [[n, s] for n, s in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(str(d["version"]), tuple((str(n), int(s)) for n, s in d["blocks"]))


LAYOUT_V1 = FeatureLayout(
    "v1",
    (
        ("tld", N_TLDS),
        ("metatags", N_METATAGS),
        ("domain", TEXT_DIM),
        ("links", TEXT_DIM),
        ("title", TEXT_DIM),
        ("description", TEXT_DIM),
        ("keywords", TEXT_DIM),
        ("text", TEXT_DIM),
        ("visual", VISUAL_DIM),
    ),
)
assert LAYOUT_V1.total == 5169


@runtime_checkable
class TextEncoderBackend(Protocol):
    identifier: str
    thread_safe: bool

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        """Return an array of shape ``(len(texts), 768)``."""


class VisualBackend(Protocol):
    identifier: str

    def encode(self, item) -> np.ndarray:
        """Return a 512-vector for an image (bytes) or a stored uid."""


@lru_cache(maxsize=65536)
def _stub_vector(text: str) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.Generator(np.random.PCG64(seed)).standard_normal(TEXT_DIM)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


def stub_encode(texts: Sequence[str]) -> np.ndarray:
    """Deterministic unit vectors seeded by a hash of each text."""
    if not texts:
        return np.zeros((0, TEXT_DIM))
    return np.stack([_stub_vector(t) for t in texts])


class StubEncoder:
    """Hermetic stand-in for a multilingual sentence encoder."""

    identifier = "stub-sha256-pcg64-v1"
    thread_safe = True

    def encode(self, texts):
        return stub_encode(list(texts))


class StoreVisualBackend:
    """Visual backend serving precomputed vectors from a sidecar store."""

    identifier = "visual-store-v1"

    def __init__(self, store: VisualStore):
        self.store = store

    def encode(self, uid):
        vec = self.store.get(uid)
        if vec is None:
            raise DataError(f"no visual vector for uid {uid}")
        return vec


def lookup_visual(uid: int, store: VisualStore) -> np.ndarray | None:
    return store.get(uid)


_LOCKS: dict[int, threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _lock_for(backend) -> threading.Lock | None:
    if getattr(backend, "thread_safe", False):
        return None
    with _LOCKS_GUARD:
        return _LOCKS.setdefault(id(backend), threading.Lock())


def _encode(backend, texts: list[str]) -> np.ndarray:
    if not texts:
        return np.zeros((0, TEXT_DIM))
    lock = _lock_for(backend)
    try:
        if lock is None:
            out = backend.encode(texts)
        else:
            with lock:
                out = backend.encode(texts)
    except (BackendError, LayoutError):
        raise
    except Exception as exc:
        raise BackendError(getattr(backend, "identifier", "?"), str(exc)) from exc
    out = np.asarray(out, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != len(texts):
        raise LayoutError(
            f"backend {getattr(backend, 'identifier', '?')} returned {out.shape[0] if out.ndim else 0} "
            f"vectors for {len(texts)} texts"
        )
    if out.shape[1] != TEXT_DIM:
        raise LayoutError(f"backend returned {out.shape[1]}-dim vectors, need {TEXT_DIM}")
    return out


def mean_embed(texts: Sequence[str], backend: TextEncoderBackend) -> np.ndarray | None:
    """Mean of the encoded vectors, or None for an empty list."""
    texts = list(texts)
    if not texts:
        return None
    return _encode(backend, texts).mean(axis=0)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    mask: tuple[bool, ...]
    layout: FeatureLayout = LAYOUT_V1

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice(name)]

    def present(self, name: str) -> bool:
        return self.mask[self.layout.names.index(name)]


_MEAN_BLOCKS = ("domain", "links", "text")
_SINGLE_BLOCKS = ("title", "description", "keywords")


def assemble(
    page: ExtractedPage,
    visual: np.ndarray | None,
    backend: TextEncoderBackend,
    layout: FeatureLayout = LAYOUT_V1,
) -> FeatureVector:
    """Concatenate all feature blocks of one page into a ``layout.total`` vector.

    Missing features become zero blocks with their mask bit cleared.  All
    texts of the page go to the backend in a single ``encode`` call.
    """
    if layout.total != LAYOUT_V1.total or layout.names != LAYOUT_V1.names:
        raise LayoutError(f"assemble needs the full {LAYOUT_V1.version} layout, got {layout.version}")
    values = np.zeros(layout.total, dtype=np.float32)
    mask = dict.fromkeys(layout.names, False)

    if page.tld_index is not None:
        values[layout.offsets["tld"] + page.tld_index] = 1.0
        mask["tld"] = True
    flags = np.asarray(page.metatag_flags, dtype=np.float32)
    if flags.shape != (layout.size("metatags"),):
        raise LayoutError(f"metatags block needs {layout.size('metatags')} flags, got {flags.shape[0]}")
    values[layout.slice("metatags")] = flags
    mask["metatags"] = bool(flags.any())

    groups = {
        "domain": list(page.domain_tokens),
        "links": list(page.link_tokens),
        "text": list(page.sentences),
        "title": [page.title] if page.title else [],
        "description": [page.description] if page.description else [],
        "keywords": [page.keywords] if page.keywords else [],
    }
    order = [n for n in layout.names if n in groups]
    texts = [t for n in order for t in groups[n]]
    encoded = _encode(backend, texts)
    pos = 0
    for name in order:
        n = len(groups[name])
        if n:
            values[layout.slice(name)] = encoded[pos : pos + n].mean(axis=0)
            mask[name] = True
        pos += n

    if visual is not None:
        visual = np.asarray(visual, dtype=np.float32)
        if visual.shape != (layout.size("visual"),):
            raise LayoutError(f"visual block needs {layout.size('visual')} values, got {visual.shape}")
        values[layout.slice("visual")] = visual
        mask["visual"] = True

    if not np.all(np.isfinite(values)):
        raise LayoutError("non-finite feature values")
    values.flags.writeable = False
    return FeatureVector(values, tuple(mask[n] for n in layout.names), layout)


# --- external encoder protocol ------------------------------------------------
#
# Frames are a 4-byte big-endian length followed by UTF-8 JSON.
# Request: {"texts": [...]}; response: {"vectors": [[...], ...]} or {"error": "..."}.


def write_frame(stream: BinaryIO, obj) -> None:
    data = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    stream.write(struct.pack(">I", len(data)) + data)
    stream.flush()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError("stream closed mid-frame" if buf else "stream closed")
        buf += chunk
    return buf


def read_frame(stream: BinaryIO):
    (n,) = struct.unpack(">I", _read_exact(stream, 4))
    return json.loads(_read_exact(stream, n).decode("utf-8"))


class StdioTransport:
    """Talks to an encoder child process over its stdin/stdout."""

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def request(self, payload: dict) -> dict:
        proc = self._ensure()
        write_frame(proc.stdin, payload)
        return read_frame(proc.stdout)

    def reset(self):
        self.close()

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except Exception:
                self._proc.kill()
            self._proc = None


class SocketTransport:
    """Talks to an encoder service on a local TCP port."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self.address = (host, port)
        self.timeout = timeout
        self._sock = None
        self._file = None

    def request(self, payload: dict) -> dict:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
            self._file = self._sock.makefile("rwb")
        write_frame(self._file, payload)
        return read_frame(self._file)

    def reset(self):
        self.close()

    def close(self):
        if self._sock is not None:
            self._file.close()
            self._sock.close()
            self._sock = self._file = None


class ExternalEncoder:
    """Text backend delegating to a separate encoder process or service.

    Transient transport failures are retried up to ``retries`` times per
    batch; ``retries_used`` counts how many retries were needed overall.
    """

    thread_safe = False

    def __init__(self, transport, identifier: str = "external", batch_size: int = 64, retries: int = 2):
        if batch_size < 1 or retries < 0:
            raise ValidationError("batch_size must be >= 1 and retries >= 0")
        self.transport = transport
        self.identifier = identifier
        self.batch_size = batch_size
        self.retries = retries
        self.retries_used = 0

    def _batch(self, texts: list[str]) -> np.ndarray:
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self.retries_used += 1
                logger.info("retrying %s batch (attempt %d)", self.identifier, attempt + 1)
            try:
                resp = self.transport.request({"texts": texts})
            except (OSError, EOFError, ValueError, struct.error) as exc:
                last = exc
                if hasattr(self.transport, "reset"):
                    self.transport.reset()
                continue
            if "error" in resp:
                last = RuntimeError(resp["error"])
                continue
            vectors = np.asarray(resp.get("vectors", []), dtype=np.float64)
            if vectors.ndim != 2 or vectors.shape[0] != len(texts):
                raise BackendError(self.identifier, f"expected {len(texts)} vectors")
            if vectors.shape[1] != TEXT_DIM:
                raise LayoutError(f"{self.identifier} returned {vectors.shape[1]}-dim vectors, need {TEXT_DIM}")
            return vectors
        raise BackendError(self.identifier, f"gave up after {self.retries + 1} attempts: {last}")

    def encode(self, texts):
        texts = list(texts)
        if not texts:
            return np.zeros((0, TEXT_DIM))
        parts = [self._batch(texts[i : i + self.batch_size]) for i in range(0, len(texts), self.batch_size)]
        return np.concatenate(parts)

    def close(self):
        if hasattr(self.transport, "close"):
            self.transport.close()


def serve_stdio(backend: TextEncoderBackend, stdin: BinaryIO | None = None, stdout: BinaryIO | None = None):
    """Answer encoder requests until the input stream closes."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        try:
            req = read_frame(stdin)
        except EOFError:
            return
        try:
            vectors = np.asarray(backend.encode(req["texts"]), dtype=np.float64)
            write_frame(stdout, {"vectors": vectors.tolist()})
        except Exception as exc:  # report, keep serving
            write_frame(stdout, {"error": str(exc)})


# --- features.bin -------------------------------------------------------------

FEATURES_MAGIC = b"SVFEAT01"
FEATURES_FORMAT = 1


@dataclass(frozen=True)
class FeatureMatrix:
    uids: np.ndarray
    values: np.ndarray
    masks: np.ndarray
    layout: FeatureLayout = LAYOUT_V1

    def __len__(self):
        return len(self.uids)

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        sub = self.layout.subset(names)
        cols = self.layout.column_index(sub)
        idx = [self.layout.names.index(n) for n in sub.names]
        return FeatureMatrix(self.uids, self.values[:, cols], self.masks[:, idx], sub)

    @classmethod
    def from_vectors(cls, uids: Iterable[int], vectors: Sequence[FeatureVector]) -> "FeatureMatrix":
        layout = vectors[0].layout if vectors else LAYOUT_V1
        values = (
            np.stack([v.values for v in vectors]).astype(np.float32)
            if vectors
            else np.zeros((0, layout.total), np.float32)
        )
        masks = np.array([v.mask for v in vectors], dtype=bool).reshape(-1, len(layout.blocks))
        return cls(np.asarray(list(uids), dtype=np.int64), values, masks, layout)


def write_features(path, features: FeatureMatrix) -> None:
    """Versioned record file: uid (int64), mask bits (uint32), values (float32), all little-endian."""
    layout_json = json.dumps(features.layout.to_dict(), separators=(",", ":")).encode("utf-8")
    nblocks = len(features.layout.blocks)
    if nblocks > 32:
        raise LayoutError("at most 32 blocks can be masked")
    bits = (features.masks.astype(np.uint32) << np.arange(nblocks, dtype=np.uint32)).sum(axis=1)
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<IH", FEATURES_FORMAT, len(layout_json)))
        f.write(layout_json)
        f.write(struct.pack("<Q", len(features)))
        rec = np.zeros(
            len(features),
            dtype=[("uid", "<i8"), ("mask", "<u4"), ("values", "<f4", (features.layout.total,))],
        )
        rec["uid"] = features.uids
        rec["mask"] = bits
        rec["values"] = features.values
        f.write(rec.tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(FEATURES_MAGIC):
        raise CorruptionError(f"{path}: not a features file")
    pos = len(FEATURES_MAGIC)
    try:
        fmt, n_layout = struct.unpack_from("<IH", data, pos)
        pos += 6
        if fmt != FEATURES_FORMAT:
            raise DataError(f"{path}: features format {fmt} not supported")
        layout = FeatureLayout.from_dict(json.loads(data[pos : pos + n_layout].decode("utf-8")))
        pos += n_layout
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptionError(f"{path}: bad header ({exc})") from None
    dtype = np.dtype([("uid", "<i8"), ("mask", "<u4"), ("values", "<f4", (layout.total,))])
    if len(data) - pos != count * dtype.itemsize:
        raise CorruptionError(f"{path}: expected {count} records, file size does not match")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    nblocks = len(layout.blocks)
    masks = ((rec["mask"][:, None] >> np.arange(nblocks, dtype=np.uint32)) & 1).astype(bool)
    return FeatureMatrix(rec["uid"].astype(np.int64), rec["values"].astype(np.float32), masks, layout)
