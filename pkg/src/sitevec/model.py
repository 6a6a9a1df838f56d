"""Feed-forward multilabel network: two ReLU hidden layers and sigmoid outputs.

Weights follow the ``(out, in)`` convention, so a layer computes
``x @ W.T + b`` on a batch of row vectors.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import CLASS_ORDER
from .errors import CompatibilityError, CorruptionError, ShapeError

DEFAULT_DIMS = (5169, 1000, 100, 14)
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
DROPOUT = 0.5


@dataclass
class ModelWeights:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    layout_version: str = "v1"
    class_order: tuple[str, ...] = CLASS_ORDER
    priors: np.ndarray | None = None

    def __post_init__(self):
        d0, d1, d2, d3 = self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.W3.shape[0]
        expected = {
            "W1": (d1, d0), "b1": (d1,), "W2": (d2, d1), "b2": (d2,), "W3": (d3, d2), "b3": (d3,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(self.class_order) != d3:
            raise ShapeError(f"class_order has {len(self.class_order)} names for {d3} outputs")
        if self.priors is not None and np.shape(self.priors) != (d3,):
            raise ShapeError("priors must have one entry per output")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.W3.shape[0])

    @property
    def dtype(self):
        return self.W1.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> "ModelWeights":
        return replace(self, **params)

    def copy(self) -> "ModelWeights":
        return self.with_params({n: p.copy() for n, p in self.params().items()})

    def checksum(self) -> str:
        return hashlib.sha256(_serialize_body(self)).hexdigest()


def init_weights(
    seed: int,
    dims=DEFAULT_DIMS,
    *,
    layout_version: str = "v1",
    class_order=None,
    dtype=np.float32,
) -> ModelWeights:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        w = rng.standard_normal((fan_out, fan_in), dtype=np.float64 if dtype == np.float64 else np.float32)
        params[f"W{i}"] = (w * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
    if class_order is None:
        class_order = CLASS_ORDER if dims[-1] == len(CLASS_ORDER) else tuple(f"c{k}" for k in range(dims[-1]))
    return ModelWeights(**params, layout_version=layout_version, class_order=tuple(class_order))


def sigmoid(z):
    # split on sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardTrace:
    weights: ModelWeights
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    probs: np.ndarray
    m1: np.ndarray | None = None
    m2: np.ndarray | None = None
    train: bool = field(default=False)


def _as_batch(x, w: ModelWeights) -> np.ndarray:
    x = np.asarray(x, dtype=w.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != w.dims[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match model input {w.dims[0]}")
    return x


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype.type(keep)


def forward(x, w: ModelWeights, train: bool = False, dropout_seed=None, dropout: float = DROPOUT):
    """Class probabilities for a batch, plus the trace needed by ``backward``.

    In training mode inverted dropout is applied after each hidden
    activation, so evaluation needs no rescaling.
    """
    x = _as_batch(x, w)
    z1 = x @ w.W1.T + w.b1
    a1 = np.maximum(z1, 0)
    m1 = m2 = None
    if train:
        if dropout_seed is None:
            raise ValueError("training mode needs a dropout_seed")
        rng = np.random.default_rng(dropout_seed)
        m1 = _dropout_mask(rng, a1.shape, dropout, w.dtype)
        a1 = a1 * m1
    z2 = a1 @ w.W2.T + w.b2
    a2 = np.maximum(z2, 0)
    if train:
        m2 = _dropout_mask(rng, a2.shape, dropout, w.dtype)
        a2 = a2 * m2
    z3 = a2 @ w.W3.T + w.b3
    probs = sigmoid(z3)
    return probs, ForwardTrace(w, x, z1, a1, z2, a2, z3, probs, m1, m2, train)


def predict_proba(x, w: ModelWeights, batch_size: int = 1024) -> np.ndarray:
    x = _as_batch(x, w)
    out = [forward(x[i : i + batch_size], w)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, w.dims[3]), dtype=w.dtype)


def embed(x, w: ModelWeights) -> np.ndarray:
    """Post-ReLU activations of the second hidden layer (no dropout)."""
    single = np.ndim(x) == 1
    x = _as_batch(x, w)
    h1 = np.maximum(x @ w.W1.T + w.b1, 0)
    h2 = np.maximum(h1 @ w.W2.T + w.b2, 0)
    return h2[0] if single else h2


def backward_logits(trace: ForwardTrace, grad_logits) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradient with respect to the output logits."""
    w = trace.weights
    g3 = np.asarray(grad_logits, dtype=trace.z3.dtype)
    if g3.shape != trace.z3.shape:
        raise ShapeError(f"gradient shape {g3.shape} does not match batch output {trace.z3.shape}")
    grads = {"W3": g3.T @ trace.a2, "b3": g3.sum(axis=0)}
    g2 = g3 @ w.W3
    if trace.m2 is not None:
        g2 = g2 * trace.m2
    g2 = g2 * (trace.z2 > 0)
    grads["W2"] = g2.T @ trace.a1
    grads["b2"] = g2.sum(axis=0)
    g1 = g2 @ w.W2
    if trace.m1 is not None:
        g1 = g1 * trace.m1
    g1 = g1 * (trace.z1 > 0)
    grads["W1"] = g1.T @ trace.x
    grads["b1"] = g1.sum(axis=0)
    return {n: grads[n] for n in PARAM_NAMES}


def backward(trace: ForwardTrace, grad_out) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradient with respect to the probabilities."""
    grad_out = np.asarray(grad_out, dtype=trace.probs.dtype)
    if grad_out.shape != trace.probs.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} does not match batch output {trace.probs.shape}")
    p = trace.probs
    return backward_logits(trace, grad_out * p * (1 - p))


# --- serialization ------------------------------------------------------------

MAGIC = b"SVWEIGHT"
FORMAT_VERSION = 1
_CHECKSUM_LEN = 32


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _serialize_body(w: ModelWeights) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(_pack_str(w.layout_version))
    buf.write(struct.pack("<H", len(w.class_order)))
    for name in w.class_order:
        buf.write(_pack_str(name))
    buf.write(struct.pack("<I", 3))
    buf.write(struct.pack("<4I", *w.dims))
    if w.priors is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(np.asarray(w.priors, dtype="<f8").tobytes())
    for name in PARAM_NAMES:
        buf.write(np.ascontiguousarray(getattr(w, name), dtype="<f4").tobytes())
    return buf.getvalue()


def save_weights(w: ModelWeights, path) -> str:
    """Write the weight file; returns its SHA-256 checksum (hex)."""
    body = _serialize_body(w)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("weight file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_weights(path, expected_layout: str | None = None) -> ModelWeights:
    """Read a weight file written by ``save_weights``.

    Raises ``CorruptionError`` on a bad checksum or truncation and
    ``CompatibilityError`` when ``expected_layout`` is given and differs.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _CHECKSUM_LEN or not data.startswith(MAGIC):
        raise CorruptionError(f"{path}: not a weight file or truncated")
    body, digest = data[:-_CHECKSUM_LEN], data[-_CHECKSUM_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (fmt,) = r.unpack("<I")
    if fmt != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: weight format {fmt} not supported")
    layout_version = r.string()
    (n_classes,) = r.unpack("<H")
    class_order = tuple(r.string() for _ in range(n_classes))
    (n_layers,) = r.unpack("<I")
    if n_layers != 3:
        raise CompatibilityError(f"{path}: {n_layers} layers, expected 3")
    dims = r.unpack("<4I")
    priors = None
    if r.take(1) == b"\x01":
        priors = np.frombuffer(r.take(8 * dims[3]), dtype="<f8").astype(np.float64)
    shapes = {
        "W1": (dims[1], dims[0]), "b1": (dims[1],), "W2": (dims[2], dims[1]),
        "b2": (dims[2],), "W3": (dims[3], dims[2]), "b3": (dims[3],),
    }
    params = {}
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shapes[name])
    if r.pos != len(body):
        raise CorruptionError(f"{path}: trailing bytes after parameters")
    if expected_layout is not None and layout_version != expected_layout:
        raise CompatibilityError(f"model layout {layout_version!r} does not match runtime layout {expected_layout!r}")
    w = ModelWeights(**params, layout_version=layout_version, class_order=class_order, priors=priors)
    if not all(np.all(np.isfinite(p)) for p in params.values()):
        raise CorruptionError(f"{path}: non-finite parameters")
    return w
