"""Minimal reverse-mode autodiff over 2-D float64 arrays.

Every tensor is rank 2 (vectors are ``(1, n)`` or ``(n, 1)``, scalars ``(1, 1)``).
Each op records its parents and a closure that maps the upstream gradient to
one gradient per parent; :func:`backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .errors import (
    CheckpointFormatError,
    GraphCycle,
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
)

BCE_CLIP = 1e-7


class Tensor:
    __slots__ = ("value", "parents", "grad_fn", "name")

    def __init__(self, value, parents=(), grad_fn=None, name=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeMismatch(f"tensors are at most rank 2, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"non-finite value produced by {name or 'op'}")
        self.value = arr
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NonScalarLoss(f"tensor of shape {self.shape} is not a scalar")
        return float(self.value[0, 0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), name=name)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), grad_fn, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; either operand may be a row ``(1, m)``, column ``(n, 1)`` or scalar."""
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.value + b.value, (a, b), grad_fn, "add")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def grad_fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Tensor(av * bv, (a, b), grad_fn, "mul")


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,), "scale")


def transpose(a) -> Tensor:
    a = _t(a)
    return Tensor(a.value.T, (a,), lambda g: (g.T,), "transpose")


def relu(a) -> Tensor:
    a = _t(a)
    # subgradient 0 at exactly 0
    on = a.value > 0
    return Tensor(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,), "relu")


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = expit(a.value)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def row_softmax(a) -> Tensor:
    a = _t(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor(out, (a,), grad_fn, "row_softmax")


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    a = _t(a)
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _t(a)
    shape = a.shape
    return Tensor(a.value.sum(), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(a) -> Tensor:
    a = _t(a)
    shape = a.shape
    n = a.value.size
    return Tensor(a.value.mean(), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets ``y``.

    ``p`` is clipped to ``[1e-7, 1 - 1e-7]``; the gradient is zero where the
    clip is active.
    """
    p = _t(p)
    yv = np.asarray(y, dtype=np.float64)
    if yv.size != p.value.size:
        raise ShapeMismatch(f"bce_loss: {yv.size} targets for probabilities of shape {p.shape}")
    yv = yv.reshape(p.shape)
    pc = np.clip(p.value, BCE_CLIP, 1.0 - BCE_CLIP)
    inside = (p.value >= BCE_CLIP) & (p.value <= 1.0 - BCE_CLIP)
    n = p.value.size
    loss = -(yv * np.log(pc) + (1.0 - yv) * np.log1p(-pc)).mean()

    def grad_fn(g):
        dp = (-yv / pc + (1.0 - yv) / (1.0 - pc)) / n
        return (g[0, 0] * dp * inside,)

    return Tensor(loss, (p,), grad_fn, "bce_loss")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphCycle(f"cycle through {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node.parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphCycle(f"cycle through {parent!r}")
            if pmark is None:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each tensor in ``params``.

    Parameters that the loss does not depend on get an all-zero gradient.
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        name: grads.get(id(t), np.zeros_like(t.value)).copy() for name, t in params.items()
    }


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState):
    """One Adam update with coupled L2 decay (``g += weight_decay * theta``), in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ShapeMismatch(f"adam: grad {g.shape} vs param {p.value.shape} for {name}")
        g = g + state.weight_decay * p.value if state.weight_decay else g.copy()
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            v = state.v[name] = np.zeros_like(p.value)
        else:
            v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        g *= g
        v *= b2
        v += (1.0 - b2) * g
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.value = p.value - (state.lr / c1) * m / denom
    return params, state


# ---------------------------------------------------------------------------
# finite differences


def _central(fn, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    hi = fn()
    flat[i] = orig - h
    lo = fn()
    flat[i] = orig
    return (hi - lo) / (2.0 * h)


def central_difference(fn, flat: np.ndarray, i: int, eps: float, richardson: int = 0) -> float:
    """Central difference of ``fn`` along entry ``i`` of ``flat`` (mutated and restored).

    With ``richardson > 0`` the step is halved that many times and the
    estimates are combined by Richardson extrapolation, cancelling the
    h^2, h^4, ... error terms. The largest step used is ``eps``.
    """
    table = [_central(fn, flat, i, eps / 2**j) for j in range(richardson + 1)]
    for level in range(1, richardson + 1):
        f = 4.0**level
        table = [(f * table[j + 1] - table[j]) / (f - 1.0) for j in range(len(table) - 1)]
    return table[0]


def finite_diff_check(
    fn: Callable[[], float],
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    richardson: int = 0,
) -> dict[str, float]:
    """Compare ``grads`` with central differences of ``fn`` entry by entry.

    ``fn`` re-evaluates the scalar objective from the current parameter
    values. Each parameter entry is nudged in place and restored afterwards.
    Returns, per parameter, the worst relative error
    ``|a - b| / max(|a|, |b|, 1e-12)``.

    The objective must be smooth within ``eps`` of the current point; callers
    keep relu pre-activations further than ``10 * eps`` from zero.
    """
    worst: dict[str, float] = {}
    for name, p in params.items():
        analytic = np.asarray(grads[name]).reshape(-1)
        flat = p.value.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            numeric = central_difference(fn, flat, i, eps, richardson)
            a = analytic[i]
            err = max(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-12))
        worst[name] = err
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"DBCP"
CKPT_VERSION = 1


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Little-endian: magic, version u32, count u32, then per tensor
    name_len u32, utf-8 name, ndim u32, dims u32..., float64 values (row-major)."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError("checkpoint truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = math.prod(shape)
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None):
    from pathlib import Path

    path = Path(path)
    path.write_bytes(encode_checkpoint(tensors))
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    from pathlib import Path

    path = Path(path)
    tensors = decode_checkpoint(path.read_bytes())
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return tensors, meta
