"""Dense float64 tensors with reverse-mode autodiff, AdamW, a
finite-difference gradient checker, and the "VRW1" snapshot format.

Every differentiable operation returns a Tensor that remembers its parent
tensors and a closure mapping the output gradient back to parent
gradients.  backward() replays those closures once in reverse topological
order.  Leaf gradients accumulate across backward() calls until cleared,
so repeated passes sum their contributions.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, FormatError

Array = np.ndarray

_INV_SQRT2 = 1.0 / float(np.sqrt(2.0))
_INV_SQRT_2PI = 1.0 / float(np.sqrt(2.0 * np.pi))

# per-thread so concurrent inference cannot flip training threads
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that suspends tape recording (inference paths)."""

    def __enter__(self) -> "no_grad":
        self._previous = _grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        _grad_state.enabled = self._previous
        return False


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _record(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dx into .grad for every requires_grad ancestor.

    The loss must be a single element.  Propagation uses fresh per-call
    buffers, so calling backward() twice on the same graph adds a second
    full contribution to every gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g: Array):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g: Array):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g: Array):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(data, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as err:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from err

    def bwd(g: Array):
        ga = None
        gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(data, (a, b), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    original = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g: Array):
        pieces = np.split(g, cuts, axis=axis)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _record(data, parts, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bwd(g: Array):
        buf = np.zeros_like(x.data)
        buf[index] = g
        return (buf,)

    return _record(x.data[index], (x,), bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup into a 2-D table; gradient scatter-adds into the table."""
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D table, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    width = table.shape[1]

    def bwd(g: Array):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, width))
        return (buf,)

    return _record(table.data[ids], (table,), bwd)


def select_index(x: Tensor, indices) -> Tensor:
    """Pick x[b, indices[b]] for every leading index b."""
    indices = np.asarray(indices, dtype=np.int64)
    if x.ndim < 2 or indices.shape != (x.shape[0],):
        raise DimensionError(f"select_index: shapes {x.shape} and {indices.shape} are incompatible")
    rows = np.arange(x.shape[0])

    def bwd(g: Array):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (rows, indices), g)
        return (buf,)

    return _record(x.data[rows, indices], (x,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax; the max of each slice is subtracted first."""
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / np.sum(exps, axis=axis, keepdims=True)

    def bwd(g: Array):
        inner = np.sum(g * probs, axis=axis, keepdims=True)
        return (probs * (g - inner),)

    return _record(probs, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ContractError(f"layer_norm needs last-axis extent >= 2, got shape {x.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gamma.data * xhat + beta.data

    def bwd(g: Array):
        dgamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        dbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _record(data, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def bwd(g: Array):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record(data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    mask = x.data > floor
    return _record(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.ones_like(x.data) * g,))


def mean_all(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / x.size)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; rate 0 is the identity and draws nothing."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# relative-offset attention scores


def relative_scores(q: Tensor, k: Tensor, table: Tensor, clip: int) -> Tensor:
    """Self-attention scores with trainable relative-offset vectors.

    q and k have shape (batch, heads, length, head_dim).  The table holds
    one vector per clamped offset: (2*clip+1, head_dim) shared across
    heads, or (heads, 2*clip+1, head_dim) per head.  Entry (i, j) is
    (q_i . k_j + q_i . w[j-i] + k_j . w[j-i]) / sqrt(head_dim) with the
    offset clamped to [-clip, clip].
    """
    if q.ndim != 4 or q.shape != k.shape:
        raise DimensionError(f"relative_scores needs matching 4-D q/k, got {q.shape} and {k.shape}")
    if clip < 0:
        raise ContractError(f"relative_scores clip must be >= 0, got {clip}")
    span = 2 * clip + 1
    dz = q.shape[-1]
    per_head = table.ndim == 3
    expected = (q.shape[1], span, dz) if per_head else (span, dz)
    if table.shape != expected:
        raise DimensionError(f"relative offset table has shape {table.shape}, expected {expected}")
    length = q.shape[2]
    positions = np.arange(length)
    offsets = np.clip(positions[None, :] - positions[:, None], -clip, clip) + clip
    lookup = table.data[:, offsets] if per_head else table.data[offsets]
    norm = 1.0 / float(np.sqrt(dz))
    qk = q.data @ np.swapaxes(k.data, -1, -2)
    if per_head:
        qa = np.einsum("bhid,hijd->bhij", q.data, lookup)
        ka = np.einsum("bhjd,hijd->bhij", k.data, lookup)
    else:
        qa = np.einsum("bhid,ijd->bhij", q.data, lookup)
        ka = np.einsum("bhjd,ijd->bhij", k.data, lookup)
    data = (qk + qa + ka) * norm

    def bwd(g: Array):
        gs = g * norm
        dq = dk = dt = None
        if q.requires_grad:
            extra = (
                np.einsum("bhij,hijd->bhid", gs, lookup)
                if per_head
                else np.einsum("bhij,ijd->bhid", gs, lookup)
            )
            dq = gs @ k.data + extra
        if k.requires_grad:
            extra = (
                np.einsum("bhij,hijd->bhjd", gs, lookup)
                if per_head
                else np.einsum("bhij,ijd->bhjd", gs, lookup)
            )
            dk = np.swapaxes(gs, -1, -2) @ q.data + extra
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            if per_head:
                dA = np.einsum("bhij,bhid->hijd", gs, q.data) + np.einsum(
                    "bhij,bhjd->hijd", gs, k.data
                )
                for h in range(dA.shape[0]):
                    np.add.at(dt[h], offsets.reshape(-1), dA[h].reshape(-1, dz))
            else:
                dA = np.einsum("bhij,bhid->ijd", gs, q.data) + np.einsum(
                    "bhij,bhjd->ijd", gs, k.data
                )
                np.add.at(dt, offsets.reshape(-1), dA.reshape(-1, dz))
        return dq, dk, dt

    return _record(data, (q, k, table), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    f must be a zero-argument callable returning a scalar Tensor and a
    pure function of the params' current .data.  Each checked coordinate
    costs two extra evaluations of f.  The relative error is
    |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise ContractError(f"finite_diff_check step must be positive, got {h}")
    params = list(params)
    loss = f()
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise ContractError("finite_diff_check needs a finite scalar loss")
    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, reference in zip(params, analytic):
            flat = p.data.reshape(-1)
            ref = reference.reshape(-1)
            if max_coords_per_param is not None and flat.size > max_coords_per_param:
                if rng is None:
                    raise ContractError("sampled coordinate checking needs an rng")
                coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
            else:
                coords = range(flat.size)
            for idx in coords:
                original = flat[idx]
                flat[idx] = original + h
                up = float(f().data)
                flat[idx] = original - h
                down = float(f().data)
                flat[idx] = original
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise ContractError("finite_diff_check hit a non-finite evaluation")
                numeric = (up - down) / (2.0 * h)
                relative = abs(ref[idx] - numeric) / max(1.0, abs(numeric))
                if relative > worst:
                    worst = relative
    return worst


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    """First/second moments per parameter plus shared step settings."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> "AdamWState":
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ContractError(f"betas must lie in (0, 1), got {beta1} and {beta2}")
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise ContractError("lr and weight_decay must be >= 0 and eps > 0")
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Array | None],
    state: AdamWState,
) -> AdamWState:
    """One Adam update with decoupled weight decay; params mutate in place.

    Decay is applied as a separate p -= lr * wd * p after the moment
    update, so lr == 0 leaves parameters untouched regardless of decay.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adamw_step: {len(params)} params, {len(grads)} grads, state for {len(state.m)}"
        )
    state.step_count += 1
    correction1 = 1.0 - state.beta1**state.step_count
    correction2 = 1.0 - state.beta2**state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
    return state


# ---------------------------------------------------------------------------
# "VRW1" parameter snapshots
#
# Layout, all integers little-endian uint32:
#   magic "VRW1" | count | records
#   record: name_len | name utf-8 | rank | extents[rank] | values as <f8

SNAPSHOT_MAGIC = b"VRW1"


def save_parameters(path, named: Mapping[str, Tensor | Array]) -> None:
    """Write named arrays; the file appears atomically via rename."""
    blob = bytearray()
    blob += SNAPSHOT_MAGIC
    blob += struct.pack("<I", len(named))
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        if arr.ndim:
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}, needed {n} more")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_parameters(path) -> dict[str, Array]:
    """Read a snapshot back into name -> float64 array, in file order."""
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    reader = _Reader(raw, path)
    magic = reader.take(4)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
    count = reader.u32()
    out: dict[str, Array] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        extents = tuple(reader.u32() for _ in range(rank))
        n_values = int(np.prod(extents, dtype=np.int64)) if rank else 1
        payload = reader.take(8 * n_values)
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extents)
        out[name] = values
    if reader.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - reader.pos} trailing bytes after last record")
    return out
