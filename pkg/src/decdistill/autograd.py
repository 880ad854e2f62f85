"""Reverse-mode differentiation over dense numpy arrays.

A `DiffArray` wraps an ndarray together with a gradient accumulator and the
closure that pushes its gradient back to the arrays it was computed from.
Arrays that do not require gradients never record history, so anything
built purely from constants (e.g. a frozen teacher forward pass) costs no
more than plain numpy.
"""

from __future__ import annotations

import io
import struct
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np

__all__ = [
    "DiffArray",
    "ParamStore",
    "as_array",
    "constant",
    "backward",
    "finite_diff_grad",
    "matmul",
    "add",
    "sub",
    "multiply",
    "divide",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "abs_",
    "clip",
    "softmax",
    "layer_norm",
    "concatenate",
    "gather",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "max_",
    "mse",
]


class DiffArray:
    """Dense array with a gradient slot and recorded producer."""

    __slots__ = ("values", "_grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(values)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(values, dtype=dtype)
        self.values: np.ndarray = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=self.values.dtype)
        if value.shape != self.values.shape:
            raise ValueError(f"grad shape {value.shape} != values shape {self.values.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> DiffArray:
        return DiffArray(self.values)

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.values)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_array(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    if dtype is None:
        return DiffArray(x)
    return DiffArray(x, dtype=dtype)


def constant(x, dtype=None) -> DiffArray:
    """Wrap values as a graph constant (no gradient, no history)."""
    if isinstance(x, DiffArray):
        return DiffArray(x.values)
    return as_array(x, dtype)


def _coerce(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    if like is not None and np.isscalar(x):
        return DiffArray(np.asarray(x, dtype=like.dtype))
    return DiffArray(x)


def _make(values: np.ndarray, parents: tuple[DiffArray, ...], backward_fn, op: str) -> DiffArray:
    out = DiffArray(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> DiffArray:
    a, b = _coerce(a, b if isinstance(b, DiffArray) else None), _coerce(b, a if isinstance(a, DiffArray) else None)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> DiffArray:
    a, b = _coerce(a, b if isinstance(b, DiffArray) else None), _coerce(b, a if isinstance(a, DiffArray) else None)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def multiply(a, b) -> DiffArray:
    a, b = _coerce(a, b if isinstance(b, DiffArray) else None), _coerce(b, a if isinstance(a, DiffArray) else None)
    av, bv = a.values, b.values

    def bw(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _make(av * bv, (a, b), bw, "mul")


def divide(a, b) -> DiffArray:
    a, b = _coerce(a, b if isinstance(b, DiffArray) else None), _coerce(b, a if isinstance(a, DiffArray) else None)
    av, bv = a.values, b.values
    out = av / bv

    def bw(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def neg(a) -> DiffArray:
    a = _coerce(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> DiffArray:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make(av @ bv, (a, b), bw, "matmul")


# -- elementwise unary -----------------------------------------------------
def exp(a) -> DiffArray:
    a = _coerce(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffArray:
    a = _coerce(a)
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sigmoid(a) -> DiffArray:
    a = _coerce(a)
    av = a.values
    # split on sign to avoid overflow in exp
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> DiffArray:
    a = _coerce(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def abs_(a) -> DiffArray:
    a = _coerce(a)
    sign = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: (g * sign,), "abs")


def clip(a, lo: float, hi: float) -> DiffArray:
    a = _coerce(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _make(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> DiffArray:
    """Max-shifted softmax; `mask` (True = allowed) zeroes forbidden entries exactly."""
    a = _coerce(a)
    av = a.values
    if not np.all(np.isfinite(av)):
        raise ValueError("softmax input contains non-finite values")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax mask has a fully masked row")
        shifted = np.where(mask, av, -np.inf)
    else:
        shifted = av
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.values
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -- structural --------------------------------------------------------------
def concatenate(arrays, axis: int = 0) -> DiffArray:
    arrays = tuple(_coerce(a) for a in arrays)
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([a.values for a in arrays], axis=axis), arrays, bw, "concat")


def gather(a, indices, axis: int = 0) -> DiffArray:
    """Select entries by integer index along `axis` (repeats allowed)."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis of size {n}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.values, idx, axis=axis), (a,), bw, "gather")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def _getitem(a: DiffArray, index) -> DiffArray:
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.values[index], (a,), bw, "getitem")


def reshape(a, shape) -> DiffArray:
    a = _coerce(a)
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> DiffArray:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# -- reductions ------------------------------------------------------------
def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _coerce(a)
    shape = a.shape
    return _make(
        np.asarray(a.values.sum(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _coerce(a)
    shape = a.shape
    out = np.asarray(a.values.mean(axis=axis, keepdims=keepdims))
    count = a.values.size // max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand(g, shape, axis, keepdims) / count,), "mean")


def max_(a, axis=None, keepdims: bool = False) -> DiffArray:
    """Maximum; the gradient is split evenly among tied maxima."""
    a = _coerce(a)
    av = a.values
    out = np.asarray(av.max(axis=axis, keepdims=keepdims))

    def bw(g):
        full = _expand(out, av.shape, axis, keepdims)
        hit = (av == full).astype(av.dtype)
        hit /= _expand(np.asarray(hit.sum(axis=axis, keepdims=keepdims)), av.shape, axis, keepdims)
        return (hit * _expand(g, av.shape, axis, keepdims),)

    return _make(out, (a,), bw, "max")


def mse(a, b) -> DiffArray:
    """Mean of squared elementwise differences."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    n = max(diff.size, 1)

    def bw(g):
        d = 2.0 * g * diff / n
        return d, -d

    return _make(np.asarray((diff * diff).sum() / n), (a, b), bw, "mse")


# -- backward ----------------------------------------------------------------
def _topo_order(root: DiffArray) -> list[DiffArray]:
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(x) into `x.grad` for every array `loss` depends on."""
    if not isinstance(loss, DiffArray) or loss.values.size != 1 or loss.ndim > 1:
        raise ValueError("backward() needs a scalar DiffArray")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if node._grad is None:
                node._grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node._grad = node._grad + g
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# -- parameters ----------------------------------------------------------------
_MAGIC = b"D3PS"
_VERSION = 1


class ParamStore(Mapping[str, DiffArray]):
    """Ordered name -> DiffArray map; insertion order is iteration order."""

    def __init__(self, items: Mapping[str, DiffArray] | None = None):
        self._items: dict[str, DiffArray] = {}
        if items:
            for k, v in items.items():
                self[k] = v

    def __getitem__(self, name: str) -> DiffArray:
        return self._items[name]

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(value, DiffArray):
            value = DiffArray(value, requires_grad=True)
        self._items[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, name: str, values, requires_grad: bool = True) -> DiffArray:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = DiffArray(values, requires_grad=requires_grad)
        self._items[name] = arr
        return arr

    def zero_grad(self) -> None:
        for p in self._items.values():
            p.zero_grad()

    def clone(self, requires_grad: bool = True, dtype=None) -> ParamStore:
        out = ParamStore()
        for k, v in self._items.items():
            vals = v.values.astype(dtype if dtype is not None else v.dtype, copy=True)
            out._items[k] = DiffArray(vals, requires_grad=requires_grad)
        return out

    def frozen(self) -> ParamStore:
        """Read-only view: same buffers, no gradient tracking."""
        out = ParamStore()
        for k, v in self._items.items():
            out._items[k] = DiffArray(v.values)
        return out

    def astype(self, dtype) -> ParamStore:
        return self.clone(requires_grad=True, dtype=dtype)

    def n_values(self) -> int:
        return sum(v.values.size for v in self._items.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self._items.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.values, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- serialisation ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<B", _VERSION))
        buf.write(struct.pack("<I", len(self._items)))
        for name, arr in self._items.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                buf.write(struct.pack("<Q", dim))
            buf.write(np.ascontiguousarray(arr.values, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> ParamStore:
        if data[:4] != _MAGIC:
            raise ValueError("not a parameter file (bad magic)")
        (version,) = struct.unpack_from("<B", data, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        (count,) = struct.unpack_from("<I", data, 5)
        pos = 9
        out = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            n = int(np.prod(dims, dtype=np.int64))
            vals = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
            out.add(name, vals)
        if pos != len(data):
            raise ValueError("trailing bytes in parameter file")
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> ParamStore:
        return cls.from_bytes(Path(path).read_bytes())


def finite_diff_grad(
    f: Callable[[ParamStore], float | DiffArray],
    params: ParamStore,
    h: float = 1e-5,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate of scalar `f` for each parameter."""

    def value() -> float:
        out = f(params)
        return out.item() if isinstance(out, DiffArray) else float(out)

    grads: dict[str, np.ndarray] = {}
    for name in names if names is not None else list(params):
        vals = params[name].values
        g = np.zeros(vals.shape, dtype=np.float64)
        flat = vals.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads
