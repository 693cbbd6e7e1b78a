"""Minimal reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps a float array together with an optional gradient buffer
and, for results of tracked operations, the parent tensors plus a
vector-Jacobian closure. ``backward()`` walks the implicit graph once in
reverse topological order and accumulates gradients on every tensor with
``requires_grad`` set.

Only the primitives needed by the training losses are provided. Binary
ops require equal shapes; the single broadcasting exception is a
one-element (scalar) tensor or a plain Python number on either side.
"""

from __future__ import annotations

import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataFormatError, DimensionError

_DEFAULT_DTYPE = np.float32
_NODE_IDS = itertools.count()

CHECKPOINT_MAGIC = b"TCKP"
CHECKPOINT_VERSION = 1


def set_default_dtype(dtype) -> None:
    """Switch the compute dtype (float32 for training, float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported compute dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        # maps the upstream gradient to one gradient per parent (None = no flow)
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.node_id = next(_NODE_IDS)
        out.op = op
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tracked tensor."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = grads.get(id(parent))
                # out-of-place add: vjp outputs may alias the upstream gradient
                grads[id(parent)] = pg if held is None else held + pg

    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        return div(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=self.data.dtype)

        def vjp(g, idx=idx, shape=self.shape, dtype=self.data.dtype):
            full = np.zeros(shape, dtype=dtype)
            full[idx] += g
            return (full,)

        return Tensor._from_op(data, (self,), vjp, "getitem")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape).astype(g.dtype, copy=False)


# ----------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), vjp, "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return Tensor._from_op(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return Tensor._from_op(ad / bd, (a, b), vjp, "div")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)

    def vjp(g):
        return (np.full(a.shape, g.reshape(()), dtype=a.data.dtype),)

    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), vjp, "sum")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was not clipped."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


# ----------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])  # split form never exponentiates a positive value
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ----------------------------------------------------------------------
# reductions and selections


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences; subgradient uses sign with sign(0) = 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    s = np.sign(d)

    def vjp(g):
        gs = g.reshape(()) * s
        return gs, -gs

    return Tensor._from_op(np.asarray(np.abs(d).sum(), dtype=d.dtype), (a, b), vjp, "l1")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "maximum")
    take_a = a.data >= b.data

    def vjp(g):
        return _reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)

    return Tensor._from_op(np.where(take_a, a.data, b.data), (a, b), vjp, "maximum")


def reduce_max(a: Tensor) -> Tensor:
    """Max over all elements; the gradient is routed to the first argmax in row-major order."""
    a = _as_tensor(a)
    flat_idx = int(np.argmax(a.data))

    def vjp(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full.flat[flat_idx] = g.reshape(())
        return (full,)

    return Tensor._from_op(np.asarray(a.data.max(), dtype=a.data.dtype), (a,), vjp, "reduce_max")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for k in range(len(tensors)):
            slicer[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, vjp, "concat")


# ----------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation of an NCHW input with an OIKK kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise DimensionError(f"conv2d: input has {c} channels but kernel expects {i}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ContractError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}"
        )

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.data.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = np.matmul(kmat, cols2).reshape(n, o, ho, wo)

    def vjp(g):
        g2 = g.reshape(n, o, ho * wo)
        gk = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(kmat.T, g2).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += gcols[:, :, a, b]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return Tensor._from_op(out, (x, kernel), vjp, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims of an NCHW tensor, giving NC."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype, copy=False).copy(),)

    return Tensor._from_op(out, (x,), vjp, "gap")


# ----------------------------------------------------------------------
# parameter checkpoints
#
# Layout: magic "TCKP", version u32, count u32, then per tensor
# (name length u16, name bytes, rank u8, dims u32..., raw little-endian f32).


def save_checkpoint(path, params: dict) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    def read(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise DataFormatError(f"checkpoint truncated while reading {what}")
        return buf

    with open(path, "rb") as f:
        if read(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a parameter checkpoint (bad magic)")
        version, count = struct.unpack("<II", read(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read(f, 2, "name length"))
            name = read(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", read(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", read(f, 4 * rank, "dims"))
            nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
            data = np.frombuffer(read(f, nbytes, f"data for {name}"), dtype="<f4").reshape(dims)
            params[name] = data.astype(_DEFAULT_DTYPE)
    return params
