"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable component in the package is built from the primitives here.
Broadcasting is deliberately absent: binary ops require equal shapes or a
python scalar, and row-wise bias addition is its own op (``add_bias``).
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

TENSOR_MAGIC = b"NAMT"


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable-by-convention float64 array that may record its history.

    ``data`` is a numpy array (row-major); ``requires_grad`` marks leaves and
    every value derived from them. Optimizers replace ``data`` of parameter
    leaves between steps, never inside a recorded computation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a forward value and its vector-Jacobian product as a graph node.

    ``vjp(g)`` must return one array (or None) per parent, shaped like it.
    """
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return custom_op(a.data + b, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        return custom_op(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return custom_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return custom_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,), "exp")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return custom_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    return custom_op(v * v, (x,), lambda g: (2.0 * g * v,), "square")


# --- reductions ------------------------------------------------------------


def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return custom_op(np.asarray(out, dtype=np.float64), (x,), vjp, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def mse(a, b) -> Tensor:
    """Mean squared difference over all entries."""
    return mean(square(sub(a, b)))


def l1(a, b) -> Tensor:
    return mean(abs_(sub(a, b)))


# --- linear algebra / structure ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    return custom_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add_bias(x, b) -> Tensor:
    """Add a length-D vector to every row of an (..., D) tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return custom_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected rank 2, got {x.shape}")
    return custom_op(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return custom_op(out.copy(), (x,), lambda g: (g.reshape(old),), "reshape")


def index(x, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    x = as_tensor(x)
    shape = x.shape

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in keys)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return custom_op(np.array(x.data[key], dtype=np.float64), (x,), vjp, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: empty input")
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != ax)
        ref = tuple(s for i, s in enumerate(ts[0].shape) if i != ax)
        if t.data.ndim != ts[0].data.ndim or other != ref:
            raise DimensionError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return custom_op(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, splits, axis=ax)),
        "concat",
    )


def tile_rows(v, n: int) -> Tensor:
    """Repeat a length-D vector into an (n, D) matrix."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError(f"tile_rows: expected rank 1, got {v.shape}")
    return custom_op(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),), "tile_rows")


def conv1d(x, w, bias=None) -> Tensor:
    """'Same'-padded 1-D convolution along time.

    x: (T, C_in); w: (K, C_in, C_out); bias: (C_out,) or None.
    Output frame t sees input frames t - (K-1)//2 ... t + K//2 (zero padded).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d: shape mismatch {x.shape} vs {w.shape}")
    T, cin = x.shape
    K, _, cout = w.shape
    left = (K - 1) // 2
    xp = np.zeros((T + K - 1, cin))
    xp[left : left + T] = x.data
    cols = np.concatenate([xp[k : k + T] for k in range(K)], axis=1)
    wmat = w.data.reshape(K * cin, cout)
    out = cols @ wmat

    def vjp(g):
        gw = (cols.T @ g).reshape(K, cin, cout)
        gcols = g @ wmat.T
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[k : k + T] += gcols[:, k * cin : (k + 1) * cin]
        return (gxp[left : left + T], gw)

    y = custom_op(out, (x, w), vjp, "conv1d")
    return y if bias is None else add_bias(y, bias)


# --- normalisation ------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return custom_op(p, (x,), vjp, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (x,), vjp, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale by gamma and shift by beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    axes = tuple(range(x.data.ndim - 1))

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return custom_op(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "layer_norm")


# --- tape & backward ----------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops that produced ``loss``."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) back to every leaf that requires grad.

    Leaf ``.grad`` fields are overwritten; the same mapping is returned.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape or Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return leaves


def grad_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    backward(fn(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += epsilon
        xm[i] -= epsilon
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * epsilon)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


# --- optimisers -------------------------------------------------------------


class SGD:
    """Gradient descent with classical momentum."""

    def __init__(self, params: Iterable[Tensor], lr: float = 2e-4, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self._vel[i] = self.momentum * self._vel[i] + g
            p.data = p.data - self.lr * self._vel[i]


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self._m[i] = self.b1 * self._m[i] + (1 - self.b1) * g
            self._v[i] = self.b2 * self._v[i] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)


def make_optimizer(name: str, params: Iterable[Tensor], lr: float):
    if name == "sgd":
        return SGD(params, lr=lr)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ContractError(f"unknown optimizer {name!r}")


# --- serialisation ------------------------------------------------------------


def write_tensor(fh: BinaryIO, arr) -> None:
    # np.array (not ascontiguousarray, which promotes 0-d to 1-d)
    a = np.array(arr, dtype="<f8", order="C")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    n = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


# --- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"NAMCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned container: magic, version byte, JSON metadata, NAMT blocks."""
    meta = dict(meta, tensors=list(tensors))
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes([CKPT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in tensors:
            write_tensor(fh, tensors[name])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version = fh.read(1)[0]
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n))
        tensors = {name: read_tensor(fh) for name in meta["tensors"]}
    return tensors, meta
