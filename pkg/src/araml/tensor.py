"""Reverse-mode automatic differentiation over dense float64 arrays.

A forward pass runs inside a :class:`Tape` context; every differentiable
operation appends a pull-back record, so the record order is already
topological and :func:`backward` just walks it in reverse.  All values are
float64 and every op output is checked for non-finite entries.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError, InputError, NumericError, ShapeError

_TAPE_STACK: list["Tape | None"] = []


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def log(self) -> "Tensor":
        return log(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tensor_mean(self, axis)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, pull) -> None:
        self._records.append(pull)


class no_grad:
    """Context manager that disables recording (values still computed)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"op '{op}' produced non-finite values")


def _node(op: str, out_data: np.ndarray, parents, grad_fns) -> Tensor:
    """Wrap a forward result, recording pull-backs on the active tape."""
    _check_finite(op, out_data)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:

        def pull():
            if out.grad is None:
                return
            g = out.grad
            for parent, fn in zip(parents, grad_fns):
                if parent.requires_grad and fn is not None:
                    parent._accumulate(fn(g))

        tape.record(pull)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"op '{op}': shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("add", a, b)
    return _node(
        "add",
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("elementwise-multiply", a, b)
    return _node(
        "elementwise-multiply",
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {a.shape} and {b.shape} not conformable")
    return _node(
        "matmul",
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node("scalar-multiply", a.data * c, (a,), (lambda g: g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node("log", out, (a,), (lambda g: g / a.data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node("softmax", out, (a,), (grad,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Fused log(softmax(x)); stable for large logit gaps."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _node("log-softmax", out, (a,), (grad,))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding-lookup ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(
            f"embedding-lookup id out of range for table of {table.shape[0]} rows"
        )

    def grad(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return acc

    return _node("embedding-lookup", table.data[ids], (table,), (grad,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"op 'concat': shapes {[t.shape for t in tensors]} not conformable"
        )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        def grad(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(index)]

        return grad

    return _node("concat", out, tuple(tensors), tuple(make_grad(i) for i in range(len(tensors))))


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _node("sum", out, (a,), (grad,))


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / count

    return _node("mean", out, (a,), (grad,))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"op 'gather-rows': got {a.shape} with index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise InputError("gather-rows index out of range")
    rows = np.arange(a.shape[0])

    def grad(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, idx), g)
        return acc

    return _node("gather-rows", a.data[rows, idx], (a,), (grad,))


_OP_TABLE = {
    "matmul": lambda inputs, kw: matmul(*inputs),
    "add": lambda inputs, kw: add(*inputs),
    "elementwise-multiply": lambda inputs, kw: multiply(*inputs),
    "sigmoid": lambda inputs, kw: sigmoid(*inputs),
    "tanh": lambda inputs, kw: tanh(*inputs),
    "softmax": lambda inputs, kw: softmax(*inputs, **kw),
    "log": lambda inputs, kw: log(*inputs),
    "log-softmax": lambda inputs, kw: log_softmax(*inputs, **kw),
    "embedding-lookup": lambda inputs, kw: embedding_lookup(inputs[0], kw["ids"]),
    "concat": lambda inputs, kw: concat(inputs, **kw),
    "sum": lambda inputs, kw: tensor_sum(*inputs, **kw),
    "mean": lambda inputs, kw: tensor_mean(*inputs, **kw),
    "scalar-multiply": lambda inputs, kw: scalar_multiply(inputs[0], kw["scalar"]),
    "gather-rows": lambda inputs, kw: gather_rows(inputs[0], kw["ids"]),
}


def forward_op(op_kind: str, inputs, **kwargs) -> Tensor:
    """Generic dispatch over the supported op kinds."""
    try:
        fn = _OP_TABLE[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}")
    return fn(list(inputs), kwargs)


def backward(tape: Tape, root: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar-shaped root."""
    if root.size != 1:
        raise ContractError(f"backward root must be scalar-shaped, got {root.shape}")
    root.grad = np.ones_like(root.data)
    for pull in reversed(tape._records):
        pull()


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None


def sgd_adam_step(params, learning_rate: float, state: AdamState) -> None:
    """One Adam update over `params`; clips at global norm, clears gradients."""
    params = list(params)
    if learning_rate <= 0:
        raise ContractError("learning rate must be positive")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p!r} has no gradient")
    if state._m is None:
        state._m = [np.zeros_like(p.data) for p in params]
        state._v = [np.zeros_like(p.data) for p in params]

    grads = [p.grad for p in params]
    if state.clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if total > state.clip_norm:
            scale = state.clip_norm / total
            grads = [g * scale for g in grads]

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state._m, state._v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        _check_finite("adam-step", p.data)
        p.grad = None


class Adam:
    """Convenience wrapper binding parameters, a learning rate and state."""

    def __init__(self, params, learning_rate: float, **kwargs):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.state = AdamState(**kwargs)

    def step(self) -> None:
        sgd_adam_step(self.params, self.learning_rate, self.state)


_CKPT_MAGIC = b"SEQCKPT1"


def save_checkpoint(path, params: dict, metadata: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata block.

    The byte layout is fully determined by the contents, so
    save -> load -> save reproduces the file exactly.
    """
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        names = sorted(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = params[name]
            data = np.ascontiguousarray(
                arr.data if isinstance(arr, Tensor) else arr, dtype=np.float64
            )
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise InputError(f"{path} is not a checkpoint file")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        metadata = json.loads(fh.read(meta_len).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8").reshape(shape)
            params[name] = data.astype(np.float64)
    return params, metadata
