"""Dense float64 tensors with a reverse-mode gradient tape and an Adam optimizer.

Everything above this module (layers, branches, training) is built from the
operations defined here plus custom ops registered through :func:`custom_op`.
Storage is always row-major float64; any non-finite value raised by an
operation is an error, never silently propagated.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where the contract forbids it."""


def _ensure_finite(ctx: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {ctx}")


class Tensor:
    """An n-dimensional float64 array, optionally tracked for autodiff.

    `grad` is populated by :func:`backward` for tensors with
    `requires_grad=True`; gradients accumulate (sum over paths and over
    repeated backward calls) until `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _ensure_finite("Tensor()", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path: data already validated by the calling op
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.zeros(shape), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# gradient tape

# rule(d_out) -> gradients aligned with the op's inputs (None = no gradient)
BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of operations for one forward pass.

    Ops append as they execute, so the list is topologically ordered by
    construction; :func:`backward` walks it once in reverse.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], BackwardRule]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._ops)


def custom_op(
    name: str,
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    rule: BackwardRule,
) -> Tensor:
    """Wrap a numpy result as a Tensor and register its backward rule.

    This is how composite layers (convolution, pooling, batch norm, ...)
    attach analytic gradients to the tape without being expressed in scalar
    primitives.
    """
    _ensure_finite(name, out_data)
    out = Tensor._wrap(out_data, any(i.requires_grad for i in inputs))
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._ops.append((out, inputs, rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate `grad` on every requires_grad tensor reachable from `loss`.

    The loss must be a scalar produced on (or fed to) the given tape. Each
    recorded op is visited exactly once, in reverse execution order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, rule in reversed(tape._ops):
        d_out = grads.pop(id(out), None)
        leaves.pop(id(out), None)
        if d_out is None:
            continue
        for inp, d in zip(inputs, rule(d_out)):
            if d is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + d
            else:
                grads[key] = d
                leaves[key] = inp
    for key, t in leaves.items():
        if not t.requires_grad:
            continue
        g = grads[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitive operations


def _binary_check(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors [m,k] @ [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")

    def rule(d):
        return d @ b.data.T, a.data.T @ d

    return custom_op("matmul", a.data @ b.data, (a, b), rule)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for weight stored as [out, in]; avoids materializing transposes."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: shapes {x.shape} and {w.shape} incompatible")

    def rule(d):
        return d @ w.data, d.T @ x.data

    return custom_op("linear", x.data @ w.data.T, (x, w), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("add", a, b)
    return custom_op("add", a.data + b.data, (a, b), lambda d: (d, d))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("sub", a, b)
    return custom_op("sub", a.data - b.data, (a, b), lambda d: (d, -d))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("mul", a, b)
    return custom_op("mul", a.data * b.data, (a, b), lambda d: (d * b.data, d * a.data))


def neg(x: Tensor) -> Tensor:
    return custom_op("neg", -x.data, (x,), lambda d: (-d,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return custom_op("sigmoid", y, (x,), lambda d: (d * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op("tanh", y, (x,), lambda d: (d * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op("relu", np.where(mask, x.data, 0.0), (x,), lambda d: (d * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return custom_op("exp", y, (x,), lambda d: (d * y,))


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    return custom_op("abs", np.abs(x.data), (x,), lambda d: (d * np.sign(x.data),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "abs": absolute,
    "neg": neg,
}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch a pointwise op by name; binary ops require equal shapes."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a 1-D bias over the leading (batch/time) axes of x.

    The only broadcasting this library performs.
    """
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    axes = tuple(range(x.data.ndim - 1))

    def rule(d):
        return d, d.sum(axis=axes)

    return custom_op("add_bias", x.data + b.data, (x, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op("scale", x.data * c, (x,), lambda d: (d * c,))


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())
    return custom_op("sum_all", out, (x,), lambda d: (np.broadcast_to(d, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.array(x.data.mean())
    return custom_op("mean_all", out, (x,), lambda d: (np.broadcast_to(d / n, x.shape),))


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""

    def rule(d):
        return (np.broadcast_to(d[..., None], x.shape),)

    return custom_op("sum_last", x.data.sum(axis=-1), (x,), rule)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def rule(d):
        return tuple(np.split(d, splits, axis=axis))

    return custom_op("concat", np.concatenate([t.data for t in xs], axis=axis), tuple(xs), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def rule(d):
        return (np.ascontiguousarray(d.transpose(inv)),)

    return custom_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def rule(d):
        return (d.reshape(x.shape),)

    return custom_op("reshape", x.data.reshape(shape), (x,), rule)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment gradient descent with bias correction.

    Holds first/second moment accumulators per parameter; `step_count`
    increases by one per update.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {name!r}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


# ---------------------------------------------------------------------------
# weight checkpoints

_CKPT_MAGIC = b"ACTSEG01"


def save_checkpoint(path, tensors: Mapping[str, "Tensor | np.ndarray"], meta: dict | None = None) -> None:
    """Write named float64 arrays: a JSON manifest of (name, shape, byte
    offset) followed by raw little-endian payload. Round-trips bit-exactly."""
    entries = []
    payload = bytearray()
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    header = json.dumps({"meta": meta or {}, "entries": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_checkpoint: returns ({name: array}, meta)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    out: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(shape)
        out[entry["name"]] = arr.astype(np.float64).copy()
    return out, header["meta"]
