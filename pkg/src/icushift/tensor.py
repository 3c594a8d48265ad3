"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a thread-confined tape: while a `Tape` is open, every
operation whose inputs require gradients appends a node (output, inputs,
backward closure) in execution order.  `backward` walks the tape in
reverse, which is a valid topological order by construction, and
accumulates gradients into the `.grad` buffer of leaf tensors.

Storage is always contiguous row-major float64.  Elementwise ops require
equal shapes; the only broadcasting allowed is tensor-with-python-scalar
(plus the dedicated `add_bias` for a row vector over a matrix).
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DomainError, InvalidRate, NotScalar, ShapeMismatch

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars are constants, not differentiable
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class TapeNode:
    """One executed op: output, inputs, and the closure producing input grads."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations, confined to one thread."""

    __slots__ = ("nodes", "_produced")

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def record(out: Tensor, inputs, backward_fn) -> Tensor:
    """Attach `out` to the active tape if any input participates in autodiff.

    `backward_fn(out_grad)` must return one gradient array (or None) per
    input, aligned with `inputs`.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(out, tuple(inputs), backward_fn))
        tape._produced.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate `.grad` on every requires_grad leaf reachable from `loss`.

    Repeated calls accumulate; clear grads between optimizer steps.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
    flows = {id(loss): np.ones_like(loss.data)}
    produced = tape._produced
    for node in reversed(tape.nodes):
        out_grad = flows.pop(id(node.out), None)
        if out_grad is None:
            continue
        input_grads = node.backward_fn(out_grad)
        for inp, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            key = id(inp)
            if key in produced:
                acc = flows.get(key)
                if acc is None:
                    flows[key] = g if g.flags["OWNDATA"] else g.copy()
                else:
                    acc += g
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


# --- shape helpers ---------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# --- linear ops --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(
            f"matmul needs 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bwd)


def _elementwise_pair(a, b, op: str):
    """Resolve (tensor, tensor) or (tensor, scalar) operands."""
    if isinstance(b, (int, float)):
        return _as_tensor(a), float(b)
    if isinstance(a, (int, float)):
        return _as_tensor(b), float(a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.size == 1 and a.data.ndim == 0:
        return b, a  # 0-d tensor treated as scalar tensor
    _check_same_shape(a, b, op)
    return a, b


def add(a, b) -> Tensor:
    if isinstance(a, (int, float)) or isinstance(b, (int, float)):
        t, c = _elementwise_pair(a, b, "add")
        out = Tensor(t.data + c)
        return record(out, (t,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        out = Tensor(a.data + b.data)

        def bwd0(g):
            ga = g if a.data.ndim else np.sum(g, keepdims=False).reshape(a.data.shape)
            gb = g if b.data.ndim else np.sum(g, keepdims=False).reshape(b.data.shape)
            return (ga if a.requires_grad else None, gb if b.requires_grad else None)

        return record(out, (a, b), bwd0)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        t = _as_tensor(a)
        out = Tensor(t.data - float(b))
        return record(out, (t,), lambda g: (g,))
    if isinstance(a, (int, float)):
        t = _as_tensor(b)
        out = Tensor(float(a) - t.data)
        return record(out, (t,), lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(_as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return scale(_as_tensor(b), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def add_bias(mat: Tensor, bias: Tensor) -> Tensor:
    """Row-vector bias over a 2-D matrix; the one sanctioned broadcast."""
    mat, bias = _as_tensor(mat), _as_tensor(bias)
    if mat.data.ndim != 2 or bias.data.ndim != 1 or mat.data.shape[1] != bias.data.shape[0]:
        raise ShapeMismatch(
            f"add_bias: matrix {mat.data.shape} with bias {bias.data.shape}"
        )
    out = Tensor(mat.data + bias.data)

    def bwd(g):
        return (
            g if mat.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return record(out, (mat, bias), bwd)


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeMismatch(
            f"concat_last_dim: leading dims differ, {a.data.shape} vs {b.data.shape}"
        )
    na = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))

    def bwd(g):
        return (
            np.ascontiguousarray(g[..., :na]) if a.requires_grad else None,
            np.ascontiguousarray(g[..., na:]) if b.requires_grad else None,
        )

    return record(out, (a, b), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeMismatch(f"slice_axis: axis {axis} out of range for {x.data.shape}")
    axis = axis % ndim
    if not 0 <= start <= stop <= x.data.shape[axis]:
        raise ShapeMismatch(
            f"slice_axis: [{start}:{stop}] out of bounds on axis {axis} of {x.data.shape}"
        )
    index = tuple(slice(None) if d != axis else slice(start, stop) for d in range(ndim))
    out = Tensor(np.ascontiguousarray(x.data[index]))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape
    return record(out, (x,), lambda g: (g.reshape(orig),))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data))
    return record(out, (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = Tensor(np.sum(x.data) / n)
    return record(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))


# --- activations -------------------------------------------------------------


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - np.finfo(np.float64).epsneg


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # tanh form is stable in both tails; clamped to stay strictly inside (0, 1)
    out = np.tanh(x * 0.5)
    out += 1.0
    out *= 0.5
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_values(x.data)
    out = Tensor(s)
    return record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    return record(out, (x,), lambda g: (g * (1.0 - t * t),))


def softmax_last_dim(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive entries")
    out = Tensor(np.log(x.data))
    return record(out, (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through unclamped entries."""
    x = _as_tensor(x)
    clipped = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(clipped)
    return record(out, (x,), lambda g: (g * inside,))


# --- stochastic regularization ------------------------------------------------


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    x = _as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)
    out = Tensor(x.data * factor)
    return record(out, (x,), lambda g: (g * factor,))
