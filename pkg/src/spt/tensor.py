"""Reverse-mode autodiff over dense float32 arrays, sized for desk-scale encoders.

A Tape records one node per primitive op: the op name, input tensor ids, the
output tensor id, and a backward closure over whatever forward values the
gradient needs. backward() sweeps the recorded nodes once in reverse and
returns a GradientSnapshot covering every requires_grad leaf.

Broadcasting is deliberately narrow: bias-add (a 1-D vector onto the last
axis) and multiplication by a python scalar. Anything else needs an explicit
reshape or transpose, which keeps every backward rule a plain mirror of its
forward.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "GradientSnapshot",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "reshape",
    "transpose",
    "mean",
    "sum_all",
    "truncated_normal",
]

LN_EPS = 1e-5

_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715

_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float32 array plus the metadata autodiff needs."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self):
        return sum_all(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class TapeNode:
    """One recorded op: ids wiring plus a backward closure over saved values."""

    __slots__ = ("op", "input_ids", "output_id", "backward")

    def __init__(self, op: str, input_ids: tuple, output_id: int, backward):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered op record for one forward pass; inputs always precede use."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        for t in inputs:
            if t.id not in self._produced and t.id not in self.leaves:
                self.leaves[t.id] = t
        self.nodes.append(TapeNode(op, tuple(t.id for t in inputs), output.id, backward))
        self._produced.add(output.id)

    def produced(self, tensor_id: int) -> bool:
        return tensor_id in self._produced


class GradientSnapshot:
    """Gradients for requires_grad leaves; absent tensors read as zero."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def wrt(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(tensor.id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.id in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor, tape: Tape) -> GradientSnapshot:
    """Reverse sweep over the tape, visiting every node exactly once."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    needed = set(tape._produced)
    for tid, t in tape.leaves.items():
        if t.requires_grad:
            needed.add(tid)

    def accumulate(t: Tensor, value_fn) -> None:
        if t.id not in needed:
            return
        g = value_fn()
        prev = grads.get(t.id)
        grads[t.id] = g if prev is None else prev + g

    for node in reversed(tape.nodes):
        g_out = grads.pop(node.output_id, None)
        if g_out is None:
            continue
        node.backward(g_out, accumulate)

    snap: dict[int, np.ndarray] = {}
    for tid, t in tape.leaves.items():
        if t.requires_grad:
            g = grads.get(tid)
            snap[tid] = g if g is not None else np.zeros_like(t.data)
    return GradientSnapshot(snap)


def _record(op: str, inputs: tuple, output: Tensor, backward_fn) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward_fn)


def _require_tensor(x, op: str) -> None:
    if not isinstance(x, Tensor):
        raise TypeError(f"{op} expects Tensor arguments, got {type(x).__name__}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "matmul")
    _require_tensor(b, "matmul")
    ok = (
        a.ndim >= 2
        and b.ndim == a.ndim
        and a.shape[:-2] == b.shape[:-2]
        and a.shape[-1] == b.shape[-2]
    )
    if not ok:
        raise ValueError(f"matmul shapes are incompatible: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def bw(g, acc):
        acc(a, lambda: g @ b_data.swapaxes(-1, -2))
        acc(b, lambda: a_data.swapaxes(-1, -2) @ g)

    _record("matmul", (a, b), out, bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "add")
    _require_tensor(b, "add")
    bias_mode = b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]
    if a.shape != b.shape and not bias_mode:
        raise ValueError(f"add shapes are incompatible: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)
    same = a.shape == b.shape

    def bw(g, acc):
        acc(a, lambda: g)
        acc(b, lambda: g if same else g.sum(axis=tuple(range(g.ndim - 1))))

    _record("add", (a, b), out, bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_tensor(a, "sub")
    _require_tensor(b, "sub")
    if a.shape != b.shape:
        raise ValueError(f"sub shapes are incompatible: {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)

    def bw(g, acc):
        acc(a, lambda: g)
        acc(b, lambda: -g)

    _record("sub", (a, b), out, bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    _require_tensor(a, "mul")
    if isinstance(b, (int, float, np.floating, np.integer)):
        c = np.float32(b)
        out = Tensor(a.data * c)

        def bw(g, acc):
            acc(a, lambda: g * c)

        _record("mul", (a,), out, bw)
        return out
    _require_tensor(b, "mul")
    if a.shape != b.shape:
        raise ValueError(f"mul shapes are incompatible: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def bw(g, acc):
        acc(a, lambda: g * b_data)
        acc(b, lambda: g * a_data)

    _record("mul", (a, b), out, bw)
    return out


def relu(x: Tensor) -> Tensor:
    _require_tensor(x, "relu")
    out = Tensor(np.maximum(x.data, 0.0))
    gate = x.data > 0.0  # subgradient at exactly 0 is taken as 0

    def bw(g, acc):
        acc(x, lambda: g * gate)

    _record("relu", (x,), out, bw)
    return out


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit in its tanh form."""
    _require_tensor(x, "gelu")
    xd = x.data
    u = _GELU_A * (xd + _GELU_B * xd * xd * xd)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bw(g, acc):
        du = _GELU_A * (1.0 + 3.0 * _GELU_B * xd * xd)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        acc(x, lambda: g * local)

    _record("gelu", (x,), out, bw)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    _require_tensor(x, "softmax")
    if x.ndim < 1:
        raise ValueError("softmax needs at least one axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bw(g, acc):
        acc(x, lambda: s * (g - (g * s).sum(axis=-1, keepdims=True)))

    _record("softmax", (x,), out, bw)
    return out


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then affine."""
    _require_tensor(x, "layer_norm")
    _require_tensor(scale, "layer_norm")
    _require_tensor(bias, "layer_norm")
    d = x.shape[-1]
    if scale.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {scale.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(LN_EPS))
    xhat = xc * inv
    out = Tensor(xhat * scale.data + bias.data)
    scale_data = scale.data

    def bw(g, acc):
        lead = tuple(range(g.ndim - 1))
        acc(bias, lambda: g.sum(axis=lead))
        acc(scale, lambda: (g * xhat).sum(axis=lead))

        def dx():
            dxh = g * scale_data
            return inv * (
                dxh
                - dxh.mean(axis=-1, keepdims=True)
                - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
            )

        acc(x, dx)

    _record("layer_norm", (x, scale, bias), out, bw)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log likelihood of integer labels under row softmax."""
    _require_tensor(logits, "cross_entropy")
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ValueError(
            f"cross_entropy labels shape {y.shape} does not match logits {logits.shape}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
    n, k = logits.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = int(y[(y < 0) | (y >= k)][0])
        raise IndexError(f"label {bad} out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = Tensor(np.float32(-logp[rows, y].mean()))
    probs = np.exp(logp)

    def bw(g, acc):
        def dlogits():
            d = probs.copy()
            d[rows, y] -= 1.0
            return d * (g / np.float32(n))

        acc(logits, dlogits)

    _record("cross_entropy", (logits,), out, bw)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    _require_tensor(x, "reshape")
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape {x.shape} -> {shape} changes element count")
    out = Tensor(x.data.reshape(shape))
    old = x.shape

    def bw(g, acc):
        acc(x, lambda: g.reshape(old))

    _record("reshape", (x,), out, bw)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    _require_tensor(x, "transpose")
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose axes {axes} are not a permutation of rank {x.ndim}")
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def bw(g, acc):
        acc(x, lambda: np.transpose(g, inverse))

    _record("transpose", (x,), out, bw)
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    _require_tensor(x, "mean")
    if axis is None:
        out = Tensor(np.float32(x.data.mean()))
        n = np.float32(x.size)
        shape = x.shape

        def bw(g, acc):
            acc(x, lambda: np.full(shape, g / n, dtype=np.float32))

        _record("mean", (x,), out, bw)
        return out
    axis = int(axis)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"mean axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    out = Tensor(x.data.mean(axis=axis))
    n = np.float32(x.shape[axis])
    shape = x.shape

    def bw(g, acc):
        acc(x, lambda: np.broadcast_to(np.expand_dims(g / n, axis), shape).copy())

    _record("mean", (x,), out, bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    _require_tensor(x, "sum")
    out = Tensor(np.float32(x.data.sum()))
    shape = x.shape

    def bw(g, acc):
        acc(x, lambda: np.full(shape, g, dtype=np.float32))

    _record("sum", (x,), out, bw)
    return out


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal draws with |z| > bound resampled, scaled by std, as float32."""
    out = rng.standard_normal(size=shape)
    for _ in range(16):
        bad = np.abs(out) > bound
        if not bad.any():
            break
        out[bad] = rng.standard_normal(size=int(bad.sum()))
    np.clip(out, -bound, bound, out=out)
    return (std * out).astype(np.float32)
