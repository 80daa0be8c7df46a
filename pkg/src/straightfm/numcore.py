"""Dense float64 arithmetic with a small reverse-mode tape, MLPs and Adam.

Arrays are plain ``numpy.ndarray`` objects. Differentiable values are
:class:`Tensor` nodes recorded on a :class:`Tape`; every node is appended at
creation time, so the record order is already a topological order and the
backward sweep simply walks it in reverse.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"SFMW0001"


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


class NumericFault(FloatingPointError):
    """Raised when a NaN or infinity shows up where finite values are required."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def var(self, value) -> "Tensor":
        return self._record(np.asarray(value, dtype=np.float64), (), None)

    def _record(self, value, parents, vjp) -> "Tensor":
        node = Tensor(value, self, parents, vjp, len(self.nodes))
        self.nodes.append(node)
        return node

    def gradient(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Gradients of the scalar ``loss`` with respect to each of ``wrt``."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                pg = _unbroadcast(pg, parent.value.shape)
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = []
        for w in wrt:
            g = grads[w.index]
            out.append(np.zeros_like(w.value) if g is None else np.asarray(g, dtype=np.float64))
        return out


def backward(tape: Tape, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
    return tape.gradient(loss, wrt)


def _value(x):
    return x.value if isinstance(x, Tensor) else x


def _combine(value, operands, grad_fns) -> "Tensor":
    parents, fns = [], []
    for op, fn in zip(operands, grad_fns):
        if isinstance(op, Tensor):
            parents.append(op)
            fns.append(fn)
    tape = parents[0].tape
    for p in parents[1:]:
        if p.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape._record(value, tuple(parents), lambda g: [fn(g) for fn in fns])


class Tensor:
    __slots__ = ("value", "tape", "parents", "vjp", "index")
    __array_ufunc__ = None  # make ndarray operators defer to the reflected Tensor ones

    def __init__(self, value, tape, parents, vjp, index):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        a, b = _value(self), _value(other)
        return _combine(a + b, (self, other), (lambda g: g, lambda g: g))

    __radd__ = __add__

    def __sub__(self, other):
        a, b = _value(self), _value(other)
        return _combine(a - b, (self, other), (lambda g: g, lambda g: -g))

    def __rsub__(self, other):
        a, b = _value(other), _value(self)
        return _combine(a - b, (other, self), (lambda g: g, lambda g: -g))

    def __neg__(self):
        return _combine(-self.value, (self,), (lambda g: -g,))

    def __mul__(self, other):
        a, b = _value(self), _value(other)
        return _combine(a * b, (self, other), (lambda g: g * b, lambda g: g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other):
        a, b = _value(self), _value(other)
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not compose")
        return _combine(a @ b, (self, other), (lambda g: g @ b.T, lambda g: a.T @ g))

    def __rmatmul__(self, other):
        a, b = _value(other), _value(self)
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not compose")
        return _combine(a @ b, (other, self), (lambda g: g @ b.T, lambda g: a.T @ g))

    def __getitem__(self, key):
        shape = self.value.shape

        def vjp(g):
            full = np.zeros(shape)
            full[key] = g
            return full

        return _combine(self.value[key], (self,), (vjp,))


# elementwise functions accept either Tensors or arrays


def square(x):
    if not isinstance(x, Tensor):
        return x * x
    v = x.value
    return _combine(v * v, (x,), (lambda g: 2.0 * g * v,))


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    e = np.exp(x.value)
    return _combine(e, (x,), (lambda g: g * e,))


def clip(x, lo: float, hi: float):
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _combine(np.clip(v, lo, hi), (x,), (lambda g: g * inside,))


def silu(x):
    if not isinstance(x, Tensor):
        return x / (1.0 + np.exp(-x))
    v = x.value
    s = 1.0 / (1.0 + np.exp(-v))
    return _combine(v * s, (x,), (lambda g: g * (s * (1.0 + v * (1.0 - s))),))


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    th = np.tanh(x.value)
    return _combine(th, (x,), (lambda g: g * (1.0 - th * th),))


def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    pos = x.value > 0.0
    return _combine(np.where(pos, x.value, 0.0), (x,), (lambda g: g * pos,))


def sum_all(x):
    if not isinstance(x, Tensor):
        return np.sum(x)
    shape = x.value.shape
    return _combine(np.asarray(x.value.sum()), (x,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    n = _value(x).size
    return sum_all(x) * (1.0 / n)


def row_sum(x):
    """Sum over columns, keeping a column vector."""
    if not isinstance(x, Tensor):
        return np.sum(x, axis=1, keepdims=True)
    shape = x.value.shape
    return _combine(x.value.sum(axis=1, keepdims=True), (x,), (lambda g: np.broadcast_to(g, shape).copy(),))


def concat_cols(parts):
    """Concatenate along axis 1; constant parts contribute no gradient."""
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=1)
    if not any(isinstance(p, Tensor) for p in parts):
        return out
    bounds = np.cumsum([0] + [v.shape[1] for v in values])
    fns = [(lambda g, lo=lo, hi=hi: g[:, lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]
    return _combine(out, tuple(parts), tuple(fns))


def concat_rows(parts):
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=0)
    if not any(isinstance(p, Tensor) for p in parts):
        return out
    bounds = np.cumsum([0] + [v.shape[0] for v in values])
    fns = [(lambda g, lo=lo, hi=hi: g[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]
    return _combine(out, tuple(parts), tuple(fns))


ACTIVATIONS: dict[str, Callable] = {"silu": silu, "tanh": tanh, "relu": relu}


@dataclass
class MlpParams:
    """Weights ``W_k`` of shape (in, out) and biases ``b_k`` of shape (1, out)."""

    weights: list
    biases: list
    activation: str = "silu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if _value(b).shape != (1, _value(w).shape[1]):
                raise ShapeError(f"layer {k}: bias shape {_value(b).shape} vs weight {_value(w).shape}")
            if k and _value(self.weights[k - 1]).shape[1] != _value(w).shape[0]:
                raise ShapeError(f"layer {k - 1} output does not feed layer {k} input")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [_value(self.weights[0]).shape[0]] + [_value(w).shape[1] for w in self.weights]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence, activation: str = "silu") -> "MlpParams":
        if len(arrays) % 2:
            raise ShapeError("expected alternating weight/bias arrays")
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def on(self, tape: Tape) -> "MlpParams":
        """Copy whose arrays are leaf variables on ``tape``."""
        return MlpParams.from_arrays([tape.var(a) for a in self.arrays()], self.activation)

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([np.array(_value(a)) for a in self.arrays()], self.activation)


def init_mlp(widths: Sequence[int], rng, activation: str = "silu") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append((2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit)
        biases.append(np.zeros((1, fan_out)))
    return MlpParams(weights, biases, activation)


def mlp_forward(params: MlpParams, x, dropout: float = 0.0, rng=None):
    """Evaluate the network on a batch of rows.

    Works on plain arrays or on tape variables (``params.on(tape)``).
    Dropout is applied after each hidden activation when ``dropout > 0``.
    """
    width = _value(params.weights[0]).shape[0]
    if _value(x).ndim != 2 or _value(x).shape[1] != width:
        raise ShapeError(f"input shape {_value(x).shape} does not match first layer width {width}")
    act = ACTIVATIONS[params.activation]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = act(h)
            if dropout > 0.0:
                keep = rng.uniform(_value(h).shape) >= dropout
                h = h * (keep / (1.0 - dropout))
    return h


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericFault("non-finite gradient; optimizer step aborted")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape} / gradient {g.shape} / moment {m.shape} mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)


def ema_update(avg: Sequence[np.ndarray], params: Sequence[np.ndarray], decay: float) -> list[np.ndarray]:
    return [decay * a + (1.0 - decay) * p for a, p in zip(avg, params)]


def finite_difference_grad(f: Callable[[list], float], arrays: Sequence[np.ndarray], h: float = 1e-4):
    """Central differences of scalar ``f`` with respect to every entry of ``arrays``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(arrays))
            flat[i] = orig - h
            fm = float(f(arrays))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def gradient_mismatch(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


# weight persistence


def _encode(arrays: Sequence[np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<I", len(arrays))]
    payload = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"only 2-D arrays can be stored, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericFault("refusing to store non-finite weights")
        header.append(struct.pack("<II", *a.shape))
        chunk = np.ascontiguousarray(a).astype("<f8").tobytes()
        header.append(chunk)
        payload.append(chunk)
    crc = zlib.crc32(b"".join(payload)) & 0xFFFFFFFF
    return b"".join(header) + struct.pack("<I", crc)


def save_weights(path, arrays: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(_encode(arrays))


def load_weights(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an SFMW0001 weight file")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    arrays, payload = [], []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        chunk = data[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated payload")
        payload.append(chunk)
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(rows, cols).astype(np.float64))
        pos += nbytes
    if len(data) != pos + 4:
        raise ValueError(f"{path}: unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(b"".join(payload)) & 0xFFFFFFFF:
        raise ValueError(f"{path}: CRC mismatch")
    return arrays
