"""A small reverse-mode differentiable tensor kernel on top of numpy.

Every array is float64 and laid out NCHW. Operations are plain functions that
take and return :class:`Tensor`; when a :class:`Tape` is active and one of the
inputs requires a gradient, the operation records a vector-Jacobian product on
the tape. Outside a tape nothing is recorded, which keeps long test-time
unrolls cheap.

    >>> x = Tensor([-1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = relu(x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([0., 1.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DegenerateStatsError, ShapeError

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered log of differentiable operations executed while active."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(r.out) for r in self.records}
        if id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")
        pending = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    pending[key] = pending[key] + gi if key in pending else gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE)
                else:
                    t.grad = t.grad + gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return _result(
        np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),)
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(data, tensors, vjp)


def split(x, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into consecutive pieces along ``axis``."""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to {x.shape[axis]}")
    pieces = []
    lo = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, lo + size)
        index = tuple(index)

        def vjp(g, index=index):
            full = np.zeros(x.shape)
            full[index] = g
            return (full,)

        pieces.append(_result(x.data[index], (x,), vjp))
        lo += size
    return pieces


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Walks its attributes to find parameters, buffers and sub-modules.

    Tensors with ``requires_grad`` are parameters, other tensors are buffers
    (e.g. batch-norm running statistics). Attribute order is definition order,
    which keeps parameter names stable across runs.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item
            elif isinstance(value, (Tensor, Module)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif value.requires_grad:
                yield prefix + name, value

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif not value.requires_grad:
                yield prefix + name, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            if isinstance(m, BatchNormState):
                m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def glorot_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


_INITS = {"he": he_uniform, "glorot": glorot_uniform}


@dataclass(eq=False)
class ConvParams(Module):
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        stride: int = 1,
        padding: Optional[int] = None,
        init: str = "he",
    ) -> "ConvParams":
        if padding is None:
            padding = (kernel - 1) // 2
        w = Tensor(_INITS[init]((c_out, c_in, kernel, kernel), rng), requires_grad=True)
        b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        return cls(w, b, stride, padding)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class BatchNormState(Module):
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            Tensor(np.zeros(channels)),
            Tensor(np.ones(channels)),
            momentum,
            eps,
        )


# ---------------------------------------------------------------------------
# convolution / normalisation / pooling / losses


def _out_size(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv2d: {axis}={n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv2d(x, params: ConvParams) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``params.weight`` [O,C,kh,kw]."""
    x = as_tensor(x)
    w, b = params.weight, params.bias
    s, p = params.stride, params.padding
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    if s < 1 or p < 0:
        raise ConfigError(f"conv2d: invalid stride {s} / padding {p}")
    ho = _out_size(h, kh, s, p, "H")
    wo = _out_size(wd, kw, s, p, "W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # columns are laid out [C*kh*kw, N*Ho*Wo] so the gather copies contiguous rows
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, vjp)


def batchnorm(x, state: BatchNormState) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode the batch statistics are used and the running statistics
    are updated in place; in eval mode only the running statistics are used.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    gamma, beta = state.gamma, state.beta
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma has shape {gamma.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    bshape = (1, c, 1, 1)

    if state.training:
        if m < 2:
            raise DegenerateStatsError("batchnorm in training mode needs N*H*W >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean.data[...] = (1 - mom) * state.running_mean.data + mom * mean
        state.running_var.data[...] = (1 - mom) * state.running_var.data + mom * var * m / (m - 1)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)

        def vjp(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(state.running_var.data + state.eps)
        xhat = (x.data - state.running_mean.data.reshape(bshape)) * inv.reshape(bshape)

        def vjp(g):
            gx = g * (gamma.data * inv).reshape(bshape) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _result(out, (x, gamma, beta), vjp)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    hw = h * w
    return _result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape),),
    )


def linear(x, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x [N, in], weight [out, in]."""
    x = as_tensor(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, vjp)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(np.array(loss), (logits,), vjp)
