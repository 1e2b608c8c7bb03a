"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so evaluation code that runs outside a tape pays
no bookkeeping cost::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # array([2., 4., 6.])

Random numbers come from numpy's Philox-4x64 counter-based generator, seeded
through ``SeedSequence((seed, stream))``.  Both algorithms are fixed by numpy's
stability policy, so a given seed produces the same stream on every platform.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_TAPES: list["Tape"] = []


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``.

    Distinct stream tuples give statistically independent sequences, which is
    how a single run seed is split into init/split/shuffle/dropout streams.
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as ops execute, so the list is already in
    topological order and reverse iteration is a valid backward schedule.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``out_data`` as a Tensor and log it on the active tape.

    ``backward_fn`` maps the upstream gradient to one gradient per input
    (``None`` for inputs that do not need one).  New ops are built on this.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every grad-requiring tensor on ``tape``.

    Leaf tensors (those not produced on the tape) accumulate into any
    existing ``.grad``; intermediates are overwritten.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    touched: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = inp
    if id(loss) in grads and id(loss) not in produced:
        touched[id(loss)] = loss
    for key, g in grads.items():
        t = touched.get(key)
        if t is None:
            continue
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(
        (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(
        (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        (a, b), ad * bd,
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record((x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record((x,), np.log(xd), lambda g: (g / xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record((x,), s, lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return record((x,), xd * s, lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


# shape and reduction


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record((x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record((x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return record((x,), x.data[index], back)


def sum_(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return record((x,), np.sum(x.data, axis=axis), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, with leading batch dims allowed.

    A 2-D right operand is shared across all leading dims of ``a`` (the
    projection case); otherwise leading dims must match exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    if shared:
        # one large GEMM instead of a loop over the leading dims
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))
    else:
        out = ad @ bd

    def back(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record((a, b), out, back)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is added to the logits (use -inf)."""
    z = x.data if mask is None else x.data + mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return record((x,), y, lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """``x * gain / sqrt(mean(x**2) + eps)`` over the last axis."""
    xd, w = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def back(g):
        gx = gw = None
        if gain.requires_grad:
            gw = np.sum((g * xhat).reshape(-1, d), axis=0)
        if x.requires_grad:
            gh = g * w
            gx = inv * (gh - xhat * np.sum(gh * xhat, axis=-1, keepdims=True) / d)
        return gx, gw

    return record((x, gain), xhat * w, back)


def rope_tables(seq_len: int, head_dim: int, base: float):
    """cos/sin tables of shape [seq, head_dim // 2]."""
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(xd, cos, sin):
    x0, x1 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotary embedding on ``[..., seq, n_heads, head_dim]``.

    Pair ``(2i, 2i+1)`` at position ``p`` is rotated by ``p * base**(-2i/head_dim)``.
    """
    seq, head_dim = x.shape[-3], x.shape[-1]
    cos, sin = rope_tables(seq, head_dim, base)
    cos, sin = cos[:, None, :], sin[:, None, :]
    return record((x,), _rotate(x.data, cos, sin), lambda g: (_rotate(g, cos, -sin),))


def embedding(table: Tensor, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, tokens.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record((table,), table.data[tokens], back)


def dropout_mask(shape, rate: float, rng=None, train: bool = True) -> np.ndarray:
    """Inverted-dropout mask with entries in ``{0, 1/(1-rate)}``.

    ``rng`` may be a Generator or an integer seed.  Returns all ones when
    ``rate == 0`` or outside training.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not train:
        return np.ones(shape)
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: Tensor, rate: float, rng=None, train: bool = True) -> Tensor:
    if rate == 0.0 or not train:
        return x
    return mul(x, dropout_mask(x.shape, rate, rng, train))


# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    Per coordinate: ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(x).data.item()
        flat[i] = orig - epsilon
        fm = f(x).data.item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))


__all__ = [
    "Tensor", "Tape", "make_rng", "record", "backward", "active_tape", "as_tensor",
    "add", "sub", "mul", "exp", "log", "sigmoid", "silu", "reshape", "transpose",
    "swap_last", "getitem", "sum_", "mean", "matmul", "softmax", "rmsnorm", "rope",
    "rope_tables", "embedding", "dropout_mask", "dropout", "grad_check", "is_finite",
]
