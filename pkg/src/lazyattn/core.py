"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap row-major numpy arrays. The element type is a run switch:
float32 (default) for training speed, float64 for verification against
finite differences. Operations executed while a ``Tape`` is active are
recorded in order; ``backward`` replays the records in reverse, so gradient
accumulation happens in a fixed sequential order and replaying the same
tape twice yields bit-identical gradients.

Broadcasting in the generic elementwise ops (``add``, ``mul``) is limited
to scalar-vs-tensor and exact-shape; anything else raises ``ShapeError``.
Row-vector biases go through the dedicated ``add_row`` op instead.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = "float32"
_DTYPES = {"float32": np.float32, "float64": np.float64}

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(_DTYPES[DEFAULT_DTYPE])
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; use 'float32' or 'float64'")
        return np.dtype(_DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """Dense array plus a lazily allocated same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; context manager activates recording."""

    def __init__(self):
        self.records: list[_Record] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape context exited out of order"

    def __len__(self) -> int:
        return len(self.records)

    def zero_grads(self) -> None:
        """Clear grads of every tensor touched by this tape (for replay)."""
        for rec in self.records:
            rec.output.grad = None
            for t in rec.inputs:
                t.grad = None


def record_op(output: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Attach a backward rule to ``output`` on the active tape, if any.

    ``vjp(grad_out)`` must return one gradient array (or None) per input,
    each exactly matching the input's shape.
    """
    if _TAPE_STACK and output.requires_grad:
        tape = _TAPE_STACK[-1]
        tape.records.append(_Record(output, inputs, vjp))
        tape._output_ids.add(id(output))
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError("backward: loss must be a scalar tensor")
    if id(loss) not in tape._output_ids:
        raise ValueError("backward: loss was not produced under this tape")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gi.copy()  # copy: vjps may hand back the upstream grad itself
            else:
                t.grad += gi


def _result_flag(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product; backward is dA = dC.B^T, dB = A^T.dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_result_flag(a, b))
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return record_op(out, (a, b), vjp)


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not scalar- or same-shape compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; operands must be same-shape or one a scalar."""
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_result_flag(a, b))

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record_op(out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; operands must be same-shape or one a scalar."""
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_result_flag(a, b))
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return record_op(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    out = Tensor(x.data * c, requires_grad=x.requires_grad)
    return record_op(out, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0, so clipped entries stay gradient-silent."""
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad)
    gate = x.data > 0

    def vjp(g):
        return (g * gate,)

    return record_op(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    out = Tensor(out_data, requires_grad=x.requires_grad)
    return record_op(out, (x,), lambda g: (g * out_data,))


def gelu(x: Tensor) -> Tensor:
    """Smooth gated activation (tanh form), used by the feed-forward blocks."""
    xd = x.data
    x2 = xd * xd  # x**3 falls off numpy's fast pow path; keep explicit products
    u = SQRT_2_OVER_PI * (xd + _GELU_C * (x2 * xd))
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t), requires_grad=x.requires_grad)

    def vjp(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return record_op(out, (x,), vjp)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stable softmax over the last axis.

    ``mask`` (optional, boolean, same shape, True = excluded) zeroes masked
    entries; they receive no probability mass and no gradient. A fully
    masked row raises, since no distribution exists for it.
    """
    xd = x.data
    if xd.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: last dimension must be >= 1")
    if mask is not None:
        if mask.shape != xd.shape:
            raise ShapeError("softmax_lastdim: mask shape must match input")
        if np.any(mask.all(axis=-1)):
            raise ValueError("softmax_lastdim: a row is fully masked")
        xd = np.where(mask, -np.inf, xd)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    out = Tensor(p, requires_grad=x.requires_grad)

    def vjp(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return record_op(out, (x,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero-mean/unit-variance normalization followed by an affine map."""
    if x.ndim != 2:
        raise ShapeError(f"layernorm expects a 2-D input, got {x.shape}")
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layernorm: feature dimension must be >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layernorm: gain/bias must be 1-D of the feature size")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_result_flag(x, gain, bias))
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record_op(out, (x, gain, bias), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError("cross_entropy: one target per logits row required")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise IndexError("cross_entropy: target id out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = Tensor(np.asarray(-logp[rows, targets].mean(), dtype=logits.data.dtype),
                 requires_grad=logits.requires_grad)
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        d *= float(g) / n
        return (d,)

    return record_op(out, (logits,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id."""
    ids = np.asarray(ids).reshape(-1)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise IndexError("embedding: id out of range")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def vjp(g):
        d = np.zeros_like(table.data)
        np.add.at(d, ids, g)
        return (d,)

    return record_op(out, (table,), vjp)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) tensor."""
    if x.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError(f"add_row: got {x.shape} and {row.shape}")
    out = Tensor(x.data + row.data, requires_grad=_result_flag(x, row))

    def vjp(g):
        return g, g.sum(axis=0)

    return record_op(out, (x, row), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice [start, stop) of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D input")
    out = Tensor(x.data[:, start:stop].copy(), requires_grad=x.requires_grad)

    def vjp(g):
        d = np.zeros_like(x.data)
        d[:, start:stop] = g
        return (d,)

    return record_op(out, (x,), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    if not parts:
        raise ShapeError("concat_cols: nothing to concatenate")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 requires_grad=any(p.requires_grad for p in parts))
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record_op(out, tuple(parts), vjp)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements (scalar tensor)."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), requires_grad=x.requires_grad)
    return record_op(out, (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    """Mean of all elements (scalar tensor)."""
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), requires_grad=x.requires_grad)
    return record_op(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))
