"""Dense tensors with an explicit reverse-mode tape.

Every differentiable operation records itself on the innermost active
:class:`Tape`.  Outside a tape, operations only compute values.  Gradients
are obtained with ``loss.backward()`` (or ``tape.backward(loss)``), which
walks the recorded operations once, in reverse order, and accumulates
``d loss / d leaf`` into ``leaf.grad`` for every leaf that requires grad.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (w * w).sum()
    >>> loss.backward()
    >>> w.grad
    array([2., 4., 6.], dtype=float32)

Storage is float32 by default.  :func:`default_dtype` switches the dtype of
newly created tensors, which the finite-difference oracles use to evaluate
forward passes in float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "default_dtype",
    "get_default_dtype",
    "as_tensor",
    "concat",
    "conv3d",
    "correlate1d",
    "resample3d",
    "pixel_shuffle3d",
    "pixel_unshuffle3d",
    "instance_norm",
    "channel_affine",
    "linear",
    "matmul",
    "numerical_gradient",
    "relative_error",
]

_state = threading.local()

# im2col buffers above this many elements are built per output slab and
# rebuilt during backward instead of being kept alive on the tape.
_COLS_LIMIT = 6_000_000


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (thread-local)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class TapeError(RuntimeError):
    """Raised for misuse of the tape (non-scalar root, freed or foreign tape)."""


class _Op(NamedTuple):
    inputs: tuple
    output: "Tensor"
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require grad are appended in execution order, so every
    operation's inputs precede it.  The tape stays usable after the block
    exits until :meth:`free` is called.
    """

    def __init__(self) -> None:
        self._ops: list[_Op] = []
        self._freed = False

    def __enter__(self) -> "Tape":
        if self._freed:
            raise TapeError("cannot re-enter a freed tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def freed(self) -> bool:
        return self._freed

    def record(self, inputs: tuple, output: "Tensor", backward: Callable) -> None:
        for t in inputs:
            if t._tape is not None and t._tape is not self:
                raise TapeError("input was recorded on a different tape; detach it first")
        self._ops.append(_Op(inputs, output, backward))
        output._tape = self

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if self._freed or root._tape is not self:
            raise TapeError("root is not attached to a live tape")
        if not np.isfinite(root.data).all():
            raise FloatingPointError("non-finite value at backward root")

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for op in reversed(self._ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if not t.requires_grad:
                    continue
                if t._tape is None:
                    leaves[id(t)] = t
                    if gi is None:
                        continue
                    gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.data.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif gi is not None:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi

        for op in self._ops:
            for t in op.inputs:
                if t.requires_grad and t._tape is None and t.grad is None:
                    t.grad = np.zeros_like(t.data)
        for t in leaves.values():
            if not np.isfinite(t.grad).all():
                raise FloatingPointError("non-finite gradient reached a leaf tensor")

    def free(self) -> None:
        """Drop recorded operations; tensors produced on this tape become detached."""
        for op in self._ops:
            op.output._tape = None
            op.output.requires_grad = False
        self._ops.clear()
        self._freed = True


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array that can participate in a :class:`Tape`.

    ``data`` is a contiguous numpy array in the default dtype; ``grad`` is
    ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _trusted: bool = False):
        if _trusted:
            arr = data
        else:
            arr = np.array(data, dtype=get_default_dtype(), order="C")
            if not np.isfinite(arr).all():
                raise ValueError("tensor values must be finite")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    # -- basic protocol -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, _trusted=True)

    def astype(self, dtype) -> "Tensor":
        """Differentiable dtype conversion."""
        dtype = np.dtype(dtype)
        if dtype == self.dtype:
            return self
        src = self.dtype
        return _make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape (detached)")
        self._tape.backward(self)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", other, self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", other, self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", other, self)

    def __neg__(self):
        return _binary("mul", self, -1.0)

    def __pow__(self, exponent):
        return self.pow(exponent)

    def __abs__(self):
        return self.abs()

    def __getitem__(self, index) -> "Tensor":
        out = self.data[index]
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[index] += g
            return (full,)

        return _make(np.ascontiguousarray(out), (self,), backward)

    # -- unary elementwise ------------------------------------------------
    def pow(self, exponent: float) -> "Tensor":
        p = float(exponent)
        x = self.data
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.power(x, p)
        if not np.isfinite(out).all():
            raise ArithmeticError(f"pow({p}) is undefined for some inputs")

        def backward(g):
            if p == 1.0:
                return (g,)
            return (g * p * np.power(x, p - 1.0),)

        return _make(out, (self,), backward)

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)

    def abs(self) -> "Tensor":
        x = self.data
        return _make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self) -> "Tensor":
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return _make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        x = self.data
        pos = x > 0
        out = np.where(pos, x, x * slope).astype(x.dtype, copy=False)
        return _make(out, (self,), lambda g: (np.where(pos, g, g * slope),))

    def relu(self) -> "Tensor":
        return self.leaky_relu(0.0)

    def clamp(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        x = self.data
        out = np.clip(x, lo, hi)
        mask = np.ones(x.shape, dtype=bool)
        if lo is not None:
            mask &= x >= lo
        if hi is not None:
            mask &= x <= hi
        return _make(out.astype(x.dtype, copy=False), (self,), lambda g: (g * mask,))

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        _check_extent(self.shape, axes)
        shape = self.shape
        out = self.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return _make(np.asarray(out, dtype=self.dtype), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        count = _check_extent(self.shape, axes)
        shape = self.shape
        out = self.data.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, shape),)

        return _make(np.asarray(out, dtype=self.dtype), (self,), backward)

    def var(self, axis=None, unbiased: bool = False, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        count = _check_extent(self.shape, axes)
        ddof = 1 if unbiased else 0
        if count - ddof <= 0:
            raise ValueError("unbiased variance needs at least two elements")
        x = self.data
        centered = x - x.mean(axis=axes, keepdims=True)
        out = (centered * centered).sum(axis=axes, keepdims=keepdims) / (count - ddof)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (g * centered * (2.0 / (count - ddof)),)

        return _make(np.asarray(out, dtype=self.dtype), (self,), backward)

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self.data.reshape(shape)
        return _make(out, (self,), lambda g: (g.reshape(old),))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, _trusted=True)
    if needs:
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim if ndim else a for a in axis)
    for a in axes:
        if not 0 <= a < max(ndim, 1):
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
    return axes


def _check_extent(shape: tuple, axes: tuple) -> int:
    count = 1
    for a in axes:
        count *= shape[a] if shape else 1
    if count == 0:
        raise ValueError("reduction over an empty extent")
    return count


def _sum_to_scalar(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype)


def _binary(kind: str, a, b) -> Tensor:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    da = ta.data if ta is not None else np.asarray(a, dtype=get_default_dtype())
    db = tb.data if tb is not None else np.asarray(b, dtype=get_default_dtype())
    if da.shape != db.shape and da.ndim and db.ndim:
        raise ValueError(f"shape mismatch in {kind}: {da.shape} vs {db.shape}")
    a_scalar = da.ndim == 0 and db.ndim != 0
    b_scalar = db.ndim == 0 and da.ndim != 0

    if kind == "add":
        out = da + db
        ga = lambda g: g
        gb = lambda g: g
    elif kind == "sub":
        out = da - db
        ga = lambda g: g
        gb = lambda g: -g
    elif kind == "mul":
        out = da * db
        ga = lambda g: g * db
        gb = lambda g: g * da
    elif kind == "div":
        if np.any(db == 0):
            raise ZeroDivisionError("division by a zero denominator")
        out = da / db
        ga = lambda g: g / db
        gb = lambda g: -g * da / (db * db)
    else:  # pragma: no cover
        raise ValueError(kind)

    def backward(g):
        grads = []
        if ta is not None:
            v = ga(g)
            grads.append(_sum_to_scalar(v) if a_scalar else v)
        if tb is not None:
            v = gb(g)
            grads.append(_sum_to_scalar(v) if b_scalar else v)
        return tuple(grads)

    inputs = tuple(t for t in (ta, tb) if t is not None)
    dtype = (ta if ta is not None else tb).dtype
    return _make(np.asarray(out, dtype=dtype), inputs, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    da, db = a.data, b.data
    return _make(da @ db, (a, b), lambda g: (g @ db.T, da.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shapes incompatible: {x.shape} vs weight {weight.shape}")
    dx, dw = x.data, weight.data
    out = dx @ dw.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ dw, g.T @ dx]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward)


# -- convolution ----------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError("expected an int or a 3-tuple")
    return v


def _im2col(xp: np.ndarray, k: tuple, s: tuple, out: tuple, d0: int, d1: int) -> np.ndarray:
    n, c = xp.shape[:2]
    view = sliding_window_view(xp, k, axis=(2, 3, 4))[:, :, :: s[0], :: s[1], :: s[2]]
    view = view[:, :, d0:d1, : out[1], : out[2]]
    cols = view.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return cols.reshape(n, c * k[0] * k[1] * k[2], (d1 - d0) * out[1] * out[2])


def _col2im_add(dxp: np.ndarray, dcols: np.ndarray, k: tuple, s: tuple, out: tuple, d0: int, d1: int) -> None:
    n, c = dxp.shape[:2]
    dc = dcols.reshape(n, c, k[0], k[1], k[2], d1 - d0, out[1], out[2])
    for a in range(k[0]):
        za = a + s[0] * d0
        for b in range(k[1]):
            for e in range(k[2]):
                dxp[:, :, za : za + s[0] * (d1 - d0) : s[0], b : b + s[1] * out[1] : s[1], e : e + s[2] * out[2] : s[2]] += dc[:, :, a, b, e]


def _correlate(xp: np.ndarray, wmat: np.ndarray, k: tuple, s: tuple, out: tuple):
    """Cross-correlate padded ``xp`` with ``wmat`` (F, C*kd*kh*kw) in depth slabs.

    Returns the (N, F, prod(out)) result, the slab bounds and, when a single
    slab covers the output, its column matrix for reuse in the backward pass.
    """
    n, c = xp.shape[:2]
    plane = out[1] * out[2]
    rows = c * k[0] * k[1] * k[2]
    slab = max(1, min(out[0], _COLS_LIMIT // max(1, n * rows * plane)))
    chunks = [(d, min(d + slab, out[0])) for d in range(0, out[0], slab)]
    result = np.empty((n, wmat.shape[0], out[0] * plane), dtype=xp.dtype)
    kept = None
    for d0, d1 in chunks:
        cols = _im2col(xp, k, s, out, d0, d1)
        result[:, :, d0 * plane : d1 * plane] = wmat @ cols
        if len(chunks) == 1:
            kept = cols
    return result, chunks, kept


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation of ``x`` (N, C, D, H, W) with ``weight`` (F, C, kd, kh, kw).

    Zero padding is applied symmetrically; ``bias`` (F,) is optional.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError("conv3d expects 5-d input and kernel")
    n, c, *spatial = x.shape
    f, cw, *k = weight.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {cw}")
    s, p, k = _triple(stride), _triple(padding), tuple(k)
    out = tuple((spatial[i] + 2 * p[i] - k[i]) // s[i] + 1 for i in range(3))
    if any(spatial[i] + 2 * p[i] < k[i] for i in range(3)):
        raise ValueError(f"kernel {k} larger than padded input {spatial} (padding {p})")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))) if any(p) else xd
    wmat = weight.data.reshape(f, -1)
    result, chunks, kept = _correlate(xp, wmat, k, s, out)
    if bias is not None:
        result += bias.data[None, :, None]
    result = result.reshape(n, f, *out)
    plane = out[1] * out[2]

    def backward(g):
        g2 = g.reshape(n, f, -1)
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        dxp = np.zeros(xp.shape, dtype=xd.dtype) if x.requires_grad else None
        for d0, d1 in chunks:
            gs = g2[:, :, d0 * plane : d1 * plane]
            if gw is not None:
                cols = kept if kept is not None else _im2col(xp, k, s, out, d0, d1)
                for i in range(n):
                    gw += gs[i] @ cols[i].T
            if dxp is not None:
                _col2im_add(dxp, wmat.T @ gs, k, s, out, d0, d1)
        gx = None
        if dxp is not None:
            gx = dxp[:, :, p[0] : p[0] + spatial[0], p[1] : p[1] + spatial[1], p[2] : p[2] + spatial[2]]
        grads = [gx, None if gw is None else gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(result, inputs, backward)


def correlate1d(x: Tensor, kernel: np.ndarray, axis: int) -> Tensor:
    """Valid-mode correlation of every channel of ``x`` along one spatial axis.

    ``kernel`` is a constant 1-d array; ``axis`` counts spatial axes (0..2).
    The output shrinks by ``len(kernel) - 1`` along that axis.
    """
    if x.ndim != 5 or axis not in (0, 1, 2):
        raise ValueError("correlate1d expects 5-d input and a spatial axis in 0..2")
    taps = np.asarray(kernel, dtype=x.dtype).ravel()
    ax = 2 + axis
    size = x.shape[ax]
    m = size - taps.size + 1
    if m < 1:
        raise ValueError(f"kernel of {taps.size} taps longer than axis of {size}")

    def window(j):
        sl = [slice(None)] * 5
        sl[ax] = slice(j, j + m)
        return tuple(sl)

    xd = x.data
    out = taps[0] * xd[window(0)]
    for j in range(1, taps.size):
        out += taps[j] * xd[window(j)]

    def backward(g):
        gx = np.zeros_like(xd)
        for j in range(taps.size):
            gx[window(j)] += taps[j] * g
        return (gx,)

    return _make(out, (x,), backward)


# -- resampling -------------------------------------------------------------

def _resample_matrix(n: int, factor: float, mode: str, dtype) -> np.ndarray:
    if factor == 2:
        m = 2 * n
        u = np.zeros((m, n), dtype=np.float64)
        if mode == "nearest":
            u[np.arange(m), np.arange(m) // 2] = 1.0
        else:
            # half-pixel centres: out[2j] = .75 x[j] + .25 x[j-1], out[2j+1] = .75 x[j] + .25 x[j+1]
            for j in range(n):
                u[2 * j, j] += 0.75
                u[2 * j, max(j - 1, 0)] += 0.25
                u[2 * j + 1, j] += 0.75
                u[2 * j + 1, min(j + 1, n - 1)] += 0.25
    else:
        if n % 2:
            raise ValueError(f"downsampling needs even extents, got {n}")
        m = n // 2
        u = np.zeros((m, n), dtype=np.float64)
        if mode == "nearest":
            u[np.arange(m), 2 * np.arange(m)] = 1.0
        else:
            u[np.arange(m), 2 * np.arange(m)] = 0.5
            u[np.arange(m), 2 * np.arange(m) + 1] = 0.5
    return u.astype(dtype)


def _apply_axis(x: np.ndarray, u: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, -1)
    return np.ascontiguousarray(np.moveaxis(moved @ u.T, -1, axis))


def resample3d(x: Tensor, factor: float, mode: str = "nearest") -> Tensor:
    """Scale the three trailing spatial axes by ``factor`` (2 or 1/2)."""
    if factor not in (2, 0.5):
        raise ValueError("factor must be 2 or 1/2")
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if x.ndim < 3:
        raise ValueError("resample3d needs at least three spatial axes")
    axes = (x.ndim - 3, x.ndim - 2, x.ndim - 1)
    mats = [_resample_matrix(x.shape[a], factor, mode, x.dtype) for a in axes]
    out = x.data
    for a, u in zip(axes, mats):
        out = _apply_axis(out, u, a)

    def backward(g):
        for a, u in zip(axes, mats):
            g = _apply_axis(g, u.T, a)
        return (g,)

    return _make(out, (x,), backward)


def _shuffle(d: np.ndarray, r: int) -> np.ndarray:
    n, c, dd, h, w = d.shape
    co = c // r**3
    return d.reshape(n, co, r, r, r, dd, h, w).transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(n, co, dd * r, h * r, w * r)


def _unshuffle(d: np.ndarray, r: int) -> np.ndarray:
    n, c, dd, h, w = d.shape
    return d.reshape(n, c, dd // r, r, h // r, r, w // r, r).transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, c * r**3, dd // r, h // r, w // r)


def pixel_shuffle3d(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (N, C*r^3, D, H, W) -> (N, C, D*r, H*r, W*r)."""
    if x.ndim != 5 or x.shape[1] % r**3:
        raise ValueError(f"pixel_shuffle3d needs 5-d input with channels divisible by {r**3}, got {x.shape}")
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle3d(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: (N, C, D*r, H*r, W*r) -> (N, C*r^3, D, H, W)."""
    if x.ndim != 5 or any(e % r for e in x.shape[2:]):
        raise ValueError(f"pixel_unshuffle3d needs 5-d input with extents divisible by {r}, got {x.shape}")
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


# -- normalization -----------------------------------------------------------

def instance_norm(x: Tensor, eps: float = 1e-5, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalize each (instance, channel) slice of ``x`` (N, C, ...) to zero mean, unit variance.

    ``weight`` and ``bias`` of shape (C,) apply a per-channel affine afterwards.
    """
    if x.ndim < 3:
        raise ValueError("instance_norm expects (N, C, spatial...) input")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise ValueError("instance_norm needs at least two spatial elements per channel")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    bshape = (1, -1) + (1,) * len(axes)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)

    def backward(g):
        dxhat = g * weight.data.reshape(bshape) if weight is not None else g
        gx = inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0,) + axes))
        if bias is not None:
            grads.append(g.sum(axis=(0,) + axes))
        return tuple(grads)

    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)
    return _make(np.asarray(out, dtype=xd.dtype), inputs, backward)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-(instance, channel) affine: ``x * scale + shift`` with scale/shift of shape (N, C)."""
    if scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise ValueError(f"scale/shift must have shape {x.shape[:2]}, got {scale.shape}, {shift.shape}")
    extra = (1,) * (x.ndim - 2)
    sc = scale.data.reshape(scale.shape + extra)
    sh = shift.data.reshape(shift.shape + extra)
    xd = x.data
    axes = tuple(range(2, x.ndim))

    def backward(g):
        return (g * sc, (g * xd).sum(axis=axes), g.sum(axis=axes))

    return _make(xd * sc + sh, (x, scale, shift), backward)


# -- finite-difference oracle --------------------------------------------------

def numerical_gradient(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-3, indices=None) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``array``, perturbed in place.

    Only the flat positions in ``indices`` are probed when given; the others
    are left at zero.  Independent of every backward rule in this module.
    """
    flat = array.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(array.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient's max magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
