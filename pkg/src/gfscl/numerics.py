"""Dense tensor engine with reverse-mode automatic differentiation.

Every array the rest of the package touches is a :class:`Tensor`: a numpy
buffer plus an optional same-shaped gradient buffer. Operations executed while
gradient tracking is enabled are recorded on a process-global tape;
:func:`backward` replays the tape in reverse topological order (which, for an
append-only tape, is simply reverse recording order) and then clears it.

Training runs in float32. Oracle tests switch the engine to float64 with
``using_dtype(np.float64)`` because finite-difference gradient checks are
unreliable at single precision.

The tape is deliberately process-global and single-threaded: one training
step owns it end to end. Evaluation passes wrap themselves in ``no_grad()``
and therefore never touch the tape, so they may run concurrently over
immutable parameters.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv1x1",
    "conv3x3_grid",
    "gelu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "mean_over_axis",
    "sum_over_axis",
    "l2_norm",
    "exp",
    "log",
    "max_with_scalar",
    "reshape",
    "transpose_axes",
    "concat",
    "narrow",
    "select_index",
    "backward",
    "no_grad",
    "using_dtype",
    "set_default_dtype",
    "get_default_dtype",
    "tape_size",
    "clear_tape",
    "zeros",
    "ones",
    "truncated_normal",
    "save_checkpoint",
    "load_checkpoint",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_TAPE: list["_Node"] = []

CHECKPOINT_MAGIC = b"GFSC"
CHECKPOINT_VERSION = 1


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from non-float data."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (float64 for oracle checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


class Tensor:
    """Dense n-dimensional float array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same buffer, no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar used throughout the model code
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple, vjp) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append(_Node(out, inputs, vjp))
    return out


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate gradient buffers for everything the scalar loss depends on.

    Walks the tape once, in reverse recording order; the tape is cleared
    afterwards whether or not the traversal raises.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward needs a scalar loss, got shape {shape}")
    if not _TAPE:
        raise ValueError("computation tape is empty")
    try:
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(_TAPE):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            grads = node.vjp(out_grad)
            for inp, g in zip(node.inputs, grads):
                if g is not None:
                    inp.accumulate_grad(g)
    finally:
        _TAPE.clear()


# ---------------------------------------------------------------------------
# elementwise and broadcasting primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return (_reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape))

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return (_reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape))

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (
            _reduce_to_shape(g * b_data, a.shape),
            _reduce_to_shape(g * a_data, b.shape),
        )

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (
            _reduce_to_shape(g / b_data, a.shape),
            _reduce_to_shape(-g * a_data / (b_data * b_data), b.shape),
        )

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    out = Tensor(out_data)
    return _record(out, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    a_data = a.data
    return _record(out, (a,), lambda g: (g / a_data,))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = Tensor(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), vjp)


def max_with_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(np.maximum(a.data, c))
    mask = a.data > c

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _restore_axis(g, axis, keepdims):
    if keepdims or axis is None:
        return g
    return np.expand_dims(g, axis)


def sum_over_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    in_shape = a.shape

    def vjp(g):
        g = _restore_axis(g, axis, keepdims)
        if axis is None:
            return (np.full(in_shape, g, dtype=g.dtype),)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record(out, (a,), vjp)


def mean_over_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))
    in_shape = a.shape
    count = a.size if axis is None else in_shape[axis]

    def vjp(g):
        scaled = _restore_axis(g, axis, keepdims) / count
        if axis is None:
            return (np.full(in_shape, scaled, dtype=scaled.dtype),)
        return (np.broadcast_to(scaled, in_shape).copy(),)

    return _record(out, (a,), vjp)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis; gradient is 0 at the origin."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    out = Tensor(norm if keepdims else np.squeeze(norm, axis=axis))
    a_data = a.data

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm == 0.0, 1.0, norm)
        return (g * a_data / safe,)

    return _record(out, (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    res = np.log(total) + m
    out = Tensor(res if keepdims else np.squeeze(res, axis=axis))
    soft = shifted / total

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# normalization and attention primitives
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _record(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    soft = np.exp(y)

    def vjp(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)
    gain_data = gain.data

    def vjp(g):
        dxhat = g * gain_data
        # classic layer-norm backward over the trailing axis
        mean_dxhat = np.mean(dxhat, axis=-1, keepdims=True)
        mean_dxhat_xhat = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        dgain = _reduce_to_shape(g * xhat, gain.shape)
        dbias = _reduce_to_shape(g, bias.shape)
        return (dx, dgain, dbias)

    return _record(out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return (_reduce_to_shape(ga, a.shape), _reduce_to_shape(gb, b.shape))

    return _record(out, (a, b), vjp)


def conv1x1(x, weight, bias=None) -> Tensor:
    """Pointwise channel mixing: (..., T, C_in) x (C_in, C_out) -> (..., T, C_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"conv1x1 channels differ: input {x.shape}, weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def conv3x3_grid(x, kernel, bias=None) -> Tensor:
    """3x3 convolution over tokens laid out on a square grid, zero padded.

    ``x`` is (M, C) or (B, M, C) with M a perfect square; ``kernel`` is
    (3, 3, C_in, C_out). Tokens are reshaped to the sqrt(M) x sqrt(M) grid in
    row-major order, convolved at stride 1 with one-pixel zero padding, and
    flattened back.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze_batch = x.ndim == 2
    data = x.data[None] if squeeze_batch else x.data
    if data.ndim != 3:
        raise ValueError(f"conv3x3_grid input must be (M, C) or (B, M, C), got {x.shape}")
    batch, m, c_in = data.shape
    side = int(round(np.sqrt(m)))
    if side * side != m:
        raise ValueError(f"conv3x3_grid token count {m} is not a perfect square")
    if kernel.shape[:3] != (3, 3, c_in):
        raise ValueError(f"conv3x3_grid kernel {kernel.shape} does not fit input {x.shape}")
    c_out = kernel.shape[3]

    grid = data.reshape(batch, side, side, c_in)
    padded = np.zeros((batch, side + 2, side + 2, c_in), dtype=data.dtype)
    padded[:, 1:-1, 1:-1, :] = grid
    # windows[b, i, j, c, di, dj] = padded[b, i + di, j + dj, c]
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    out_grid = np.einsum("bijcde,deco->bijo", windows, kernel.data, optimize=True)
    out_data = out_grid.reshape(batch, m, c_out)
    if squeeze_batch:
        out_data = out_data[0]
    out = Tensor(out_data)
    kernel_data = kernel.data

    def vjp(g):
        g3 = g[None] if squeeze_batch else g
        g_grid = g3.reshape(batch, side, side, c_out)
        gk = np.einsum("bijcde,bijo->deco", windows, g_grid, optimize=True)
        # scatter-add through the kernel taps back onto the padded grid
        contrib = np.einsum("bijo,deco->bijdec", g_grid, kernel_data, optimize=True)
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, di : di + side, dj : dj + side, :] += contrib[:, :, :, di, dj, :]
        gx = gpad[:, 1:-1, 1:-1, :].reshape(batch, m, c_in)
        if squeeze_batch:
            gx = gx[0]
        return (gx, gk)

    result = _record(out, (x, kernel), vjp)
    if bias is not None:
        result = add(result, bias)
    return result


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    in_shape = a.shape
    return _record(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose_axes(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inverse = np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for k in range(len(sizes)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[k], offsets[k + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _record(out, tuple(tensors), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index])
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(out, (a,), vjp)


def select_index(a, indices) -> Tensor:
    """Pick one column per row: (N, C) with (N,) ints -> (N,)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"select_index needs a (N, C) tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# factories and initialization
# ---------------------------------------------------------------------------


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out.astype(_DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# checkpoint format: magic "GFSC", version u32, then per tensor
# (u32 name length, utf8 name, u32 rank, u32 dims..., little-endian f32 data)
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays in sorted-name order so round-trips are bit-exact."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(tensors):
            value = tensors[name]
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = arr.astype("<f4", copy=False)
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into {name: float32 ndarray}."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            header = fh.read(4)
            if not header:
                break
            (name_len,) = struct.unpack("<I", header)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * count)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
