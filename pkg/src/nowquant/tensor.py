"""Dense-tensor reverse-mode automatic differentiation on NumPy arrays.

The engine covers exactly the operations the forecasting backbone and its
losses need: elementwise arithmetic, the activations, channel
concatenation/selection, direct 2-D convolution (full, depthwise and
pointwise), 2x2 max pooling, x2 bilinear upsampling and the reductions used
by the attention gates. Nothing symbolic, nothing lazy: every op computes
its forward value eagerly and, when a :class:`GradientTape` is active,
records a closure that maps the output gradient to input gradients.

Conventions
-----------
* Arrays are C-contiguous ``float32`` by default; ``float64`` is supported
  for high-precision verification runs. An operation never mixes dtypes.
* Tensors are treated as immutable after creation. The only sanctioned
  mutation is gradient accumulation (``grad``) and the trainer's in-place
  parameter update.
* Any operation whose result contains NaN or infinity raises
  :class:`~nowquant.errors.NumericError`: overflow is an error here, never a
  silent value.
* ``backward`` accumulates into ``grad`` of leaf tensors; calling it twice
  without zeroing doubles the gradients. That is intentional and relied on
  nowhere, but documented so nobody trips over it.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.float32, np.float64)


def _ensure_finite(values: np.ndarray, op_name: str) -> None:
    # Single fused pass: a float64 accumulator cannot overflow on f32 data,
    # and any NaN/inf in the input poisons the sum.
    if not np.isfinite(values.sum(dtype=np.float64)):
        if np.isfinite(values).all():
            return
        raise NumericError(f"{op_name} produced non-finite values")


class Tensor:
    """A dense array plus the bookkeeping reverse-mode AD needs.

    Parameters
    ----------
    values : array-like
        Initial contents. Copied/cast to a C-contiguous float array.
    requires_grad : bool
        Leaf tensors created with ``requires_grad=True`` receive gradient
        accumulation during :func:`backward`.
    dtype : numpy dtype, optional
        ``float32`` (default) or ``float64``.

    Attributes
    ----------
    values : np.ndarray
        The payload. Treat as read-only outside the trainer.
    grad : np.ndarray or None
        Accumulated gradient for leaf tensors, ``None`` until first use.
    requires_grad : bool
        Whether gradients flow into (or through) this tensor.
    """

    __slots__ = ("values", "requires_grad", "grad", "_op_output")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else DEFAULT_DTYPE
        if np.dtype(dtype).type not in _SUPPORTED_DTYPES:
            raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.values = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op_output = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        _ensure_finite(g, "gradient accumulation")
        if self.grad is None:
            self.grad = g.astype(self.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


class _TapeNode:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradientTape:
    """Append-only record of operations, in execution order.

    Execution order is a topological order of the computation graph, so the
    reverse sweep in :func:`backward` visits every node after all of its
    consumers. One tape per training step, single-threaded; parallel workers
    must each own a private tape.

    Use as a context manager::

        with GradientTape() as tape:
            loss = mse_loss(y, forward(...))
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("gradient tapes exited out of order")


_TAPE_STACK: list[GradientTape] = []


def _active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(values: np.ndarray, inputs: tuple, backward_fn, op_name: str) -> Tensor:
    _ensure_finite(values, op_name)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires, dtype=values.dtype)
    out._op_output = True
    tape = _active_tape()
    if tape is not None and requires:
        tape.nodes.append(_TapeNode(inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: GradientTape) -> None:
    """Reverse sweep: populate ``grad`` on every leaf the loss depends on.

    ``loss`` must hold a single element. Gradients of interior nodes live in
    a scratch map for the duration of the sweep; only leaf tensors (inputs
    and parameters) keep their accumulated ``grad`` afterwards, so repeated
    calls accumulate into leaves exactly once per call.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    if not loss._op_output and loss.requires_grad:
        loss.accumulate_grad(flow[id(loss)])
    for node in reversed(tape.nodes):
        out_grad = flow.pop(id(node.output), None)
        if out_grad is None:
            continue
        input_grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._op_output:
                prev = flow.get(id(tensor))
                flow[id(tensor)] = grad if prev is None else prev + grad
            else:
                tensor.accumulate_grad(grad)



def _overflow_checked(fn):
    # NumPy's overflow warning is redundant noise here: every op output runs
    # through _ensure_finite, which turns real overflow into NumericError.
    return np.errstate(over="ignore", invalid="ignore")(fn)

def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(f"mixed dtypes {dt} and {t.dtype} in one operation")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Reverse of NumPy broadcasting: sum over prepended axes, then over axes
    # that were stretched from size 1.
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


@_overflow_checked
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    values = a.values + b.values

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output(values, (a, b), backward_fn, "add")


@_overflow_checked
def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    values = a.values - b.values

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output(values, (a, b), backward_fn, "sub")


@_overflow_checked
def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    values = a.values * b.values
    av, bv = a.values, b.values

    def backward_fn(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make_output(values, (a, b), backward_fn, "mul")


@_overflow_checked
def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar, preserving dtype."""
    c = x.values.dtype.type(s)
    values = x.values * c

    def backward_fn(g):
        return (g * c,)

    return _make_output(values, (x,), backward_fn, "scale")


@_overflow_checked
def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    _check_same_dtype(a, b)
    values = np.maximum(a.values, b.values)
    first = a.values >= b.values

    def backward_fn(g):
        ga = np.where(first, g, 0)
        gb = np.where(first, 0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make_output(values, (a, b), backward_fn, "maximum")


@_overflow_checked
def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    values = np.abs(x.values)
    sign = np.sign(x.values)

    def backward_fn(g):
        return (g * sign,)

    return _make_output(values, (x,), backward_fn, "absolute")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


@_overflow_checked
def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at and below zero."""
    values = np.maximum(x.values, 0)
    positive = x.values > 0

    def backward_fn(g):
        return (np.where(positive, g, 0),)

    return _make_output(values, (x,), backward_fn, "relu")


@_overflow_checked
def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """x for x > 0 else slope*x; the subgradient at 0 is the slope."""
    s = x.values.dtype.type(slope)
    positive = x.values > 0
    values = np.where(positive, x.values, x.values * s)

    def backward_fn(g):
        return (np.where(positive, g, g * s),)

    return _make_output(values, (x,), backward_fn, "leaky_relu")


@_overflow_checked
def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; saturates to (0, 1) without overflow."""
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    with np.errstate(over="ignore", under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ex = np.exp(v[~pos])
        out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * out * (1 - out),)

    return _make_output(out, (x,), backward_fn, "sigmoid")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


@_overflow_checked
def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar tensor."""
    values = np.asarray(x.values.sum(), dtype=x.dtype)
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=False),)

    return _make_output(values, (x,), backward_fn, "sum_all")


@_overflow_checked
def global_avg_pool2d(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) spatial mean."""
    if x.values.ndim != 4:
        raise DimensionError(f"global_avg_pool2d needs NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    values = x.values.mean(axis=(2, 3), keepdims=True)
    inv = x.values.dtype.type(1.0 / (h * w))

    def backward_fn(g):
        return (np.broadcast_to(g * inv, (n, c, h, w)).astype(x.dtype, copy=False),)

    return _make_output(values, (x,), backward_fn, "global_avg_pool2d")


@_overflow_checked
def channel_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 2, H, W): per-pixel mean and max over channels.

    Feeds the spatial attention gate. The max gradient routes to the lowest
    channel index on ties.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"channel_pool needs NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    mean = x.values.mean(axis=1, keepdims=True)
    arg = x.values.argmax(axis=1)
    mx = np.take_along_axis(x.values, arg[:, None], axis=1)
    values = np.concatenate([mean, mx], axis=1)
    inv = x.values.dtype.type(1.0 / c)

    def backward_fn(g):
        gx = np.broadcast_to(g[:, :1] * inv, (n, c, h, w)).astype(x.dtype).copy()
        gmax = np.zeros((n, c, h, w), dtype=x.dtype)
        np.put_along_axis(gmax, arg[:, None], g[:, 1:2], axis=1)
        return (gx + gmax,)

    return _make_output(values, (x,), backward_fn, "channel_pool")


# ---------------------------------------------------------------------------
# channel layout
# ---------------------------------------------------------------------------


@_overflow_checked
def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis. A zero-channel operand is legal."""
    _check_same_dtype(a, b)
    if a.values.ndim != 4 or b.values.ndim != 4:
        raise DimensionError("concat_channels needs NCHW inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    values = np.concatenate([a.values, b.values], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return _make_output(values, (a, b), backward_fn, "concat_channels")


@_overflow_checked
def take_channels(x: Tensor, indices) -> Tensor:
    """Select channels by index list, preserving the given order."""
    if x.values.ndim != 4:
        raise DimensionError(f"take_channels needs NCHW input, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("take_channels needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ContractError(f"channel index out of range for {x.shape[1]} channels")
    values = x.values[:, idx]

    def backward_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _make_output(values, (x,), backward_fn, "take_channels")


# ---------------------------------------------------------------------------
# convolution family (direct, im2col-style patch views)
# ---------------------------------------------------------------------------


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def _conv_geometry(x: Tensor, kh: int, kw: int, padding: int, stride: int, op: str):
    if x.values.ndim != 4:
        raise DimensionError(f"{op} needs NCHW input, got shape {x.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"{op} needs odd kernel sizes, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ContractError(f"{op}: stride must be >= 1 and padding >= 0")
    _, _, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"{op}: kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}")
    return ho, wo


def _pad_spatial(values: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return values
    return np.pad(values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _scatter_patches(contrib_fn, xp_shape, kh, kw, stride, ho, wo, dtype):
    # Accumulate input gradients by replaying each kernel offset as a strided
    # slice-add over the padded input.
    dxp = np.zeros(xp_shape, dtype=dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += contrib_fn(a, b)
    return dxp


@_overflow_checked
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int = 0, stride: int = 1) -> Tensor:
    """Direct 2-D cross-correlation.

    ``x`` is (N, C, H, W), ``weight`` is (K, C, kh, kw) with odd kernel
    sides, ``bias`` is (K,) or None. Output height is
    ``(H + 2*padding - kh) // stride + 1`` and likewise for width.
    """
    if weight.values.ndim != 4:
        raise DimensionError(f"conv2d weight must be (K, C, kh, kw), got shape {weight.shape}")
    k, cw, kh, kw = weight.shape
    ho, wo = _conv_geometry(x, kh, kw, padding, stride, "conv2d")
    if x.shape[1] != cw:
        raise DimensionError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d bias must be ({k},), got shape {bias.shape}")
    _check_same_dtype(*(t for t in (x, weight, bias) if t is not None))

    xp = _pad_spatial(x.values, padding)
    n = x.shape[0]
    # im2col + matmul; for a 1x1 kernel this degenerates to the exact
    # arithmetic of pointwise_conv2d.
    col = _patch_view(xp, kh, kw, stride, ho, wo).reshape(n, cw * kh * kw, ho * wo)
    w2 = weight.values.reshape(k, cw * kh * kw)
    values = np.matmul(w2, col).reshape(n, k, ho, wo)
    if bias is not None:
        values = values + bias.values[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gf = g.reshape(n, k, ho * wo)
        dw = np.matmul(gf, col.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        db = None if bias is None else g.sum(axis=(0, 2, 3))
        dcol = np.matmul(w2.T, gf).reshape(n, cw, kh, kw, ho, wo)
        dxp = _scatter_patches(
            lambda a, b: dcol[:, :, a, b],
            xp.shape, kh, kw, stride, ho, wo, x.dtype,
        )
        dx = dxp if padding == 0 else dxp[:, :, padding:-padding, padding:-padding]
        return (dx, dw) if bias is None else (dx, dw, db)

    return _make_output(values, inputs, backward_fn, "conv2d")


@_overflow_checked
def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int = 0, stride: int = 1) -> Tensor:
    """Per-channel 2-D cross-correlation: weight (C, kh, kw), one filter per channel."""
    if weight.values.ndim != 3:
        raise DimensionError(f"depthwise weight must be (C, kh, kw), got shape {weight.shape}")
    c, kh, kw = weight.shape
    ho, wo = _conv_geometry(x, kh, kw, padding, stride, "depthwise_conv2d")
    if x.shape[1] != c:
        raise DimensionError(f"depthwise channel mismatch: input has {x.shape[1]}, weight expects {c}")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"depthwise bias must be ({c},), got shape {bias.shape}")
    _check_same_dtype(*(t for t in (x, weight, bias) if t is not None))

    xp = _pad_spatial(x.values, padding)
    # Shifted-slice accumulation beats patch-view einsum here: each kernel
    # offset is one fused multiply-add over a contiguous slab.
    wv = weight.values
    values = np.zeros((x.shape[0], c, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            values += wv[None, :, a, b, None, None] * xp[
                :, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
    if bias is not None:
        values = values + bias.values[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        dw = np.empty_like(wv)
        for a in range(kh):
            for b in range(kw):
                sl = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
                dw[:, a, b] = (g * sl).sum(axis=(0, 2, 3))
        db = None if bias is None else g.sum(axis=(0, 2, 3))
        dxp = _scatter_patches(
            lambda a, b: g * wv[None, :, a, b, None, None],
            xp.shape, kh, kw, stride, ho, wo, x.dtype,
        )
        dx = dxp if padding == 0 else dxp[:, :, padding:-padding, padding:-padding]
        return (dx, dw) if bias is None else (dx, dw, db)

    return _make_output(values, inputs, backward_fn, "depthwise_conv2d")


@_overflow_checked
def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """1x1 convolution mixing channels: weight (K, C), bias (K,) or None."""
    if x.values.ndim != 4:
        raise DimensionError(f"pointwise_conv2d needs NCHW input, got shape {x.shape}")
    if weight.values.ndim != 2:
        raise DimensionError(f"pointwise weight must be (K, C), got shape {weight.shape}")
    k, cw = weight.shape
    if x.shape[1] != cw:
        raise DimensionError(f"pointwise channel mismatch: input has {x.shape[1]}, weight expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"pointwise bias must be ({k},), got shape {bias.shape}")
    _check_same_dtype(*(t for t in (x, weight, bias) if t is not None))

    n, _, h, w = x.shape
    # Channel mixing is a batched matmul; BLAS beats einsum dispatch here.
    flat = x.values.reshape(n, cw, h * w)
    values = np.matmul(weight.values, flat).reshape(n, k, h, w)
    if bias is not None:
        values = values + bias.values[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gf = g.reshape(n, k, h * w)
        dw = np.matmul(gf, flat.transpose(0, 2, 1)).sum(axis=0)
        db = None if bias is None else g.sum(axis=(0, 2, 3))
        dx = np.matmul(weight.values.T, gf).reshape(n, cw, h, w)
        return (dx, dw) if bias is None else (dx, dw, db)

    return _make_output(values, inputs, backward_fn, "pointwise_conv2d")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


@_overflow_checked
def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; H and W must be even.

    The gradient routes to the first maximal element of each window in
    row-major order, so a constant window sends everything to its top-left
    corner.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"max_pool2 needs NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even H and W, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.values.reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    arg = windows.argmax(axis=-1)
    values = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=x.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, c, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _make_output(values, (x,), backward_fn, "max_pool2")


_BILINEAR_CACHE: dict[int, np.ndarray] = {}


def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) row-interpolation matrix for x2 upsampling, half-pixel centres."""
    m = _BILINEAR_CACHE.get(n)
    if m is None:
        m = np.zeros((2 * n, n), dtype=np.float64)
        for i in range(2 * n):
            s = min(max(i / 2.0 - 0.25, 0.0), n - 1.0)
            i0 = int(np.floor(s))
            i1 = min(i0 + 1, n - 1)
            f = s - i0
            m[i, i0] += 1.0 - f
            m[i, i1] += f
        _BILINEAR_CACHE[n] = m
    return m


@_overflow_checked
def bilinear_upsample2(x: Tensor) -> Tensor:
    """Double H and W by bilinear interpolation with half-pixel alignment.

    Implemented as two small matrix products (rows then columns), which makes
    the backward pass the exact transpose. Constant inputs stay constant and
    the op is linear.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"bilinear_upsample2 needs NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    mh = _bilinear_matrix(h).astype(x.dtype)
    mw = _bilinear_matrix(w).astype(x.dtype)
    flat = x.values.reshape(n * c, h, w)
    values = (mh @ flat @ mw.T).reshape(n, c, 2 * h, 2 * w)

    def backward_fn(g):
        gflat = g.reshape(n * c, 2 * h, 2 * w)
        gx = (mh.T @ gflat @ mw).reshape(n, c, h, w)
        return (gx,)

    return _make_output(values, (x,), backward_fn, "bilinear_upsample2")
