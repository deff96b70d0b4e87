"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays of rank <= 4 (batch, channels, height, width for
images/features). Every differentiable operation records itself on the
output tensor: the inputs it consumed and a closure computing input
gradients from the output gradient. ``backward`` topologically orders the
recorded operations reachable from a scalar loss, replays them in reverse,
and then frees the graph (first-order gradients only; the tape cannot be
replayed twice).

Convolution follows the cross-correlation convention (no kernel flip) and
bilinear upsampling is corner-aligned. Dtype follows the inputs: parameter
tensors default to float32, gradient-check tests build float64 graphs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus the bookkeeping reverse mode needs.

    ``grad`` accumulates across backward calls until ``zero_grad``; reading
    it on a parameter that no backward pass reached yields zeros.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_prev", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are rank <= 4, got rank {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None
        self._prev: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._freed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flags = "grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, {flags}, op={self._op or 'leaf'})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def _accumulate(t: Tensor, g: np.ndarray):
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t._grad is None:
        t._grad = g.astype(t.data.dtype, copy=True)
    else:
        t._grad += g


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, linking it into the graph when recording is on.

    ``backward_fn`` receives the output gradient and returns one gradient
    array (or None) per input, in order.
    """
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward_fn
        out._op = op
    return out


def toposort(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, producers before consumers."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or node._backward is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The loss must be scalar. Gradients accumulate on leaves; the traversed
    portion of the graph is freed afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise UsageError("backward was already run on this graph; the tape is freed")
    if not loss.requires_grad:
        raise UsageError("loss does not require grad; nothing to differentiate")

    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))  # loss is itself a leaf
        return

    order = toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(order):
        gout = grads.pop(id(node), None)
        if gout is None:
            continue
        input_grads = node._backward(gout)
        for parent, g in zip(node._prev, input_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, g)  # leaf
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = g if prev is None else prev + g

    for node in order:
        node._backward = None
        node._prev = ()
    loss._freed = True


# -- elementwise -------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return record(a.data * k, (a,), lambda g: (g * k,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    # Evaluated in halves so neither exp overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return record(out, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    # the small negative slope keeps a gradient path through inactive units,
    # so a regression head pulled toward zero output cannot permanently
    # silence the layers feeding it
    out = np.where(a.data > 0, a.data, slope * a.data)
    grad_factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return record(out, (a,), lambda g: (g * grad_factor,), "leaky_relu")


# -- reductions and reshaping ------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return record(
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return record(
        np.asarray(a.data.mean(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
        "mean",
    )


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate N,C,H,W tensors along the channel axis."""
    if not tensors:
        raise UsageError("concat_channels needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.ndim != 4 or t.data.shape[0] != base[0] or t.data.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: {t.data.shape} does not align with {base}")
    widths = [t.data.shape[1] for t in tensors]
    edges = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(widths)))

    return record(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward_fn, "concat")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """View of channels [start, stop) of an N,C,H,W tensor."""
    if a.data.ndim != 4:
        raise ShapeError(f"slice_channels expects rank 4, got {a.data.shape}")
    c = a.data.shape[1]
    if not (0 <= start < stop <= c):
        raise UsageError(f"channel slice [{start}:{stop}) out of range for C={c}")

    def backward_fn(g):
        gx = np.zeros_like(a.data)
        gx[:, start:stop] = g
        return (gx,)

    return record(a.data[:, start:stop].copy(), (a,), backward_fn, "slice")


def softmax_channels(a: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis of an N,C,H,W tensor."""
    if a.data.ndim != 4:
        raise ShapeError(f"softmax_channels expects rank 4, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return record(out, (a,), backward_fn, "softmax")


# -- convolution -------------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    num = size + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise ConfigError(
            f"conv2d: {axis}={size} with kernel {k}, stride {stride}, pad {pad} "
            f"gives a non-integer output extent"
        )
    return num // stride + 1


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = padded.shape
    s0, s1, s2, s3 = padded.strides
    cols = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,) or None.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: input rank {x.data.ndim}, weight rank {weight.data.ndim}, both must be 4")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    ho = _conv_out_extent(h, kh, stride, pad, "H")
    wo = _conv_out_extent(w, kw, stride, pad, "W")

    if pad:
        padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        padded = x.data
    cols = _im2col(padded, kh, kw, stride, ho, wo)  # (N, K, P)
    w2 = weight.data.reshape(cout, -1)  # (Cout, K)
    out = np.matmul(w2, cols)  # (N, Cout, P)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gflat = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("nop,nkp->ok", gflat, cols).reshape(weight.data.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, gflat).reshape(n, cin, kh, kw, ho, wo)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, :, i, j]
            gx = gpad[:, :, pad : pad + h, pad : pad + w] if pad else gpad
        if bias is not None and bias.requires_grad:
            gb = gflat.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, inputs, backward_fn, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; extents must divide by k."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects rank 4, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if k < 1 or h % k or w % k:
        raise ConfigError(f"avg_pool2d: extents {h}x{w} not divisible by k={k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward_fn(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return record(out, (x,), backward_fn, "avg_pool")


# -- bilinear upsampling -----------------------------------------------------


def _upsample_matrix(size: int, factor: int, dtype) -> np.ndarray:
    """Corner-aligned interpolation matrix mapping length ``size`` to ``size*factor``."""
    out_size = size * factor
    m = np.zeros((out_size, size), dtype=dtype)
    if size == 1 or out_size == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(out_size, dtype=np.float64) * (size - 1) / (out_size - 1)
    lo = np.floor(src).astype(int)
    lo = np.minimum(lo, size - 2)
    frac = src - lo
    m[np.arange(out_size), lo] = 1.0 - frac
    m[np.arange(out_size), lo + 1] = frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling of an N,C,H,W tensor by an integer factor.

    Values are interpolated only; callers upsampling a flow field must also
    scale the values by ``factor`` (displacements live in output-pixel units).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects rank 4, got {x.data.shape}")
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return record(x.data.copy(), (x,), lambda g: (g,), "upsample")
    _, _, h, w = x.data.shape
    mh = _upsample_matrix(h, factor, x.data.dtype)
    mw = _upsample_matrix(w, factor, x.data.dtype)
    out = np.einsum("ij,ncjk,lk->ncil", mh, x.data, mw, optimize=True)

    def backward_fn(g):
        return (np.einsum("ij,ncil,lk->ncjk", mh, g, mw, optimize=True),)

    return record(out, (x,), backward_fn, "upsample")


# -- parameter helpers -------------------------------------------------------


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_init(
    rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32, gain: float = 1.0
) -> Tensor:
    """Parameter drawn from U(-gain/sqrt(fan_in), gain/sqrt(fan_in)).

    gain 1 is the classic linear-layer default; sqrt(6) gives He-style bounds
    that keep activation variance roughly constant through a ReLU conv stack
    (uniform variance is bound^2/3, and the ReLU halves it again).
    """
    k = gain / np.sqrt(fan_in)
    return parameter(rng.uniform(-k, k, size=shape), dtype=dtype)


def zeros_param(shape: tuple, dtype=np.float32) -> Tensor:
    return parameter(np.zeros(shape), dtype=dtype)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()
