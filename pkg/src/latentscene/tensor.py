"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float array. Operations on tracked tensors record
their inputs and a local backward rule on the node they produce; creation
order doubles as a topological order, so `backward` replays the recorded
operations once, in reverse. Only the operations the networks need are
provided: dense layers, strided 2d (transpose) convolution, elementwise
maps, reductions, slicing/concatenation along the last axis, and the
Gaussian reparameterization.

Float32 is the working precision for training; build tensors from float64
arrays to run the same graphs at oracle precision (gradient checks).
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)
_op_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """N-dimensional float array, optionally recording gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn",
                 "_op_id", "_backward_ran")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaves own a grad buffer from the start so an untouched leaf
        # reads back exactly zero after any backward pass.
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._grad_fn = None
        self._op_id = next(_op_ids)
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype},"
                f" requires_grad={self.requires_grad})")

    # Arithmetic sugar; heavy lifting lives in the module functions below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise UsageError("tensor/tensor division is not supported; multiply by a constant")
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.data.size)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Tape:
    """Recorded operations of one computation, in creation (topological) order."""

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def trace(root):
    """Collect the op nodes reachable from `root` as an ordered tape.

    Creation ids are monotone, so sorting by id yields an order in which
    every operation's inputs precede it.
    """
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._grad_fn is not None:
            nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._op_id)
    return Tape(nodes)


def backward(loss):
    """Populate .grad on every tracked leaf below the scalar `loss`."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise UsageError("backward on an untracked tensor")
    if loss._backward_ran:
        raise UsageError("backward called twice on the same graph; rebuild the graph or reset")
    tape = trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        node._grad_fn(node.grad)
    loss._backward_ran = True


def _as_const(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_same_dtype(a, b, opname):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{opname}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} do not match")


def _node(data, parents, grad_fn):
    """Create an op node; records the backward rule only while tracking."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._grad_fn = grad_fn
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(a, Tensor):
        a = _as_const(a, b)
    if not isinstance(b, Tensor):
        b = _as_const(b, a)
    _check_same_dtype(a, b, "add")
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not match")
    data = a.data + b.data

    def grad_fn(g):
        _accumulate(a, g if a.data.shape == g.shape else np.full_like(a.data, g.sum()))
        _accumulate(b, g if b.data.shape == g.shape else np.full_like(b.data, g.sum()))

    return _node(data, (a, b), grad_fn)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _as_const(a, b)
    if not isinstance(b, Tensor):
        b = _as_const(b, a)
    return add(a, mul(b, -1.0))


def mul(a, b):
    """Elementwise product; `b` may be a python scalar."""
    if not isinstance(b, Tensor):
        scale = float(b)
        data = a.data * np.asarray(scale, dtype=a.data.dtype)

        def grad_scalar(g):
            _accumulate(a, g * np.asarray(scale, dtype=g.dtype))

        return _node(data, (a,), grad_scalar)
    _check_same_dtype(a, b, "mul")
    _check_same_shape(a, b, "mul")
    data = a.data * b.data

    def grad_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(data, (a, b), grad_fn)


def mul_const(a, const):
    """Multiply by an untracked array, numpy broadcasting allowed."""
    const = np.asarray(const, dtype=a.data.dtype)
    data = a.data * const

    def grad_fn(g):
        ga = g * const
        if ga.shape != a.data.shape:
            raise ShapeError(f"mul_const: constant of shape {const.shape} broadcasts"
                             f" {a.data.shape} up to {ga.shape}")
        _accumulate(a, ga)

    return _node(data, (a,), grad_fn)


def power(a, exponent):
    exponent = float(exponent)
    data = a.data ** exponent

    def grad_fn(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(data, (a,), grad_fn)


def exp(a):
    data = np.exp(a.data)

    def grad_fn(g):
        _accumulate(a, g * data)

    return _node(data, (a,), grad_fn)


def log(a):
    data = np.log(a.data)

    def grad_fn(g):
        _accumulate(a, g / a.data)

    return _node(data, (a,), grad_fn)


def clip(a, low, high):
    """Clamp values; gradient passes only through unclamped entries."""
    data = np.clip(a.data, low, high)

    def grad_fn(g):
        inside = ((a.data > low) & (a.data < high)).astype(g.dtype)
        _accumulate(a, g * inside)

    return _node(data, (a,), grad_fn)


def total(a):
    """Sum of all entries, as a scalar tensor."""
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def grad_fn(g):
        _accumulate(a, np.full_like(a.data, g.reshape(())))

    return _node(data, (a,), grad_fn)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def grad_fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), grad_fn)


def narrow(a, start, stop):
    """Contiguous slice along the last axis."""
    data = a.data[..., start:stop].copy()

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        _accumulate(a, ga)

    return _node(data, (a,), grad_fn)


def concat(parts):
    """Concatenate along the last axis."""
    if not parts:
        raise UsageError("concat of zero tensors")
    dtype = parts[0].data.dtype
    for p in parts[1:]:
        _check_same_dtype(parts[0], p, "concat")
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]

    def grad_fn(g):
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, np.ascontiguousarray(g[..., offset:offset + w]))
            offset += w

    return _node(data, tuple(parts), grad_fn)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(a):
    data = np.maximum(a.data, 0.0)

    def grad_fn(g):
        _accumulate(a, g * (a.data > 0.0).astype(g.dtype))

    return _node(data, (a,), grad_fn)


def sigmoid(a):
    # Stable two-branch form; exp of a negative magnitude only.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def grad_fn(g):
        _accumulate(a, g * data * (1.0 - data))

    return _node(data, (a,), grad_fn)


def tanh(a):
    data = np.tanh(a.data)

    def grad_fn(g):
        _accumulate(a, g * (1.0 - data * data))

    return _node(data, (a,), grad_fn)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activations(a, kind):
    """Elementwise activation by name: relu, sigmoid or tanh."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------

def dense(x, weight, bias):
    """Affine map: out[b,o] = sum_i x[b,i] * weight[i,o] + bias[o]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense: input {x.data.shape} and weight {weight.data.shape}"
                         " must both be rank 2")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"dense: input {x.data.shape} does not match weight"
                         f" {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"dense: bias {bias.data.shape} does not match weight"
                         f" {weight.data.shape}")
    _check_same_dtype(x, weight, "dense")
    _check_same_dtype(x, bias, "dense")
    data = x.data @ weight.data + bias.data

    def grad_fn(g):
        _accumulate(x, g @ weight.data.T)
        _accumulate(weight, x.data.T @ g)
        _accumulate(bias, g.sum(axis=0))

    return _node(data, (x, weight, bias), grad_fn)


def add_channel_bias(x, bias):
    """Add a per-channel bias to a B,C,H,W activation map."""
    if x.data.ndim != 4 or bias.data.shape != (x.data.shape[1],):
        raise ShapeError(f"channel bias {bias.data.shape} does not match input"
                         f" {x.data.shape}")
    _check_same_dtype(x, bias, "add_channel_bias")
    data = x.data + bias.data[None, :, None, None]

    def grad_fn(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _node(data, (x, bias), grad_fn)


# ---------------------------------------------------------------------------
# Convolutions (im2col based)
# ---------------------------------------------------------------------------

def _conv_geometry(extent, kernel, stride, padding):
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigError(f"convolution produces no output: extent {extent},"
                          f" kernel {kernel}, stride {stride}, padding {padding}")
    return out


def _check_conv_args(kernel, stride, padding):
    if kernel.data.ndim != 4 or kernel.data.shape[2] != kernel.data.shape[3]:
        raise ShapeError(f"kernel must be F,C,K,K; got {kernel.data.shape}")
    if kernel.data.shape[2] % 2 != 1:
        raise ConfigError(f"kernel extent must be odd, got {kernel.data.shape[2]}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")


def _window_cols(padded, kernel_extent, stride, rows, cols):
    """Flattened im2col patches: (B, rows*cols, C*K*K)."""
    win = sliding_window_view(padded, (kernel_extent, kernel_extent), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :rows, :cols]
    b, c = win.shape[0], win.shape[1]
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(win).reshape(b, rows * cols, -1)


def _scatter_windows(cols, batch, channels, kernel_extent, stride, rows, cols_n,
                     out_rows, out_cols):
    """Adjoint of _window_cols: scatter-add patches into a (B,C,H,W) buffer."""
    patches = cols.reshape(batch, rows, cols_n, channels, kernel_extent, kernel_extent)
    patches = np.ascontiguousarray(patches.transpose(0, 3, 4, 5, 1, 2))
    out = np.zeros((batch, channels, out_rows, out_cols), dtype=cols.dtype)
    for ki in range(kernel_extent):
        for kj in range(kernel_extent):
            out[:, :, ki:ki + stride * rows:stride,
                kj:kj + stride * cols_n:stride] += patches[:, :, ki, kj]
    return out


def conv2d(x, kernel, stride, padding):
    """Strided 2d cross-correlation of B,C,H,W input with F,C,K,K kernels.

    The trailing rows/columns that do not fill a whole window are dropped
    (floor semantics), matching the usual convolution shape rule.
    """
    _check_conv_args(kernel, stride, padding)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be B,C,H,W; got {x.data.shape}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(f"conv2d: input {x.data.shape} does not match kernel"
                         f" {kernel.data.shape}")
    _check_same_dtype(x, kernel, "conv2d")
    batch, channels, height, width = x.data.shape
    filters, _, k, _ = kernel.data.shape
    out_h = _conv_geometry(height, k, stride, padding)
    out_w = _conv_geometry(width, k, stride, padding)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _window_cols(padded, k, stride, out_h, out_w)  # (B, L, C*K*K)
    kflat = kernel.data.reshape(filters, -1)
    out = cols @ kflat.T  # (B, L, F)
    data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(batch, filters, out_h, out_w)

    def grad_fn(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(batch, -1, filters)
        if kernel.requires_grad:
            gk = np.tensordot(gflat, cols, axes=([0, 1], [0, 1]))
            _accumulate(kernel, gk.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = gflat @ kflat  # (B, L, C*K*K)
            gpad = _scatter_windows(gcols, batch, channels, k, stride, out_h, out_w,
                                    height + 2 * padding, width + 2 * padding)
            if padding:
                gpad = gpad[:, :, padding:padding + height, padding:padding + width]
            _accumulate(x, np.ascontiguousarray(gpad))

    return _node(data, (x, kernel), grad_fn)


def transpose_conv2d(x, kernel, stride, padding, output_padding=0):
    """Adjoint of conv2d: B,F,H,W input with F,C,K,K kernels gives B,C,H',W'.

    H' = (H-1)*stride - 2*padding + K + output_padding. For shapes produced
    by conv2d, the inner-product identity
    <conv2d(x,k), y> == <x, transpose_conv2d(y,k)> holds exactly.
    """
    _check_conv_args(kernel, stride, padding)
    if x.data.ndim != 4:
        raise ShapeError(f"transpose_conv2d input must be B,F,H,W; got {x.data.shape}")
    if x.data.shape[1] != kernel.data.shape[0]:
        raise ShapeError(f"transpose_conv2d: input {x.data.shape} does not match"
                         f" kernel {kernel.data.shape}")
    if not 0 <= output_padding < max(stride, 1):
        raise ConfigError(f"output_padding must be in [0, stride); got"
                          f" {output_padding} with stride {stride}")
    _check_same_dtype(x, kernel, "transpose_conv2d")
    batch, filters, height, width = x.data.shape
    _, channels, k, _ = kernel.data.shape
    out_h = (height - 1) * stride - 2 * padding + k + output_padding
    out_w = (width - 1) * stride - 2 * padding + k + output_padding
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"transpose_conv2d produces no output for input"
                          f" {x.data.shape} with kernel {k}, stride {stride},"
                          f" padding {padding}")
    buf_h = (height - 1) * stride + k + output_padding
    buf_w = (width - 1) * stride + k + output_padding

    kflat = kernel.data.reshape(filters, -1)  # (F, C*K*K)
    xflat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(batch, -1, filters)
    cols = xflat @ kflat  # (B, H*W, C*K*K)
    buf = _scatter_windows(cols, batch, channels, k, stride, height, width, buf_h, buf_w)
    data = np.ascontiguousarray(buf[:, :, padding:padding + out_h, padding:padding + out_w])

    def grad_fn(g):
        gpad = np.zeros((batch, channels, buf_h, buf_w), dtype=g.dtype)
        gpad[:, :, padding:padding + out_h, padding:padding + out_w] = g
        gcols = _window_cols(gpad, k, stride, height, width)  # (B, H*W, C*K*K)
        if x.requires_grad:
            gx = gcols @ kflat.T  # (B, H*W, F)
            gx = np.ascontiguousarray(
                gx.reshape(batch, height, width, filters).transpose(0, 3, 1, 2))
            _accumulate(x, gx)
        if kernel.requires_grad:
            gk = np.tensordot(xflat, gcols, axes=([0, 1], [0, 1]))
            _accumulate(kernel, gk.reshape(kernel.data.shape))

    return _node(data, (x, kernel), grad_fn)


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------

def reparameterize(mu, log_var, noise):
    """Draw z = mu + exp(log_var / 2) * noise.

    `noise` is a fixed standard-normal draw; gradients flow to mu and
    log_var only.
    """
    _check_same_shape(mu, log_var, "reparameterize")
    noise_data = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=mu.data.dtype)
    if noise_data.shape != mu.data.shape:
        raise ShapeError(f"reparameterize: noise {noise_data.shape} does not match"
                         f" mu {mu.data.shape}")
    std = exp(mul(log_var, 0.5))
    return add(mu, mul_const(std, noise_data))
