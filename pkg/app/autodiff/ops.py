"""Differentiable primitives.

Every op computes its forward value with numpy and, when recorded, a closure
mapping the output gradient to one gradient per input. Broadcasting follows
numpy; gradients are summed back to each input's shape.
"""
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from app.autodiff.tensor import Tensor, make_result
from app.errors import NumericError, ShapeError

Operand = Union[Tensor, float, int, np.ndarray]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _lift(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    ref = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _lift(a, ref), _lift(b, ref)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added to reach its shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise arithmetic ----------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), "add", backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), "mul", backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data / b.data, (a, b), "div", backward)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), "neg", lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_result(x.data * factor, (x,), "scale", lambda g: (g * factor,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x) with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(x.data * cdf, (x,), "gelu", backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading ones."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(np.matmul(a.data, b.data), (a, b), "matmul", backward)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}")
    return make_result(out, (x,), "reshape", lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return make_result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with accumulation."""
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), "index", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s1 != s2 for i, (s1, s2) in enumerate(zip(t.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    key = [slice(None)] * x.ndim
    key[axis] = slice(start, stop)
    return index(x, tuple(key))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}")
    return make_result(np.array(out), (x,), "broadcast_to", lambda g: (unbroadcast(g, x.shape),))


# -- reductions ---------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    return make_result(
        np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum",
        lambda g: (np.array(_expand(g, shape, axis, keepdims)),),
    )


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return make_result(
        np.mean(x.data, axis=axis, keepdims=keepdims), (x,), "mean",
        lambda g: (np.array(_expand(g, shape, axis, keepdims)) / count,),
    )


# -- normalisation and probability ----------------------------------------------

def _check_finite(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        raise NumericError(f"{op}: NaN in input of shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "log_softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return make_result(out, (x,), "log_softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-token normalisation over the last axis followed by an affine map."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} needs gain/bias of shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return make_result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", backward)


# -- graph plumbing ---------------------------------------------------------------

def alias(x: Tensor) -> Tensor:
    """Identity with its own graph node."""
    return make_result(x.data, (x,), "alias", lambda g: (g,))


def gather_rows(x: Tensor, rows: np.ndarray, cols: np.ndarray, n_out: int) -> Tensor:
    """out[..., rows[i], :] = x[..., cols[i], :]; rows absent from ``rows`` stay zero.

    This is the product Φ·X of a 0/1 matrix with at most one entry per row,
    done as an index copy over the token axis (second to last).
    """
    if x.ndim < 2:
        raise ShapeError(f"gather_rows: need at least 2 dims, got {x.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape[:-2] + (n_out, x.shape[-1])
    out = np.zeros(shape, dtype=x.dtype)
    out[..., rows, :] = x.data[..., cols, :]
    unique_cols = len(np.unique(cols)) == len(cols)

    def backward(g):
        full = np.zeros_like(x.data)
        picked = g[..., rows, :]
        if unique_cols:
            full[..., cols, :] += picked
        else:
            moved = np.moveaxis(full, -2, 0)
            np.add.at(moved, cols, np.moveaxis(picked, -2, 0))
        return (full,)

    return make_result(out, (x,), "gather_rows", backward)


# -- spatial ops --------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d_direct(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Direct sliding-window convolution.

    ``x`` is C_in×H×W or B×C_in×H×W, ``kernel`` is k_h×k_w×C_in×C_out, zero padding.
    """
    if stride < 1:
        raise ShapeError(f"conv2d_direct: stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    data = x.data[None] if squeeze else x.data
    if data.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_direct: expected input [B,C,H,W] and kernel [kh,kw,Cin,Cout], "
                         f"got {x.shape} and {kernel.shape}")
    b, c, h, w = data.shape
    kh, kw, cin, cout = kernel.shape
    if cin != c:
        raise ShapeError(f"conv2d_direct: input has {c} channels but kernel {kernel.shape} expects {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d_direct: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)

    padded = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 4, 5, 1).reshape(b * ho * wo, kh * kw * c)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(b, ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(b, ho, wo, kh, kw, c)
            gpad = np.zeros(padded.shape, dtype=padded.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
            gx = gpad[:, :, padding:padding + h, padding:padding + w]
            if squeeze:
                gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, inputs, "conv2d_direct", backward)


def _pool_view(x: Tensor, k: int, op: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"{op}: spatial size {h}x{w} not divisible by window {k}")
    return x.data.reshape(b, c, h // k, k, w // k, k)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k average pooling with stride k."""
    view = _pool_view(x, k, "avg_pool2d")
    out = view.mean(axis=(3, 5))

    def backward(g):
        expanded = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), view.shape)
        return (expanded.reshape(x.shape),)

    return make_result(out, (x,), "avg_pool2d", backward)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling with stride k; ties route to the first maximum."""
    view = _pool_view(x, k, "max_pool2d")
    b, c, ho, _, wo, _ = view.shape
    flat = view.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gview = gflat.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gview.reshape(x.shape),)

    return make_result(out, (x,), "max_pool2d", backward)


def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros(labels.shape + (classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def stack(tensors: List[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)
