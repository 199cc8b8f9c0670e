"""Primitive operations.

Each primitive pairs a numpy forward with a backward rule expressed through
other primitives, which is what makes second derivatives available. The set is
closed: every backward rule only uses primitives defined here.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .graph import GraphValue, Primitive, ShapeError, apply, as_value

LEAKY_SLOPE = 0.01


def _pair(a, b) -> tuple[GraphValue, GraphValue]:
    if isinstance(a, GraphValue):
        return a, as_value(b, a)
    b = as_value(b)
    return as_value(a, b), b


def _broadcast_shape(name: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a} and {b} do not broadcast") from None


def _const_like(arr: np.ndarray) -> GraphValue:
    return GraphValue(arr)


# -- shape plumbing --------------------------------------------------------

def _sum_to_fwd(x, shape):
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


_SUM_TO = Primitive(
    "sum_to",
    _sum_to_fwd,
    lambda g, out, ins, needed, a: (broadcast_to(g, ins[0].shape),),
)

_BROADCAST_TO = Primitive(
    "broadcast_to",
    lambda x, shape: np.ascontiguousarray(np.broadcast_to(x, shape)),
    lambda g, out, ins, needed, a: (sum_to(g, ins[0].shape),),
    may_overflow=False,
)


def sum_to(x: GraphValue, shape) -> GraphValue:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return apply(_SUM_TO, [x], shape=shape)


def broadcast_to(x: GraphValue, shape) -> GraphValue:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    _broadcast_shape("broadcast_to", x.shape, shape)
    return apply(_BROADCAST_TO, [x], shape=shape)


_RESHAPE = Primitive(
    "reshape",
    lambda x, shape: x.reshape(shape),
    lambda g, out, ins, needed, a: (reshape(g, ins[0].shape),),
    may_overflow=False,
)


def reshape(x: GraphValue, shape) -> GraphValue:
    shape = tuple(shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    if x.shape == shape:
        return x
    return apply(_RESHAPE, [x], shape=shape)


_TRANSPOSE = Primitive(
    "transpose",
    lambda x, axes: np.ascontiguousarray(x.transpose(axes)),
    lambda g, out, ins, needed, a: (transpose(g, tuple(np.argsort(a["axes"]))),),
    may_overflow=False,
)


def transpose(x: GraphValue, axes=None) -> GraphValue:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(int(i) for i in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    return apply(_TRANSPOSE, [x], axes=axes)


# -- elementwise arithmetic ------------------------------------------------

def _add_vjp(g, out, ins, needed, a):
    return (
        sum_to(g, ins[0].shape) if needed[0] else None,
        sum_to(g, ins[1].shape) if needed[1] else None,
    )


def _sub_vjp(g, out, ins, needed, a):
    return (
        sum_to(g, ins[0].shape) if needed[0] else None,
        sum_to(scale(g, -1.0), ins[1].shape) if needed[1] else None,
    )


def _mul_vjp(g, out, ins, needed, a):
    x, y = ins
    return (
        sum_to(mul(g, y), x.shape) if needed[0] else None,
        sum_to(mul(g, x), y.shape) if needed[1] else None,
    )


def _div_vjp(g, out, ins, needed, a):
    x, y = ins
    gx = sum_to(div(g, y), x.shape) if needed[0] else None
    gy = sum_to(scale(div(mul(g, out), y), -1.0), y.shape) if needed[1] else None
    return gx, gy


_ADD = Primitive("add", np.add, _add_vjp)
_SUB = Primitive("sub", np.subtract, _sub_vjp)
_MUL = Primitive("mul", np.multiply, _mul_vjp)
_DIV = Primitive("div", np.divide, _div_vjp)


def _binary(prim: Primitive, a, b) -> GraphValue:
    a, b = _pair(a, b)
    _broadcast_shape(prim.name, a.shape, b.shape)
    return apply(prim, [a, b])


def add(a, b) -> GraphValue:
    return _binary(_ADD, a, b)


def sub(a, b) -> GraphValue:
    return _binary(_SUB, a, b)


def mul(a, b) -> GraphValue:
    return _binary(_MUL, a, b)


def div(a, b) -> GraphValue:
    return _binary(_DIV, a, b)


_SCALE = Primitive(
    "scale",
    lambda x, c: x * x.dtype.type(c),
    lambda g, out, ins, needed, a: (scale(g, a["c"]),),
)


def scale(x: GraphValue, c: float) -> GraphValue:
    """Multiply by a Python scalar."""
    return apply(_SCALE, [x], c=float(c))


def add_bias(x: GraphValue, b: GraphValue) -> GraphValue:
    """Add a per-channel bias ``[C]`` along axis 1 of ``x``."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    shape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    return add(x, reshape(b, shape))


# -- unary nonlinearities --------------------------------------------------

_EXP = Primitive("exp", np.exp, lambda g, out, ins, needed, a: (mul(g, out),))
_LOG = Primitive("log", np.log, lambda g, out, ins, needed, a: (div(g, ins[0]),))
_SQRT = Primitive("sqrt", np.sqrt, lambda g, out, ins, needed, a: (div(g, scale(out, 2.0)),))


def _sigmoid_fwd(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_vjp(g, out, ins, needed, a):
    return (mul(g, mul(out, sub(1.0, out))),)


_SIGMOID = Primitive("sigmoid", _sigmoid_fwd, _sigmoid_vjp, may_overflow=False)


def _relu_vjp(g, out, ins, needed, a):
    mask = (ins[0].data > 0).astype(ins[0].dtype)
    return (mul(g, _const_like(mask)),)


def _leaky_fwd(x):
    return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))


def _leaky_vjp(g, out, ins, needed, a):
    x = ins[0].data
    slope = np.where(x > 0, x.dtype.type(1.0), x.dtype.type(LEAKY_SLOPE))
    return (mul(g, _const_like(slope)),)


_RELU = Primitive("relu", lambda x: np.maximum(x, x.dtype.type(0)), _relu_vjp, may_overflow=False)
_LEAKY = Primitive("leaky_relu", _leaky_fwd, _leaky_vjp, may_overflow=False)


def _safe_sqrt_vjp(g, out, ins, needed, a):
    zero = out.data == 0
    if not zero.any():
        return (div(g, scale(out, 2.0)),)
    hole = _const_like(zero.astype(out.dtype))
    keep = _const_like((~zero).astype(out.dtype))
    return (mul(div(g, scale(add(out, hole), 2.0)), keep),)


_SAFE_SQRT = Primitive("safe_sqrt", np.sqrt, _safe_sqrt_vjp)


def safe_sqrt(x: GraphValue) -> GraphValue:
    """Square root whose derivative at exactly 0 is taken as 0 instead of inf."""
    return apply(_SAFE_SQRT, [x])


def exp(x: GraphValue) -> GraphValue:
    return apply(_EXP, [x])


def log(x: GraphValue) -> GraphValue:
    return apply(_LOG, [x])


def sqrt(x: GraphValue) -> GraphValue:
    return apply(_SQRT, [x])


def sigmoid(x: GraphValue) -> GraphValue:
    return apply(_SIGMOID, [x])


def relu(x: GraphValue) -> GraphValue:
    return apply(_RELU, [x])


def leaky_relu(x: GraphValue) -> GraphValue:
    return apply(_LEAKY, [x])


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _kept_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _sum_vjp(g, out, ins, needed, a):
    kept = _kept_shape(ins[0].shape, a["axis"])
    return (broadcast_to(reshape(g, kept), ins[0].shape),)


_SUM = Primitive("sum", lambda x, axis, keepdims: x.sum(axis=axis, keepdims=keepdims), _sum_vjp)


def sum(x: GraphValue, axis=None, keepdims: bool = False) -> GraphValue:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    return apply(_SUM, [x], axis=axes, keepdims=keepdims)


def mean(x: GraphValue, axis=None, keepdims: bool = False) -> GraphValue:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / n)


def var(x: GraphValue, axis=None, keepdims: bool = False) -> GraphValue:
    """Biased (population) variance over ``axis``."""
    centered = sub(x, mean(x, axis, keepdims=True))
    return mean(mul(centered, centered), axis, keepdims)


def moments(x: GraphValue, axis) -> tuple[GraphValue, GraphValue]:
    """Mean and biased variance over ``axis`` with kept dims."""
    mu = mean(x, axis, keepdims=True)
    centered = sub(x, mu)
    return mu, mean(mul(centered, centered), axis, keepdims=True)


def _max_fwd(x, axis):
    return x.max(axis=axis, keepdims=True)


def _max_vjp(g, out, ins, needed, a):
    x = ins[0].data
    ax = a["axis"]
    # route to the first maximal entry only
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, idx, 1.0, axis=ax)
    return (mul(broadcast_to(g, x.shape), _const_like(mask)),)


_MAX = Primitive("max", _max_fwd, _max_vjp, may_overflow=False)


def max(x: GraphValue, axis: int = -1) -> GraphValue:  # noqa: A001
    """Max over one axis, dims kept."""
    return apply(_MAX, [x], axis=axis % x.ndim)


# -- linear algebra --------------------------------------------------------

def _matmul_vjp(g, out, ins, needed, a):
    x, y = ins
    return (
        matmul(g, transpose(y)) if needed[0] else None,
        matmul(transpose(x), g) if needed[1] else None,
    )


_MATMUL = Primitive("matmul", np.matmul, _matmul_vjp)


def matmul(a, b) -> GraphValue:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return apply(_MATMUL, [a, b])


# -- convolution (3x3 kernel, stride 1, zero padding 1) ----------------------

def _conv_fwd(x, w):
    B, C, H, W = x.shape
    O = w.shape[0]
    cols = kernels.im2col3x3(x)
    y = w.reshape(O, C * 9) @ cols
    return np.ascontiguousarray(y.reshape(O, B, H, W).transpose(1, 0, 2, 3))


def _conv_wgrad_fwd(x, g):
    B, C, H, W = x.shape
    O = g.shape[1]
    cols = kernels.im2col3x3(x)
    g2 = g.transpose(1, 0, 2, 3).reshape(O, B * H * W)
    return (g2 @ cols.T).reshape(O, C, 3, 3)


def _conv_vjp(g, out, ins, needed, a):
    x, w = ins
    return (
        conv2d(g, flip_kernel(w)) if needed[0] else None,
        conv2d_wgrad(x, g) if needed[1] else None,
    )


def _conv_wgrad_vjp(G, out, ins, needed, a):
    x, g = ins
    return (
        conv2d(g, flip_kernel(G)) if needed[0] else None,
        conv2d(x, G) if needed[1] else None,
    )


_CONV = Primitive("conv2d", _conv_fwd, _conv_vjp)
_CONV_WGRAD = Primitive("conv2d_wgrad", _conv_wgrad_fwd, _conv_wgrad_vjp)
_FLIP = Primitive(
    "flip_kernel",
    lambda w: np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
    lambda g, out, ins, needed, a: (flip_kernel(g),),
    may_overflow=False,
)


def conv2d(x: GraphValue, w: GraphValue) -> GraphValue:
    """Same-size 3x3 convolution: ``x [B,C,H,W]``, ``w [O,C,3,3]`` -> ``[B,O,H,W]``."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    return apply(_CONV, [x, w])


def conv2d_wgrad(x: GraphValue, g: GraphValue) -> GraphValue:
    """Kernel gradient of ``conv2d(x, .)`` for output cotangent ``g``."""
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"conv2d_wgrad: input {x.shape} incompatible with cotangent {g.shape}")
    return apply(_CONV_WGRAD, [x, g])


def flip_kernel(w: GraphValue) -> GraphValue:
    """Spatially flip and swap in/out channels: ``[O,C,3,3] -> [C,O,3,3]``."""
    return apply(_FLIP, [w])


# -- pooling (2x2, stride 2) -----------------------------------------------

def _check_pool(name: str, x: GraphValue) -> None:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{name}: needs [B,C,H,W] with even H and W, got {x.shape}")


_AVGPOOL = Primitive(
    "avgpool2",
    kernels.avgpool2,
    lambda g, out, ins, needed, a: (scale(upsample2(g), 0.25),),
)
_UPSAMPLE = Primitive(
    "upsample2",
    kernels.upsample2,
    lambda g, out, ins, needed, a: (scale(avgpool2(g), 4.0),),
    may_overflow=False,
)


def avgpool2(x: GraphValue) -> GraphValue:
    _check_pool("avgpool2", x)
    return apply(_AVGPOOL, [x])


def upsample2(x: GraphValue) -> GraphValue:
    """Nearest-neighbour 2x upsampling (adjoint of 2x2 sum pooling)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2: needs [B,C,H,W], got {x.shape}")
    return apply(_UPSAMPLE, [x])


def _maxpool_fwd(x):
    out, idx = kernels.maxpool2(x)
    return out, {"idx": idx}


_MAXPOOL = Primitive(
    "maxpool2",
    _maxpool_fwd,
    lambda g, out, ins, needed, a: (pool_scatter(g, a["idx"]),),
    may_overflow=False,
)
_GATHER = Primitive(
    "pool_gather",
    lambda x, idx: kernels.pool_gather(x, idx),
    lambda g, out, ins, needed, a: (pool_scatter(g, a["idx"]),),
    may_overflow=False,
)
_SCATTER = Primitive(
    "pool_scatter",
    lambda g, idx: kernels.pool_scatter(g, idx),
    lambda G, out, ins, needed, a: (pool_gather(G, a["idx"]),),
    may_overflow=False,
)


def maxpool2(x: GraphValue) -> GraphValue:
    """2x2 max pooling; the winning positions are frozen on the node and
    reused by every derivative order."""
    _check_pool("maxpool2", x)
    return apply(_MAXPOOL, [x])


def pool_gather(x: GraphValue, idx: np.ndarray) -> GraphValue:
    _check_pool("pool_gather", x)
    return apply(_GATHER, [x], idx=idx)


def pool_scatter(g: GraphValue, idx: np.ndarray) -> GraphValue:
    return apply(_SCATTER, [g], idx=idx)


# -- spatial padding --------------------------------------------------------

def _pad_fwd(x, ph, pw):
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))


_PAD = Primitive(
    "pad_br",
    _pad_fwd,
    lambda g, out, ins, needed, a: (crop(g, ins[0].shape[2], ins[0].shape[3]),),
    may_overflow=False,
)
_CROP = Primitive(
    "crop",
    lambda x, h, w: np.ascontiguousarray(x[:, :, :h, :w]),
    lambda g, out, ins, needed, a: (
        pad_br(g, ins[0].shape[2] - a["h"], ins[0].shape[3] - a["w"]),
    ),
    may_overflow=False,
)


def pad_br(x: GraphValue, ph: int, pw: int) -> GraphValue:
    """Zero-pad bottom/right of the spatial dims."""
    if ph == 0 and pw == 0:
        return x
    return apply(_PAD, [x], ph=int(ph), pw=int(pw))


def crop(x: GraphValue, h: int, w: int) -> GraphValue:
    if h == x.shape[2] and w == x.shape[3]:
        return x
    return apply(_CROP, [x], h=int(h), w=int(w))


def pad_to_even(x: GraphValue) -> GraphValue:
    return pad_br(x, x.shape[2] % 2, x.shape[3] % 2)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_wgrad": conv2d_wgrad,
    "flip_kernel": flip_kernel,
    "avgpool2": avgpool2,
    "upsample2": upsample2,
    "maxpool2": maxpool2,
    "pool_gather": pool_gather,
    "pool_scatter": pool_scatter,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "sum_to": sum_to,
    "sum": sum,
    "mean": mean,
    "var": var,
    "moments": moments,
    "add_bias": add_bias,
    "sqrt": sqrt,
    "safe_sqrt": safe_sqrt,
    "log": log,
    "exp": exp,
    "max": max,
    "pad_br": pad_br,
    "crop": crop,
}


def eval_primitive(tag: str, *inputs, **attrs):
    """Look up ``tag`` in the primitive table and apply it."""
    try:
        fn = PRIMITIVES[tag]
    except KeyError:
        raise ValueError(f"unknown primitive {tag!r}") from None
    return fn(*inputs, **attrs)
