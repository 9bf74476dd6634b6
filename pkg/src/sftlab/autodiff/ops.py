"""Differentiable primitives.

Every op computes its forward value with numpy and, when a tape is active and
some input requires a gradient, records a closure mapping the upstream
gradient to per-input gradients. Shapes must match exactly; the only implicit
broadcast is between a tensor and a Python scalar. Bias addition over a
chosen axis is an explicit op (``add_bias``).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, active_tape, get_dtype


def _result(op: str, out: np.ndarray, inputs: tuple, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    res = Tensor.wrap(out, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, res, backward)
    return res


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return _result("add_scalar", a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return _result("sub_scalar", a.data - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return _result("rsub_scalar", a - b.data, (b,), lambda g: (-g,))
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _result("swish", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over axis 0: first half times sigmoid(second half)."""
    rows = x.shape[0]
    if rows % 2:
        raise ShapeError(f"glu: leading dimension {rows} is odd")
    h = rows // 2
    a, b = x.data[:h], x.data[h:]
    s = _sigmoid(b)

    def back(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=0),)

    return _result("glu", a * s, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------ reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(
        "mean", np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),)
    )


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the leading axis: (h,m,k) x (h,k,n) -> (h,m,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(
        "bmm",
        np.matmul(ad, bd),
        (a, b),
        lambda g: (np.matmul(g, bd.transpose(0, 2, 1)), np.matmul(ad.transpose(0, 2, 1), g)),
    )


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def add_bias(x: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    """x + b with b (length x.shape[axis]) repeated along every other axis."""
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    axis = axis % x.ndim
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _result("add_bias", x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along one axis; backward scatters with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    axis = axis % x.ndim

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx_m = np.moveaxis(gx, axis, 0)
        np.add.at(gx_m, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result("take", np.take(x.data, idx, axis=axis), (x,), back)


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


def pick(x: Tensor, rows, cols) -> Tensor:
    """Vector of x[rows[i], cols[i]] for a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result("pick", x.data[rows, cols], (x,), back)


# ------------------------------------------------------------------ normalisation


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise every column of a D x T tensor over its D entries."""
    d = x.shape[0]
    if d == 0:
        raise ShapeError("layer_norm: cannot normalise over an empty axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match D={d}")
    view = (d,) + (1,) * (x.ndim - 1)
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(view)
    others = tuple(range(1, x.ndim))

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=0, keepdims=True) - xhat * (gxhat * xhat).mean(axis=0, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return _result("layer_norm", xhat * gd + beta.data.reshape(view), (x, gamma, beta), back)


def log_softmax(x: Tensor, axis: int = 0) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result("log_softmax", y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = 0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    ``mask`` must broadcast against x. A slice with no allowed entries
    yields all zeros rather than NaN.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    p = (e / np.where(s > 0, s, 1.0)).astype(x.data.dtype)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result("softmax", p, (x,), back)


# ------------------------------------------------------------------ convolution


def conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (C_in,H,W) or (B,C_in,H,W) by (C_out,C_in,kh,kw)."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4 or w.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
    b, c, h, wd = xd.shape
    o, _, kh, kw = w.shape
    ho, wo = conv_out_len(h, kh, stride, pad), conv_out_len(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}, stride {stride}, pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (b, c, ho, wo, kh, kw)
    wdat = w.data
    out = np.einsum("bchwij,ocij->bohw", win, wdat, optimize=True)
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        gw = np.einsum("bchwij,bohw->ocij", win, g4, optimize=True)
        gcols = np.einsum("bohw,ocij->bchwij", g4, wdat, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx[0] if squeeze else gx), gw

    return _result("conv2d", np.ascontiguousarray(out), (x, w), back)


def depthwise_conv1d(x: Tensor, w: Tensor, lengths: list[int] | None = None) -> Tensor:
    """Per-channel 1-D convolution along time with same-length zero padding.

    ``x`` is D x T holding one or more utterances packed along time;
    ``lengths`` gives the segment sizes so that no kernel tap crosses an
    utterance boundary. ``w`` is D x K with K odd.
    """
    d, t = x.shape
    if w.ndim != 2 or w.shape[0] != d or w.shape[1] % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel {w.shape} incompatible with input {x.shape}")
    k = w.shape[1]
    half = k // 2
    if lengths is None:
        lengths = [t]
    seg_start = np.repeat(np.cumsum([0] + list(lengths[:-1])), lengths)
    seg_end = seg_start + np.repeat(lengths, lengths)
    pos = np.arange(t)
    src = pos[None, :] + np.arange(k)[:, None] - half  # (K, T)
    valid = (src >= seg_start[None, :]) & (src < seg_end[None, :])
    src_c = np.where(valid, src, 0)
    xs = x.data[:, src_c] * valid[None]  # (D, K, T)
    wd = w.data
    out = np.einsum("dkt,dk->dt", xs, wd)

    def back(g):
        gw = np.einsum("dkt,dt->dk", xs, g)
        contrib = wd[:, :, None] * g[:, None, :] * valid[None]
        gx = np.zeros((d, t), dtype=g.dtype)
        np.add.at(gx.T, src_c.reshape(-1), contrib.reshape(d, -1).T)
        return gx, gw

    return _result("depthwise_conv1d", out, (x, w), back)


def const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=get_dtype()))
