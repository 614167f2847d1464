"""Differentiable operations.  Each op computes its forward value with numpy
and records a closure mapping the output cotangent to parent cotangents."""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, record


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return record(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return record(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation; smooth everywhere so finite differences behave."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record(out, (a,), vjp, "gelu")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return record(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return record(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


def clamp_min(a, lo) -> Tensor:
    """max(a, lo) with lo constant (scalar or array)."""
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=DTYPE)
    keep = a.data >= lo
    return record(np.maximum(a.data, lo), (a,), lambda g: (_unbroadcast(g * keep, a.shape),), "clamp_min")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / builtins.max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatter-adds."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)

    def vjp(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return record(np.array(a.data[idx], dtype=DTYPE), (a,), vjp, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, vjp, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product a[..., p, q] @ b[..., q, r]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), vjp, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x[..., p] @ weight[p, r] + bias[r]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear dim mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, vjp, "linear")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), vjp, "softmax")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _normalize_vjp(g_hat, xhat, inv_std, axes, count):
    return inv_std * (
        g_hat
        - g_hat.mean(axis=axes, keepdims=True)
        - xhat * (g_hat * xhat).mean(axis=axes, keepdims=True)
    )


def layer_norm(x, gain, shift, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply gain and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{shift.shape} vs channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + shift.data

    def vjp(g):
        g_hat = g * gain.data
        gx = _normalize_vjp(g_hat, xhat, inv_std, -1, c)
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record(out, (x, gain, shift), vjp, "layer_norm")


def group_norm(x, groups: int, gain, shift, eps: float = 1e-6) -> Tensor:
    """GroupNorm over a channel-last map x[H, W, c]."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects [H, W, c], got {x.shape}")
    h, w, c = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(h * w, groups, c // groups)
    axes = (0, 2)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv_std
    out = xhat.reshape(h, w, c) * gain.data + shift.data

    def vjp(g):
        g_hat = (g * gain.data).reshape(h * w, groups, c // groups)
        gx = _normalize_vjp(g_hat, xhat, inv_std, axes, None).reshape(h, w, c)
        xh = xhat.reshape(h, w, c)
        return gx, (g * xh).sum(axis=(0, 1)), g.sum(axis=(0, 1))

    return record(out, (x, gain, shift), vjp, "group_norm")


def default_groups(channels: int) -> int:
    return 32 if channels >= 32 and channels % 32 == 0 else channels


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d_patchify(x, kernel, bias=None, stride: int | None = None) -> Tensor:
    """Non-overlapping convolution of x[H, W, cin] with kernel[k, k, cin, cout]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[0]
    stride = k if stride is None else stride
    if stride != k:
        raise ShapeError("conv2d_patchify requires stride == kernel size")
    h, w, cin = x.shape
    if h % k or w % k:
        raise ShapeError(f"extents {h}x{w} not divisible by stride {k}")
    if kernel.shape[2] != cin:
        raise ShapeError(f"kernel expects {kernel.shape[2]} input channels, got {cin}")
    cout = kernel.shape[3]
    hp, wp = h // k, w // k
    patches = x.data.reshape(hp, k, wp, k, cin).transpose(0, 2, 1, 3, 4).reshape(hp * wp, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = patches @ kmat
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(hp * wp, cout)
        gx = None
        if x.requires_grad:
            gx = (g2 @ kmat.T).reshape(hp, wp, k, k, cin).transpose(0, 2, 1, 3, 4).reshape(h, w, cin)
        gk = (patches.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out.reshape(hp, wp, cout), parents, vjp, "conv2d_patchify")


def deconv2x(x, kernel, bias=None) -> Tensor:
    """Stride-2 transposed convolution: x[H, W, cin] -> [2H, 2W, cout].

    kernel is [K, K, cin, cout] with K even; padding (K - 2) / 2 is cropped
    from every border so the output is exactly twice the input extent.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    kk = kernel.shape[0]
    if kk % 2 or kernel.shape[1] != kk:
        raise ShapeError(f"deconv2x needs an even square kernel, got {kernel.shape[:2]}")
    h, w, cin = x.shape
    if kernel.shape[2] != cin:
        raise ShapeError(f"kernel expects {kernel.shape[2]} input channels, got {cin}")
    cout = kernel.shape[3]
    pad = (kk - 2) // 2
    full_h, full_w = 2 * (h - 1) + kk, 2 * (w - 1) + kk
    full = np.zeros((full_h, full_w, cout), dtype=DTYPE)
    for a in range(kk):
        for b in range(kk):
            full[a : a + 2 * h : 2, b : b + 2 * w : 2] += x.data @ kernel.data[a, b]
    out = full[pad : pad + 2 * h, pad : pad + 2 * w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def vjp(g):
        gfull = np.zeros((full_h, full_w, cout), dtype=DTYPE)
        gfull[pad : pad + 2 * h, pad : pad + 2 * w] = g
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        xf = x.data.reshape(-1, cin)
        for a in range(kk):
            for b in range(kk):
                ga = gfull[a : a + 2 * h : 2, b : b + 2 * w : 2]
                gx += ga @ kernel.data[a, b].T
                gk[a, b] = xf.T @ ga.reshape(-1, cout)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 1))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(np.ascontiguousarray(out), parents, vjp, "deconv2x")


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _sample_coords(coord: np.ndarray, extent: int):
    """Map normalized coords to (low index, high index, fraction, d(frac)/d(coord))."""
    pix = coord * extent - 0.5
    inside = (pix >= 0.0) & (pix <= extent - 1)
    pix = np.clip(pix, 0.0, extent - 1)
    if extent == 1:
        lo = np.zeros(pix.shape, dtype=np.int64)
        return lo, lo, np.zeros_like(pix), np.zeros_like(pix)
    lo = np.minimum(np.floor(pix).astype(np.int64), extent - 2)
    frac = pix - lo
    return lo, lo + 1, frac, inside * float(extent)


def bilinear_sample(feature_map, points) -> Tensor:
    """Bilinearly interpolate a channel-last map at normalized xy points.

    ``feature_map`` is [H, W, c] with ``points`` [..., 2], or grouped
    [H, W, G, c] with ``points`` [..., G, 2] where group g only reads
    channels feature_map[:, :, g].  (0, 0) is the top-left image corner and
    texel (i, j) has its center at ((j + 0.5) / W, (i + 0.5) / H).  Points
    outside the texel-center range are clamped (border replication).
    Differentiable in both the map and the point coordinates.
    """
    fmap, pts = as_tensor(feature_map), as_tensor(points)
    grouped = fmap.ndim == 4
    if fmap.ndim not in (3, 4):
        raise ShapeError(f"feature map must be [H, W, c] or [H, W, G, c], got {fmap.shape}")
    h, w = fmap.shape[:2]
    if h < 1 or w < 1:
        raise ShapeError(f"feature map extent must be >= 1, got {h}x{w}")
    if pts.shape[-1] != 2:
        raise ShapeError(f"points must end in an xy pair, got {pts.shape}")
    groups = fmap.shape[2] if grouped else 1
    c = fmap.shape[-1]
    if grouped and (pts.ndim < 2 or pts.shape[-2] != groups):
        raise ShapeError(f"grouped sampling needs points [..., {groups}, 2], got {pts.shape}")

    x0, x1, fx, dfx = _sample_coords(pts.data[..., 0], w)
    y0, y1, fy, dfy = _sample_coords(pts.data[..., 1], h)
    gidx = np.arange(groups) if grouped else 0
    flat = fmap.data.reshape(h * w * groups, c)
    i00 = (y0 * w + x0) * groups + gidx
    i01 = (y0 * w + x1) * groups + gidx
    i10 = (y1 * w + x0) * groups + gidx
    i11 = (y1 * w + x1) * groups + gidx
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    wx, wy = fx[..., None], fy[..., None]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def vjp(g):
        gmap = None
        if fmap.requires_grad:
            acc = np.zeros_like(flat)
            gc = g.reshape(-1, c)
            for idx, wgt in (
                (i00, (1 - wy) * (1 - wx)),
                (i01, (1 - wy) * wx),
                (i10, wy * (1 - wx)),
                (i11, wy * wx),
            ):
                np.add.at(acc, np.broadcast_to(idx, fx.shape).reshape(-1), gc * wgt.reshape(-1, 1))
            gmap = acc.reshape(fmap.shape)
        gpts = None
        if pts.requires_grad:
            d_fx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
            d_fy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * g
            gpts = np.stack([d_fx.sum(-1) * dfx, d_fy.sum(-1) * dfy], axis=-1)
        return gmap, gpts

    return record(out, (fmap, pts), vjp, "bilinear_sample")
