"""Differentiable operators used by the screening networks.

Every op takes and returns :class:`Tensor` objects (NCHW layout for images)
and registers a backward closure when any input needs a gradient.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, make_result, needs_grad

BCE_EPS = 1e-7


def _push(t: Tensor, g: np.ndarray):
    if needs_grad(t):
        t._accumulate(g)


def _check_4d(x: Tensor, what: str):
    if x.ndim != 4:
        raise DimensionError(f"{what} expects an [N, C, H, W] tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise DimensionError(
            f"kernel {kernel} with padding {padding} does not fit an extent of {size}"
        )
    return out


# --- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _push(a, g)
        _push(b, g)

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _push(a, g * b.data)
        _push(b, g * a.data)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        _push(a, g * factor)

    return make_result(a.data * factor, (a,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def backward(g):
        _push(x, g * keep)

    return make_result(np.where(keep, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _push(x, g * out * (1.0 - out))

    return make_result(out, (x,), backward, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValidationError(f"unknown activation {kind!r}")


# --- dense -------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor, rowwise: bool = False) -> Tensor:
    """x @ W.T + b.

    ``rowwise=True`` evaluates every output row with the same reduction
    order regardless of how many rows there are (BLAS may not), so a row's
    result never depends on its neighbours.  Slower; used by set heads.
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    if rowwise:
        out = (x.data[:, None, :] * weight.data[None, :, :]).sum(axis=2) + bias.data
    else:
        out = x.data @ weight.data.T + bias.data

    def backward(g):
        _push(x, g @ weight.data)
        _push(weight, g.T @ x.data)
        _push(bias, g.sum(axis=0))

    return make_result(out, (x, weight, bias), backward, "linear")


def max_rows(x: Tensor) -> Tensor:
    """Max over the first (sample) axis of an [m, d] matrix -> [1, d]."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"max_rows expects a non-empty [m, d] matrix, got {x.shape}")
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    out = x.data[idx, cols][None, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[idx, cols] = g[0]
        _push(x, dx)

    return make_result(out, (x,), backward, "max_rows")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape

    def backward(g):
        _push(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


# --- convolution -------------------------------------------------------------


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int):
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv weight must be [outC, inC, kH, kW], got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv weight expects {weight.shape[1]} input channels, input has {x.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv bias {bias.shape} does not match {weight.shape[0]} outputs")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation with zero padding, computed as im2col + one matmul."""
    _check_conv(x, weight, bias, stride, padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        if needs_grad(weight):
            dw = np.zeros_like(w2)
            for b in range(n):
                dw += g2[b] @ cols[b].T
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None:
            _push(bias, g2.sum(axis=(0, 2)))
        if needs_grad(x):
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def bilinear_sample(channel: np.ndarray, p: tuple[float, float]) -> float:
    """Bilinear read of a 2-D map at fractional (row, col); outside pixels read as 0."""
    h, w = channel.shape
    r, c = float(p[0]), float(p[1])
    r0, c0 = math.floor(r), math.floor(c)
    lr, lc = r - r0, c - c0
    total = 0.0
    for dr, wr in ((0, 1.0 - lr), (1, lr)):
        for dc, wc in ((0, 1.0 - lc), (1, lc)):
            rr, cc = r0 + dr, c0 + dc
            if 0 <= rr < h and 0 <= cc < w:
                total += wr * wc * float(channel[rr, cc])
    return total


def _corner_reads(xf: np.ndarray, h: int, w: int, py: np.ndarray, px: np.ndarray):
    """Gather the four bilinear neighbours of every sample position.

    ``xf`` is the input flattened to [N, C, H*W]; ``py``/``px`` are [N, L].
    Returns the fractional parts and a list of (dy, dx, values[N, C, L]).
    """
    n, c, _ = xf.shape
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    bi = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, :, None]
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
            vals = xf[bi, ci, idx[:, None, :]] * valid[:, None, :]
            corners.append((dy, dx, idx, valid, vals))
    return ly, lx, corners


def deform_conv2d(
    x: Tensor,
    offsets: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Convolution whose k-th tap at output p0 reads x(p0 + p_k + offset_k).

    ``offsets`` is [N, 2*kH*kW, Ho, Wo]; channel 2k holds the row shift and
    2k+1 the column shift of tap k (taps in row-major kernel order).
    Fractional positions are read bilinearly with zero outside the image.
    """
    _check_conv(x, weight, bias, stride, padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    k = kh * kw
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if offsets.shape != (n, 2 * k, ho, wo):
        raise DimensionError(
            f"offsets must have shape {(n, 2 * k, ho, wo)} for this kernel, got {offsets.shape}"
        )
    ii, jj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    base_r = (np.arange(ho) * stride - padding)[None, :, None] + ii.reshape(k, 1, 1)
    base_c = (np.arange(wo) * stride - padding)[None, None, :] + jj.reshape(k, 1, 1)
    off = offsets.data.reshape(n, k, 2, ho, wo)
    py = (base_r[None] + off[:, :, 0]).reshape(n, k * ho * wo)
    px = (base_c[None] + off[:, :, 1]).reshape(n, k * ho * wo)

    xf = x.data.reshape(n, c, h * w)
    ly, lx, corners = _corner_reads(xf, h, w, py, px)
    wts = {
        (0, 0): (1 - ly) * (1 - lx),
        (0, 1): (1 - ly) * lx,
        (1, 0): ly * (1 - lx),
        (1, 1): ly * lx,
    }
    cols = np.zeros((n, c, k * ho * wo))
    for dy, dx, _, _, vals in corners:
        cols += wts[dy, dx][:, None, :] * vals
    cols = cols.reshape(n, c * k, ho * wo)
    w2 = weight.data.reshape(o, c * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        if needs_grad(weight):
            dw = np.zeros_like(w2)
            for b in range(n):
                dw += g2[b] @ cols[b].T
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None:
            _push(bias, g2.sum(axis=(0, 2)))
        if not (needs_grad(x) or needs_grad(offsets)):
            return
        dcols = np.matmul(w2.T, g2).reshape(n, c, k * ho * wo)
        if needs_grad(x):
            flat_base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            dx_flat = np.zeros(n * c * h * w)
            for dy, dx_, idx, valid, _ in corners:
                contrib = dcols * (wts[dy, dx_] * valid)[:, None, :]
                dx_flat += np.bincount(
                    (flat_base + idx[:, None, :]).ravel(),
                    weights=contrib.ravel(),
                    minlength=n * c * h * w,
                )
            x._accumulate(dx_flat.reshape(x.shape))
        if needs_grad(offsets):
            v = {(dy, dx_): vals for dy, dx_, _, _, vals in corners}
            lxb = lx[:, None, :]
            lyb = ly[:, None, :]
            d_row = (1 - lxb) * (v[1, 0] - v[0, 0]) + lxb * (v[1, 1] - v[0, 1])
            d_col = (1 - lyb) * (v[0, 1] - v[0, 0]) + lyb * (v[1, 1] - v[1, 0])
            goff = np.empty((n, k, 2, ho, wo))
            goff[:, :, 0] = (dcols * d_row).sum(axis=1).reshape(n, k, ho, wo)
            goff[:, :, 1] = (dcols * d_col).sum(axis=1).reshape(n, k, ho, wo)
            offsets._accumulate(goff.reshape(offsets.shape))

    parents = [x, offsets, weight] + ([bias] if bias is not None else [])
    return make_result(out, parents, backward, "deform_conv2d")


# --- resampling --------------------------------------------------------------


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    _check_4d(x, "maxpool2d")
    if window != stride:
        raise DimensionError("maxpool2d supports non-overlapping windows only")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"maxpool2d: extent {h}x{w} not divisible by {window}")
    hw, ww = h // window, w // window
    blocks = (
        x.data.reshape(n, c, hw, window, ww, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hw, ww, window * window)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dblocks = np.zeros_like(blocks)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        dx = (
            dblocks.reshape(n, c, hw, ww, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        _push(x, dx)

    return make_result(out, (x,), backward, "maxpool2d")


def _align_corners_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor with corners mapped onto corners."""
    _check_4d(x, "upsample_bilinear")
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: _push(x, g), "upsample_bilinear")
    uh = _align_corners_matrix(h, h * factor)
    uw = _align_corners_matrix(w, w * factor)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        _push(x, np.matmul(np.matmul(uh.T, g), uw))

    return make_result(out, (x,), backward, "upsample_bilinear")


# --- normalisation -----------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation; updates the running buffers in training mode."""
    _check_4d(x, "batch_norm")
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = n * h * w
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        _push(gamma, (g * xhat).sum(axis=axes))
        _push(beta, g.sum(axis=axes))
        if not needs_grad(x):
            return
        gx = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            gsum = gx.sum(axis=axes)[None, :, None, None]
            gxsum = (gx * xhat).sum(axis=axes)[None, :, None, None]
            dx = (inv[None, :, None, None] / m) * (m * gx - gsum - xhat * gxsum)
        else:
            dx = gx * inv[None, :, None, None]
        x._accumulate(dx)

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# --- losses ------------------------------------------------------------------


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross entropy of probabilities against {0, 1} targets."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if y.shape != pred.shape:
        raise DimensionError(f"bce_loss: prediction {pred.shape} vs target {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_loss targets must be 0 or 1")
    p = np.clip(pred.data, eps, 1 - eps)
    inside = (pred.data > eps) & (pred.data < 1 - eps)
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))

    def backward(g):
        dp = (p - y) / (p * (1 - p)) / y.size
        _push(pred, g * dp * inside)

    return make_result(np.array(loss), (pred,), backward, "bce_loss")


def combined_loss(l_cls, l_seg, lam: float):
    """Multi-task objective ``lam * l_cls + l_seg``; accepts floats or scalar tensors."""
    if lam < 0:
        raise ValidationError(f"loss weight must be non-negative, got {lam}")
    if isinstance(l_cls, Tensor) or isinstance(l_seg, Tensor):
        return scale(l_cls, lam) + l_seg
    if l_cls < 0 or l_seg < 0:
        raise ValidationError("losses must be non-negative")
    return lam * l_cls + l_seg
