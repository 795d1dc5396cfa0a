"""Differentiable operations for the landmark cascade.

Convolution ships in two flavors behind the same contract: a direct
nested-loop reference (``method="naive"``) and an im2col/GEMM fast path
(``method="im2col"``, the default).  The loop version exists as a
correctness oracle; the two must agree to ~1e-6 relative.

Shape conventions follow the usual NCHW layout.  All ops check their
operands and raise ``ShapeError`` with the offending dimensions named;
non-finite results raise ``NumericError``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "avgpool_global",
    "relu",
    "sigmoid",
    "batchnorm2d",
    "linear",
    "add",
    "scale",
    "concat_channels",
    "upsample_nearest",
    "sigmoid_cross_entropy_pixelwise",
    "l2_pixelwise",
    "l2_z",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_size(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def _check_conv_args(x: Tensor, w: Tensor, b: Optional[Tensor], stride, padding):
    sH, sW = _pair(stride)
    pH, pW = _pair(padding)
    _require(x.ndim == 4, f"conv2d input must be 4D [B,C,H,W], got {x.shape}")
    _require(w.ndim == 4, f"conv2d weight must be 4D [Cout,Cin,kH,kW], got {w.shape}")
    _require(sH >= 1 and sW >= 1, f"stride must be >= 1, got {(sH, sW)}")
    _require(pH >= 0 and pW >= 0, f"padding must be >= 0, got {(pH, pW)}")
    B, C, H, W = x.shape
    Cout, Cin, kH, kW = w.shape
    _require(C == Cin, f"conv2d channel mismatch: input has {C}, weight expects {Cin}")
    _require(H + 2 * pH >= kH and W + 2 * pW >= kW,
             f"kernel {(kH, kW)} does not fit padded input {(H + 2 * pH, W + 2 * pW)}")
    if b is not None:
        _require(b.shape == (Cout,), f"bias shape {b.shape} must be ({Cout},)")
    return (sH, sW), (pH, pW)


def _im2col(xp: np.ndarray, kH: int, kW: int, sH: int, sW: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> rows [B*Ho*Wo, C*kH*kW] of flattened receptive fields."""
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::sH, ::sW]
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kH * kW)
    return np.ascontiguousarray(cols)


def _col2im_add(acc: np.ndarray, cols: np.ndarray, Ho: int, Wo: int,
                kH: int, kW: int, sH: int, sW: int) -> None:
    """Scatter-add column rows back onto the padded canvas ``acc`` in place."""
    B, C = acc.shape[0], acc.shape[1]
    cols = cols.reshape(B, Ho, Wo, C, kH, kW).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kH):
        for j in range(kW):
            acc[:, :, i:i + sH * Ho:sH, j:j + sW * Wo:sW] += cols[:, :, :, :, i, j]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride=(1, 1), padding=(0, 0), method: str = "im2col") -> Tensor:
    """2D cross-correlation; output H' = floor((H + 2p - k)/s) + 1."""
    (sH, sW), (pH, pW) = _check_conv_args(x, w, b, stride, padding)
    if method == "naive":
        return _conv2d_naive(x, w, b, (sH, sW), (pH, pW))
    B, C, H, W = x.shape
    Cout, Cin, kH, kW = w.shape
    Ho, Wo = _conv_out_size(H, kH, sH, pH), _conv_out_size(W, kW, sW, pW)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pH, pH), (pW, pW))) if (pH or pW) else x.data
    cols = _im2col(xp, kH, kW, sH, sW)
    wmat = w.data.reshape(Cout, Cin * kH * kW)
    out_flat = cols @ wmat.T
    if b is not None:
        out_flat += b.data
    out_data = out_flat.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def backward(g: np.ndarray) -> None:
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        if w.requires_grad:
            w.accumulate_grad((g_flat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g_flat.sum(axis=0))
        if x.requires_grad:
            dcols = g_flat @ wmat
            dxp = np.zeros_like(xp)
            _col2im_add(dxp, dcols, Ho, Wo, kH, kW, sH, sW)
            dx = dxp[:, :, pH:pH + H, pW:pW + W] if (pH or pW) else dxp
            x.accumulate_grad(dx)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, backward, "conv2d")


def _conv2d_naive(x: Tensor, w: Tensor, b: Optional[Tensor],
                  stride: tuple[int, int], padding: tuple[int, int]) -> Tensor:
    sH, sW = stride
    pH, pW = padding
    B, C, H, W = x.shape
    Cout, _, kH, kW = w.shape
    Ho, Wo = _conv_out_size(H, kH, sH, pH), _conv_out_size(W, kW, sW, pW)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pH, pH), (pW, pW)))
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.data.dtype)
    for bi in range(B):
        for co in range(Cout):
            for oh in range(Ho):
                for ow in range(Wo):
                    patch = xp[bi, :, oh * sH:oh * sH + kH, ow * sW:ow * sW + kW]
                    out[bi, co, oh, ow] = np.sum(patch * w.data[co])
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for bi in range(B):
            for co in range(Cout):
                for oh in range(Ho):
                    for ow in range(Wo):
                        gi = g[bi, co, oh, ow]
                        sl = np.s_[bi, :, oh * sH:oh * sH + kH, ow * sW:ow * sW + kW]
                        dxp[sl] += gi * w.data[co]
                        dw[co] += gi * xp[sl]
        if x.requires_grad:
            x.accumulate_grad(dxp[:, :, pH:pH + H, pW:pW + W])
        if w.requires_grad:
            w.accumulate_grad(dw)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Transposed convolution; output H' = (H-1)*s - 2p + k.

    Weight layout is [Cin, Cout, kH, kW], so the forward pass equals the
    input-gradient of ``conv2d`` run with the very same weight buffer.
    """
    sH, sW = _pair(stride)
    pH, pW = _pair(padding)
    _require(x.ndim == 4, f"conv_transpose2d input must be 4D, got {x.shape}")
    _require(w.ndim == 4, f"conv_transpose2d weight must be 4D [Cin,Cout,kH,kW], got {w.shape}")
    _require(sH >= 1 and sW >= 1, f"stride must be >= 1, got {(sH, sW)}")
    B, C, H, W = x.shape
    Cin, Cout, kH, kW = w.shape
    _require(C == Cin, f"conv_transpose2d channel mismatch: input has {C}, weight expects {Cin}")
    Hc, Wc = (H - 1) * sH + kH, (W - 1) * sW + kW
    Ho, Wo = Hc - 2 * pH, Wc - 2 * pW
    _require(Ho >= 1 and Wo >= 1, f"padding {(pH, pW)} swallows the whole output {(Hc, Wc)}")
    if b is not None:
        _require(b.shape == (Cout,), f"bias shape {b.shape} must be ({Cout},)")

    wmat = w.data.reshape(Cin, Cout * kH * kW)
    x_flat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(B * H * W, Cin)
    cols = x_flat @ wmat
    canvas = np.zeros((B, Cout, Hc, Wc), dtype=x.data.dtype)
    _col2im_add(canvas, cols, H, W, kH, kW, sH, sW)
    out_data = canvas[:, :, pH:pH + Ho, pW:pW + Wo]
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out_data = np.ascontiguousarray(out_data)

    def backward(g: np.ndarray) -> None:
        gc = np.zeros((B, Cout, Hc, Wc), dtype=g.dtype)
        gc[:, :, pH:pH + Ho, pW:pW + Wo] = g
        # windows[b,h,w,cout,i,j] = gc[b,cout,h*s+i,w*s+j]; both grads contract it.
        win = sliding_window_view(gc, (kH, kW), axis=(2, 3))[:, :, ::sH, ::sW]
        gcols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * H * W, Cout * kH * kW)
        if x.requires_grad:
            x.accumulate_grad((gcols @ wmat.T).reshape(B, H, W, Cin).transpose(0, 3, 1, 2))
        if w.requires_grad:
            w.accumulate_grad((x_flat.T @ gcols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel, stride=None, padding=(0, 0)) -> Tensor:
    """Max pooling; backward routes the gradient entirely to each argmax.

    Padded border cells take -inf, so they never win the max.
    """
    kH, kW = _pair(kernel)
    sH, sW = _pair(stride) if stride is not None else (kH, kW)
    pH, pW = _pair(padding)
    _require(x.ndim == 4, f"maxpool2d input must be 4D, got {x.shape}")
    _require(pH >= 0 and pW >= 0, f"pool padding must be >= 0, got {(pH, pW)}")
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * pH, W + 2 * pW
    _require(kH <= Hp and kW <= Wp, f"pool kernel {(kH, kW)} does not fit input {(H, W)}")
    Ho, Wo = _conv_out_size(H, kH, sH, pH), _conv_out_size(W, kW, sW, pW)

    if pH or pW:
        xp = np.full((B, C, Hp, Wp), -np.inf, dtype=x.data.dtype)
        xp[:, :, pH:pH + H, pW:pW + W] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::sH, ::sW]
    flat = win.reshape(B, C, Ho, Wo, kH * kW)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros((B, C, Hp, Wp), dtype=x.data.dtype)
        bi, ci, oh, ow = np.indices((B, C, Ho, Wo))
        hs = oh * sH + arg // kW
        ws = ow * sW + arg % kW
        np.add.at(dx, (bi, ci, hs, ws), g)
        x.accumulate_grad(dx[:, :, pH:pH + H, pW:pW + W])

    return Tensor._from_op(out_data, (x,), backward, "maxpool2d")


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions: [B,C,H,W] -> [B,C]."""
    _require(x.ndim == 4, f"avgpool_global input must be 4D, got {x.shape}")
    B, C, H, W = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())

    return Tensor._from_op(out_data, (x,), backward, "avgpool_global")


# ---------------------------------------------------------------------------
# pointwise / affine
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return Tensor._from_op(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (x,), backward, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B,H,W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (``running = momentum*running + (1-momentum)*batch``);
    eval mode uses the buffers.  Gradients flow to input, gamma, and beta.
    """
    _require(x.ndim == 4, f"batchnorm2d input must be 4D, got {x.shape}")
    C = x.shape[1]
    _require(gamma.shape == (C,), f"gamma shape {gamma.shape} must be ({C},)")
    _require(beta.shape == (C,), f"beta shape {beta.shape} must be ({C},)")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
            if training:
                gm = g.mean(axis=axes)[None, :, None, None]
                gxm = (g * xhat).mean(axis=axes)[None, :, None, None]
                x.accumulate_grad(gi * (g - gm - xhat * gxm))
            else:
                x.accumulate_grad(gi * g)

    return Tensor._from_op(out_data, (x, gamma, beta), backward, "batchnorm2d")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map [B,F] @ [O,F]^T + [O] -> [B,O]."""
    _require(x.ndim == 2, f"linear input must be 2D [B,F], got {x.shape}")
    _require(w.ndim == 2, f"linear weight must be 2D [O,F], got {w.shape}")
    _require(x.shape[1] == w.shape[1],
             f"linear feature mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if b is not None:
        _require(b.shape == (w.shape[0],), f"bias shape {b.shape} must be ({w.shape[0]},)")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g @ w.data)
        if w.requires_grad:
            w.accumulate_grad(g.T @ x.data)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, backward, "linear")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return Tensor._from_op(out_data, (a, b), backward, "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = x.data * c

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return Tensor._from_op(out_data, (x,), backward, "scale")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [B,Ci,H,W] tensors along the channel axis."""
    _require(len(tensors) >= 1, "concat_channels needs at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        _require(t.ndim == 4 and ref.ndim == 4, "concat_channels operands must be 4D")
        _require(t.shape[0] == ref.shape[0] and t.shape[2:] == ref.shape[2:],
                 f"concat_channels mismatch: {ref.shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> None:
        for t, gpart in zip(tensors, np.split(g, splits, axis=1)):
            if t.requires_grad:
                t.accumulate_grad(gpart)

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat_channels")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Integer-factor nearest-neighbor upsampling of [B,C,H,W]."""
    f = int(factor)
    _require(x.ndim == 4, f"upsample_nearest input must be 4D, got {x.shape}")
    _require(f >= 1, f"upsample factor must be >= 1, got {f}")
    if f == 1:
        out_data = x.data.copy()
    else:
        out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    B, C, H, W = x.shape

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)))

    return Tensor._from_op(out_data, (x,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _loss_weights(shape: tuple[int, ...], mask: Optional[np.ndarray], per_elem: int, dtype):
    """Per-channel mask -> elementwise weights and the visible-element count."""
    if mask is None:
        return None, float(np.prod(shape))
    mask = np.asarray(mask, dtype=dtype)
    _require(mask.shape == shape[:2],
             f"mask shape {mask.shape} must be {shape[:2]} (batch, channels)")
    count = float(mask.sum() * per_elem)
    return mask, count


def sigmoid_cross_entropy_pixelwise(logits: Tensor, targets: Tensor,
                                    mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean binary cross entropy on sigmoid(logits) vs. {0,1} targets.

    Computed in the stable max(x,0) - x*t + log(1+exp(-|x|)) form; with a
    per-channel mask the mean runs over unmasked elements only.
    """
    _require(logits.shape == targets.shape,
             f"loss shape mismatch: logits {logits.shape} vs targets {targets.shape}")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ShapeError("sigmoid cross entropy targets must be binary {0,1}")
    x = logits.data
    per_px = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    w, count = _loss_weights(logits.shape, mask, int(np.prod(logits.shape[2:])), x.dtype)
    if w is not None:
        per_px = per_px * w[:, :, None, None]
    if count == 0:
        out_val = np.zeros((), dtype=x.dtype)
    else:
        out_val = np.asarray(per_px.sum() / count, dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad and count > 0:
            dx = (_sigmoid(x) - t) / count
            if w is not None:
                dx = dx * w[:, :, None, None]
            logits.accumulate_grad(g * dx)

    return Tensor._from_op(out_val, (logits,), backward, "sigmoid_cross_entropy_pixelwise")


def l2_pixelwise(pred: Tensor, target: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared difference over all (unmasked) elements."""
    _require(pred.shape == target.shape,
             f"loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    w, count = _loss_weights(pred.shape, mask, int(np.prod(pred.shape[2:])), diff.dtype)
    sq = diff * diff
    if w is not None:
        sq = sq * w[:, :, None, None]
    out_val = np.zeros((), dtype=diff.dtype) if count == 0 else np.asarray(sq.sum() / count, dtype=diff.dtype)

    def backward(g: np.ndarray) -> None:
        if pred.requires_grad and count > 0:
            dx = 2.0 * diff / count
            if w is not None:
                dx = dx * w[:, :, None, None]
            pred.accumulate_grad(g * dx)

    return Tensor._from_op(out_val, (pred,), backward, "l2_pixelwise")


def l2_z(pred: Tensor, target: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Depth loss: per sample (1/N) * sum((z_pred - z_gt)^2), averaged over the batch.

    With a mask the mean runs over visible depths, which reduces to the
    per-sample form when everything is visible.
    """
    _require(pred.ndim == 2, f"l2_z expects [B,N], got {pred.shape}")
    _require(pred.shape == target.shape,
             f"loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    sq = diff * diff
    if mask is not None:
        w = np.asarray(mask, dtype=diff.dtype)
        _require(w.shape == pred.shape, f"mask shape {w.shape} must be {pred.shape}")
        count = float(w.sum())
        sq = sq * w
    else:
        w = None
        count = float(pred.size)
    out_val = np.zeros((), dtype=diff.dtype) if count == 0 else np.asarray(sq.sum() / count, dtype=diff.dtype)

    def backward(g: np.ndarray) -> None:
        if pred.requires_grad and count > 0:
            dx = 2.0 * diff / count
            if w is not None:
                dx = dx * w
            pred.accumulate_grad(g * dx)

    return Tensor._from_op(out_val, (pred,), backward, "l2_z")
