"""Layer operations: forward rules plus explicit backward rules on the tape.

All ops are pure functions of their inputs and parameter records. Shapes
are validated up front; outputs inherit the input dtype so the same code
paths run in float32 (training) and float64 (gradient checking).

Convolution follows the cross-correlation convention (no kernel flip).
Max pooling is unpadded, floor-mode, and routes gradients to the lowest
flat index on ties. Bilinear upsampling uses the align-corners convention
(source coordinate = dst * (in - 1) / (out - 1) for out > 1, else 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError
from .tensor import Tensor, record_op


@dataclass
class Conv2dParams:
    weight: Tensor  # (out_c, in_c, k_h, k_w)
    bias: Tensor | None = None  # (1, out_c, 1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


@dataclass
class BatchNorm2dParams:
    gamma: Tensor  # (1, c, 1, 1)
    beta: Tensor  # (1, c, 1, 1)
    running_mean: Tensor  # (1, c, 1, 1)
    running_var: Tensor  # (1, c, 1, 1), elementwise >= 0
    momentum: float = 0.1
    epsilon: float = 1e-5


@dataclass
class LinearParams:
    weight: Tensor  # (out_features, in_features, 1, 1)
    bias: Tensor  # (1, out_features, 1, 1)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if b.shape == (1, a.shape[1], 1, 1):
        return "channel"
    raise ShapeError(f"incompatible elementwise shapes {a.shape} and {b.shape}")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """add/sub/mul with equal shapes, or b broadcast per channel as (1, c, 1, 1)."""
    kind = _broadcast_kind(a, b)
    ad, bd = a.numpy(), b.numpy()
    if op == "add":
        out = ad + bd
    elif op == "sub":
        out = ad - bd
    elif op == "mul":
        out = ad * bd
    else:
        raise ShapeError(f"unknown elementwise op {op!r}")

    need_a, need_b = a.requires_grad, b.requires_grad

    def reduce_b(g: np.ndarray) -> np.ndarray:
        return g.sum(axis=(0, 2, 3), keepdims=True) if kind == "channel" else g

    def bw(g: np.ndarray):
        if op == "add":
            return (g if need_a else None, reduce_b(g) if need_b else None)
        if op == "sub":
            return (g if need_a else None, reduce_b(-g) if need_b else None)
        return (
            g * bd if need_a else None,
            reduce_b(g * ad) if need_b else None,
        )

    return record_op(op, (a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


# --------------------------------------------------------------------------
# shape plumbing
# --------------------------------------------------------------------------


def flatten(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c*h*w, 1, 1), row-major within each sample."""
    n, c, h, w = x.shape
    out = x.numpy().reshape(n, c * h * w, 1, 1)

    def bw(g: np.ndarray):
        return (g.reshape(x.shape),)

    return record_op("flatten", (x,), out, bw)


def zero_pad2d(x: Tensor, padding: tuple[int, int]) -> Tensor:
    """Symmetric spatial zero-padding by (pad_h, pad_w)."""
    ph, pw = padding
    if ph < 0 or pw < 0:
        raise ShapeError(f"negative padding {padding}")
    out = np.pad(x.numpy(), ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    def bw(g: np.ndarray):
        n, c, h, w = x.shape
        return (g[:, :, ph:ph + h, pw:pw + w],)

    return record_op("zero_pad2d", (x,), out, bw)


def concat_channels(inputs: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    """Concatenate along the channel axis, order preserved."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(
                f"concat_channels batch/spatial mismatch: {inputs[0].shape} vs {t.shape}"
            )
    out = np.concatenate([t.numpy() for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])
    needs = [t.requires_grad for t in inputs]

    def bw(g: np.ndarray):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if needs[i] else None
            for i in range(len(needs))
        )

    return record_op("concat_channels", tuple(inputs), out, bw)


def sum_all(x: Tensor) -> Tensor:
    """Reduce every element to a (1,1,1,1) scalar."""
    out = np.asarray(x.numpy().sum(dtype=x.dtype)).reshape(1, 1, 1, 1)

    def bw(g: np.ndarray):
        return (np.broadcast_to(g.reshape(()), x.shape),)

    return record_op("sum_all", (x,), out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, (n, c, h, w) -> (n, c, 1, 1)."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_avg_pool on empty spatial dims {x.shape}")
    out = x.numpy().mean(axis=(2, 3), keepdims=True, dtype=x.dtype)

    def bw(g: np.ndarray):
        return (np.broadcast_to(g / (h * w), x.shape),)

    return record_op("global_avg_pool", (x,), out, bw)


# --------------------------------------------------------------------------
# activations / normalisation
# --------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.numpy() > 0
    out = np.where(mask, x.numpy(), x.dtype.type(0))

    def bw(g: np.ndarray):
        return (g * mask,)

    return record_op("relu", (x,), out, bw)


def batch_norm2d(x: Tensor, p: BatchNorm2dParams, mode: str) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel batch normalisation.

    Train mode normalises by the batch mean and biased variance over
    (n, h, w) and returns running statistics updated as
    ``running <- (1 - m) * running + m * batch_stat``. Eval mode normalises
    by the stored running statistics. Returns (output, running_mean,
    running_var); callers own the statistics update (the op never mutates).
    """
    if mode not in ("train", "eval"):
        raise ShapeError(f"batch_norm2d mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if p.gamma.shape != (1, c, 1, 1) or p.beta.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm2d affine shape mismatch for input {x.shape}")
    xd = x.numpy()
    gamma, beta = p.gamma.numpy(), p.beta.numpy()
    eps = x.dtype.type(p.epsilon)

    if mode == "train":
        m_count = n * h * w
        if m_count < 2:
            raise ShapeError(
                "batch_norm2d train mode needs at least 2 elements per channel, "
                f"got batch*h*w = {m_count}"
            )
        mean = xd.mean(axis=(0, 2, 3), keepdims=True, dtype=x.dtype)
        var = xd.var(axis=(0, 2, 3), keepdims=True, dtype=x.dtype)  # biased
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean) * invstd
        out = gamma * xhat + beta

        m = x.dtype.type(p.momentum)
        new_rm = Tensor._wrap((1 - m) * p.running_mean.numpy() + m * mean)
        new_rv = Tensor._wrap((1 - m) * p.running_var.numpy() + m * var)

        need = (x.requires_grad, p.gamma.requires_grad, p.beta.requires_grad)

        def bw(g: np.ndarray):
            gx = ggamma = gbeta = None
            if need[1]:
                ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            if need[2]:
                gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            if need[0]:
                gxhat = g * gamma
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = invstd * (gxhat - mean_g - xhat * mean_gx)
            return (gx, ggamma, gbeta)

        out_t = record_op("batch_norm2d", (x, p.gamma, p.beta), out, bw)
        return out_t, new_rm, new_rv

    rm, rv = p.running_mean.numpy(), p.running_var.numpy()
    invstd_run = 1.0 / np.sqrt(rv + eps)
    xhat_run = (xd - rm) * invstd_run
    out = gamma * xhat_run + beta
    need = (x.requires_grad, p.gamma.requires_grad, p.beta.requires_grad)

    def bw_eval(g: np.ndarray):
        gx = ggamma = gbeta = None
        if need[1]:
            ggamma = (g * xhat_run).sum(axis=(0, 2, 3), keepdims=True)
        if need[2]:
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        if need[0]:
            gx = g * (gamma * invstd_run)
        return (gx, ggamma, gbeta)

    out_t = record_op("batch_norm2d", (x, p.gamma, p.beta), out, bw_eval)
    return out_t, p.running_mean, p.running_var


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def conv_output_hw(h: int, w: int, kernel: tuple[int, int], stride: tuple[int, int],
                   padding: tuple[int, int]) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _im2col_matrix(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                   oh: int, ow: int) -> np.ndarray:
    """Padded input (n, c, hp, wp) -> (c*kh*kw, n*oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
    )
    return win.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D cross-correlation with zero padding; bias optional."""
    n, ci, h, w = x.shape
    oc, wci, kh, kw = p.weight.shape
    sh, sw = p.stride
    ph, pw = p.padding
    if wci != ci:
        raise ShapeError(f"conv2d channel mismatch: input {ci}, weight expects {wci}")
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d stride must be positive, got {p.stride}")
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv2d padding must be non-negative, got {p.padding}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(
            f"conv2d kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{w + 2 * pw})"
        )
    if p.bias is not None and p.bias.shape != (1, oc, 1, 1):
        raise ShapeError(f"conv2d bias shape {p.bias.shape}, expected (1,{oc},1,1)")
    oh, ow = conv_output_hw(h, w, (kh, kw), (sh, sw), (ph, pw))

    xd = x.numpy()
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    cols = _im2col_matrix(xp, kh, kw, sh, sw, oh, ow)
    w2 = p.weight.numpy().reshape(oc, ci * kh * kw)
    out2 = w2 @ cols
    out = np.ascontiguousarray(out2.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))
    if p.bias is not None:
        out += p.bias.numpy()

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    need_x, need_w = x.requires_grad, p.weight.requires_grad

    def bw(g: np.ndarray):
        g2 = g.transpose(1, 0, 2, 3).reshape(oc, n * oh * ow)
        gw = (g2 @ cols.T).reshape(p.weight.shape) if need_w else None
        gx = None
        if need_x:
            gcols = (w2.T @ g2).reshape(ci, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if p.bias is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1) if p.bias.requires_grad else None
        return (gx, gw, gb)

    return record_op("conv2d", inputs, out, bw)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------


def max_pool2d(x: Tensor, kernel: tuple[int, int],
               stride: tuple[int, int]) -> tuple[Tensor, np.ndarray]:
    """Unpadded max pooling.

    Returns the pooled tensor and an int32 argmax array of shape
    (n, c, oh, ow) holding, per output element, the flat index ``iy * w + ix``
    of the selected input within its spatial plane (lowest flat index wins
    ties). The backward rule routes the gradient to exactly those positions.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError(f"max_pool2d kernel/stride must be positive, got {kernel}/{stride}")
    if kh > h or kw > w:
        raise ShapeError(f"max_pool2d kernel {kernel} larger than input {(h, w)}")
    oh, ow = conv_output_hw(h, w, kernel, stride, (0, 0))

    xd = x.numpy()
    s0, s1, s2, s3 = xd.strides
    win = as_strided(
        xd,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
    )
    out = win.max(axis=(4, 5))
    # First True along the window scan recovers the lowest flat index.
    hits = win == out[..., None, None]
    local = hits.reshape(n, c, oh, ow, kh * kw).argmax(axis=-1)
    oy = np.arange(oh).reshape(1, 1, oh, 1)
    ox = np.arange(ow).reshape(1, 1, 1, ow)
    iy = oy * sh + local // kw
    ix = ox * sw + local % kw
    argmax = (iy * w + ix).astype(np.int32)

    def bw(g: np.ndarray):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.add.at(
            gx,
            (
                np.arange(n).reshape(n, 1, 1, 1),
                np.arange(c).reshape(1, c, 1, 1),
                argmax,
            ),
            g,
        )
        return (gx.reshape(n, c, h, w),)

    return record_op("max_pool2d", (x,), np.ascontiguousarray(out), bw), argmax


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _lerp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners 1-D interpolation matrix (n_out, n_in), float64."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for o in range(n_out):
        src = o * scale
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable align-corners bilinear resize to (out_h, out_w)."""
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample target must be >= 1, got {(out_h, out_w)}")
    rh = _lerp_matrix(h, out_h).astype(x.dtype)
    rw = _lerp_matrix(w, out_w).astype(x.dtype)
    out = np.matmul(rh, np.matmul(x.numpy(), rw.T))

    def bw(g: np.ndarray):
        return (np.matmul(rh.T, np.matmul(g, rw)),)

    return record_op("bilinear_upsample", (x,), out, bw)


# --------------------------------------------------------------------------
# dense head
# --------------------------------------------------------------------------


def _as_matrix(t: Tensor, what: str) -> np.ndarray:
    n, f, h, w = t.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"{what} expects trailing spatial dims (1,1), got {t.shape}")
    return t.numpy().reshape(n, f)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """x @ weight.T + bias for x of shape (n, f, 1, 1)."""
    x2 = _as_matrix(x, "linear input")
    o, f = p.weight.shape[:2]
    if x2.shape[1] != f:
        raise ShapeError(f"linear expects in_features={f}, got input {x.shape}")
    w2 = p.weight.numpy().reshape(o, f)
    b = p.bias.numpy().reshape(o)
    out = (x2 @ w2.T + b).reshape(x.shape[0], o, 1, 1)
    need = (x.requires_grad, p.weight.requires_grad, p.bias.requires_grad)

    def bw(g: np.ndarray):
        g2 = g.reshape(g.shape[0], o)
        gx = (g2 @ w2).reshape(x.shape) if need[0] else None
        gw = (g2.T @ x2).reshape(p.weight.shape) if need[1] else None
        gb = g2.sum(axis=0).reshape(p.bias.shape) if need[2] else None
        return (gx, gw, gb)

    return record_op("linear", (x, p.weight, p.bias), out, bw)


def softmax(logits: Tensor) -> Tensor:
    """Row softmax over the channel axis of (n, k, 1, 1), max-subtracted."""
    z2 = _as_matrix(logits, "softmax")
    if z2.shape[1] < 1:
        raise ShapeError("softmax needs at least one class")
    z = z2 - z2.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = s.reshape(logits.shape)

    def bw(g: np.ndarray):
        g2 = g.reshape(s.shape)
        dot = (g2 * s).sum(axis=1, keepdims=True)
        return ((s * (g2 - dot)).reshape(logits.shape),)

    return record_op("softmax", (logits,), out, bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood via a fused log-softmax (never log(softmax))."""
    z2 = _as_matrix(logits, "cross_entropy")
    n, k = z2.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must be a length-{n} vector, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise ShapeError(f"labels out of range [0, {k})")

    z = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = (-logp[np.arange(n), labels]).mean(dtype=logits.dtype)
    out = np.asarray(loss, dtype=logits.dtype).reshape(1, 1, 1, 1)

    def bw(g: np.ndarray):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        grad *= g.reshape(()) / n
        return (grad.reshape(logits.shape),)

    return record_op("cross_entropy", (logits,), out, bw)
