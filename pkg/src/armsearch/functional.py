"""Differentiable layers built on the tape: convolution, activations,
normalization and the loss primitives used by the search heads."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DimensionError, Tensor, _result, _unbroadcast, as_tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` ([N,Cin,H,W] or [Cin,H,W]) with ``weight``
    ([Cout,Cin,k,k])."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if kh != kw:
        raise DimensionError(f"conv2d needs a square kernel, got {weight.shape}")
    k = kh

    if k == 1 and stride == 1 and padding == 0:
        out = _pointwise(x, weight)
    else:
        out = _im2col_conv(x, weight, k, padding, stride)
    if bias is not None:
        out = out + bias.reshape((1, cout, 1, 1))
    return out.reshape(out.shape[1:]) if squeeze else out


def _pointwise(x: Tensor, weight: Tensor) -> Tensor:
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    wmat = weight.data.reshape(cout, cin)
    xf = x.data.reshape(n, cin, h * w)
    out = np.matmul(wmat, xf).reshape(n, cout, h, w)

    def backward(g):
        gf = g.reshape(n, cout, h * w)
        gx = np.matmul(wmat.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(gf.transpose(1, 0, 2).reshape(cout, -1),
                           xf.transpose(1, 0, 2).reshape(cin, -1).T).reshape(weight.shape)
        return gx, gw

    return _result(out, (x, weight), backward)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [N, ho*wo, C*k*k] patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)


def _im2col_conv(x: Tensor, weight: Tensor, k: int, padding: int, stride: int) -> Tensor:
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(cols, wmat.T).transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def backward(g):
        gw = gx = None
        if weight.requires_grad:
            g2 = g.reshape(n, cout, ho * wo)
            gw = np.matmul(g2.transpose(1, 0, 2).reshape(cout, -1),
                           cols.reshape(-1, cin * k * k)).reshape(weight.shape)
        if x.requires_grad:
            if stride == 1 and 2 * padding == k - 1:
                # input gradient of a same-size conv is a conv of the output
                # gradient with the spatially flipped, channel-swapped kernel
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * k * k)
                gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                gcols = _im2col(gp, k, 1, h, w)
                gx = np.matmul(gcols, flipped.T).transpose(0, 2, 1).reshape(x.shape)
            else:
                g2 = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)
                dcols = np.matmul(g2, wmat).reshape(n, ho, wo, cin, k, k)
                dxp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, weight), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    out = x @ weight
    return out + bias if bias is not None else out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from erf."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
    return _result((d * cdf).astype(d.dtype), (x,), lambda g: (g * (cdf + d * pdf),))


_ACTIVATIONS = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize ``x`` to zero mean and unit (population) variance along
    ``axis``, then scale by ``gamma`` and shift by ``beta``."""
    axis = axis % x.ndim
    m = x.shape[axis]
    if m < 2:
        raise ValueError(f"layer_norm over an extent of {m}")
    if gamma.shape != (m,) or beta.shape != (m,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match extent {m}")
    bshape = [1] * x.ndim
    bshape[axis] = m
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gam + bet
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            gx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        ggam = (g * xhat).sum(axis=other) if gamma.requires_grad else None
        gbet = g.sum(axis=other) if beta.requires_grad else None
        return gx, ggam, gbet

    return _result(out, (x, gamma, beta), backward)


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                  running_var: np.ndarray, training: bool, momentum: float = 0.1,
                  eps: float = 1e-5) -> Tensor:
    """Batch norm over axis 0 of an [N, F] tensor. Running statistics are
    updated in place while training and used as-is in eval."""
    if training:
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch_norm_1d in training needs at least 2 samples")
        mu = x.mean(axis=0, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        unbiased = var.data[0] * n / (n - 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data[0]
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        xhat = xc / (var + eps).sqrt()
    else:
        xhat = (x - running_mean[None, :]) / np.sqrt(running_var[None, :] + eps)
    return xhat * gamma + beta


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """Return ``(x / ||x||, ||x||)`` along ``axis``."""
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm, norm


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    d = logits.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (logits,),
                   lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of [N, K] logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [N,K] logits and [N] targets, got {logits.shape}, {targets.shape}")
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(len(targets)), targets]
    if reduction == "sum":
        return -picked.sum()
    if reduction == "none":
        return -picked
    return -picked.mean()


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean BCE; stable for large |logit|."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    n = z.size
    out = np.asarray(loss.mean(), dtype=z.dtype)
    return _result(out, (logits,), lambda g: (g * (p - t) / n,))


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Smooth-L1 (quadratic below ``beta``, linear above)."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    d = pred.data - target
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).astype(pred.data.dtype)
    grad = np.where(small, d / beta, np.sign(d))
    return _result(out, (pred,), lambda g: (_unbroadcast(g * grad, pred.shape),))


def dim_check(x: Tensor, shape: tuple, what: str) -> None:
    if tuple(x.shape) != tuple(shape):
        raise DimensionError(f"{what}: expected shape {tuple(shape)}, got {tuple(x.shape)}")


__all__ = [
    "activation", "as_tensor", "batch_norm_1d", "binary_cross_entropy_with_logits",
    "conv2d", "cross_entropy", "dim_check", "dropout", "gelu", "l2_normalize",
    "layer_norm", "linear", "log_softmax", "relu", "sigmoid", "smooth_l1",
]
