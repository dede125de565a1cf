"""Parametric building blocks: 3D convolution, 3D pooling, normalization,
linear layers, classification losses, and weight initializers.

Convolution is cross-correlation (no kernel flip) implemented as im2col plus
one matrix product; the backward pass scatters gradients with a small loop
over kernel offsets. All layers are containers of plain ``Tensor`` parameters
and expose ``named_parameters``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, ShapeError, log_softmax


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# -- initializers --------------------------------------------------------------


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """Zero-mean normal with std sqrt(2/fan_in)."""
    std = float(np.sqrt(2.0 / fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


def constant_fill(shape, value: float, dtype=np.float32):
    return np.full(shape, value, dtype=dtype)


def init_weight(kind, rng, shape, fan_in, dtype):
    """kind is 'kaiming' or ('constant', c)."""
    if kind == "kaiming":
        return kaiming_normal(rng, shape, fan_in, dtype)
    if isinstance(kind, (tuple, list)) and kind[0] == "constant":
        return constant_fill(shape, float(kind[1]), dtype)
    raise ValueError(f"unknown init kind {kind!r}")


# -- layer base ----------------------------------------------------------------


class Layer:
    def named_parameters(self, prefix: str = ""):
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Layer):
                out.update(val.named_parameters(name))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        out.update(item.named_parameters(f"{name}.{i}"))
                    elif isinstance(item, Tensor):
                        out[f"{name}.{i}"] = item
        return out


# -- 3D convolution ------------------------------------------------------------


def _im2col(xp: np.ndarray, kernel, stride):
    kt, kh, kw = kernel
    st, sh, sw = stride
    v = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    v = v[:, :, ::st, ::sh, ::sw]          # (N, C, To, Ho, Wo, kt, kh, kw)
    n, c, to, ho, wo = v.shape[:5]
    cols = v.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, c * kt * kh * kw)
    return np.ascontiguousarray(cols), (to, ho, wo)


def conv3d(x: Tensor, weight: Tensor, bias, stride, padding) -> Tensor:
    """Cross-correlate ``x`` (N,C,T,H,W) with ``weight`` (O,C,kt,kh,kw)."""
    stride = _triple(stride)
    padding = _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d input, got shape {x.shape}")
    n, c, t, h, w = x.shape
    o, ci, kt, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv3d: input has {c} channels, weight expects {ci}")
    out_dims = tuple(conv_output_size(d, k, s, p)
                     for d, k, s, p in zip((t, h, w), (kt, kh, kw), stride, padding))
    if min(out_dims) < 1:
        raise ShapeError(
            f"conv3d: non-positive output size {out_dims} for input {(t, h, w)}, "
            f"kernel {(kt, kh, kw)}, stride {stride}, padding {padding}")
    pt, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols, (to, ho, wo) = _im2col(xp, (kt, kh, kw), stride)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T                       # (N*To*Ho*Wo, O)
    if bias is not None:
        out = out + bias.data
    data = out.reshape(n, to, ho, wo, o).transpose(0, 4, 1, 2, 3)
    data = np.ascontiguousarray(data)
    st, sh, sw = stride

    def bw(g):
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, o)
        grads = [(weight, (gmat.T @ cols).reshape(weight.shape))]
        if bias is not None:
            grads.append((bias, gmat.sum(axis=0)))
        if x.requires_grad:
            dcols = gmat @ wmat               # (N*To*Ho*Wo, C*kt*kh*kw)
            dcols = dcols.reshape(n, to, ho, wo, c, kt, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        dxp[:, :, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw] += \
                            dcols[:, :, :, :, :, i, j, k].transpose(0, 4, 1, 2, 3)
            grads.append((x, dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]))
        return grads

    return Tensor._from_op(data, (x, weight, bias), bw)


class Conv3d(Layer):
    def __init__(self, in_c: int, out_c: int, kernel, stride=1, padding=0,
                 bias: bool = True, rng=None, dtype=np.float32, init="kaiming"):
        kernel = _triple(kernel)
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        fan_in = in_c * int(np.prod(kernel))
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Tensor(init_weight(init, rng, (out_c, in_c) + kernel, fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix: str = ""):
        out = {f"{prefix}.weight" if prefix else "weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias" if prefix else "bias"] = self.bias
        return out


# -- 3D pooling ----------------------------------------------------------------


def _pool_prepare(x: Tensor, kernel, stride, padding, pad_value):
    kernel = _triple(kernel)
    stride = _triple(stride)
    padding = _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"pool3d: expected 5-d input, got shape {x.shape}")
    dims = x.shape[2:]
    out_dims = tuple(conv_output_size(d, k, s, p)
                     for d, k, s, p in zip(dims, kernel, stride, padding))
    if min(out_dims) < 1:
        raise ShapeError(
            f"pool3d: invalid window: input {dims}, kernel {kernel}, "
            f"stride {stride}, padding {padding}")
    pt, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
                constant_values=pad_value)
    v = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    v = v[:, :, ::stride[0], ::stride[1], ::stride[2]]
    return kernel, stride, padding, xp.shape, v, out_dims


def max_pool3d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    if stride is None:
        stride = kernel
    kernel, stride, padding, pshape, v, out_dims = _pool_prepare(
        x, kernel, stride, padding, -np.inf)
    n, c = x.shape[:2]
    kvol = int(np.prod(kernel))
    vflat = v.reshape(v.shape[:5] + (kvol,))
    data = np.ascontiguousarray(vflat.max(axis=-1))
    # first maximal element in row-major scan order gets the gradient
    arg = vflat.argmax(axis=-1)

    def bw(g):
        dt, dh, dw = np.unravel_index(arg, kernel)
        to, ho, wo = out_dims
        tt = np.arange(to)[None, None, :, None, None] * stride[0] + dt
        hh = np.arange(ho)[None, None, None, :, None] * stride[1] + dh
        ww = np.arange(wo)[None, None, None, None, :] * stride[2] + dw
        nn = np.arange(n)[:, None, None, None, None]
        cc = np.arange(c)[None, :, None, None, None]
        dxp = np.zeros(pshape, dtype=x.data.dtype)
        np.add.at(dxp, (np.broadcast_to(nn, arg.shape), np.broadcast_to(cc, arg.shape),
                        np.broadcast_to(tt, arg.shape), np.broadcast_to(hh, arg.shape),
                        np.broadcast_to(ww, arg.shape)), g)
        pt, ph, pw = padding
        t, h, w = x.shape[2:]
        return [(x, dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w])]

    return Tensor._from_op(data, (x,), bw)


def avg_pool3d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    if stride is None:
        stride = kernel
    kernel, stride, padding, pshape, v, out_dims = _pool_prepare(
        x, kernel, stride, padding, 0.0)
    kvol = int(np.prod(kernel))
    data = np.ascontiguousarray(v.sum(axis=(-3, -2, -1)) / kvol)
    to, ho, wo = out_dims
    st, sh, sw = stride

    def bw(g):
        dxp = np.zeros(pshape, dtype=x.data.dtype)
        gk = g / kvol
        for i in range(kernel[0]):
            for j in range(kernel[1]):
                for k in range(kernel[2]):
                    dxp[:, :, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw] += gk
        pt, ph, pw = padding
        t, h, w = x.shape[2:]
        return [(x, dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w])]

    return Tensor._from_op(data, (x,), bw)


# -- normalization -------------------------------------------------------------


class BatchNorm3d(Layer):
    """Per-channel normalization over (N, T, H, W) with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = self.gamma.size
        if x.ndim != 5 or x.shape[1] != c:
            raise ShapeError(f"batchnorm3d: expected (N,{c},T,H,W), got {x.shape}")
        shape = (1, c, 1, 1, 1)
        gamma = self.gamma.reshape(shape)
        beta = self.beta.reshape(shape)
        if training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm3d: training mode needs batch size >= 2")
            mu = x.mean(axis=(0, 2, 3, 4), keepdims=True)
            var = ((x - mu) ** 2.0).mean(axis=(0, 2, 3, 4), keepdims=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data.reshape(-1)).astype(self.running_var.dtype)
            norm = (x - mu) * ((var + self.eps) ** -0.5)
        else:
            rm = self.running_mean.reshape(shape)
            rstd = 1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps)
            norm = (x - rm) * rstd
        return gamma * norm + beta

    def named_parameters(self, prefix: str = ""):
        p = prefix + "." if prefix else ""
        return {p + "gamma": self.gamma, p + "beta": self.beta}


class LayerNorm(Layer):
    """Normalization over the trailing feature dimension."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = float(eps)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gamma.size:
            raise ShapeError(
                f"layernorm: trailing dim {x.shape[-1]} != {self.gamma.size}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2.0).mean(axis=-1, keepdims=True)
        norm = (x - mu) * ((var + self.eps) ** -0.5)
        return norm * self.gamma + self.beta


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng=None, dtype=np.float32,
                 init="kaiming", bias: bool = True):
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Tensor(init_weight(init, rng, (out_dim, in_dim), in_dim, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(
                f"linear: trailing dim {x.shape[-1]} != in dim {self.weight.shape[1]}")
        lead = x.shape[:-1]
        flat = x.reshape(int(np.prod(lead)) if lead else 1, x.shape[-1])
        out = flat @ self.weight.transpose()
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(lead + (self.weight.shape[0],))


# -- losses --------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0,{k})")
    ls = log_softmax(logits, axis=1)
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return -(ls * onehot).sum() * (1.0 / n)


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Mean per-class binary cross-entropy on logits, in the stable
    max(z,0) - z*t + log(1+exp(-|z|)) form."""
    tdata = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if tdata.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce: targets shape {tdata.shape} != {logits.shape}")
    if not np.all((tdata == 0) | (tdata == 1)):
        raise ValueError("sigmoid_bce: targets must be binary")
    z = logits
    absz = z.relu() + (-z).relu()
    el = z.relu() - z * tdata.astype(logits.dtype) + ((-absz).exp() + 1.0).log()
    return el.mean()
