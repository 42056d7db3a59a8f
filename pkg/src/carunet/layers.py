"""Neural building blocks: convolutions, pooling, batch norm, DropBlock.

Forward passes in float64 accumulate in a fixed, documented order (bias
first, then input-channel-major over kernel taps), which makes them
bit-identical to a naive triple-loop reference summing in the same order;
the test suite exploits that. float32 forwards take a matmul fast path
(same math, BLAS summation order) that the suite cross-checks against the
reference path at float32 tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record


@dataclass
class Conv2dParams:
    """Weights of one 2D convolution: weight [out_ch, in_ch, kh, kw], bias [out_ch]."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


def conv2d(x: Tensor, params: Conv2dParams) -> Tensor:
    """2D cross-correlation over NCHW input, differentiable in x, weight, bias."""
    w, b = params.weight, params.bias
    stride, padding = params.stride, params.padding

    def fwd(xa, wa, ba):
        if xa.ndim != 4:
            raise ShapeError(f"op 'conv2d': input must be NCHW, got shape {xa.shape}")
        n, cin, h, wd = xa.shape
        cout, cin_w, kh, kw = wa.shape
        if cin != cin_w:
            raise ShapeError(f"op 'conv2d': input has {cin} channels, weight expects {cin_w}")
        span_h, span_w = h + 2 * padding - kh, wd + 2 * padding - kw
        if span_h < 0 or span_w < 0:
            raise ShapeError(f"op 'conv2d': kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
        if span_h % stride or span_w % stride:
            raise ShapeError(f"op 'conv2d': output size not integral for input {xa.shape}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
        oh, ow = span_h // stride + 1, span_w // stride + 1
        xp = np.pad(xa, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xa

        out = np.empty((n, cout, oh, ow), dtype=xa.dtype)
        out[:] = ba[None, :, None, None]
        if xa.dtype == np.float64:
            # reference path: accumulation order (bias, then ci-major over
            # taps) matches the naive-loop oracle bit for bit
            for ci in range(cin):
                plane = xp[:, ci]
                for di in range(kh):
                    for dj in range(kw):
                        xs = plane[:, di : di + (oh - 1) * stride + 1 : stride, dj : dj + (ow - 1) * stride + 1 : stride]
                        out += wa[None, :, ci, di, dj, None, None] * xs[:, None]
        else:
            # fast path: one matmul per kernel tap
            for di in range(kh):
                for dj in range(kw):
                    xs = xp[:, :, di : di + (oh - 1) * stride + 1 : stride, dj : dj + (ow - 1) * stride + 1 : stride]
                    out += np.tensordot(xs, wa[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)

        def bwd(g):
            gw = np.empty_like(wa)
            gx_pad = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    sl_h = slice(di, di + (oh - 1) * stride + 1, stride)
                    sl_w = slice(dj, dj + (ow - 1) * stride + 1, stride)
                    gw[:, :, di, dj] = np.tensordot(g, xp[:, :, sl_h, sl_w], axes=([0, 2, 3], [0, 2, 3]))
                    gx_pad[:, :, sl_h, sl_w] += np.tensordot(g, wa[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
            gb = g.sum(axis=(0, 2, 3))
            gx = gx_pad[:, :, padding : padding + h, padding : padding + wd] if padding else gx_pad
            return gx, gw, gb

        return out, bwd

    return record("conv2d", (x, w, b), fwd)


def conv_transpose2d(x: Tensor, params: Conv2dParams) -> Tensor:
    """Transposed convolution with kernel 2, stride 2: doubles H and W.

    Weight layout matches conv2d ([out_ch, in_ch, 2, 2]); with stride equal
    to kernel size the output blocks never overlap, so each output pixel is
    bias + a plain sum over input channels.
    """
    w, b = params.weight, params.bias

    def fwd(xa, wa, ba):
        if xa.ndim != 4:
            raise ShapeError(f"op 'conv_transpose2d': input must be NCHW, got shape {xa.shape}")
        cout, cin_w, kh, kw = wa.shape
        if kh != 2 or kw != 2 or params.stride != 2 or params.padding != 0:
            raise ShapeError("op 'conv_transpose2d': only kernel 2, stride 2, padding 0 is supported")
        n, cin, h, wd = xa.shape
        if cin != cin_w:
            raise ShapeError(f"op 'conv_transpose2d': input has {cin} channels, weight expects {cin_w}")
        out = np.empty((n, cout, 2 * h, 2 * wd), dtype=xa.dtype)
        out[:] = ba[None, :, None, None]
        if xa.dtype == np.float64:
            # reference path: matches the scatter-add oracle bit for bit
            for ci in range(cin):
                plane = xa[:, ci]
                for di in range(2):
                    for dj in range(2):
                        out[:, :, di::2, dj::2] += wa[None, :, ci, di, dj, None, None] * plane[:, None]
        else:
            for di in range(2):
                for dj in range(2):
                    out[:, :, di::2, dj::2] += np.tensordot(xa, wa[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)

        def bwd(g):
            gx = np.zeros_like(xa)
            gw = np.empty_like(wa)
            for di in range(2):
                for dj in range(2):
                    gs = g[:, :, di::2, dj::2]
                    gx += np.tensordot(gs, wa[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
                    gw[:, :, di, dj] = np.tensordot(gs, xa, axes=([0, 2, 3], [0, 2, 3]))
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb

        return out, bwd

    return record("conv_transpose2d", (x, w, b), fwd)


def maxpool2d_2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling with stride 2. Returns (pooled, argmax window indices).

    Ties go to the first maximal element in row-major window order, and the
    backward pass routes the gradient only to that element.
    """

    holder = {}

    def fwd(xa):
        if xa.ndim != 4:
            raise ShapeError(f"op 'maxpool2d_2x2': input must be NCHW, got shape {xa.shape}")
        n, c, h, w = xa.shape
        if h % 2 or w % 2:
            raise ShapeError(f"op 'maxpool2d_2x2': spatial dims must be even, got {h}x{w}")
        oh, ow = h // 2, w // 2
        windows = xa.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = windows.argmax(axis=-1)
        holder["idx"] = idx
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        def bwd(g):
            gwin = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gx = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (gx,)

        return out, bwd

    out = record("maxpool2d_2x2", (x,), fwd)
    return out, holder["idx"]


def conv1d_shared(x: Tensor, kernel: Tensor) -> Tensor:
    """3-tap 1D convolution along the channel axis with zero padding, no bias.

    Accepts a [C] vector or an [N, C] batch; the same 3 scalars slide over
    the channel dimension either way.
    """

    def fwd(xa, ka):
        if ka.shape != (3,):
            raise ShapeError(f"op 'conv1d_shared': kernel length must be 3, got shape {ka.shape}")
        if xa.ndim not in (1, 2):
            raise ShapeError(f"op 'conv1d_shared': input must be [C] or [N, C], got shape {xa.shape}")
        c = xa.shape[-1]
        pad = [(0, 0)] * (xa.ndim - 1) + [(1, 1)]
        xp = np.pad(xa, pad)
        out = ka[0] * xp[..., 0:c]
        out += ka[1] * xp[..., 1 : c + 1]
        out += ka[2] * xp[..., 2 : c + 2]

        def bwd(g):
            gp = np.pad(g, pad)
            gx = ka[2] * gp[..., 0:c]
            gx += ka[1] * gp[..., 1 : c + 1]
            gx += ka[0] * gp[..., 2 : c + 2]
            gk = np.array([(g * xp[..., j : j + c]).sum() for j in range(3)], dtype=ka.dtype)
            return gx, gk

        return out, bwd

    return record("conv1d_shared", (x, kernel), fwd)


@dataclass
class BatchNormState:
    """Per-channel affine batch normalization state.

    gamma/beta are trainable; running_mean/running_var are plain buffers
    updated in train mode and the only statistics used in eval mode.
    Variances are biased (divide by m), consistently for both batch
    normalization and the running estimate.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    eps = state.epsilon

    def fwd(xa, ga, ba):
        if xa.ndim != 4:
            raise ShapeError(f"op 'batchnorm2d': input must be NCHW, got shape {xa.shape}")
        n, c, h, w = xa.shape
        if c != ga.shape[0]:
            raise ShapeError(f"op 'batchnorm2d': input has {c} channels, state expects {ga.shape[0]}")
        if state.mode == "train":
            m = n * h * w
            if m < 2:
                raise ShapeError("op 'batchnorm2d': train mode needs at least 2 elements per channel")
            mean = xa.mean(axis=(0, 2, 3))
            var = xa.var(axis=(0, 2, 3))
            state.running_mean = ((1.0 - state.momentum) * state.running_mean + state.momentum * mean).astype(xa.dtype)
            state.running_var = ((1.0 - state.momentum) * state.running_var + state.momentum * var).astype(xa.dtype)
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (xa - mean[None, :, None, None]) * inv_std[None, :, None, None]
            out = ga[None, :, None, None] * xhat + ba[None, :, None, None]

            def bwd(g):
                ggamma = (g * xhat).sum(axis=(0, 2, 3))
                gbeta = g.sum(axis=(0, 2, 3))
                gxhat = g * ga[None, :, None, None]
                mean_g = gxhat.mean(axis=(0, 2, 3))
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
                gx = inv_std[None, :, None, None] * (gxhat - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None])
                return gx, ggamma, gbeta

            return out, bwd

        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xa - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = ga[None, :, None, None] * xhat + ba[None, :, None, None]

        def bwd_eval(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gx = g * (ga * inv_std)[None, :, None, None]
            return gx, ggamma, gbeta

        return out, bwd_eval

    return record("batchnorm2d", (x, state.gamma, state.beta), fwd)


@dataclass
class DropBlockConfig:
    block_size: int = 7
    drop_rate: float = 0.15
    mode: str = "train"

    def validate(self) -> None:
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ShapeError(f"dropblock block_size must be odd and positive, got {self.block_size}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ShapeError(f"dropblock drop_rate must be in [0, 1), got {self.drop_rate}")


def dropblock(x: Tensor, config: DropBlockConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Structured dropout: zero contiguous square blocks, rescale survivors.

    Seed positions are Bernoulli-sampled on the valid region (where a full
    block fits) with rate

        gamma = drop_rate / block_size^2 * (H * W) / ((H - bs + 1) * (W - bs + 1)),

    each seed is expanded to a block_size x block_size zero patch, and the
    surviving activations are scaled by count(mask) / count_ones(mask) so
    the expected activation mass is preserved. Eval mode or drop_rate 0 is
    the identity.
    """
    if config.mode != "train" or config.drop_rate == 0.0:
        return x
    config.validate()
    if rng is None:
        raise ValueError("dropblock in train mode needs an rng")
    bs = config.block_size

    def fwd(xa):
        if xa.ndim != 4:
            raise ShapeError(f"op 'dropblock': input must be NCHW, got shape {xa.shape}")
        n, c, h, w = xa.shape
        if bs > h or bs > w:
            raise ShapeError(f"op 'dropblock': block_size {bs} exceeds feature size {h}x{w}")
        vh, vw = h - bs + 1, w - bs + 1
        gamma = config.drop_rate / (bs * bs) * (h * w) / (vh * vw)
        seeds = rng.random((n, c, vh, vw)) < gamma
        dropped = np.zeros((n, c, h, w), dtype=bool)
        for di in range(bs):
            for dj in range(bs):
                dropped[:, :, di : di + vh, dj : dj + vw] |= seeds
        kept = (~dropped).sum()
        if kept == 0:
            mask_scaled = np.zeros_like(xa)
        else:
            scale = dropped.size / kept
            mask_scaled = np.where(dropped, 0.0, scale).astype(xa.dtype)
        return xa * mask_scaled, lambda g: (g * mask_scaled,)

    return record("dropblock", (x,), fwd)


def relu(x: Tensor) -> Tensor:
    def fwd(xa):
        mask = xa > 0  # derivative at exactly 0 is defined as 0
        return np.where(mask, xa, xa.dtype.type(0)), lambda g: (g * mask,)

    return record("relu", (x,), fwd)


def sigmoid(x: Tensor) -> Tensor:
    def fwd(xa):
        out = np.empty_like(xa)
        pos = xa >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xa[pos]))
        ex = np.exp(xa[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, lambda g: (g * out * (1.0 - out),)

    return record("sigmoid", (x,), fwd)


def pointwise_activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind '{kind}'")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    def fwd(xa, xb):
        if xa.ndim != 4 or xb.ndim != 4:
            raise ShapeError("op 'concat_channels': inputs must be NCHW")
        if xa.shape[0] != xb.shape[0] or xa.shape[2:] != xb.shape[2:]:
            raise ShapeError(f"op 'concat_channels': operand shapes {xa.shape} and {xb.shape} disagree outside the channel axis")
        ca = xa.shape[1]
        out = np.concatenate([xa, xb], axis=1)
        return out, lambda g: (g[:, :ca], g[:, ca:])

    return record("concat_channels", (a, b), fwd)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_conv2d(
    rng: np.random.Generator,
    in_ch: int,
    out_ch: int,
    kernel: int,
    padding: int,
    dtype=np.float32,
    stride: int = 1,
) -> Conv2dParams:
    """Kaiming-uniform (fan-in) weight, zero bias."""
    fan_in = in_ch * kernel * kernel
    weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype), requires_grad=True)
    bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
    return Conv2dParams(weight=weight, bias=bias, stride=stride, padding=padding)
