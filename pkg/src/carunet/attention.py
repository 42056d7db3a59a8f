"""Channel attention from pooled descriptors through one shared 3-tap kernel.

Both the spatial max-pool and mean-pool descriptors pass through the same
three trainable scalars (one shared buffer, not two copies), their outputs
are added channel-wise, and a sigmoid maps the sum to a per-channel gate in
(0, 1). The gate multiplies the feature map channel by channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .layers import conv1d_shared, sigmoid
from .tensor import Tensor, add, record


class MecaModule:
    """Holds the single shared 3-tap kernel: exactly 3 trainable scalars."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(3.0)  # fan-in rule with fan = kernel taps
        self.kernel = Tensor(rng.uniform(-bound, bound, size=3).astype(dtype), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("kernel", self.kernel)]


@dataclass
class ChannelDescriptors:
    """Per-channel pooled summaries; f_mp dominates f_ap elementwise."""

    f_mp: Tensor  # [N, C] spatial maxima
    f_ap: Tensor  # [N, C] spatial means


def spatial_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum, [N,C,H,W] -> [N,C].

    Gradient routes to the first maximal position in row-major order.
    """

    def fwd(xa):
        if xa.ndim != 4:
            raise ShapeError(f"op 'spatial_max_pool': input must be NCHW, got shape {xa.shape}")
        n, c, h, w = xa.shape
        flat = xa.reshape(n, c, h * w)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bwd(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            return (gflat.reshape(n, c, h, w),)

        return out, bwd

    return record("spatial_max_pool", (x,), fwd)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, [N,C,H,W] -> [N,C]."""

    def fwd(xa):
        if xa.ndim != 4:
            raise ShapeError(f"op 'spatial_avg_pool': input must be NCHW, got shape {xa.shape}")
        n, c, h, w = xa.shape
        out = xa.mean(axis=(2, 3))
        inv = 1.0 / (h * w)

        def bwd(g):
            return ((np.broadcast_to(g[:, :, None, None], xa.shape) * inv).astype(xa.dtype),)

        return out, bwd

    return record("spatial_avg_pool", (x,), fwd)


def channel_descriptors(x: Tensor) -> ChannelDescriptors:
    return ChannelDescriptors(f_mp=spatial_max_pool(x), f_ap=spatial_avg_pool(x))


def meca_map(x: Tensor, module: MecaModule) -> Tensor:
    """Attention gate M = sigmoid(conv1d(f_ap) + conv1d(f_mp)), shape [N, C].

    Both branches run through the one shared kernel, so its gradient
    accumulates from both.
    """
    desc = channel_descriptors(x)
    return sigmoid(add(conv1d_shared(desc.f_ap, module.kernel), conv1d_shared(desc.f_mp, module.kernel)))


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply feature map [N,C,H,W] by per-channel gate [N,C]."""

    def fwd(xa, ma):
        if xa.ndim != 4 or ma.ndim != 2 or xa.shape[:2] != ma.shape:
            raise ShapeError(f"op 'scale_channels': feature {xa.shape} and gate {ma.shape} disagree")
        out = xa * ma[:, :, None, None]

        def bwd(g):
            gx = g * ma[:, :, None, None]
            gm = (g * xa).sum(axis=(2, 3))
            return gx, gm

        return out, bwd

    return record("scale_channels", (x, gate), fwd)


def meca_apply(x: Tensor, module: MecaModule) -> Tensor:
    """Weight the feature map by its attention gate: out = x * M(x)."""
    return scale_channels(x, meca_map(x, module))
