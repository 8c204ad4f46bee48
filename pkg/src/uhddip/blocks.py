"""Network building blocks: NAFBlock, MTCA cross attention, GDFN and the
pixel-shuffle resolution converters."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm2d, Module
from .tensor import DEFAULT_DTYPE, Tensor, parameter


def simple_gate(x: Tensor) -> Tensor:
    a, b = ops.split(x, 2, axis=1)
    return ops.mul(a, b)


class NAFBlock(Module):
    """Activation-free residual block with SimpleGate and simplified channel attention.

    The residual scalers ``beta`` and ``gamma`` start at zero, so a freshly
    built block is the identity map.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 dw_expand: int = 2, ffn_expand: int = 2):
        rng = rng if rng is not None else np.random.default_rng(0)
        dw = channels * dw_expand
        ffn = channels * ffn_expand
        if dw % 2 or ffn % 2:
            raise ConfigError("NAFBlock expansion widths must be even for the gate")
        self.channels = channels
        self.norm1 = LayerNorm2d(channels)
        self.conv1 = Conv2d(channels, dw, 1, rng)
        self.conv2 = Conv2d(dw, dw, 3, rng, groups=dw)
        self.sca = Conv2d(dw // 2, dw // 2, 1, rng)
        self.conv3 = Conv2d(dw // 2, channels, 1, rng)
        self.norm2 = LayerNorm2d(channels)
        self.conv4 = Conv2d(channels, ffn, 1, rng)
        self.conv5 = Conv2d(ffn // 2, channels, 1, rng)
        self.beta = parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.gamma = parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"NAFBlock built for {self.channels} channels, got {x.shape[1]}")
        c = self.channels
        y = self.conv2(self.conv1(self.norm1(x)))
        y = simple_gate(y)
        y = ops.mul(y, self.sca(ops.global_avg_pool(y)))
        y = self.conv3(y)
        x = ops.add(x, ops.mul(y, ops.reshape(self.beta, (1, c, 1, 1))))
        y = simple_gate(self.conv4(self.norm2(x)))
        y = self.conv5(y)
        return ops.add(x, ops.mul(y, ops.reshape(self.gamma, (1, c, 1, 1))))

    def macs(self, h: int, w: int) -> int:
        return (self.conv1.macs(h, w) + self.conv2.macs(h, w) + self.sca.macs(1, 1)
                + self.conv3.macs(h, w) + self.conv4.macs(h, w) + self.conv5.macs(h, w))


class MTCA(Module):
    """Cross attention over channels: queries from a prior feature, keys and
    values from the image feature.

    Each head attends over its C/heads channels; logits are scaled by
    1/sqrt(H*W), the length of the contracted axis.
    """

    def __init__(self, channels: int, heads: int, rng: Optional[np.random.Generator] = None):
        if heads < 1 or channels % heads:
            raise ConfigError(f"channels={channels} not divisible by heads={heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        c = channels
        self.channels, self.heads = c, heads
        self.norm_q = LayerNorm2d(c)
        self.q_conv = Conv2d(c, c, 1, rng)
        self.q_dw = Conv2d(c, c, 3, rng, groups=c)
        self.norm_kv = LayerNorm2d(c)
        self.kv_conv = Conv2d(c, 2 * c, 1, rng)
        self.kv_dw = Conv2d(2 * c, 2 * c, 3, rng, groups=2 * c)
        self.proj = Conv2d(c, c, 1, rng)

    def _qkv(self, prior: Tensor, image: Tensor):
        if prior.shape != image.shape:
            raise DimensionError(f"MTCA inputs differ in shape: {prior.shape} vs {image.shape}")
        if prior.shape[1] != self.channels:
            raise DimensionError(f"MTCA built for {self.channels} channels, got {prior.shape[1]}")
        n, c, h, w = prior.shape
        d = c // self.heads
        q = self.q_dw(self.q_conv(self.norm_q(prior)))
        k, v = ops.split(self.kv_dw(self.kv_conv(self.norm_kv(image))), 2, axis=1)
        shape = (n, self.heads, d, h * w)
        return ops.reshape(q, shape), ops.reshape(k, shape), ops.reshape(v, shape)

    def attention(self, prior: Tensor, image: Tensor) -> Tensor:
        """Attention maps of shape (N, heads, C/heads, C/heads)."""
        q, k, _ = self._qkv(prior, image)
        return self._attn(q, k)

    def _attn(self, q: Tensor, k: Tensor) -> Tensor:
        hw = q.shape[-1]
        logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        return ops.softmax(ops.scale(logits, 1.0 / math.sqrt(hw)), axis=-1)

    def forward(self, prior: Tensor, image: Tensor) -> Tensor:
        q, k, v = self._qkv(prior, image)
        out = ops.matmul(self._attn(q, k), v)
        return self.proj(ops.reshape(out, prior.shape))

    def macs(self, h: int, w: int) -> int:
        c, d = self.channels, self.channels // self.heads
        attn = 2 * self.heads * d * d * h * w
        return (self.q_conv.macs(h, w) + self.q_dw.macs(h, w) + self.kv_conv.macs(h, w)
                + self.kv_dw.macs(h, w) + self.proj.macs(h, w) + attn)


class GDFN(Module):
    """Gated depthwise-conv feed-forward network with its own residual."""

    def __init__(self, channels: int, expansion: float = 2.0, rng: Optional[np.random.Generator] = None):
        hidden = channels * expansion
        if abs(hidden - round(hidden)) > 1e-9:
            raise ConfigError(f"GDFN expansion {expansion} gives non-integral width {hidden}")
        hidden = int(round(hidden))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.hidden = channels, hidden
        self.norm = LayerNorm2d(channels)
        self.conv_in = Conv2d(channels, 2 * hidden, 1, rng)
        self.dw = Conv2d(2 * hidden, 2 * hidden, 3, rng, groups=2 * hidden)
        self.conv_out = Conv2d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        a, b = ops.split(self.dw(self.conv_in(self.norm(x))), 2, axis=1)
        return ops.add(x, self.conv_out(ops.mul(ops.gelu(a), b)))

    def macs(self, h: int, w: int) -> int:
        return self.conv_in.macs(h, w) + self.dw.macs(h, w) + self.conv_out.macs(h, w)


class ShuffleDown(Module):
    """pixel_unshuffle by ``factor`` followed by a 1x1 projection to ``cout`` channels."""

    def __init__(self, cin: int, cout: int, factor: int, rng: Optional[np.random.Generator] = None):
        self.factor = factor
        self.proj = Conv2d(cin * factor * factor, cout, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(ops.pixel_unshuffle(x, self.factor))

    def macs(self, h: int, w: int) -> int:
        return self.proj.macs(h // self.factor, w // self.factor)


class ShuffleUpMerge(Module):
    """1x1 expansion, pixel_shuffle back to full size, concat with the skip
    feature and a 1x1 merge. ``macs`` takes the full-resolution size."""

    def __init__(self, c_low: int, c_high: int, factor: int, rng: Optional[np.random.Generator] = None):
        self.factor = factor
        self.expand = Conv2d(c_low, c_high * factor * factor, 1, rng)
        self.merge = Conv2d(2 * c_high, c_high, 1, rng)

    def forward(self, low: Tensor, skip: Tensor) -> Tensor:
        up = ops.pixel_shuffle(self.expand(low), self.factor)
        if up.shape != skip.shape:
            raise DimensionError(f"shuffled-up feature {up.shape} does not match skip {skip.shape}")
        return self.merge(ops.concat([up, skip], axis=1))

    def macs(self, h: int, w: int) -> int:
        return self.expand.macs(h // self.factor, w // self.factor) + self.merge.macs(h, w)
