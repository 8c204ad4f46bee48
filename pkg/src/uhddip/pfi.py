"""Prior feature interaction.

A PFI stage takes the normal prior feature, the gradient prior feature and the
image feature passed down from the high-resolution branch (all C x H x W at the
low resolution). SPFI fuses each prior with the image feature via MTCA + GDFN.
DPFI then measures patch-wise cosine similarity between the two enhanced priors
at 1/D resolution and uses it to drive a dual guided filter, where each
prior's generated kernel map gates the other prior's feature.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .blocks import GDFN, MTCA, NAFBlock, ShuffleDown
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor

COSINE_EPS = 1e-8


def cosine_columns(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of matching columns of two (N, K, L) tensors -> (N, 1, L)."""
    dot = ops.sum(ops.mul(u, v), axis=1, keepdims=True)
    nu = ops.sqrt(ops.sum(ops.mul(u, u), axis=1, keepdims=True))
    nv = ops.sqrt(ops.sum(ops.mul(v, v), axis=1, keepdims=True))
    return ops.div(dot, ops.add(ops.mul(nu, nv), eps))


class SPFI(Module):
    def __init__(self, channels: int, heads: int, gdfn_expansion: float = 2.0,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mtca_n = MTCA(channels, heads, rng)
        self.gdfn_n = GDFN(channels, gdfn_expansion, rng)
        self.mtca_g = MTCA(channels, heads, rng)
        self.gdfn_g = GDFN(channels, gdfn_expansion, rng)

    def forward(self, p_n: Tensor, p_g: Tensor, f: Tensor) -> tuple[Tensor, Tensor]:
        if not (p_n.shape == p_g.shape == f.shape):
            raise DimensionError(f"SPFI shapes differ: {p_n.shape}, {p_g.shape}, {f.shape}")
        p_n = self.gdfn_n(ops.add(p_n, self.mtca_n(p_n, f)))
        p_g = self.gdfn_g(ops.add(p_g, self.mtca_g(p_g, f)))
        return p_n, p_g

    def macs(self, h: int, w: int) -> int:
        return sum(m.macs(h, w) for m in (self.mtca_n, self.gdfn_n, self.mtca_g, self.gdfn_g))


class PatchSimilarity(Module):
    """Similarity weight map W of shape (N, 1, H/D, W/D)."""

    def __init__(self, channels: int, factor: int = 4, k: int = 3,
                 rng: Optional[np.random.Generator] = None):
        if k % 2 == 0:
            raise ConfigError(f"unfold size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.factor, self.k = factor, k
        self.down_n = ShuffleDown(channels, channels, factor, rng)
        self.naf_n = NAFBlock(channels, rng)
        self.down_g = ShuffleDown(channels, channels, factor, rng)
        self.naf_g = NAFBlock(channels, rng)

    def features(self, p_n: Tensor, p_g: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = p_n.shape
        if h % self.factor or w % self.factor:
            raise DimensionError(f"DPFI input {h}x{w} not divisible by {self.factor}")
        return self.naf_n(self.down_n(p_n)), self.naf_g(self.down_g(p_g))

    def similarity(self, a: Tensor, b: Tensor) -> Tensor:
        n, _, h, w = a.shape
        u = ops.unfold(a, self.k)
        v = ops.unfold(b, self.k)
        return ops.reshape(cosine_columns(u, v), (n, 1, h, w))

    def forward(self, p_n: Tensor, p_g: Tensor) -> Tensor:
        return self.similarity(*self.features(p_n, p_g))

    def macs(self, h: int, w: int) -> int:
        hd, wd = h // self.factor, w // self.factor
        return (self.down_n.macs(h, w) + self.down_g.macs(h, w)
                + self.naf_n.macs(hd, wd) + self.naf_g.macs(hd, wd))


class DualGuidedFilter(Module):
    """F_n, F_g from 3x3 conv + NAFBlock; K = sigmoid(1x1(conv3(F) * up(W)));
    F_pn = F_n * K_g + F_n and F_pg = F_g * K_n + F_g."""

    def __init__(self, channels: int, factor: int = 4, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = channels
        self.factor = factor
        self.conv_n = Conv2d(c, c, 3, rng)
        self.naf_n = NAFBlock(c, rng)
        self.conv_g = Conv2d(c, c, 3, rng)
        self.naf_g = NAFBlock(c, rng)
        self.kconv_n = Conv2d(c, c, 3, rng)
        self.kgen_n = Conv2d(c, c, 1, rng)
        self.kconv_g = Conv2d(c, c, 3, rng)
        self.kgen_g = Conv2d(c, c, 1, rng)

    def kernel(self, feat: Tensor, w_up: Tensor, which: str) -> Tensor:
        conv, gen = (self.kconv_n, self.kgen_n) if which == "n" else (self.kconv_g, self.kgen_g)
        return ops.sigmoid(gen(ops.mul(conv(feat), w_up)))

    def forward(self, p_n: Tensor, p_g: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, wd = p_n.shape
        if w.shape != (n, 1, h // self.factor, wd // self.factor):
            raise DimensionError(f"similarity map {w.shape} does not match features {p_n.shape}")
        f_n = self.naf_n(self.conv_n(p_n))
        f_g = self.naf_g(self.conv_g(p_g))
        w_up = ops.upsample_nearest(w, self.factor)
        k_n = self.kernel(f_n, w_up, "n")
        k_g = self.kernel(f_g, w_up, "g")
        f_pn = ops.add(ops.mul(f_n, k_g), f_n)
        f_pg = ops.add(ops.mul(f_g, k_n), f_g)
        return f_pn, f_pg

    def macs(self, h: int, w: int) -> int:
        return sum(m.macs(h, w) for m in (self.conv_n, self.naf_n, self.conv_g, self.naf_g,
                                          self.kconv_n, self.kgen_n, self.kconv_g, self.kgen_g))


class PFI(Module):
    def __init__(self, channels: int, heads: int, dpfi_factor: int = 4, k: int = 3,
                 gdfn_expansion: float = 2.0, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spfi = SPFI(channels, heads, gdfn_expansion, rng)
        self.similarity = PatchSimilarity(channels, dpfi_factor, k, rng)
        self.dgf = DualGuidedFilter(channels, dpfi_factor, rng)
        self.fuse = Conv2d(channels, channels, 1, rng)

    def forward(self, p_n: Tensor, p_g: Tensor, f: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (interacted feature, enhanced normal prior, enhanced gradient prior)."""
        p_n, p_g = self.spfi(p_n, p_g, f)
        w = self.similarity(p_n, p_g)
        f_pn, f_pg = self.dgf(p_n, p_g, w)
        f_p = self.fuse(ops.add(ops.add(f, f_pn), f_pg))
        return f_p, p_n, p_g

    def macs(self, h: int, w: int) -> int:
        return (self.spfi.macs(h, w) + self.similarity.macs(h, w) + self.dgf.macs(h, w)
                + self.fuse.macs(h, w))
