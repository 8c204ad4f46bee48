"""The two-branch prior-driven restoration network and its cost accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import ops
from .blocks import NAFBlock, ShuffleDown, ShuffleUpMerge
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module, Sequential
from .pfi import PFI
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor, check_finite


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class BlockAllocation:
    hr_per_group: int = 3
    hr_recon: int = 3
    lr_prior_init: int = 1
    lr_after_pfi: int = 4
    lr_intermediate: int = 2


@dataclass
class NetConfig:
    channels: int = 16
    pfi_count: int = 3
    heads: int = 8
    shuffle: int = 8
    dpfi_factor: int = 4
    unfold_k: int = 3
    gdfn_expansion: float = 2.0
    lr_width_mult: int = 2
    blocks: BlockAllocation = field(default_factory=BlockAllocation)

    def __post_init__(self):
        if isinstance(self.blocks, dict):
            self.blocks = BlockAllocation(**self.blocks)
        self.validate()

    @property
    def lr_channels(self) -> int:
        return self.channels * self.lr_width_mult

    @property
    def align(self) -> int:
        """Spatial extents must be multiples of this."""
        return self.shuffle * self.dpfi_factor

    def validate(self) -> None:
        if self.channels < 1 or self.lr_width_mult < 1:
            raise ConfigError("channels and lr_width_mult must be positive")
        if self.lr_channels % self.heads:
            raise ConfigError(f"low-resolution width {self.lr_channels} not divisible by heads={self.heads}")
        if not (_pow2(self.shuffle) and _pow2(self.dpfi_factor)):
            raise ConfigError("shuffle and dpfi_factor must be powers of two")
        if self.pfi_count < 1:
            raise ConfigError("pfi_count must be >= 1")
        if self.unfold_k % 2 == 0:
            raise ConfigError("unfold_k must be odd")
        for name, val in asdict(self.blocks).items():
            if val < 0:
                raise ConfigError(f"blocks.{name} must be >= 0")

    def check_input(self, h: int, w: int) -> None:
        if h % self.align or w % self.align:
            raise DimensionError(f"input {h}x{w} must be divisible by S*D = {self.align}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


REFERENCE_CONFIG = NetConfig()


class ModelOutput(NamedTuple):
    restored: Tensor
    intermediate: Tensor


def _nafs(n: int, c: int, rng) -> Sequential:
    return Sequential(*[NAFBlock(c, rng) for _ in range(n)])


class PriorEntry(Module):
    """Bring a full-resolution prior into the low-resolution space."""

    def __init__(self, cin: int, cout: int, factor: int, n_blocks: int, rng):
        self.down = ShuffleDown(cin, cout, factor, rng)
        self.conv = Conv2d(cout, cout, 3, rng)
        self.blocks = _nafs(n_blocks, cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(self.conv(self.down(x)))

    def macs(self, h: int, w: int) -> int:
        f = self.down.factor
        return self.down.macs(h, w) + self.conv.macs(h // f, w // f) + self.blocks.macs(h // f, w // f)


class UHDDIP(Module):
    def __init__(self, cfg: NetConfig = REFERENCE_CONFIG, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, cl, s, b = cfg.channels, cfg.lr_channels, cfg.shuffle, cfg.blocks
        self.intro = Conv2d(3, c, 3, rng)
        self.prior_n = PriorEntry(3, cl, s, b.lr_prior_init, rng)
        self.prior_g = PriorEntry(1, cl, s, b.lr_prior_init, rng)
        self.hr_groups = [_nafs(b.hr_per_group, c, rng) for _ in range(cfg.pfi_count)]
        self.down = [ShuffleDown(c, cl, s, rng) for _ in range(cfg.pfi_count)]
        self.pfi = [PFI(cl, cfg.heads, cfg.dpfi_factor, cfg.unfold_k, cfg.gdfn_expansion, rng)
                    for _ in range(cfg.pfi_count)]
        self.lr_blocks = [_nafs(b.lr_after_pfi, cl, rng) for _ in range(cfg.pfi_count)]
        self.up = [ShuffleUpMerge(cl, c, s, rng) for _ in range(cfg.pfi_count)]
        self.recon = _nafs(b.hr_recon, c, rng)
        self.out = Conv2d(c, 3, 3, rng)
        self.inter = _nafs(b.lr_intermediate, cl, rng)
        self.inter_out = Conv2d(cl, 3, 3, rng)

    def forward(self, u: Tensor, normal: Tensor, gradient: Tensor) -> ModelOutput:
        n, ch, h, w = u.shape
        if ch != 3:
            raise DimensionError(f"expected a 3-channel image, got {ch}")
        if normal.shape != (n, 3, h, w) or gradient.shape != (n, 1, h, w):
            raise DimensionError(f"priors {normal.shape}/{gradient.shape} do not match image {u.shape}")
        self.cfg.check_input(h, w)

        f = check_finite(self.intro(u), "intro")
        p_n = check_finite(self.prior_n(normal), "prior_n")
        p_g = check_finite(self.prior_g(gradient), "prior_g")
        low = None
        for i in range(self.cfg.pfi_count):
            f = check_finite(self.hr_groups[i](f), f"hr_groups.{i}")
            low = check_finite(self.down[i](f), f"down.{i}")
            low, p_n, p_g = self.pfi[i](p_n, p_g, low)
            check_finite(low, f"pfi.{i}")
            low = check_finite(self.lr_blocks[i](low), f"lr_blocks.{i}")
            f = check_finite(self.up[i](low, f), f"up.{i}")
        f = check_finite(self.recon(f), "recon")
        restored = check_finite(ops.add(self.out(f), u), "out")
        inter = check_finite(self.inter_out(self.inter(low)), "inter_out")
        return ModelOutput(restored, inter)

    def macs(self, h: int, w: int) -> int:
        return sum(count_macs_breakdown(self, h, w).values())

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"net": self.cfg.to_dict(), **(extra or {})}
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["UHDDIP", dict]:
        params, meta = load_checkpoint(path)
        model = cls(NetConfig.from_dict(meta["net"]))
        model.load_state_dict(params)
        return model, meta


def count_params_breakdown(model: UHDDIP) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        out[top] = out.get(top, 0) + p.size
    return out


def count_params(cfg: NetConfig) -> int:
    return UHDDIP(cfg).num_parameters()


def count_macs_breakdown(model: UHDDIP, h: int, w: int) -> dict[str, int]:
    cfg = model.cfg
    cfg.check_input(h, w)
    hl, wl = h // cfg.shuffle, w // cfg.shuffle
    return {
        "intro": model.intro.macs(h, w),
        "prior_n": model.prior_n.macs(h, w),
        "prior_g": model.prior_g.macs(h, w),
        "hr_groups": sum(g.macs(h, w) for g in model.hr_groups),
        "down": sum(d.macs(h, w) for d in model.down),
        "pfi": sum(p.macs(hl, wl) for p in model.pfi),
        "lr_blocks": sum(b.macs(hl, wl) for b in model.lr_blocks),
        "up": sum(u.macs(h, w) for u in model.up),
        "recon": model.recon.macs(h, w),
        "out": model.out.macs(h, w),
        "inter": model.inter.macs(hl, wl),
        "inter_out": model.inter_out.macs(hl, wl),
    }


def count_macs(cfg: NetConfig, h: int, w: int) -> int:
    """Analytic multiply-accumulates of conv and matmul layers for one h x w image."""
    return UHDDIP(cfg).macs(h, w)


def count_flops(cfg: NetConfig, h: int, w: int) -> int:
    """Two floating-point operations per multiply-accumulate."""
    return 2 * count_macs(cfg, h, w)


def describe(cfg: NetConfig, h: int = 1024, w: int = 1024) -> str:
    model = UHDDIP(cfg)
    params = count_params_breakdown(model)
    macs = count_macs_breakdown(model, h, w)
    lines = [f"{'module':<12}{'params':>12}{'GMACs':>12}",
             "-" * 36]
    for name in macs:
        lines.append(f"{name:<12}{params.get(name, 0):>12,}{macs[name] / 1e9:>12.3f}")
    total_p = sum(params.values())
    total_m = sum(macs.values())
    lines.append("-" * 36)
    lines.append(f"{'total':<12}{total_p:>12,}{total_m / 1e9:>12.3f}")
    lines.append(f"params: {total_p / 1e6:.3f} M")
    lines.append(f"MACs @ {h}x{w}: {total_m / 1e9:.2f} G   FLOPs (2/MAC): {2 * total_m / 1e9:.2f} G")
    return "\n".join(lines)
