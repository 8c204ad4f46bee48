"""Loss, schedule, optimizer, patch sampling, training loop and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .imageio import hwc_to_nchw, nchw_to_hwc, read_image
from .metrics import MetricReport, psnr
from .model import UHDDIP, NetConfig
from .priors import compute_priors
from .synth import DatasetManifest
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    batch: int = 4
    patch: int = 512
    iters: int = 300
    alpha: float = 0.5
    lam: float = 0.1
    flip: bool = True
    seed: int = 0
    log_every: int = 10

    def validate(self, net: Optional[NetConfig] = None) -> None:
        if not self.lr_final < self.lr_init:
            raise ConfigError("lr_final must be smaller than lr_init")
        if self.patch < 1 or self.patch & (self.patch - 1):
            raise ConfigError(f"patch {self.patch} must be a power of two")
        if net is not None and self.patch % net.align:
            raise ConfigError(f"patch {self.patch} not divisible by S*D = {net.align}")
        if self.iters < 1 or self.batch < 1:
            raise ConfigError("iters and batch must be positive")


@dataclass
class LossTerms:
    total: float
    l1_o: float
    freq_o: float
    l1_h: float
    freq_h: float


def _freq_l1(x: Tensor, target) -> Tensor:
    re, im = ops.fft2(ops.sub(x, target))
    return ops.add(ops.mean(ops.abs(re)), ops.mean(ops.abs(im)))


def total_loss(o: Tensor, h_lr: Tensor, g, alpha: float = 0.5, lam: float = 0.1
               ) -> tuple[Tensor, LossTerms]:
    """L1 + lam * frequency-L1 on the restored image, plus alpha times the same
    pair of terms on the low-resolution output against the box-downsampled target."""
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=o.dtype))
    if o.shape != g.shape:
        raise DimensionError(f"output {o.shape} does not match target {g.shape}")
    n, c, h, w = g.shape
    hn, hc, hh, hw = h_lr.shape
    if (hn, hc) != (n, c) or h % hh or w % hw or h // hh != w // hw:
        raise DimensionError(f"low-resolution output {h_lr.shape} does not match target {g.shape}")
    g_down = ops.box_downsample(g, h // hh)
    l1_o = ops.l1_loss(o, g)
    freq_o = _freq_l1(o, g)
    l1_h = ops.l1_loss(h_lr, g_down)
    freq_h = _freq_l1(h_lr, g_down)
    loss = ops.add(l1_o, ops.scale(freq_o, lam))
    loss = ops.add(loss, ops.scale(ops.add(l1_h, ops.scale(freq_h, lam)), alpha))
    terms = LossTerms(float(loss.data), float(l1_o.data), float(freq_o.data),
                      float(l1_h.data), float(freq_h.data))
    return loss, terms


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init at 0 to lr_final at cfg.iters."""
    if not 0 <= it <= cfg.iters:
        raise UsageError(f"iteration {it} outside [0, {cfg.iters}]")
    if it == cfg.iters:
        return cfg.lr_final
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * it / cfg.iters))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


# -- data ------------------------------------------------------------------------

@dataclass
class TrainPair:
    name: str
    degraded: np.ndarray  # H x W x 3
    gt: np.ndarray
    normal: np.ndarray  # H x W x 3
    gradient: np.ndarray  # H x W x 1


def make_pair(name: str, degraded: np.ndarray, gt: np.ndarray, normal_path=None) -> TrainPair:
    pri = compute_priors(degraded, normal_path)
    return TrainPair(name, degraded.astype(np.float32), gt.astype(np.float32), pri.normal, pri.gradient)


def load_pairs(root, split: str = "train", limit: Optional[int] = None) -> list[TrainPair]:
    """Read a synthesized split and compute priors from the degraded inputs."""
    root = Path(root)
    manifest = DatasetManifest.load(root)
    entries = manifest.entries(split)[:limit]
    pairs = []
    for e in entries:
        deg = read_image(manifest.resolve(root, e.degraded_path), channels=3)
        gt = read_image(manifest.resolve(root, e.clean_path), channels=3)
        pairs.append(make_pair(e.degraded_path, deg, gt))
    return pairs


@dataclass
class Patch:
    offset: tuple[int, int]
    flipped: bool
    degraded: np.ndarray
    gt: np.ndarray
    normal: np.ndarray
    gradient: np.ndarray


def sample_patch(pair: TrainPair, patch: int, rng: np.random.Generator, align: int = 1,
                 flip: bool = True) -> Patch:
    """Crop all four arrays at one align-multiple offset, optionally mirrored."""
    h, w = pair.gt.shape[:2]
    if h < patch or w < patch:
        raise DimensionError(f"image {h}x{w} smaller than patch {patch}")
    ny = (h - patch) // align + 1
    nx = (w - patch) // align + 1
    y = int(rng.integers(ny)) * align
    x = int(rng.integers(nx)) * align
    flipped = bool(flip and rng.random() < 0.5)

    def crop(a):
        c = a[y:y + patch, x:x + patch]
        return np.ascontiguousarray(c[:, ::-1] if flipped else c)

    normal = crop(pair.normal)
    if flipped:
        # mirroring x negates the normal's x component; encoded as (n + 1) / 2
        normal = normal.copy()
        normal[:, :, 0] = 1.0 - normal[:, :, 0]
    return Patch((y, x), flipped, crop(pair.degraded), crop(pair.gt), normal, crop(pair.gradient))


def _batch(patches: Sequence[Patch], attr: str) -> Tensor:
    return Tensor(np.concatenate([hwc_to_nchw(getattr(p, attr)) for p in patches], axis=0))


# -- training --------------------------------------------------------------------

@dataclass
class TrainRecord:
    iter: int
    lr: float
    total_loss: float
    l1_O: float
    freq_O: float
    l1_H: float
    freq_H: float
    psnr_val: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        if self.records and rec.iter <= self.records[-1].iter:
            raise UsageError("train log iterations must increase")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(TrainRecord.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([repr(getattr(r, n)) if isinstance(getattr(r, n), float) else getattr(r, n)
                        for n in names])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class TrainResult:
    model: UHDDIP
    log: TrainLog
    initial_loss: float
    final_loss: float


def _window_mean(values: list[float], k: int) -> float:
    return float(np.mean(values[:k])) if values else float("nan")


def train(pairs: Sequence[TrainPair], net_cfg: NetConfig, cfg: TrainConfig,
          val_pairs: Sequence[TrainPair] = (), model: Optional[UHDDIP] = None) -> TrainResult:
    """Deterministic for a fixed seed and thread count.

    ``initial_loss`` / ``final_loss`` average the first / last ``log_every``
    iterations, which smooths out patch-to-patch variation.
    """
    cfg.validate(net_cfg)
    if not pairs:
        raise UsageError("no training pairs")
    model = model if model is not None else UHDDIP(net_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    log = TrainLog()
    losses: list[float] = []
    for it in range(cfg.iters):
        lr = lr_at(it, cfg)
        idx = rng.integers(len(pairs), size=cfg.batch)
        patches = [sample_patch(pairs[i], cfg.patch, rng, net_cfg.align, cfg.flip) for i in idx]
        model.zero_grad()
        out = model(_batch(patches, "degraded"), _batch(patches, "normal"), _batch(patches, "gradient"))
        loss, terms = total_loss(out.restored, out.intermediate, _batch(patches, "gt").data,
                                 cfg.alpha, cfg.lam)
        if not math.isfinite(terms.total):
            raise NumericError(f"non-finite loss at iteration {it}")
        loss.backward()
        for name, p in model.named_parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name} at iteration {it}")
        opt.step(lr)
        losses.append(terms.total)
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iters:
            pv = float(np.mean([psnr(infer(model, p), p.gt) for p in val_pairs])) if val_pairs else float("nan")
            log.append(TrainRecord(it + 1, lr, terms.total, terms.l1_o, terms.freq_o,
                                   terms.l1_h, terms.freq_h, pv))
            logger.info("iter %d lr %.3g loss %.5f psnr_val %.2f", it + 1, lr, terms.total, pv)
    k = max(1, min(cfg.log_every, cfg.iters))
    return TrainResult(model, log, _window_mean(losses, k), _window_mean(losses[::-1], k))


# -- inference and evaluation ----------------------------------------------------

def _ramp(n: int, overlap: int) -> np.ndarray:
    if overlap <= 0:
        return np.ones(n)
    i = np.arange(n) + 0.5
    return np.clip(np.minimum(i, n - i) / overlap, 1.0 / overlap, 1.0)


def _tile_starts(size: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def infer_arrays(model: UHDDIP, img: np.ndarray, normal: np.ndarray, gradient: np.ndarray,
                 tile: int = 512, overlap: int = 32) -> np.ndarray:
    """Full-resolution restoration. Inputs larger than ``tile`` are processed in
    S*D-aligned tiles whose overlaps are blended with linear ramps."""
    align = model.cfg.align
    h, w = img.shape[:2]
    ph, pw = -h % align, -w % align
    if ph or pw:
        pad = ((0, ph), (0, pw), (0, 0))
        img, normal, gradient = (np.pad(a, pad, mode="reflect") for a in (img, normal, gradient))
    hp, wp = img.shape[:2]
    tile = max(align, tile - tile % align)
    overlap = -(-overlap // align) * align
    th, tw = min(tile, hp), min(tile, wp)
    stride_y = max(align, th - overlap) if th < hp else th
    stride_x = max(align, tw - overlap) if tw < wp else tw
    acc = np.zeros((hp, wp, 3))
    weight = np.zeros((hp, wp, 1))
    wy = _ramp(th, overlap if th < hp else 0)
    wx = _ramp(tw, overlap if tw < wp else 0)
    win = (wy[:, None] * wx[None, :])[:, :, None]
    with no_grad():
        for y in _tile_starts(hp, th, stride_y):
            for x in _tile_starts(wp, tw, stride_x):
                sl = (slice(y, y + th), slice(x, x + tw))
                out = model(Tensor(hwc_to_nchw(img[sl])), Tensor(hwc_to_nchw(normal[sl])),
                            Tensor(hwc_to_nchw(gradient[sl])))
                acc[sl] += nchw_to_hwc(out.restored.data) * win
                weight[sl] += win
    return np.clip(acc / weight, 0.0, 1.0)[:h, :w].astype(np.float32)


def infer(model: UHDDIP, pair: TrainPair, tile: int = 512, overlap: int = 32) -> np.ndarray:
    return infer_arrays(model, pair.degraded, pair.normal, pair.gradient, tile, overlap)


def evaluate(model: UHDDIP, pairs: Sequence[TrainPair], tile: int = 512, overlap: int = 32,
             baseline: bool = False) -> MetricReport:
    """Metrics of restored (or, with ``baseline``, degraded) images against ground truth."""
    report = MetricReport()
    for p in pairs:
        out = p.degraded if baseline else infer(model, p, tile, overlap)
        report.add(p.name, out, p.gt)
    return report


def save_trained(path, result: TrainResult, cfg: TrainConfig) -> None:
    result.model.save(path, {"train": asdict(cfg), "final_loss": result.final_loss})
