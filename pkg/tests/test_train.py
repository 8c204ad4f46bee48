import math

import numpy as np
import pytest

from uhddip import ops
from uhddip.errors import ConfigError, DimensionError, NumericError
from uhddip.model import UHDDIP, NetConfig
from uhddip.tensor import Tensor
from uhddip.train import (AdamW, TrainConfig, TrainLog, TrainRecord, evaluate, infer, infer_arrays, lr_at, make_pair,
                          sample_patch, total_loss, train)

F64 = np.float64


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def test_loss_zero_at_targets(rng):
    g = rng.uniform(0, 1, (1, 3, 8, 8))
    g_down = g.reshape(1, 3, 2, 4, 2, 4).mean(axis=(3, 5))
    loss, terms = total_loss(_t(g), _t(g_down), g)
    assert loss.data == 0.0 and terms.total == 0.0


def test_loss_reduces_to_l1(rng):
    o, g = rng.uniform(0, 1, (1, 3, 8, 8)), rng.uniform(0, 1, (1, 3, 8, 8))
    h = rng.uniform(0, 1, (1, 3, 2, 2))
    loss, _ = total_loss(_t(o), _t(h), g, alpha=0.0, lam=0.0)
    assert float(loss.data) == pytest.approx(np.mean(np.abs(o - g)), abs=1e-12)


def test_loss_matches_scalar_computation(rng):
    o, g = rng.uniform(0, 1, (1, 2, 4, 4)), rng.uniform(0, 1, (1, 2, 4, 4))
    h = rng.uniform(0, 1, (1, 2, 2, 2))
    alpha, lam = 0.5, 0.1

    def dft(x):
        hh, ww = x.shape
        out = np.zeros((hh, ww), complex)
        for u in range(hh):
            for v in range(ww):
                out[u, v] = sum(x[y, z] * np.exp(-2j * np.pi * (u * y / hh + v * z / ww))
                                for y in range(hh) for z in range(ww))
        return out

    def freq(a, b):
        re = im = 0.0
        for c in range(a.shape[1]):
            d = dft(a[0, c]) - dft(b[0, c])
            re += np.abs(d.real).sum()
            im += np.abs(d.imag).sum()
        return re / a.size + im / a.size

    gd = np.zeros((1, 2, 2, 2))
    for c in range(2):
        for i in range(2):
            for j in range(2):
                gd[0, c, i, j] = g[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
    expect = (np.abs(o - g).mean() + lam * freq(o, g)
              + alpha * (np.abs(h - gd).mean() + lam * freq(h, gd)))
    loss, terms = total_loss(_t(o), _t(h), g, alpha, lam)
    assert float(loss.data) == pytest.approx(expect, abs=1e-10)
    assert terms.l1_h == pytest.approx(np.abs(h - gd).mean(), abs=1e-12)


def test_loss_nonnegative_and_positive_off_target(rng):
    g = rng.uniform(0, 1, (1, 3, 8, 8))
    o = g.copy()
    o[0, 0, 0, 0] += 0.1
    g_down = g.reshape(1, 3, 2, 4, 2, 4).mean(axis=(3, 5))
    loss, _ = total_loss(_t(o), _t(g_down), g)
    assert float(loss.data) > 0


def test_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        total_loss(_t(np.zeros((1, 3, 8, 8))), _t(np.zeros((1, 3, 3, 3))), np.zeros((1, 3, 8, 8)))


def test_lr_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(iters=1000)
    assert lr_at(0, cfg) == 5e-4
    assert lr_at(1000, cfg) == 1e-7
    assert lr_at(500, cfg) == pytest.approx((5e-4 + 1e-7) / 2, rel=1e-12)
    vals = [lr_at(i, cfg) for i in range(0, 1001, 10)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=1e-7, lr_final=1e-3).validate()
    with pytest.raises(ConfigError):
        TrainConfig(patch=48).validate(NetConfig())
    with pytest.raises(ConfigError):
        TrainConfig(patch=16).validate(NetConfig())


def _pair(rng, h=64, w=64):
    gt = rng.uniform(0, 1, (h, w, 3)).astype(np.float32)
    deg = np.clip(gt + 0.3 * (rng.uniform(0, 1, (h, w, 1)) > 0.8), 0, 1).astype(np.float32)
    return make_pair("p", deg, gt)


def test_patch_identity_crop(rng):
    p = _pair(rng, 32, 32)
    patch = sample_patch(p, 32, rng, align=32, flip=False)
    assert patch.offset == (0, 0)
    np.testing.assert_array_equal(patch.degraded, p.degraded)
    np.testing.assert_array_equal(patch.gradient, p.gradient)


def test_patch_crops_share_offsets(rng):
    p = _pair(rng, 96, 64)
    for _ in range(20):
        patch = sample_patch(p, 32, rng, align=16, flip=True)
        y, x = patch.offset
        assert y % 16 == 0 and x % 16 == 0
        sl = (slice(y, y + 32), slice(x, x + 32))
        flip = (lambda a: a[:, ::-1]) if patch.flipped else (lambda a: a)
        np.testing.assert_array_equal(patch.degraded, flip(p.degraded[sl]))
        np.testing.assert_array_equal(patch.gt, flip(p.gt[sl]))
        np.testing.assert_array_equal(patch.gradient, flip(p.gradient[sl]))
        expect_n = flip(p.normal[sl]).copy()
        if patch.flipped:
            expect_n[:, :, 0] = 1.0 - expect_n[:, :, 0]
        np.testing.assert_allclose(patch.normal, expect_n)


def test_patch_offsets_cover_grid(rng):
    p = _pair(rng, 160, 160)
    seen = set()
    for _ in range(10_000):
        seen.add(sample_patch(p, 32, rng, align=8, flip=False).offset)
    cells = ((160 - 32) // 8 + 1) ** 2
    assert len(seen) >= 0.9 * cells


def test_patch_undersized(rng):
    with pytest.raises(DimensionError):
        sample_patch(_pair(rng, 32, 32), 64, rng)


def test_adamw_zero_lr_and_zero_grad_leave_params(rng):
    p = Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
    before = p.data.copy()
    p.grad = rng.standard_normal(5).astype(np.float32)
    AdamW([p]).step(0.0)
    assert p.data.tobytes() == before.tobytes()
    p.grad = np.zeros(5, np.float32)
    AdamW([p], weight_decay=0.0).step(1e-3)
    assert p.data.tobytes() == before.tobytes()


def test_adamw_first_step_moves_by_lr(rng):
    p = Tensor(np.zeros(3, np.float64), requires_grad=True, dtype=np.float64)
    p.grad = np.array([2.0, -0.5, 1e-3])
    AdamW([p], weight_decay=0.0, eps=0.0).step(0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1])


def tiny_net():
    return NetConfig(channels=4, pfi_count=1, heads=2, shuffle=4, dpfi_factor=2)


def test_one_iteration_with_zero_lr_is_bitwise_noop(rng):
    model = UHDDIP(tiny_net(), seed=0)
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    patch = sample_patch(_pair(rng, 32, 32), 32, rng, align=8)
    batch = [Tensor(np.ascontiguousarray(getattr(patch, a).transpose(2, 0, 1)[None]))
             for a in ("degraded", "normal", "gradient")]
    out = model(*batch)
    loss, _ = total_loss(out.restored, out.intermediate, patch.gt.transpose(2, 0, 1)[None])
    loss.backward()
    AdamW(model.parameters()).step(0.0)
    assert {k: v.tobytes() for k, v in model.state_dict().items()} == before


def test_training_is_reproducible(rng):
    pairs = [_pair(np.random.default_rng(i), 64, 64) for i in range(2)]
    cfg = TrainConfig(iters=3, batch=2, patch=32, seed=4, log_every=1)
    a = train(pairs, tiny_net(), cfg)
    b = train(pairs, tiny_net(), cfg)
    assert a.log.to_csv() == b.log.to_csv()
    for (_, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()
    assert [r.iter for r in a.log.records] == [1, 2, 3]
    for r in a.log.records:
        assert r.lr == lr_at(r.iter - 1, cfg)


def test_nan_aborts_with_layer_name(rng):
    model = UHDDIP(tiny_net(), seed=0)
    model.hr_groups[0].layers[0].conv1.weight.data[...] = np.nan
    cfg = TrainConfig(iters=1, batch=1, patch=32)
    with pytest.raises(NumericError, match="hr_groups.0"):
        train([_pair(rng, 32, 32)], tiny_net(), cfg, model=model)


def test_train_log_csv_columns():
    log = TrainLog()
    log.append(TrainRecord(1, 1e-4, 0.5, 0.1, 0.2, 0.3, 0.4, float("nan")))
    header = log.to_csv().splitlines()[0]
    assert header == "iter,lr,total_loss,l1_O,freq_O,l1_H,freq_H,psnr_val"


def test_tiled_inference_blends_to_whole_image(rng):
    # with a pointwise model (zero final conv, constant bias) tiling must be invisible
    model = UHDDIP(tiny_net(), seed=2)
    model.out.weight.data[...] = 0.0
    model.out.bias.data[...] = 0.05
    p = _pair(rng, 64, 96)
    whole = infer_arrays(model, p.degraded, p.normal, p.gradient, tile=512)
    tiled = infer_arrays(model, p.degraded, p.normal, p.gradient, tile=32, overlap=8)
    assert tiled.shape == whole.shape == (64, 96, 3)
    np.testing.assert_allclose(tiled, whole, atol=1e-6)
    np.testing.assert_allclose(whole, np.clip(p.degraded + 0.05, 0, 1), atol=1e-6)


def test_inference_pads_unaligned_images(rng):
    model = UHDDIP(tiny_net(), seed=2)
    p = _pair(rng, 40, 52)
    out = infer(model, p)
    assert out.shape == (40, 52, 3)


def test_evaluate_baseline_and_model(rng):
    model = UHDDIP(tiny_net(), seed=2)
    pairs = [_pair(rng, 32, 32)]
    base = evaluate(model, pairs, baseline=True)
    rep = evaluate(model, pairs)
    assert len(base.psnr) == len(rep.psnr) == 1
    assert math.isfinite(rep.mean_psnr)
