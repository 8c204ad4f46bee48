import json

import numpy as np
import pytest
from scipy import ndimage
from skimage.measure import label, regionprops

from uhddip.errors import ConfigError, IngestError, UsageError
from uhddip.synth import (RAIN_ANGLES, DatasetManifest, SynthSpec, build_dataset, composite, counter_uniform,
                          crystallize, dominant_orientation, gaussian_blur, gaussian_kernel, gen_mask, gen_noise,
                          line_kernel_offsets, make_toy_clean_set, mask_density, motion_blur, sample_spec,
                          threshold)


def test_noise_determinism_and_range():
    a = gen_noise(64, 48, 0.5, seed=11)
    b = gen_noise(64, 48, 0.5, seed=11)
    assert a.shape == (64, 48, 1)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 0.5
    assert not np.array_equal(a, gen_noise(64, 48, 0.5, seed=12))


def test_noise_tiny_amount_is_near_black():
    amount = 1e-6
    x = gen_noise(64, 64, amount, 3)
    sigma = amount / np.sqrt(12) / 64
    assert x.mean() < amount / 2 + 3 * sigma


def test_noise_mean_at_1024():
    x = gen_noise(1024, 1024, 0.5, 5)
    assert abs(x.mean() - 0.25) < 0.01 * 0.25


def test_noise_is_keyed_by_coordinates():
    full = gen_noise(32, 32, 1.0, 9)[:, :, 0]
    ys, xs = np.mgrid[10:20, 5:15]
    np.testing.assert_array_equal(full[10:20, 5:15], counter_uniform(9, ys, xs))


def test_noise_amount_validation():
    with pytest.raises(ConfigError):
        gen_noise(4, 4, 0.0, 1)


def test_crystallize_cell_one_is_identity():
    x = gen_noise(16, 16, 1.0, 1)
    np.testing.assert_array_equal(crystallize(x, 1, 0), x)


def test_crystallize_distinct_values_bounded_by_cells():
    x = gen_noise(64, 64, 1.0, 1)[:, :, 0]
    out, labels = crystallize(x, 8, 4, return_labels=True)
    assert len(np.unique(out)) <= len(np.unique(labels))
    # each cell is flat
    for lab in np.unique(labels)[:20]:
        assert np.ptp(out[labels == lab]) == 0


def test_crystallize_mean_cell_area():
    x = gen_noise(512, 512, 1.0, 1)[:, :, 0]
    for cell in (5, 15):
        _, labels = crystallize(x, cell, 2, return_labels=True)
        # connected-component measurement over cells fully inside the image
        areas = []
        for lab, sl in enumerate(ndimage.find_objects(labels + 1)):
            if sl is None:
                continue
            if sl[0].start == 0 or sl[1].start == 0 or sl[0].stop == 512 or sl[1].stop == 512:
                continue
            comp, n = ndimage.label(labels[sl] == lab)
            areas.append(np.sum(comp > 0))
        mean_area = float(np.mean(areas))
        assert abs(mean_area - cell * cell) <= 0.25 * cell * cell


def test_crystallize_too_large_cell():
    with pytest.raises(ConfigError):
        crystallize(np.zeros((10, 20)), 11, 0)


def test_motion_blur_identity_and_constant():
    x = gen_noise(32, 32, 1.0, 2)[:, :, 0]
    np.testing.assert_array_equal(motion_blur(x, 1, 70), x)
    c = np.full((32, 32), 0.3)
    np.testing.assert_allclose(motion_blur(c, 25, 63), 0.3, atol=1e-12)


@pytest.mark.parametrize("length,angle", [(25, 90), (200, 45), (50, 117), (9, 0)])
def test_line_kernel_pixels(length, angle):
    pts = line_kernel_offsets(length, angle)
    assert len(set(pts)) == len(pts)
    # 8-connected: consecutive pixels differ by at most one step per axis
    for (y0, x0), (y1, x1) in zip(pts, pts[1:]):
        assert max(abs(y1 - y0), abs(x1 - x0)) == 1
    ext = max(max(abs(y) for y, _ in pts), max(abs(x) for _, x in pts))
    assert ext <= (length - 1) / 2 + 1


@pytest.mark.parametrize("angle", [45, 63, 90, 108, 135])
def test_blurred_noise_orientation(angle):
    x = crystallize(gen_noise(512, 512, 0.5, 3)[:, :, 0], 5, 3)
    est = dominant_orientation(motion_blur(x, 200, angle))
    assert abs(est - angle) <= 3


def test_threshold_extremes():
    x = gen_noise(64, 64, 1.0, 4)
    assert threshold(x, 255).mean() < 0.01
    assert threshold(x, 0).min() == 1.0
    with pytest.raises(ConfigError):
        threshold(x, 300)


def test_threshold_density_monotone_on_fixed_noise():
    x = gen_noise(256, 256, 0.5, 6)
    d = [mask_density(threshold(x, lv)) for lv in (55, 67, 100, 165)]
    assert all(a >= b for a, b in zip(d, d[1:]))


def test_gaussian_identity_constant_and_impulse():
    x = gen_noise(32, 32, 1.0, 2)[:, :, 0]
    np.testing.assert_array_equal(gaussian_blur(x, 0), x)
    np.testing.assert_allclose(gaussian_blur(np.full((20, 20), 0.7), 5), 0.7, atol=1e-12)
    for radius in (2, 5):
        imp = np.zeros((41, 41))
        imp[20, 20] = 1.0
        out = gaussian_blur(imp, radius)
        s = radius / 2
        yy, xx = np.mgrid[-20:21, -20:21]
        ref = np.exp(-(yy ** 2 + xx ** 2) / (2 * s * s)) / (2 * np.pi * s * s)
        assert np.max(np.abs(out - ref)) < 1e-3


def test_gaussian_kernel_properties():
    k = gaussian_kernel(5)
    assert len(k) == 2 * int(np.ceil(3 * 2.5)) + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-12)


def test_mask_determinism_and_range():
    spec = SynthSpec.snow(level=110, seed=3)
    a, b = gen_mask(spec, 96, 64), gen_mask(spec, 96, 64)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (96, 64, 1)
    assert a.min() >= 0 and a.max() <= 1


def test_rain_coverage_drops_with_threshold():
    lo = gen_mask(SynthSpec.rain(90, 55, seed=1), 256, 256).mean()
    hi = gen_mask(SynthSpec.rain(90, 67, seed=1), 256, 256).mean()
    assert hi < lo


def test_snow_has_streaks_and_flakes():
    m = gen_mask(SynthSpec.snow(level=100, seed=5), 512, 512)[:, :, 0]
    ecc = np.array([p.eccentricity for p in regionprops(label(m > 0.3)) if p.area >= 20])
    assert np.sum(ecc > 0.9) > 0
    assert np.sum(ecc < 0.6) > 0


def test_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec.rain(angle=30)
    with pytest.raises(ConfigError):
        SynthSpec(kind="hail")
    with pytest.raises(ConfigError):
        SynthSpec(flows=[1.5])


def test_composite_cases():
    clean = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    np.testing.assert_array_equal(composite(clean, np.zeros((8, 8, 1))), clean)
    np.testing.assert_array_equal(composite(clean, np.ones((8, 8, 1))), 1.0)
    np.testing.assert_allclose(composite(np.full((4, 4, 3), 0.5), np.full((4, 4, 1), 0.5)), 0.75)
    with pytest.raises(UsageError):
        composite(clean, np.zeros((4, 4, 1)))


def test_sampled_specs_respect_ranges():
    for i in range(200):
        r = sample_spec("rain", 3, i)
        assert r.motion_angle in RAIN_ANGLES and 55 <= r.threshold_level <= 67
        s = sample_spec("snow", 3, i)
        assert 100 <= s.threshold_level <= 165 and s.flows == [0.6, 1.0]
    assert len(RAIN_ANGLES) == 50 and min(RAIN_ANGLES) == 45 and max(RAIN_ANGLES) == 135


@pytest.fixture
def toy_dir(tmp_path):
    make_toy_clean_set(tmp_path / "clean", 6, 64, seed=1)
    return tmp_path / "clean"


def test_build_dataset_layout(toy_dir, tmp_path):
    m = build_dataset(toy_dir, tmp_path / "out", 4, 2, "rain", 7)
    assert m.counts == {"train": 4, "test": 2}
    for split in ("train", "test"):
        for e in m.entries(split):
            for rel in (e.clean_path, e.degraded_path, e.mask_path):
                assert (tmp_path / "out" / rel).exists()
    loaded = DatasetManifest.load(tmp_path / "out")
    assert loaded.to_json() == m.to_json()
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["version"] == 1
    angles = [e.spec["motion_angle"] for e in m.entries("train") + m.entries("test")]
    assert all(a in RAIN_ANGLES for a in angles)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_dataset_deterministic_across_threads(toy_dir, tmp_path):
    build_dataset(toy_dir, tmp_path / "a", 4, 2, "snow", 11, threads=1)
    build_dataset(toy_dir, tmp_path / "b", 4, 2, "snow", 11, threads=3)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_build_dataset_needs_enough_images(toy_dir, tmp_path):
    with pytest.raises(UsageError):
        build_dataset(toy_dir, tmp_path / "out", 5, 2, "rain", 0)


def test_manifest_count_mismatch_rejected(toy_dir, tmp_path):
    build_dataset(toy_dir, tmp_path / "out", 2, 1, "rain", 0)
    path = tmp_path / "out" / "manifest.json"
    d = json.loads(path.read_text())
    d["counts"]["train"] = 5
    path.write_text(json.dumps(d))
    with pytest.raises(IngestError):
        DatasetManifest.load(path)
