import numpy as np
import pytest
from skimage import feature

from uhddip.errors import ConfigError, IngestError, UsageError
from uhddip.imageio import write_image
from uhddip.priors import (canny, compute_priors, decode_normals, load_normal_map, normal_from_heightfield,
                           sobel)
from uhddip.serialize import save_tensor


def test_constant_image_has_no_edges():
    assert canny(np.full((32, 32, 3), 0.4)).sum() == 0


def test_vertical_step_edge_columns():
    img = np.zeros((40, 40))
    img[:, 20:] = 1.0
    e = canny(img)[:, :, 0]
    cols = np.unique(np.nonzero(e)[1])
    assert set(cols) <= {19, 20, 21}
    # the reference detector agrees on location
    ref = feature.canny(img, sigma=1.4)
    assert set(np.unique(np.nonzero(ref)[1])) <= {19, 20, 21}


def test_disk_perimeter():
    r = 20
    yy, xx = np.mgrid[0:80, 0:80]
    img = ((yy - 40) ** 2 + (xx - 40) ** 2 <= r * r).astype(float)
    count = canny(img).sum()
    assert abs(count - 2 * np.pi * r) <= 0.15 * 2 * np.pi * r


def test_canny_hard_mode_is_binary_and_soft_in_unit_interval(rng):
    img = rng.uniform(0, 1, (32, 32, 3))
    hard = canny(img)
    assert set(np.unique(hard)) <= {0.0, 1.0}
    soft = canny(img, soft=True)
    nz = soft[soft > 0]
    assert nz.size and nz.max() <= 1.0
    np.testing.assert_array_equal(soft > 0, hard > 0)


def test_canny_invariant_to_intensity_scaling(rng):
    img = rng.uniform(0, 1, (48, 48, 3))
    np.testing.assert_array_equal(canny(img), canny(0.5 * img))


def test_canny_deterministic(rng):
    img = rng.uniform(0, 1, (32, 32, 3))
    assert canny(img).tobytes() == canny(img.copy()).tobytes()


def test_canny_errors():
    with pytest.raises(UsageError):
        canny(np.zeros((0, 0)))
    with pytest.raises(ConfigError):
        canny(np.zeros((8, 8)), low_ratio=0.5, high_ratio=0.2)


def test_constant_image_normal_points_up():
    n = normal_from_heightfield(np.full((8, 8, 3), 0.3))
    np.testing.assert_allclose(n, np.broadcast_to([0.5, 0.5, 1.0], n.shape))


def test_ramp_normal_is_constant():
    g = 0.05
    img = np.tile(np.arange(16) * g, (16, 1))
    n = decode_normals(normal_from_heightfield(img))
    expect = np.array([-g, 0.0, 1.0]) / np.sqrt(g * g + 1)
    np.testing.assert_allclose(n[2:-2, 2:-2], np.broadcast_to(expect, (12, 12, 3)), atol=1e-6)


def test_normal_vs_pixel_oracle(rng):
    img = rng.uniform(0, 1, (9, 11))
    n = decode_normals(normal_from_heightfield(img))
    p = np.pad(img, 1, mode="edge")
    for y in range(9):
        for x in range(11):
            win = p[y:y + 3, x:x + 3]
            gx = (win[:, 2] - win[:, 0]) @ np.array([1, 2, 1]) / 8
            gy = (win[2, :] - win[0, :]) @ np.array([1, 2, 1]) / 8
            v = np.array([-gx, -gy, 1.0])
            np.testing.assert_allclose(n[y, x], v / np.linalg.norm(v), atol=1e-6)


def test_decoded_normals_are_unit(rng):
    n = decode_normals(normal_from_heightfield(rng.uniform(0, 1, (16, 16, 3))))
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-3)


def test_normal_map_png_round_trip(tmp_path, rng):
    n = normal_from_heightfield(rng.uniform(0, 1, (16, 16, 3)))
    write_image(tmp_path / "n.png", n)
    back = load_normal_map(tmp_path / "n.png", (16, 16))
    assert np.max(np.abs(back - n)) <= 1.0 / 255 + 1e-3


def test_normal_map_size_mismatch(tmp_path):
    write_image(tmp_path / "n.png", np.full((8, 8, 3), 0.5))
    with pytest.raises(IngestError):
        load_normal_map(tmp_path / "n.png", (16, 16))
    with pytest.raises(IngestError):
        load_normal_map(tmp_path / "missing.png")


def test_external_map_is_renormalized(tmp_path, rng, caplog):
    raw = rng.normal(size=(8, 8, 3)) * 0.3
    save_tensor(tmp_path / "n.bin", ((raw + 1) / 2).astype(np.float32))
    n = decode_normals(load_normal_map(tmp_path / "n.bin", (8, 8)))
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-3)
    assert "renormalizing" in caplog.text


def test_compute_priors_shapes(rng):
    img = rng.uniform(0, 1, (16, 24, 3)).astype(np.float32)
    pri = compute_priors(img)
    assert pri.normal.shape == (16, 24, 3)
    assert pri.gradient.shape == (16, 24, 1)


def test_sobel_unit_slope():
    gx, gy = sobel(np.tile(np.arange(8.0), (8, 1)))
    np.testing.assert_allclose(gx[:, 1:-1], 1.0)
    np.testing.assert_allclose(gy, 0.0)
