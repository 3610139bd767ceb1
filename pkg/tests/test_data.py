import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from fadsr.data import (
    Dataset,
    ImageBuffer,
    ImageDecodeError,
    bicubic_resize,
    bicubic_resize_array,
    cubic,
    degrade,
    load_png,
    modcrop,
    psnr,
    read_manifest,
    rgb_to_y,
    sample_patches,
    save_png,
    ssim,
)


def _keys(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t ** 3 - 2.5 * t ** 2 + 1
    if t <= 2:
        return -0.5 * t ** 3 + 2.5 * t ** 2 - 4 * t + 2
    return 0.0


def _reflect(i, n):
    # 0-based index into a symmetric extension that repeats the edge sample
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


def _naive_resize_1d(x, out_len):
    """Scalar loops over output samples following the imresize recipe."""
    n = len(x)
    s = out_len / n
    aa = s < 1
    support = 4 / s if aa else 4
    out = []
    for o in range(1, out_len + 1):
        u = o / s + 0.5 * (1 - 1 / s)
        left = math.floor(u - support / 2)
        num = den = 0.0
        for j in range(left, left + math.ceil(support) + 2):
            wgt = s * _keys(s * (u - j)) if aa else _keys(u - j)
            num += wgt * x[_reflect(j - 1, n)]
            den += wgt
        out.append(num / den)
    return np.array(out)


def _naive_resize(img, oh, ow):
    tmp = np.stack([_naive_resize_1d(img[:, j], oh) for j in range(img.shape[1])], axis=1)
    return np.stack([_naive_resize_1d(tmp[i], ow) for i in range(oh)], axis=0)


# ---------------------------------------------------------------------------
# bicubic


def test_cubic_kernel_values():
    t = np.array([0, 0.5, 1, 1.5, 2, 2.5])
    np.testing.assert_allclose(cubic(t), [_keys(v) for v in t])
    assert cubic(np.array([0.0]))[0] == 1.0


@pytest.mark.parametrize("shape,out", [((12, 10), (6, 5)), ((7, 9), (14, 18)), ((9, 12), (3, 4)), ((8, 8), (5, 11))])
def test_resize_matches_naive_oracle(rng, shape, out):
    img = rng.random(shape)
    np.testing.assert_allclose(bicubic_resize_array(img, *out), _naive_resize(img, *out), atol=1e-12)


def test_identity_resize():
    img = np.random.default_rng(0).random((5, 6, 3))
    np.testing.assert_array_equal(bicubic_resize_array(img, 5, 6), img)


@given(st.integers(2, 20), st.integers(2, 20), st.integers(1, 30), st.integers(1, 30), st.floats(0, 1))
def test_constant_image_stays_constant(h, w, oh, ow, c):
    out = bicubic_resize_array(np.full((h, w), c), oh, ow)
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_upscale_reproduces_linear_ramp_in_interior():
    x = np.tile(np.arange(16, dtype=np.float64), (4, 1))
    out = bicubic_resize_array(x, 8, 32)
    cols = np.arange(1, 33)
    expected = cols / 2 + 0.25 - 1  # source coordinate, 0-based
    np.testing.assert_allclose(out[:, 4:-4], np.tile(expected[4:-4], (8, 1)), atol=1e-12)


def test_resize_buffer_rounds_and_clamps():
    px = np.zeros((8, 8, 3), np.uint8)
    px[::2, ::2] = 255
    out = bicubic_resize(ImageBuffer(px), 16, 16)
    assert out.pixels.dtype == np.uint8 and out.width == 16 and out.height == 16
    ref = _naive_resize(px[..., 0].astype(float), 16, 16)
    np.testing.assert_array_equal(out.pixels[..., 0], np.clip(np.floor(ref + 0.5), 0, 255))


def test_resize_rejects_empty_target():
    with pytest.raises(ValueError):
        bicubic_resize_array(np.zeros((4, 4)), 0, 3)


def test_modcrop_and_degrade():
    img = ImageBuffer(np.zeros((11, 14, 3), np.uint8))
    assert modcrop(img, 3).pixels.shape == (9, 12, 3)
    assert modcrop(img, 2).pixels.shape == (10, 14, 3)
    assert degrade(img, 4).pixels.shape == (2, 3, 3)


# ---------------------------------------------------------------------------
# color and metrics


def test_y_studio_swing_extremes():
    assert rgb_to_y(np.zeros((1, 1, 3)))[0, 0] == pytest.approx(16 / 255)
    assert rgb_to_y(np.ones((1, 1, 3)))[0, 0] == pytest.approx(235 / 255, abs=1e-6)
    chw = np.random.default_rng(0).random((3, 4, 5))
    np.testing.assert_allclose(rgb_to_y(chw, channel_axis=0), rgb_to_y(chw.transpose(1, 2, 0)))
    with pytest.raises(ValueError):
        rgb_to_y(np.zeros((2, 2, 4)))


def test_psnr_known_values():
    a = np.zeros((8, 8))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    b = a.copy()
    b[0, 0] = 1.0
    assert psnr(a, b, shave=1) == math.inf
    assert psnr(a, b) == pytest.approx(10 * math.log10(64))


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), shave=2)


def _ssim_oracle(a, b):
    """Per-window loop with an explicitly built Gaussian kernel."""
    t = np.arange(11) - 5
    g = np.exp(-np.add.outer(t ** 2, t ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_oracle(rng):
    a = rng.random((16, 15))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), rel=1e-10)


def test_ssim_identity_and_errors(rng):
    a = rng.random((20, 20))
    assert ssim(a, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


# ---------------------------------------------------------------------------
# I/O


def test_png_roundtrip(tmp_path, rng):
    img = ImageBuffer(rng.integers(0, 256, (7, 9, 3), dtype=np.uint8))
    save_png(img, tmp_path / "a" / "x.png")
    np.testing.assert_array_equal(load_png(tmp_path / "a" / "x.png").pixels, img.pixels)


def test_png_grayscale_and_alpha(tmp_path):
    Image.fromarray(np.full((3, 4), 77, np.uint8)).save(tmp_path / "g.png")
    assert np.all(load_png(tmp_path / "g.png").pixels == 77)
    Image.fromarray(np.full((3, 4, 4), 9, np.uint8), mode="RGBA").save(tmp_path / "a.png")
    assert load_png(tmp_path / "a.png").pixels.shape == (3, 4, 3)


def test_png_16bit_keeps_high_byte(tmp_path):
    arr = np.array([[0x1234, 0xFFFF], [0x00FF, 0x8000]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "d.png")
    np.testing.assert_array_equal(load_png(tmp_path / "d.png").pixels[..., 0], [[0x12, 0xFF], [0x00, 0x80]])


def test_png_errors(tmp_path, rng):
    img = ImageBuffer(rng.integers(0, 256, (30, 30, 3), dtype=np.uint8))
    save_png(img, tmp_path / "ok.png")
    data = (tmp_path / "ok.png").read_bytes()
    (tmp_path / "trunc.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(ImageDecodeError):
        load_png(tmp_path / "trunc.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageDecodeError):
        load_png(tmp_path / "junk.png")
    with pytest.raises(FileNotFoundError):
        load_png(tmp_path / "missing.png")


def test_image_buffer_validation_and_quantization():
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((4, 4)))
    q = ImageBuffer.from_float(np.array([[[-0.1, 0.5, 1.2]]]))
    assert q.pixels.tolist() == [[[0, 128, 255]]]


# ---------------------------------------------------------------------------
# datasets and patches


def test_manifest_parsing(tmp_path, rng):
    for n in ("a", "b"):
        save_png(ImageBuffer(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)), tmp_path / f"{n}.png")
    save_png(ImageBuffer(rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)), tmp_path / "b_lr.png")
    (tmp_path / "m.txt").write_text("# comment\na.png\n\nb.png\tb_lr.png\n")
    ds = read_manifest(tmp_path / "m.txt", scale=2)
    assert len(ds) == 2 and ds.name(0) == "a"
    hr, lr = ds.pair(1)
    np.testing.assert_array_equal(lr.pixels, load_png(tmp_path / "b_lr.png").pixels)
    hr, lr = ds.pair(0)
    assert (lr.height, lr.width) == (4, 4)


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "none.txt")
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "empty.txt")
    (tmp_path / "missing.txt").write_text("ghost.png\n")
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing.txt")


def test_mismatched_lr_size_rejected(tmp_path, rng):
    save_png(ImageBuffer(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)), tmp_path / "a.png")
    save_png(ImageBuffer(rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)), tmp_path / "a_lr.png")
    ds = Dataset([str(tmp_path / "a.png")], [str(tmp_path / "a_lr.png")])
    with pytest.raises(ValueError):
        ds.pair(0)


@given(st.integers(0, 1000), st.sampled_from([2, 3, 4]))
def test_patches_are_aligned(seed, scale):
    rng = np.random.default_rng(seed)
    hr = ImageBuffer(rng.integers(0, 256, (24, 28, 3), dtype=np.uint8))
    lr = bicubic_resize(hr, 28 // scale, 24 // scale)
    a, b = sample_patches(hr, scale, 4, np.random.default_rng(seed), augment=False, lr=lr)
    assert a.shape == (3, 4, 4) and b.shape == (3, 4 * scale, 4 * scale)
    # locate the LR crop and check the HR crop comes from the matching position
    full_lr, full_hr = lr.to_chw(), hr.to_chw()
    hits = [(y, x) for y in range(lr.height - 3) for x in range(lr.width - 3)
            if np.array_equal(full_lr[:, y:y + 4, x:x + 4], a)]
    assert any(np.array_equal(full_hr[:, y * scale:(y + 4) * scale, x * scale:(x + 4) * scale], b) for y, x in hits)


@pytest.mark.parametrize("flips", [(True, False, False), (False, True, False), (False, False, True), (True, True, True)])
def test_augmentation_applies_same_transform(flips):
    rng = np.random.default_rng(0)
    hr = ImageBuffer(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
    lr = bicubic_resize(hr, 8, 8)
    a0, b0 = sample_patches(hr, 2, 8, np.random.default_rng(1), lr=lr, flips=(False, False, False))
    a1, b1 = sample_patches(hr, 2, 8, np.random.default_rng(1), lr=lr, flips=flips)

    def apply(x):
        if flips[0]:
            x = x[:, :, ::-1]
        if flips[1]:
            x = x[:, ::-1, :]
        if flips[2]:
            x = np.swapaxes(x, 1, 2)
        return x

    np.testing.assert_array_equal(a1, apply(a0))
    np.testing.assert_array_equal(b1, apply(b0))


def test_patch_too_large_rejected():
    hr = ImageBuffer(np.zeros((8, 8, 3), np.uint8))
    with pytest.raises(ValueError):
        sample_patches(hr, 2, 5, np.random.default_rng(0))
