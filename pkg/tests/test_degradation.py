import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from cdcn import degradation as dg
from cdcn.degradation import AnisoKernelSpec, DegradationConfig, IsoKernelSpec


def gaussian_grid_oracle(width, size):
    r = size // 2
    k = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            k[i, j] = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * width ** 2))
    return k / k.sum()


def keys_cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def delta(size=3):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


widths = st.floats(0.2, 5.0)
sizes = st.sampled_from([3, 5, 11, 21])


# -- isotropic ---------------------------------------------------------------

def test_iso_near_delta():
    k = dg.make_isotropic_gaussian(IsoKernelSpec(0.2, 21))
    assert k[10, 10] >= 0.99
    np.testing.assert_allclose(k, gaussian_grid_oracle(0.2, 21), atol=1e-15)


@given(widths, sizes)
def test_iso_normalized_and_symmetric(w, size):
    k = dg.make_isotropic_gaussian(IsoKernelSpec(w, size))
    assert abs(k.sum() - 1) < 1e-6
    assert (k >= 0).all()
    np.testing.assert_array_equal(k, k[::-1, :])
    np.testing.assert_array_equal(k, k[:, ::-1])
    np.testing.assert_allclose(k, k.T, atol=1e-17)


def test_iso_center_to_neighbor_ratio():
    k = dg.make_isotropic_gaussian(IsoKernelSpec(2.0, 21))
    assert k[10, 10] / k[10, 11] == pytest.approx(math.exp(1 / 8), rel=1e-12)
    assert k[10, 10] / k[10, 11] == pytest.approx(1.1331, abs=1e-4)


@pytest.mark.parametrize("width,size", [(0.0, 21), (-1.0, 21), (1.0, 20), (1.0, 1)])
def test_iso_rejects_bad_spec(width, size):
    with pytest.raises(ValueError):
        IsoKernelSpec(width, size)


# -- anisotropic -------------------------------------------------------------

@given(st.floats(0.6, 5.0), st.floats(-math.pi, math.pi), st.sampled_from([11, 21]))
def test_aniso_equal_lambdas_is_isotropic(sigma, theta, size):
    a = dg.make_anisotropic_gaussian(AnisoKernelSpec(sigma, sigma, theta, 0.0, 0, size))
    b = dg.make_isotropic_gaussian(IsoKernelSpec(sigma, size))
    np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


@given(st.floats(0.6, 5.0), st.floats(0.6, 5.0))
def test_aniso_axis_aligned_is_separable(l1, l2):
    k = dg.make_anisotropic_gaussian(AnisoKernelSpec(l1, l2, 0.0, 0.0, 0, 11))
    ax = np.arange(11) - 5.0
    gx = np.exp(-ax ** 2 / (2 * l1 ** 2))  # columns
    gy = np.exp(-ax ** 2 / (2 * l2 ** 2))  # rows
    oracle = np.outer(gy, gx)
    np.testing.assert_allclose(k, oracle / oracle.sum(), atol=1e-9, rtol=0)


def test_aniso_rotation_by_half_turn_swaps_axes():
    a = dg.make_anisotropic_gaussian(AnisoKernelSpec(1.0, 3.0, 0.0))
    b = dg.make_anisotropic_gaussian(AnisoKernelSpec(1.0, 3.0, math.pi / 2))
    np.testing.assert_allclose(a, b.T, atol=1e-12)


def test_aniso_deterministic_and_noise_bounded():
    spec = AnisoKernelSpec(2.0, 4.0, 0.5, 0.25, seed=7)
    a, b = dg.make_anisotropic_gaussian(spec), dg.make_anisotropic_gaussian(spec)
    np.testing.assert_array_equal(a, b)
    clean = dg.make_anisotropic_gaussian(AnisoKernelSpec(2.0, 4.0, 0.5, 0.0, seed=7))
    assert not np.allclose(a, clean)
    # the factors are the ratio up to one common normalizer
    ratio = a / clean
    ratio /= np.median(ratio)
    assert ratio.max() / ratio.min() <= 1.25 / 0.75 + 1e-9
    assert abs(a.sum() - 1) < 1e-12 and (a >= 0).all()
    other = dg.make_anisotropic_gaussian(AnisoKernelSpec(2.0, 4.0, 0.5, 0.25, seed=8))
    assert not np.array_equal(a, other)


@pytest.mark.parametrize("kw", [dict(lambda1=0.5), dict(lambda2=5.5), dict(noise_level=0.3),
                                dict(theta=4.0), dict(size=10)])
def test_aniso_rejects_bad_spec(kw):
    base = dict(lambda1=1.0, lambda2=2.0, theta=0.0, noise_level=0.0, seed=0, size=11)
    base.update(kw)
    with pytest.raises(ValueError):
        AnisoKernelSpec(**base)


def test_aniso_random_draw_in_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = AnisoKernelSpec.random(rng)
        assert 0.6 <= s.lambda1 <= 5 and 0.6 <= s.lambda2 <= 5
        assert -math.pi <= s.theta <= math.pi
        assert s.noise_level == 0.25 and s.size == 11


# -- bicubic -----------------------------------------------------------------

def test_bicubic_scale1_is_delta():
    k = dg.make_bicubic_kernel(1)
    c = k.shape[0] // 2
    expect = np.zeros_like(k)
    expect[c, c] = 1
    np.testing.assert_allclose(k, expect, atol=1e-15)


def test_bicubic_scale2_taps_match_formula():
    taps = dg.bicubic_taps(2, -0.5)
    assert taps.shape == (9,)
    # offsets d = -4..4 from the kept pixel; the sample centre sits at +0.5
    raw = np.array([keys_cubic((d - 0.5) / 2) for d in range(-4, 5)])
    np.testing.assert_allclose(taps, raw / raw.sum(), atol=1e-15)
    assert taps[0] == 0.0
    nz = taps[1:]
    np.testing.assert_allclose(nz, nz[::-1], atol=1e-15)
    # the 8 live taps are cubic((k + 0.5) / 2), k = -4..3
    raw8 = np.array([keys_cubic((k + 0.5) / 2) for k in range(-4, 4)])
    np.testing.assert_allclose(nz, raw8 / raw8.sum(), atol=1e-15)


@pytest.mark.parametrize("scale", [1, 2, 3, 4])
def test_bicubic_separable_symmetric_normalized(scale):
    k = dg.make_bicubic_kernel(scale)
    assert k.shape[0] % 2 == 1
    assert abs(k.sum() - 1) < 1e-12
    assert np.linalg.matrix_rank(k, tol=1e-12) == 1
    t = dg.bicubic_taps(scale)
    live = t[np.nonzero(t)[0][0]:np.nonzero(t)[0][-1] + 1]
    np.testing.assert_allclose(live, live[::-1], atol=1e-15)
    if scale > 1:
        assert len(live) in (4 * scale, 4 * scale - 1)


def test_bicubic_rejects_scale0():
    with pytest.raises(ValueError):
        dg.make_bicubic_kernel(0)


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_bicubic_downsample_matches_pil_resize(scale):
    rng = np.random.default_rng(scale)
    img = rng.random((96, 96))
    ours = dg.degrade(img, delta(), DegradationConfig(scale))[:, :, 0]
    pil = np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize(
        (96 // scale, 96 // scale), Image.BICUBIC), dtype=np.float64)
    m = 3  # PIL truncates instead of mirroring at the edges
    np.testing.assert_allclose(ours[m:-m, m:-m], pil[m:-m, m:-m], atol=2e-5)


def test_imresize_upscale_matches_pil_interior():
    rng = np.random.default_rng(3)
    img = rng.random((40, 40))
    ours = dg.imresize(img, 2)[:, :, 0]
    pil = np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize((80, 80), Image.BICUBIC))
    np.testing.assert_allclose(ours[4:-4, 4:-4], pil[4:-4, 4:-4], atol=2e-5)


# -- blur / downsample --------------------------------------------------------

def test_blur_delta_identity(rng):
    img = rng.random((20, 17, 3))
    np.testing.assert_allclose(dg.blur(img, delta(5)), img, atol=1e-15)


@given(st.floats(0, 1), widths)
def test_blur_preserves_constants(c, w):
    img = np.full((24, 24, 3), c)
    out = dg.blur(img, dg.make_isotropic_gaussian(IsoKernelSpec(w, 21)))
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_blur_shifted_delta_translates(rng):
    img = rng.random((12, 12, 1))
    k = np.zeros((3, 3))
    k[1, 2] = 1.0
    out = dg.blur(img, k)
    np.testing.assert_allclose(out[:, :-1], img[:, 1:], atol=1e-15)


def test_blur_general_kernel_matches_direct_sum(rng):
    img = rng.random((9, 8, 1))
    k = rng.random((3, 3))
    k /= k.sum()
    pad = np.pad(img[:, :, 0], 1, mode="symmetric")
    oracle = np.zeros((9, 8))
    for i in range(9):
        for j in range(8):
            oracle[i, j] = np.sum(pad[i:i + 3, j:j + 3] * k)
    np.testing.assert_allclose(dg.blur(img, k)[:, :, 0], oracle, atol=1e-14)


def test_blur_rejects_large_kernel(rng):
    with pytest.raises(ValueError):
        dg.blur(rng.random((10, 10, 3)), np.ones((11, 11)) / 121)


def test_sfold_example():
    img = np.arange(16, dtype=float).reshape(4, 4)
    np.testing.assert_array_equal(dg.sfold_downsample(img, 2)[:, :, 0], [[0, 2], [8, 10]])


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_sfold_exact_subsampling(s, h, w, seed):
    img = np.random.default_rng(seed).random((h * s, w * s, 3))
    out = dg.sfold_downsample(img, s)
    assert out.shape == (h, w, 3)
    for i in range(h):
        for j in range(w):
            np.testing.assert_array_equal(out[i, j], img[s * i, s * j])


def test_sfold_identity_constant_and_errors(rng):
    img = rng.random((6, 6, 3))
    np.testing.assert_array_equal(dg.sfold_downsample(img, 1), img)
    np.testing.assert_array_equal(dg.sfold_downsample(np.full((6, 6, 1), 0.3), 3), np.full((2, 2, 1), 0.3))
    with pytest.raises(ValueError):
        dg.sfold_downsample(rng.random((7, 6, 3)), 2)


# -- degrade / decompose -------------------------------------------------------

def test_degrade_delta_is_bicubic_downsampling(rng):
    hr = rng.random((48, 48, 3))
    cfg = DegradationConfig(4)
    expect = dg.sfold_downsample(dg.blur(hr, dg.make_bicubic_kernel(4)), 4)
    np.testing.assert_array_equal(dg.degrade(hr, delta(), cfg), expect)


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_degrade_constant(scale):
    hr = np.full((48, 48, 3), 0.42)
    k = dg.make_isotropic_gaussian(IsoKernelSpec(1.7))
    lr = dg.degrade(hr, k, DegradationConfig(scale))
    assert lr.shape == (48 // scale, 48 // scale, 3)
    np.testing.assert_allclose(lr, 0.42, atol=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([2, 3, 4]), st.booleans())
def test_decompose_invariants(seed, scale, aniso):
    r = np.random.default_rng(seed)
    hr = r.random((12 * scale, 12 * scale, 3))
    if aniso:
        k = dg.make_kernel(AnisoKernelSpec.random(r))
    else:
        k = dg.make_isotropic_gaussian(IsoKernelSpec(float(r.uniform(0.2, 4.0)), 21))
    cfg = DegradationConfig(scale)
    t = dg.decompose_labels(hr, k, cfg)
    np.testing.assert_allclose(t.structure + t.detail, hr, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(dg.degrade(hr, k, cfg), t.lr)
    assert t.lr.shape == (12, 12, 3)


def test_decompose_delta_and_constant(rng):
    hr = rng.random((16, 16, 3))
    t = dg.decompose_labels(hr, delta(), DegradationConfig(2))
    np.testing.assert_allclose(t.structure, hr, atol=1e-15)
    np.testing.assert_allclose(t.detail, 0, atol=1e-15)
    c = dg.decompose_labels(np.full((24, 24, 3), 0.7), dg.make_isotropic_gaussian(IsoKernelSpec(2.0)),
                            DegradationConfig(2))
    np.testing.assert_allclose(c.structure, 0.7, atol=1e-12)
    np.testing.assert_allclose(c.detail, 0, atol=1e-12)
    np.testing.assert_allclose(c.lr, 0.7, atol=1e-12)


def test_detail_is_signed(rng):
    hr = rng.random((24, 24, 3))
    t = dg.decompose_labels(hr, dg.make_isotropic_gaussian(IsoKernelSpec(1.5)), DegradationConfig(2))
    assert t.detail.min() < 0 < t.detail.max()
    vis = dg.detail_to_display(t.detail)
    assert vis.min() >= 0 and vis.max() <= 1


# -- protocol tables -----------------------------------------------------------

def test_gaussian8_widths():
    np.testing.assert_allclose(dg.gaussian8_widths(4), [1.8, 2.0, 2.2, 2.4, 2.6, 2.8, 3.0, 3.2], atol=1e-12)
    w2 = dg.gaussian8_widths(2)
    assert w2[0] == 0.8 and w2[-1] == 1.6
    for s in (2, 3, 4):
        d = np.diff(dg.gaussian8_widths(s))
        np.testing.assert_allclose(d, d[0], atol=1e-9)
    with pytest.raises(ValueError):
        dg.gaussian8_widths(5)


def test_training_width_range():
    assert dg.training_width_range(2) == (0.2, 2.0)
    assert dg.training_width_range(3) == (0.2, 3.0)
    assert dg.training_width_range(4) == (0.2, 4.0)
    with pytest.raises(ValueError):
        dg.training_width_range(8)


# -- I/O -----------------------------------------------------------------------

def test_kernel_file_roundtrip(tmp_path):
    k = dg.make_anisotropic_gaussian(AnisoKernelSpec(1.3, 3.1, 0.7, 0.2, 5))
    dg.write_kernel(tmp_path / "k.txt", k, "aniso spec")
    back, desc = dg.read_kernel(tmp_path / "k.txt")
    np.testing.assert_allclose(back, k, atol=1e-9, rtol=0)
    assert desc == "aniso spec"
    assert (tmp_path / "k.txt").read_text().splitlines()[0] == "11 aniso spec"


def test_image_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (10, 12, 3)) / 255.0
    dg.save_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(dg.load_image(tmp_path / "a.png"), img)
    np.testing.assert_array_equal(dg.to_uint8(np.full((2, 2, 3), 1.7)), 255)


def test_modcrop_centered():
    img = np.arange(7 * 9, dtype=float).reshape(7, 9, 1)
    out = dg.modcrop(img, 4)
    assert out.shape == (4, 8, 1)
    np.testing.assert_array_equal(out, img[1:5, 0:8])
