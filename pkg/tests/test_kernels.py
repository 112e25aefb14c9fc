import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dssl import kernels
from dssl import _fallback

BACKENDS = kernels.available_backends()


def _img(seed, h=13, w=17):
    return np.random.default_rng(seed).random((3, h, w), dtype=np.float32)


@pytest.mark.parametrize("name", BACKENDS)
def test_identity_warp_is_exact(name):
    k = kernels.get_backend(name)
    x = _img(0)
    m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = k.warp_affine(x, m, x.shape[1], x.shape[2], 0.5, False)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("name", BACKENDS)
def test_out_of_bounds_reads_fill(name):
    k = kernels.get_backend(name)
    x = _img(1)
    m = np.array([[1.0, 0.0, 100.0], [0.0, 1.0, 0.0]])
    out = k.warp_affine(x, m, 4, 4, 0.25, False)
    assert np.all(out == np.float32(0.25))
    clamped = k.warp_affine(x, m, 4, 4, 0.25, True)
    np.testing.assert_array_equal(clamped, np.broadcast_to(x[:, :4, -1:], clamped.shape))


@pytest.mark.parametrize("name", BACKENDS)
def test_blur_preserves_constant_image(name):
    k = kernels.get_backend(name)
    x = np.full((3, 9, 11), 0.37, dtype=np.float32)
    taps = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    np.testing.assert_allclose(k.separable_filter(x, taps), x, atol=1e-6)


@pytest.mark.parametrize("name", BACKENDS)
def test_hue_full_turn_is_identity(name):
    k = kernels.get_backend(name)
    x = _img(2)
    np.testing.assert_allclose(k.shift_hue(x, 0.0), x, atol=1e-6)
    np.testing.assert_allclose(k.shift_hue(x, 1.0), x, atol=1e-5)


def test_hue_shift_of_gray_is_noop():
    x = np.full((3, 4, 4), 0.6, dtype=np.float32)
    np.testing.assert_allclose(kernels.shift_hue(x, 0.3), x, atol=1e-7)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-2, 2), b=st.floats(-2, 2),
       tx=st.floats(-20, 20), clamp=st.booleans())
def test_backends_agree_on_warp(seed, a, b, tx, clamp):
    x = _img(seed)
    m = np.array([[a, b, tx], [-b, a, 0.5 * tx]])
    c = kernels.get_backend("cython").warp_affine(x, m, 11, 9, 0.5, clamp)
    p = _fallback.warp_affine(x, m, 11, 9, 0.5, clamp)
    np.testing.assert_array_equal(c, p)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), sigma=st.floats(0.1, 3.0), shift=st.floats(-1, 1))
def test_backends_agree_on_blur_and_hue(seed, sigma, shift):
    from dssl.augment import gaussian_taps

    x = _img(seed)
    taps = gaussian_taps(sigma, 6)
    cy = kernels.get_backend("cython")
    np.testing.assert_array_equal(cy.separable_filter(x, taps), _fallback.separable_filter(x, taps))
    np.testing.assert_array_equal(cy.shift_hue(x, shift), _fallback.shift_hue(x, shift))


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
