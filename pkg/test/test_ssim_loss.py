import numpy as np
import pytest

from wrfgs.exceptions import ShapeMismatchError
from wrfgs.train.loss import (
    csi_loss,
    loss,
    magnitude_field_grad,
    rssi_loss,
    rssi_value,
    spectrum_loss,
)
from wrfgs.train.ssim import gaussian_window, ssim, ssim_with_grad

SHAPE = (9, 36)


def _image(rng, shape=SHAPE):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    blob = np.exp(-((xx - rng.uniform(0, shape[1])) ** 2) / 20 - (yy - rng.uniform(0, shape[0])) ** 2 / 6)
    return blob + 0.1 * rng.uniform(size=shape)


def _finite_diff(func, x, indices, eps=1e-7):
    out = []
    for i in indices:
        plus, minus = x.copy(), x.copy()
        plus[i] += eps
        minus[i] -= eps
        out.append((func(plus) - func(minus)) / (2 * eps))
    return np.array(out)


def test_window_is_normalized():
    window = gaussian_window()
    assert window.shape == (11,)
    assert window.sum() == pytest.approx(1.0)
    assert np.argmax(window) == 5


def test_ssim_self_similarity():
    x = _image(np.random.default_rng(0))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_against_constant_is_below_one():
    x = _image(np.random.default_rng(1))
    assert ssim(x, np.full(SHAPE, 0.5)) < 1.0


@pytest.mark.parametrize("wrap", [True, False])
def test_ssim_is_symmetric(wrap):
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = _image(rng), _image(rng)
        assert abs(ssim(a, b, wrap_azimuth=wrap) - ssim(b, a, wrap_azimuth=wrap)) <= 1e-12


def test_ssim_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        ssim(np.ones((3, 4)), np.ones((4, 3)))
    with pytest.raises(ShapeMismatchError):
        ssim(np.ones(4), np.ones(4))


def test_ssim_wraps_in_azimuth():
    x = _image(np.random.default_rng(3))
    y = _image(np.random.default_rng(4))
    shifted = ssim(np.roll(x, 7, axis=1), np.roll(y, 7, axis=1))
    assert shifted == pytest.approx(ssim(x, y), abs=1e-12)


@pytest.mark.parametrize("wrap", [True, False])
def test_ssim_gradient_matches_finite_differences(wrap):
    rng = np.random.default_rng(5)
    a, b = _image(rng), _image(rng)
    # 让 b 的最大值超过 a，以覆盖动态范围那一项的梯度
    b[4, 20] = a.max() + 0.5
    result = ssim_with_grad(a, b, wrap_azimuth=wrap)
    assert result.value == pytest.approx(ssim(a, b, wrap_azimuth=wrap))
    indices = [(4, 20), (0, 0), (8, 35), (3, 17), (6, 2)]
    numeric = _finite_diff(lambda x: ssim(a, x, wrap_azimuth=wrap), b, indices)
    np.testing.assert_allclose([result.grad[i] for i in indices], numeric, rtol=1e-4, atol=1e-8)


def test_loss_is_zero_for_perfect_prediction():
    x = _image(np.random.default_rng(6))
    assert loss(x, x, 0.2) == pytest.approx(0.0, abs=1e-12)


def test_loss_without_ssim_is_mean_absolute_error():
    rng = np.random.default_rng(7)
    a, b = _image(rng), _image(rng)
    assert loss(a, b, 0.0) == pytest.approx(np.mean(np.abs(a - b)))


def test_loss_constant_images():
    c1, c2 = 1e-4, 9e-4
    expected_ssim = c1 * c2 / ((1 + c1) * c2)
    value = loss(np.zeros(SHAPE), np.ones(SHAPE), 0.2)
    assert value == pytest.approx(0.8 + 0.2 * (1 - expected_ssim), rel=1e-9)


def test_loss_shift_behavior():
    rng = np.random.default_rng(8)
    gt, pred = _image(rng), _image(rng)
    base = loss(pred, gt, 0.2)
    both = loss(np.roll(pred, 5, axis=1), np.roll(gt, 5, axis=1), 0.2)
    assert both == pytest.approx(base, abs=1e-12)
    assert loss(np.roll(gt, 9, axis=1), gt, 0.2) > loss(gt, gt, 0.2)


def test_spectrum_loss_matches_loss_and_gradient():
    rng = np.random.default_rng(9)
    gt, pred = _image(rng), _image(rng)
    terms, grad = spectrum_loss(pred, gt, 0.2)
    assert terms.total == pytest.approx(loss(pred, gt, 0.2), abs=1e-12)
    assert terms.l1 == pytest.approx(np.mean(np.abs(pred - gt)))
    assert terms.ssim == pytest.approx(ssim(gt, pred))
    indices = [(0, 0), (2, 11), (8, 30), (5, 5)]
    numeric = _finite_diff(lambda x: loss(x, gt, 0.2), pred, indices)
    np.testing.assert_allclose([grad[i] for i in indices], numeric, rtol=1e-4, atol=1e-9)


def test_magnitude_gradient_is_zero_at_origin():
    field = np.array([0.0, 3.0 + 4.0j])
    grad = magnitude_field_grad(field, np.array([1.0, 2.0]))
    np.testing.assert_allclose(grad, [0.0, 2.0 * (0.6 + 0.8j)])


def test_rssi_value_adds_calibration():
    assert rssi_value(1.0, 0.0) == pytest.approx(0.0)
    assert rssi_value(100.0, 3.0) == pytest.approx(23.0)
    assert rssi_value(0.0, 0.0) == pytest.approx(-300.0)


@pytest.mark.parametrize("coherent", [True, False])
def test_rssi_loss_gradients(coherent):
    rng = np.random.default_rng(10)
    field = 0.01 * (rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4)))
    target, b = -35.0, 1.5

    def value(f, cal=b):
        return rssi_loss(f, cal, target, coherent=coherent)[0].total

    terms, grad, grad_b = rssi_loss(field, b, target, coherent=coherent)
    eps = 1e-6
    assert grad_b == pytest.approx((value(field, b + eps) - value(field, b - eps)) / (2 * eps), rel=1e-5)
    for index in [(0, 0), (2, 3)]:
        step = np.zeros_like(field)
        step[index] = eps
        d_re = (value(field + step) - value(field - step)) / (2 * eps)
        if coherent:
            d_im = (value(field + 1j * step) - value(field - 1j * step)) / (2 * eps)
            assert grad[index] == pytest.approx(d_re + 1j * d_im, rel=1e-4)
        else:
            # 非相干模式的梯度是对该像素功率的梯度
            f = field[index]
            d_power = d_re / (2 * f.real)
            assert grad[index] == pytest.approx(d_power, rel=1e-4)


def test_csi_loss_gradient():
    rng = np.random.default_rng(11)
    pred = rng.normal(size=26) + 1j * rng.normal(size=26)
    gt = rng.normal(size=26) + 1j * rng.normal(size=26)
    terms, grad = csi_loss(pred, gt)
    assert terms.total == pytest.approx(np.mean(np.abs(pred - gt) ** 2))
    np.testing.assert_allclose(grad, 2 * (pred - gt) / 26)
    with pytest.raises(ShapeMismatchError):
        csi_loss(pred[:3], gt)
