"""Loss functions checked against direct sliding-window and convolution
oracles written with plain loops."""

import math

import numpy as np
import pytest

from unifusion.autograd import DomainError, ShapeError, Tensor, gradcheck
from unifusion.objectives import (SsimConfig, TaskObjectiveSpec, info_weights,
                                  intensity_loss, sobel_gradient_mag,
                                  ssim_loss, task_loss, task_objective,
                                  text_loss, unified_loss)


def oracle_gaussian(side, sigma):
    r = side // 2
    k = np.zeros((side, side))
    for i in range(side):
        for j in range(side):
            k[i, j] = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def oracle_ssim_mean(x, y, side=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean SSIM over every fully-contained window, one window at a time."""
    h, w = x.shape
    win = oracle_gaussian(side, sigma)
    vals = []
    for i in range(h - side + 1):
        for j in range(w - side + 1):
            px = x[i:i + side, j:j + side]
            py = y[i:i + side, j:j + side]
            mx = (win * px).sum()
            my = (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cov = (win * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def mirror(i, n):
    period = 2 * (n - 1)
    i = abs(i) % period
    return min(i, period - i)


def oracle_sobel(img):
    gx_k = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    h, w = img.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    v = img[mirror(i + di, h), mirror(j + dj, w)]
                    gx += gx_k[di + 1, dj + 1] * v
                    gy += gx_k[dj + 1, di + 1] * v
            out[i, j] = abs(gx) + abs(gy)
    return out


class TestSsim:
    def test_identical_images_zero(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.uniform(0, 1, (16, 16)))
        assert abs(ssim_loss(a, a).item()) < 1e-9

    def test_inverted_image_positive(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (16, 16))
        v = ssim_loss(Tensor(1.0 - a), Tensor(a)).item()
        assert 0 < v <= 2

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (16, 16))
        y = rng.uniform(0, 1, (16, 16))
        got = ssim_loss(Tensor(x), Tensor(y)).item()
        assert got == pytest.approx(1.0 - oracle_ssim_mean(x, y), abs=1e-9)

    def test_channel_axis_accepted(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (12, 13))
        a = ssim_loss(Tensor(x[:, :, None]), Tensor(x[:, :, None])).item()
        assert abs(a) < 1e-12

    def test_too_small_image_rejected(self):
        a = Tensor(np.zeros((8, 8)))
        with pytest.raises(ShapeError):
            ssim_loss(a, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ssim_loss(Tensor(np.zeros((16, 16))), Tensor(np.zeros((16, 12))))

    def test_even_window_rejected(self):
        with pytest.raises(DomainError):
            SsimConfig(window=10)

    def test_gradient_wrt_fused(self):
        # A 5x5 window keeps every pixel's influence above the resolution
        # floor of central differences; the default window's values are
        # covered by the oracle comparison above.
        rng = np.random.default_rng(4)
        cfg = SsimConfig(window=5)
        f = Tensor(rng.uniform(0.2, 0.8, (11, 11)), requires_grad=True)
        a = Tensor(rng.uniform(0.2, 0.8, (11, 11)))
        err = gradcheck(lambda: ssim_loss(f, a, cfg), f)
        assert err < 1e-5


class TestSobel:
    def test_constant_image_zero(self):
        out = sobel_gradient_mag(Tensor(np.full((9, 9), 0.37)))
        assert np.all(out.data == 0)

    def test_vertical_step_edge_support(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        out = sobel_gradient_mag(Tensor(img)).data
        assert np.all(out[:, 3:5] > 0)
        assert np.all(out[:, :3] == 0) and np.all(out[:, 5:] == 0)

    def test_linear_ramp_interior_value(self):
        w = 16
        img = np.tile(np.arange(w) / w, (w, 1))
        out = sobel_gradient_mag(Tensor(img)).data
        assert out[:, 1:-1] == pytest.approx(8.0 / w, abs=1e-12)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (10, 7))
        got = sobel_gradient_mag(Tensor(img)).data
        assert got == pytest.approx(oracle_sobel(img), abs=1e-12)


class TestTextAndIntensity:
    def test_text_zero_when_fused_is_busiest(self):
        rng = np.random.default_rng(6)
        i1 = Tensor(rng.uniform(0, 1, (9, 9)))
        i2 = Tensor(np.full((9, 9), 0.5))
        assert text_loss(i1, i1, i2).item() == 0

    def test_text_constant_fused(self):
        rng = np.random.default_rng(7)
        i1 = rng.uniform(0, 1, (9, 9))
        i2 = rng.uniform(0, 1, (9, 9))
        f = Tensor(np.full((9, 9), 0.2))
        want = np.maximum(oracle_sobel(i1), oracle_sobel(i2)).mean()
        assert text_loss(f, Tensor(i1), Tensor(i2)).item() == pytest.approx(want, abs=1e-12)

    def test_text_brute_force(self):
        rng = np.random.default_rng(8)
        f, i1, i2 = (rng.uniform(0, 1, (8, 8)) for _ in range(3))
        want = np.abs(oracle_sobel(f)
                      - np.maximum(oracle_sobel(i1), oracle_sobel(i2))).mean()
        got = text_loss(Tensor(f), Tensor(i1), Tensor(i2)).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_intensity_mean_midpoint_zero(self):
        rng = np.random.default_rng(9)
        i1 = rng.uniform(0, 1, (6, 6))
        i2 = rng.uniform(0, 1, (6, 6))
        f = Tensor((i1 + i2) / 2)
        assert intensity_loss(f, Tensor(i1), Tensor(i2), "mean").item() < 1e-15

    def test_intensity_max_zero(self):
        rng = np.random.default_rng(10)
        i1 = rng.uniform(0, 1, (6, 6))
        i2 = rng.uniform(0, 1, (6, 6))
        f = Tensor(np.maximum(i1, i2))
        assert intensity_loss(f, Tensor(i1), Tensor(i2), "max").item() == 0

    def test_intensity_unit_gap(self):
        f = Tensor(np.zeros((5, 5)))
        one = Tensor(np.ones((5, 5)))
        assert intensity_loss(f, one, one, "max").item() == 1.0
        assert intensity_loss(f, one, one, "mean").item() == 1.0

    def test_intensity_bad_aggregator(self):
        a = Tensor(np.zeros((5, 5)))
        with pytest.raises(DomainError):
            intensity_loss(a, a, a, "median")

    def test_gradients_wrt_fused(self):
        rng = np.random.default_rng(11)
        f = Tensor(rng.uniform(0.2, 0.8, (8, 8)), requires_grad=True)
        i1 = Tensor(rng.uniform(0, 1, (8, 8)))
        i2 = Tensor(rng.uniform(0, 1, (8, 8)))
        assert gradcheck(lambda: text_loss(f, i1, i2), f) < 1e-5
        assert gradcheck(lambda: intensity_loss(f, i1, i2, "max"), f) < 1e-5


class TestTaskLoss:
    def test_presets(self):
        for task, agg in (("ivf", "max"), ("mff", "max"), ("mef", "mean")):
            spec = task_objective(task)
            assert (spec.lam1, spec.lam2, spec.lam3) == (10.0, 20.0, 20.0)
            assert spec.aggregator == agg
        with pytest.raises(DomainError):
            task_objective("pan")

    def test_spec_validation(self):
        with pytest.raises(DomainError):
            TaskObjectiveSpec("custom", -1.0, 0.0, 0.0, "max")
        with pytest.raises(DomainError):
            TaskObjectiveSpec("custom", 1.0, 1.0, 1.0, "sum")

    def test_degenerate_inputs_clamp(self):
        img = Tensor(np.full((16, 16), 0.4))
        v = task_loss(img, img, img, task_objective("mef"))
        assert v.item() == pytest.approx(1e-8)

    def test_matches_component_sum(self):
        rng = np.random.default_rng(12)
        f = Tensor(rng.uniform(0, 1, (16, 16)))
        i1 = Tensor(rng.uniform(0, 1, (16, 16)))
        i2 = Tensor(rng.uniform(0, 1, (16, 16)))
        spec = task_objective("ivf")
        want = (10 * (0.5 * ssim_loss(f, i1).item() + 0.5 * ssim_loss(f, i2).item())
                + 20 * text_loss(f, i1, i2).item()
                + 20 * intensity_loss(f, i1, i2, "max").item())
        assert task_loss(f, i1, i2, spec).item() == pytest.approx(want, rel=1e-12)

    def test_source_order_symmetry(self):
        rng = np.random.default_rng(13)
        f = Tensor(rng.uniform(0, 1, (16, 16)))
        i1 = Tensor(rng.uniform(0, 1, (16, 16)))
        i2 = Tensor(rng.uniform(0, 1, (16, 16)))
        for task in ("ivf", "mef", "mff"):
            spec = task_objective(task)
            a = task_loss(f, i1, i2, spec).item()
            b = task_loss(f, i2, i1, spec).item()
            assert a == pytest.approx(b, abs=1e-15)

    def test_positive_and_finite(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            f = Tensor(rng.uniform(0, 1, (16, 16)))
            i1 = Tensor(rng.uniform(0, 1, (16, 16)))
            i2 = Tensor(rng.uniform(0, 1, (16, 16)))
            v = task_loss(f, i1, i2, task_objective("mff")).item()
            assert v >= 1e-8 and np.isfinite(v)

    def test_gradient_wrt_fused(self):
        rng = np.random.default_rng(15)
        f = Tensor(rng.uniform(0.25, 0.75, (16, 16)), requires_grad=True)
        i1 = Tensor(rng.uniform(0, 1, (16, 16)))
        i2 = Tensor(rng.uniform(0, 1, (16, 16)))
        err = gradcheck(lambda: task_loss(f, i1, i2, task_objective("ivf")), f)
        assert err < 1e-5


class TestUnifiedLoss:
    def test_all_equal_zero(self):
        img = Tensor(np.random.default_rng(16).uniform(0, 1, (16, 16)))
        assert unified_loss(img, img, img, 0.3, 0.7).item() == pytest.approx(0.0, abs=1e-12)

    def test_w1_one_ignores_second_source(self):
        rng = np.random.default_rng(17)
        f = Tensor(rng.uniform(0, 1, (16, 16)))
        i1 = Tensor(rng.uniform(0, 1, (16, 16)))
        a = unified_loss(f, i1, Tensor(rng.uniform(0, 1, (16, 16))), 1.0, 0.0).item()
        b = unified_loss(f, i1, Tensor(rng.uniform(0, 1, (16, 16))), 1.0, 0.0).item()
        assert a == b

    def test_formula_oracle(self):
        rng = np.random.default_rng(18)
        f = rng.uniform(0, 1, (16, 16))
        i1 = rng.uniform(0, 1, (16, 16))
        i2 = rng.uniform(0, 1, (16, 16))
        want = (0.5 * (1 - oracle_ssim_mean(f, i1)) + 0.5 * (1 - oracle_ssim_mean(f, i2))
                + 20 * (0.5 * ((f - i1) ** 2).mean() + 0.5 * ((f - i2) ** 2).mean()))
        got = unified_loss(Tensor(f), Tensor(i1), Tensor(i2), 0.5, 0.5).item()
        assert got == pytest.approx(want, abs=1e-9)

    def test_weight_constraint(self):
        a = Tensor(np.zeros((16, 16)))
        with pytest.raises(DomainError):
            unified_loss(a, a, a, 0.6, 0.6)
        with pytest.raises(DomainError):
            unified_loss(a, a, a, -0.1, 1.1)

    def test_gradient_wrt_fused(self):
        rng = np.random.default_rng(19)
        f = Tensor(rng.uniform(0.2, 0.8, (16, 16)), requires_grad=True)
        i1 = Tensor(rng.uniform(0, 1, (16, 16)))
        i2 = Tensor(rng.uniform(0, 1, (16, 16)))
        err = gradcheck(lambda: unified_loss(f, i1, i2, 0.4, 0.6), f)
        assert err < 1e-5


class TestInfoWeights:
    def test_identical_sources_split_evenly(self):
        img = Tensor(np.random.default_rng(20).uniform(0, 1, (12, 12)))
        assert info_weights(img, img) == (0.5, 0.5)

    def test_flat_second_source(self):
        rng = np.random.default_rng(21)
        i1 = Tensor(rng.uniform(0, 1, (12, 12)))
        i2 = Tensor(np.full((12, 12), 0.5))
        w1, w2 = info_weights(i1, i2)
        assert w1 > 0.5 > w2

    def test_sums_to_one(self):
        rng = np.random.default_rng(22)
        for _ in range(10):
            i1 = Tensor(rng.uniform(0, 1, (9, 9)))
            i2 = Tensor(rng.uniform(0, 1, (9, 9)))
            w1, w2 = info_weights(i1, i2)
            assert w1 + w2 == 1.0 and w1 >= 0 and w2 >= 0
