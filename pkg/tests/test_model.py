"""Logit interpretations: class posterior, real probability, energy."""

import math

import numpy as np
import pytest
import torch

from jointboost.datapipe import REAL, make_batch
from jointboost.model import (
    ConstantBackbone,
    JointModel,
    LinearBackbone,
    TinyConvBackbone,
    batch_to_tensor,
    class_probs,
    energy,
    real_prob,
)

from conftest import random_batch


class TestLogits:
    def test_constant_zero_backbone_gives_zero_logits(self, rng):
        model = JointModel(ConstantBackbone([0.0, 0.0, 0.0]), num_classes=3)
        batch = random_batch(rng, n=4)
        out = model.logits(batch)
        assert out.shape == (4, 3)
        assert torch.all(out == 0.0)

    def test_identity_linear_backbone_returns_pixels(self):
        backbone = LinearBackbone(3, 3)
        with torch.no_grad():
            backbone.linear.weight.copy_(torch.eye(3))
        model = JointModel(backbone, num_classes=3)
        v = np.array([0.2, 0.5, 0.9], dtype=np.float32)
        batch = make_batch(v.reshape(1, 1, 1, 3), [0], REAL)
        out = model.logits(batch)
        np.testing.assert_allclose(out.detach().numpy()[0], v, rtol=1e-6)

    def test_forward_is_deterministic(self, rng, tiny_model):
        batch = random_batch(rng)
        a = tiny_model.logits(batch).detach().numpy()
        b = tiny_model.logits(batch).detach().numpy()
        assert np.array_equal(a, b)

    def test_nonfinite_input_rejected(self, tiny_model):
        x = torch.full((1, 1, 5, 5), float("nan"))
        with pytest.raises(ValueError):
            tiny_model.logits(x)

    def test_wrong_channel_count_is_configuration_error(self, rng):
        from jointboost.errors import ConfigurationError

        model = JointModel(TinyConvBackbone(in_channels=1, num_classes=5, width=4), num_classes=3)
        batch = random_batch(rng)
        with pytest.raises(ConfigurationError):
            model.logits(batch)


class TestClassProbs:
    def test_symmetric_logits(self):
        p = class_probs(torch.tensor([0.0, 0.0]))
        np.testing.assert_allclose(p.numpy(), [0.5, 0.5], atol=1e-7)

    def test_direct_evaluation(self):
        p = class_probs(torch.tensor([1.0, 0.0], dtype=torch.float64))
        np.testing.assert_allclose(p.numpy(), [0.7310585786300049, 0.2689414213699951], rtol=1e-12)

    def test_huge_logits_do_not_overflow(self):
        p = class_probs(torch.tensor([1000.0, 0.0]))
        assert torch.isfinite(p).all()
        np.testing.assert_allclose(p.numpy(), [1.0, 0.0], atol=1e-6)
        p = class_probs(torch.tensor([1e4, 0.0, -1e4]))
        assert torch.isfinite(p).all()

    def test_shift_invariance(self, rng):
        logits = torch.tensor(rng.normal(size=(100, 7)))
        shifts = torch.tensor(rng.normal(size=(100, 1)) * 50)
        np.testing.assert_allclose(
            class_probs(logits).numpy(), class_probs(logits + shifts).numpy(), atol=1e-6
        )

    def test_argmax_matches_raw_logits(self, rng):
        logits = torch.tensor(rng.normal(size=(200, 5)))
        assert torch.equal(class_probs(logits).argmax(dim=-1), logits.argmax(dim=-1))

    def test_rows_sum_to_one(self, rng):
        logits = torch.tensor(rng.normal(size=(50, 9)) * 10)
        sums = class_probs(logits).sum(dim=-1).numpy()
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


class TestRealProb:
    def test_zero_logit_gives_half(self):
        assert float(real_prob(torch.tensor([0.0, 3.0]), 0)) == pytest.approx(0.5)

    def test_saturation(self):
        assert float(real_prob(torch.tensor([20.0, 0.0], dtype=torch.float64), 0)) == pytest.approx(
            1.0, abs=1e-8
        )

    def test_closed_form_ln3(self):
        assert float(real_prob(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64), 0)) == pytest.approx(0.75, rel=1e-12)

    def test_out_of_range_class(self):
        with pytest.raises(IndexError):
            real_prob(torch.tensor([0.0, 1.0]), 2)
        with pytest.raises(IndexError):
            real_prob(torch.tensor([0.0, 1.0]), -1)

    def test_monotone_in_class_logit(self):
        grid = torch.linspace(-6, 6, 101)
        logits = torch.stack([grid, torch.zeros_like(grid)], dim=1)
        probs = real_prob(logits, 0)
        assert torch.all(probs[1:] > probs[:-1])

    def test_per_image_labels(self, rng):
        logits = torch.tensor(rng.normal(size=(4, 3)))
        labels = torch.tensor([0, 2, 1, 0])
        probs = real_prob(logits, labels)
        for i in range(4):
            assert float(probs[i]) == pytest.approx(float(torch.sigmoid(logits[i, labels[i]])))


class TestEnergy:
    def test_equal_logits_closed_form(self):
        for C in (2, 5, 10):
            for a in (-3.0, 0.0, 2.5):
                e = float(energy(torch.full((C,), a, dtype=torch.float64)))
                assert e == pytest.approx(-a - math.log(C), rel=1e-12)

    def test_ten_zeros(self):
        assert float(energy(torch.zeros(10, dtype=torch.float64))) == pytest.approx(
            -2.302585092994046, rel=1e-12
        )

    def test_huge_logit_no_overflow(self):
        e = float(energy(torch.tensor([1000.0] + [0.0] * 9, dtype=torch.float64)))
        assert math.isfinite(e)
        assert e == pytest.approx(-1000.0, abs=1e-9)

    def test_shift_identity(self, rng):
        logits = torch.tensor(rng.normal(size=(64, 6)))
        for a in (-7.5, 0.3, 40.0):
            np.testing.assert_allclose(
                energy(logits + a).numpy(), (energy(logits) - a).numpy(), atol=1e-6
            )


class TestPixelGradients:
    """Energy and real-prob pixel gradients against central differences."""

    def _fd_grad(self, fn, x, h=1e-3):
        g = torch.zeros_like(x)
        flat = x.flatten()
        gflat = g.flatten()
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                hi = float(fn(x))
                flat[i] = orig - h
                lo = float(fn(x))
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * h)
        return g

    @pytest.fixture
    def double_model(self):
        torch.manual_seed(3)
        model = JointModel(TinyConvBackbone(1, 3, width=3), num_classes=3).double()
        return model

    def _check(self, fn, x):
        x_var = x.clone().requires_grad_(True)
        fn(x_var).backward()
        analytic = x_var.grad
        numeric = self._fd_grad(fn, x.clone())
        denom = np.maximum(np.abs(numeric.numpy()), 1e-4)
        rel = np.abs((analytic - numeric).numpy()) / denom
        assert rel.max() < 1e-3

    def test_energy_gradient(self, rng, double_model):
        x = torch.tensor(rng.uniform(0.2, 0.8, size=(1, 1, 4, 4)), dtype=torch.float64)
        self._check(lambda t: energy(double_model(t)).sum(), x)

    def test_real_prob_gradient(self, rng, double_model):
        x = torch.tensor(rng.uniform(0.2, 0.8, size=(1, 1, 4, 4)), dtype=torch.float64)
        self._check(lambda t: real_prob(double_model(t), 1).sum(), x)
