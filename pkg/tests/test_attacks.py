"""PGD attack mechanics: projection, the descent loop, training-time
attack flavors, the gradual schedule, and early stopping."""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from jointboost.attacks import (
    AttackSpec,
    ScheduleState,
    attack_generated,
    attack_real,
    early_stop_steps,
    project,
    schedule_steps,
    targeted_pgd,
)
from jointboost.datapipe import GENERATED, REAL, make_batch
from jointboost.errors import ConfigurationError, NumericError
from jointboost.losses import bce_loss
from jointboost.model import ConstantBackbone, JointModel

from conftest import random_batch


def quad_spec(**kw):
    base = dict(epsilon=3.0, step_size=1.0, num_steps=10, loss_selector="ce_only",
                clamp_to_range=False)
    base.update(kw)
    return AttackSpec(**base)


class TestProject:
    def test_interior_point_unchanged(self):
        delta = torch.tensor([0.3, 0.4])
        out = project(delta, 1.0)
        assert torch.equal(out, delta)

    def test_rescale_to_boundary(self):
        out = project(torch.tensor([3.0, 4.0], dtype=torch.float64), 1.0)
        np.testing.assert_allclose(out.numpy(), [0.6, 0.8], rtol=1e-12)

    def test_zero_radius(self):
        out = project(torch.tensor([[1.0, -2.0], [0.5, 0.5]]), 0.0)
        assert torch.all(out == 0.0)

    def test_per_image_batching(self, rng):
        delta = torch.tensor(rng.normal(size=(8, 2, 3, 3)))
        out = project(delta, 0.7)
        norms = out.reshape(8, -1).norm(dim=1).numpy()
        assert np.all(norms <= 0.7 + 1e-9)
        small = project(delta * 1e-3, 0.7)
        assert torch.equal(small, delta * 1e-3)

    def test_linf_norm(self):
        out = project(torch.tensor([0.5, -2.0, 0.1]), 0.25, norm="linf")
        np.testing.assert_allclose(out.numpy(), [0.25, -0.25, 0.1], rtol=1e-6)

    def test_direction_preserved(self, rng):
        delta = torch.tensor(rng.normal(size=(4, 10)), dtype=torch.float64)
        out = project(delta, 0.5)
        for i in range(4):
            cos = float(
                (out[i] @ delta[i]) / (out[i].norm() * delta[i].norm())
            )
            assert cos == pytest.approx(1.0, abs=1e-9)


class TestSchedule:
    def test_paper_period_values(self):
        state = ScheduleState(base_steps=1, increment=1, period_iters=1000, max_steps=50)
        state.current_iter = 0
        assert schedule_steps(state) == 1
        state.current_iter = 2500
        assert schedule_steps(state) == 3
        state.current_iter = 10**6
        assert schedule_steps(state) == 50

    def test_nondecreasing(self):
        state = ScheduleState(base_steps=2, increment=3, period_iters=7, max_steps=23)
        values = []
        for it in range(0, 500, 3):
            state.current_iter = it
            values.append(schedule_steps(state))
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert max(values) == 23

    def test_invalid_state(self):
        with pytest.raises(ConfigurationError):
            ScheduleState(base_steps=0, increment=1, period_iters=10, max_steps=5)
        with pytest.raises(ConfigurationError):
            ScheduleState(base_steps=1, increment=1, period_iters=0, max_steps=5)


class TestTargetedPgd:
    def test_zero_steps_is_identity(self, rng, tiny_model):
        batch = random_batch(rng)
        spec = AttackSpec(epsilon=1.0, step_size=0.1, num_steps=0, loss_selector="ce_only")
        out, trace = targeted_pgd(tiny_model, batch, spec=spec)
        assert np.array_equal(out.pixels, batch.pixels)
        assert out.attacked
        assert trace.steps_taken == 0
        assert trace.losses.shape[0] == 1

    def test_zero_radius_is_identity(self, rng, tiny_model):
        batch = random_batch(rng)
        spec = AttackSpec(epsilon=0.0, step_size=0.5, num_steps=5, loss_selector="ce_only")
        out, _ = targeted_pgd(tiny_model, batch, spec=spec)
        assert np.array_equal(out.pixels, batch.pixels)

    def test_one_dimensional_quadratic_pins_at_boundary(self):
        # x0 = 0, loss (x - 5)^2, alpha = 1, eps = 3, T = 10, no clamping:
        # the first step overshoots to 10, projection pins the iterate at 3.
        x0 = torch.zeros((1, 1), dtype=torch.float64)
        loss = lambda x: ((x - 5.0) ** 2).sum(dim=1)
        out, trace = targeted_pgd(None, x0, spec=quad_spec(), loss_fn=loss)
        assert float(out[0, 0]) == pytest.approx(3.0, abs=1e-12)
        assert trace.steps_taken == 10

    def test_matches_projected_recursion_on_random_quadratics(self, rng):
        # Oracle: the closed-form projected-gradient recursion, replayed in
        # float64 numpy, for random diagonal quadratics and random specs.
        for trial in range(25):
            dim = int(rng.integers(1, 3))
            n = int(rng.integers(1, 4))
            w = rng.uniform(0.2, 2.0, size=(n, dim))
            b = rng.uniform(-2.0, 2.0, size=(n, dim))
            x0 = rng.uniform(-1.0, 1.0, size=(n, dim))
            eps = float(rng.uniform(0.1, 5.0))
            alpha = float(rng.uniform(0.01, 0.5))
            steps = int(rng.integers(1, 30))

            wt = torch.tensor(w)
            bt = torch.tensor(b)
            loss = lambda x: (wt * (x - bt) ** 2).sum(dim=1)
            out, trace = targeted_pgd(
                None,
                torch.tensor(x0),
                spec=quad_spec(epsilon=eps, step_size=alpha, num_steps=steps),
                loss_fn=loss,
                record_iterates=True,
            )

            x = x0.copy()
            for t in range(steps):
                grad = 2 * w * (x - b)
                cand = x - alpha * grad
                delta = cand - x0
                norms = np.linalg.norm(delta.reshape(n, -1), axis=1)
                factor = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
                x = x0 + delta * factor[:, None]
                got = trace.iterates[t + 1].numpy()
                np.testing.assert_allclose(got, x, atol=1e-6, err_msg=f"trial {trial} step {t}")

    def test_ball_and_range_fuzz(self, rng, tiny_model):
        # 1000 random attacks; promoted to the acceptance suite as well.
        for _ in range(50):
            batch = random_batch(rng, n=3, size=4)
            eps = float(rng.uniform(0.0, 2.0))
            spec = AttackSpec(
                epsilon=eps,
                step_size=float(rng.uniform(-0.5, 0.5)),
                num_steps=int(rng.integers(0, 6)),
                loss_selector=str(rng.choice(["ce_only", "bce_gen_descend", "bce_real_ascend"])),
            )
            out, _ = targeted_pgd(tiny_model, batch, spec=spec)
            delta = (out.pixels - batch.pixels).reshape(3, -1)
            assert np.all(np.linalg.norm(delta, axis=1) <= eps + 1e-6)
            assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_bit_reproducible(self, rng, tiny_model):
        batch = random_batch(rng)
        spec = AttackSpec(epsilon=1.5, step_size=0.2, num_steps=6, loss_selector="inference_v1")
        a, _ = targeted_pgd(tiny_model, batch, spec=spec)
        b, _ = targeted_pgd(tiny_model, batch, spec=spec)
        assert np.array_equal(a.pixels, b.pixels)

    def test_v2_selector_requires_l0(self, rng, tiny_model):
        batch = random_batch(rng)
        spec = AttackSpec(epsilon=1.0, step_size=0.1, num_steps=2, loss_selector="inference_v2")
        with pytest.raises(ConfigurationError):
            targeted_pgd(tiny_model, batch, spec=spec)

    def test_nonfinite_gradient_aborts(self):
        x0 = torch.ones((1, 1), dtype=torch.float64)
        loss = lambda x: torch.log(-x).sum(dim=1)  # nan gradient at positive x
        with pytest.raises(NumericError):
            targeted_pgd(None, x0, spec=quad_spec(num_steps=2), loss_fn=loss)

    def test_trace_records_descending_losses(self, rng, tiny_model):
        batch = random_batch(rng, n=4)
        spec = AttackSpec(epsilon=5.0, step_size=0.05, num_steps=8, loss_selector="ce_only")
        _, trace = targeted_pgd(tiny_model, batch, spec=spec)
        assert trace.losses.shape == (9, 4)
        means = trace.losses.mean(axis=1)
        assert means[-1] <= means[0]


class TestAttackReal:
    def test_flat_loss_leaves_input_unchanged(self, rng):
        model = JointModel(ConstantBackbone([0.0, 0.0, 0.0]), num_classes=3)
        batch = random_batch(rng, provenance=REAL)
        spec = AttackSpec(epsilon=1.0, step_size=0.25, num_steps=4, loss_selector="bce_real_ascend")
        out, _ = attack_real(model, batch, spec)
        assert np.array_equal(out.pixels, batch.pixels)
        assert out.attacked

    def test_ascends_real_bce(self, rng, tiny_model):
        batch = random_batch(rng, n=8, provenance=REAL)
        spec = AttackSpec(epsilon=2.0, step_size=0.1, num_steps=5, loss_selector="bce_real_ascend")
        out, trace = attack_real(tiny_model, batch, spec)
        with torch.no_grad():
            from jointboost.model import batch_to_tensor

            before = bce_loss(tiny_model(batch_to_tensor(batch)), torch.from_numpy(batch.labels), "real").mean()
            after = bce_loss(tiny_model(batch_to_tensor(out)), torch.from_numpy(out.labels), "real").mean()
        assert float(after) >= float(before)
        # The trace shows the ascended objective rising.
        assert trace.losses.mean(axis=1)[-1] >= trace.losses.mean(axis=1)[0]

    def test_published_setting_accepted(self):
        spec = AttackSpec(epsilon=1.0, step_size=0.25, num_steps=4, loss_selector="bce_real_ascend")
        assert spec.epsilon == 1.0 and spec.step_size == 0.25 and spec.num_steps == 4

    def test_wrong_selector_rejected(self, rng, tiny_model):
        batch = random_batch(rng, provenance=REAL)
        spec = AttackSpec(epsilon=1.0, step_size=0.25, num_steps=4, loss_selector="ce_only")
        with pytest.raises(ConfigurationError):
            attack_real(tiny_model, batch, spec)

    def test_generated_batch_rejected(self, rng, tiny_model):
        batch = random_batch(rng, provenance=GENERATED)
        spec = AttackSpec(epsilon=1.0, step_size=0.25, num_steps=4, loss_selector="bce_real_ascend")
        with pytest.raises(ConfigurationError):
            attack_real(tiny_model, batch, spec)


class ScriptedLogitModel(nn.Module):
    """Returns pre-scripted class-0 logits per forward call, with zero
    pixel gradient, so attack iterates never move and the real-probability
    trajectory is fully fabricated."""

    def __init__(self, probs_per_call):
        super().__init__()
        self.logits_per_call = [math.log(p / (1 - p)) for p in probs_per_call]
        self.calls = 0
        self.num_classes = 2

    def forward(self, x):
        value = self.logits_per_call[min(self.calls, len(self.logits_per_call) - 1)]
        self.calls += 1
        zero = x.flatten(1).sum(dim=1, keepdim=True) * 0.0
        col = zero + value
        return torch.cat([col, zero - 5.0], dim=1)


class TestEarlyStop:
    def _gen_batch(self, rng, n=3):
        return random_batch(rng, n=n, num_classes=2, provenance=GENERATED)

    def _real_ref(self, rng, n=3):
        return random_batch(rng, n=n, num_classes=2, provenance=REAL)

    def _run(self, rng, halt_probs, ref_prob, steps):
        # Call order per step: one gradient forward, one halt-check forward.
        # The reference batch consumes the first forward.
        per_call = [ref_prob]
        for p in halt_probs:
            per_call.extend([0.5, p])
        model = ScriptedLogitModel(per_call)
        gen = self._gen_batch(rng)
        ref = self._real_ref(rng)
        gen.labels[:] = 0
        ref.labels[:] = 0
        spec = AttackSpec(
            epsilon=1.0, step_size=0.1, num_steps=steps,
            loss_selector="bce_gen_descend", early_stop=True,
        )
        return attack_generated(model, gen, ref, spec), gen

    def test_immediate_violation_returns_clean_iterate(self, rng):
        (out, trace), gen = self._run(rng, halt_probs=[0.9], ref_prob=0.8, steps=4)
        assert trace.steps_taken == 0
        assert trace.halted_at == 1
        assert np.array_equal(out.pixels, gen.pixels)
        assert out.attacked  # the zero-step iterate still counts as attacked

    def test_halt_index_matches_bruteforce_on_fabricated_trajectories(self, rng):
        # Acceptance-grade sweep: 100 fabricated probability trajectories.
        ref_prob = 0.7
        for case in range(100):
            steps = int(rng.integers(1, 8))
            probs = rng.uniform(0.4, 1.0, size=steps).tolist()
            (out, trace), _ = self._run(rng, halt_probs=probs, ref_prob=ref_prob, steps=steps)

            violations = [p > ref_prob for p in probs]
            expected = max(
                (t for t in range(steps + 1) if not any(violations[:t])), default=0
            )
            assert trace.steps_taken == expected, f"case {case}: {probs}"
            assert trace.steps_taken == early_stop_steps(violations)

    def test_no_early_stop_runs_full_schedule(self, rng):
        (out, trace), _ = self._run(rng, halt_probs=[0.1, 0.2, 0.3], ref_prob=0.8, steps=3)
        assert trace.steps_taken == 3
        assert trace.halted_at is None

    def test_zero_steps_identity(self, rng, tiny_model):
        gen = self._gen_batch(rng)
        gen.labels[:] = np.clip(gen.labels, 0, 2)
        spec = AttackSpec(epsilon=1.0, step_size=0.1, num_steps=0, loss_selector="bce_gen_descend")
        model = JointModel(ConstantBackbone([0.0, 0.0]), num_classes=2)
        out, trace = attack_generated(model, gen, None, spec, schedule=None)
        assert np.array_equal(out.pixels, gen.pixels)

    def test_missing_reference_with_early_stop(self, rng, tiny_model):
        gen = random_batch(rng, provenance=GENERATED)
        spec = AttackSpec(
            epsilon=1.0, step_size=0.1, num_steps=3,
            loss_selector="bce_gen_descend", early_stop=True,
        )
        with pytest.raises(ConfigurationError):
            attack_generated(tiny_model, gen, None, spec)

    def test_schedule_controls_step_count(self, rng, tiny_model):
        gen = random_batch(rng, provenance=GENERATED)
        spec = AttackSpec(epsilon=5.0, step_size=0.01, num_steps=99, loss_selector="bce_gen_descend")
        sched = ScheduleState(base_steps=1, increment=1, period_iters=10, max_steps=50)
        sched.current_iter = 25
        out, trace = attack_generated(tiny_model, gen, None, spec, schedule=sched)
        assert trace.steps_taken == 3

    def test_per_image_granularity_freezes_individually(self, rng):
        # Image 0 crosses the threshold at step 1 (prob 0.9 > ref), image 1
        # never does; per-image mode freezes only image 0.
        class PerImageScripted(nn.Module):
            def __init__(self):
                super().__init__()
                self.calls = 0
                self.num_classes = 2

            def forward(self, x):
                zero = x.flatten(1).sum(dim=1, keepdim=True) * 0.0
                if x.shape[0] == 1:  # reference batch
                    col = zero + math.log(0.8 / 0.2)
                else:
                    probs = [0.9, 0.1]
                    col = zero + torch.tensor(
                        [math.log(p / (1 - p)) for p in probs]
                    ).reshape(-1, 1)
                self.calls += 1
                return torch.cat([col, zero - 5.0], dim=1)

        gen = random_batch(rng, n=2, num_classes=2, provenance=GENERATED)
        gen.labels[:] = 0
        ref = random_batch(rng, n=1, num_classes=2, provenance=REAL)
        ref.labels[:] = 0
        spec = AttackSpec(
            epsilon=1.0, step_size=0.1, num_steps=3, loss_selector="bce_gen_descend",
            early_stop=True, early_stop_per_image=True,
        )
        out, trace = attack_generated(PerImageScripted(), gen, ref, spec)
        assert trace.per_image_steps is not None
        assert trace.per_image_steps[0] == 0
        assert trace.per_image_steps[1] == 3

    def test_published_generated_setting_accepted(self):
        spec = AttackSpec(epsilon=10.0, step_size=0.1, num_steps=1, loss_selector="bce_gen_descend")
        assert spec.epsilon == 10.0 and spec.step_size == 0.1
