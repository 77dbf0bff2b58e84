"""Targeted PGD with an explicit epsilon-ball projection.

One sequential loop drives every pixel-space refinement in the package:
projected descent (attacks, PGD boosting), plain gradient descent, and
noisy descent (SGLD boosting). Training-time attacks come in two flavors:

* real images ascend their discrimination loss (pushed to look less
  real), realized by negating the step size in the descent update;
* generated images descend theirs, with the step count taken from a
  gradual schedule and an early-stopping rule that halts the moment the
  perturbed fakes look more real (higher mean real probability) than the
  perturbed reals of the same iteration.

Attacks are deterministic: fixed inputs and spec reproduce bit-identical
outputs. Independent batches may be attacked concurrently against a
read-only model snapshot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datapipe import GENERATED, REAL, ImageBatch
from .errors import ConfigurationError, NumericError
from .losses import L0Reference, bce_loss, ce_loss, inference_loss_v1, inference_v2_objective
from .model import JointModel, batch_to_tensor, real_prob, tensor_to_pixels

LOSS_SELECTORS = (
    "bce_real_ascend",
    "bce_gen_descend",
    "inference_v1",
    "inference_v2",
    "ce_only",
)


@dataclass
class AttackSpec:
    """Full parameterization of one PGD attack.

    ``epsilon`` is the ball radius in the chosen norm (L2 over the whole
    image by default). The sign of ``step_size`` encodes descent
    (positive) versus ascent (negative) in the update
    ``delta <- project(delta - step_size * grad)``.
    """

    epsilon: float
    step_size: float
    num_steps: int
    loss_selector: str
    early_stop: bool = False
    clamp_to_range: bool = True
    norm: str = "l2"
    early_stop_per_image: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.num_steps < 0:
            raise ConfigurationError("num_steps must be >= 0")
        if self.loss_selector not in LOSS_SELECTORS:
            raise ConfigurationError(
                f"loss_selector must be one of {LOSS_SELECTORS}, got {self.loss_selector!r}"
            )
        if self.norm not in ("l2", "linf"):
            raise ConfigurationError(f"norm must be 'l2' or 'linf', got {self.norm!r}")


@dataclass
class ScheduleState:
    """Gradual attack schedule: step count grows every ``period_iters``."""

    base_steps: int = 1
    increment: int = 1
    period_iters: int = 1000
    max_steps: int = 50
    current_iter: int = 0

    def __post_init__(self):
        if not (1 <= self.base_steps <= self.max_steps):
            raise ConfigurationError("need 1 <= base_steps <= max_steps")
        if self.period_iters < 1:
            raise ConfigurationError("period_iters must be >= 1")
        if self.increment < 0:
            raise ConfigurationError("increment must be >= 0")


def schedule_steps(state: ScheduleState) -> int:
    """Current attack step count: min(max, base + inc * floor(iter / period))."""
    grown = state.base_steps + state.increment * (state.current_iter // state.period_iters)
    return min(state.max_steps, grown)


def project(delta: torch.Tensor, epsilon: float, norm: str = "l2") -> torch.Tensor:
    """Project perturbations back into the epsilon ball.

    Tensors with more than one dimension are treated as a batch with the
    ball applied per image; 1-D tensors are a single flattened
    perturbation. Interior points are returned unchanged; exterior points
    are rescaled to norm exactly epsilon with direction preserved.
    """
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    if epsilon == 0:
        return torch.zeros_like(delta)
    if norm == "linf":
        return delta.clamp(-epsilon, epsilon)
    if norm != "l2":
        raise ConfigurationError(f"unknown norm {norm!r}")
    flat = delta.reshape(1, -1) if delta.ndim <= 1 else delta.reshape(delta.shape[0], -1)
    norms = flat.norm(dim=1)
    factor = torch.where(norms > epsilon, epsilon / norms, torch.ones_like(norms))
    scaled = flat * factor.unsqueeze(1)
    return scaled.reshape(delta.shape)


@dataclass
class AttackTrace:
    """Per-step record of one attack: loss at iterate 0..steps_taken."""

    losses: np.ndarray
    steps_taken: int
    halted_at: Optional[int] = None
    per_image_steps: Optional[np.ndarray] = None
    iterates: Optional[list] = None

    def records(self) -> list:
        out = []
        for step in range(self.losses.shape[0]):
            row = self.losses[step]
            out.append(
                {
                    "step": step,
                    "loss_mean": float(row.mean()),
                    "loss": [float(v) for v in row],
                }
            )
        return out


def dump_traces(path, traces: Sequence[AttackTrace]) -> None:
    """Write per-step trace records as line-delimited JSON."""
    with open(path, "w") as f:
        for i, trace in enumerate(traces):
            for rec in trace.records():
                rec["batch"] = i
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def resolve_loss(
    selector: str,
    model: JointModel,
    labels: torch.Tensor,
    l0: Optional[L0Reference] = None,
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Map a loss selector onto a per-sample objective of the input pixels.

    The returned callable is what the descent update minimizes; for
    ``inference_v2`` that is the anchored objective (quadratic with a plus
    sign), which requires the trained reference level ``l0``.
    """
    if selector == "bce_real_ascend":
        return lambda x: bce_loss(model(x), labels, "real")
    if selector == "bce_gen_descend":
        return lambda x: bce_loss(model(x), labels, "generated")
    if selector == "ce_only":
        return lambda x: ce_loss(model(x), labels)
    if selector == "inference_v1":
        return lambda x: inference_loss_v1(model(x), labels)
    if selector == "inference_v2":
        if l0 is None:
            raise ConfigurationError("inference_v2 needs the trained l0 reference")
        return lambda x: inference_v2_objective(model(x), labels, l0)
    raise ConfigurationError(f"unknown loss selector {selector!r}")


def refine_loop(
    x0: torch.Tensor,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    num_steps: int,
    step_size: float,
    epsilon: Optional[float] = None,
    norm: str = "l2",
    clamp_to_range: bool = True,
    noise_sigma: float = 0.0,
    generator: Optional[torch.Generator] = None,
    halt_check: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    record_iterates: bool = False,
) -> tuple:
    """Shared descent loop: delta_{t+1} = project(delta_t - alpha * grad) from delta_0 = 0.

    ``epsilon=None`` disables projection (plain or Langevin descent);
    ``noise_sigma > 0`` adds per-step Gaussian noise before clamping.
    ``halt_check`` receives each candidate iterate and returns a violation
    flag (scalar bool tensor) or a per-image mask; violating images keep
    their last compliant iterate and take no further steps.
    """
    x = x0.detach().clone()
    n = x.shape[0]
    loss_rows = []
    iterates = [x.detach().clone()] if record_iterates else None
    steps_taken = 0
    halted_at = None
    per_image_steps = None
    active = None

    for t in range(num_steps):
        x_var = x.detach().clone().requires_grad_(True)
        per_sample = loss_fn(x_var)
        if per_sample.shape != (n,):
            raise ConfigurationError(
                f"loss function must return one value per image, got shape {tuple(per_sample.shape)}"
            )
        per_sample.sum().backward()
        grad = x_var.grad
        if grad is None or not torch.isfinite(grad).all():
            raise NumericError(
                f"non-finite or missing gradient at step {t} "
                f"(loss range [{float(per_sample.min())}, {float(per_sample.max())}])"
            )
        loss_rows.append(per_sample.detach().to(torch.float64).cpu().numpy())

        cand = x - step_size * grad.detach()
        if noise_sigma > 0.0:
            noise = torch.empty_like(cand).normal_(generator=generator)
            cand = cand + noise_sigma * noise
        if epsilon is not None:
            cand = x0 + project(cand - x0, epsilon, norm)
        if clamp_to_range:
            cand = cand.clamp(0.0, 1.0)

        if halt_check is not None:
            violated = halt_check(cand.detach())
            if violated.ndim == 0:
                if bool(violated):
                    halted_at = t + 1
                    break
            else:
                if active is None:
                    active = torch.ones(n, dtype=torch.bool)
                    per_image_steps = np.zeros(n, dtype=np.int64)
                keep = active & ~violated
                shape = (n,) + (1,) * (x.ndim - 1)
                x = torch.where(keep.reshape(shape), cand, x)
                per_image_steps[keep.numpy()] += 1
                if violated.any():
                    halted_at = t + 1 if halted_at is None else halted_at
                active = keep
                steps_taken = int(per_image_steps.max())
                if record_iterates:
                    iterates.append(x.detach().clone())
                if not bool(active.any()):
                    break
                continue

        x = cand
        steps_taken += 1
        if record_iterates:
            iterates.append(x.detach().clone())

    if len(loss_rows) <= steps_taken:
        with torch.no_grad():
            final = loss_fn(x)
        loss_rows.append(final.detach().to(torch.float64).cpu().numpy())

    trace = AttackTrace(
        losses=np.stack(loss_rows),
        steps_taken=steps_taken,
        halted_at=halted_at,
        per_image_steps=per_image_steps,
        iterates=iterates,
    )
    return x.detach(), trace


def targeted_pgd(
    model: Optional[JointModel],
    x,
    c=None,
    spec: AttackSpec = None,
    loss_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    l0: Optional[L0Reference] = None,
    halt_check=None,
    record_iterates: bool = False,
) -> tuple:
    """Targeted PGD on a batch: returns (adversarial batch, trace).

    ``x`` may be an ImageBatch (labels default to the batch's own) or a
    raw tensor. The loss defaults to the spec's selector; a custom
    per-sample callable of the pixels may be supplied instead. The output
    stays within the per-image epsilon ball of the input and, when
    clamping is on, inside the valid pixel range after every step.
    """
    if spec is None:
        raise ConfigurationError("targeted_pgd requires an AttackSpec")
    is_batch = isinstance(x, ImageBatch)
    x0 = batch_to_tensor(x) if is_batch else torch.as_tensor(x)
    if is_batch and c is None:
        c = torch.from_numpy(x.labels)
    if loss_fn is None:
        if model is None:
            raise ConfigurationError("need a model when no explicit loss function is given")
        loss_fn = resolve_loss(spec.loss_selector, model, torch.as_tensor(c), l0)

    x_adv, trace = refine_loop(
        x0,
        loss_fn,
        num_steps=spec.num_steps,
        step_size=spec.step_size,
        epsilon=spec.epsilon,
        norm=spec.norm,
        clamp_to_range=spec.clamp_to_range,
        halt_check=halt_check,
        record_iterates=record_iterates,
    )
    if is_batch:
        return x.with_pixels(tensor_to_pixels(x_adv), attacked=True), trace
    return x_adv, trace


def attack_real(model: JointModel, x_real: ImageBatch, spec: AttackSpec) -> tuple:
    """Ascend the real-branch discrimination loss on a real batch.

    The ascent direction is realized by negating the configured step size
    inside the descent update, so a positive step size in the spec pushes
    real images away from the real manifold.
    """
    if not x_real.is_all(REAL):
        raise ConfigurationError("attack_real expects a batch flagged real")
    if spec.loss_selector != "bce_real_ascend":
        raise ConfigurationError("attack_real requires loss_selector 'bce_real_ascend'")
    ascent = replace(spec, step_size=-spec.step_size)
    return targeted_pgd(model, x_real, spec=ascent)


def early_stop_steps(violations: Sequence[bool]) -> int:
    """Largest t such that the halt condition held at every step <= t.

    ``violations[t-1]`` flags whether candidate step t violated; the
    attack keeps the last compliant iterate, so the answer is one less
    than the first violating step (or the full length when none violate).
    """
    for i, v in enumerate(violations, start=1):
        if v:
            return i - 1
    return len(violations)


def attack_generated(
    model: JointModel,
    x_gen: ImageBatch,
    x_real_ref: Optional[ImageBatch],
    spec: AttackSpec,
    schedule: Optional[ScheduleState] = None,
) -> tuple:
    """Descend the generated-branch discrimination loss on a fake batch.

    The step count comes from the gradual schedule when one is given.
    With early stopping, the mean real probability of the perturbed fakes
    is compared after each step against the mean real probability of the
    same-iteration attacked reals; on violation the last compliant
    iterate is returned (the zero-perturbation iterate if the first step
    already violates). Per-image granularity freezes violating images
    individually instead of halting the whole batch.
    """
    if not x_gen.is_all(GENERATED):
        raise ConfigurationError("attack_generated expects a batch flagged generated")
    if spec.loss_selector != "bce_gen_descend":
        raise ConfigurationError("attack_generated requires loss_selector 'bce_gen_descend'")
    num_steps = schedule_steps(schedule) if schedule is not None else spec.num_steps

    halt_check = None
    if spec.early_stop:
        if x_real_ref is None or x_real_ref.n == 0:
            raise ConfigurationError("early stopping needs the attacked real reference batch")
        with torch.no_grad():
            ref_logits = model(batch_to_tensor(x_real_ref))
            ref_mean = real_prob(ref_logits, torch.from_numpy(x_real_ref.labels)).mean()
        labels = torch.from_numpy(x_gen.labels)

        def halt_check(cand):
            with torch.no_grad():
                probs = real_prob(model(cand), labels)
            if spec.early_stop_per_image:
                return probs > ref_mean
            return (probs.mean() > ref_mean).reshape(())

    run_spec = replace(spec, num_steps=num_steps)
    return targeted_pgd(model, x_gen, spec=run_spec, halt_check=halt_check)
