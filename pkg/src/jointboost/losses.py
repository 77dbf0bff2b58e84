"""Scalar objectives: classification CE, discrimination BCE, the combined
training loss, the two inference losses, and the real-image reference level.

All per-sample functions are pure maps of (logits, labels, flags) and are
safe to evaluate concurrently; ``estimate_l0`` keeps a single-writer
accumulator. The BCE branches are computed in softplus form so logit
magnitudes of 100 and beyond stay finite:

    real image:      -log sigmoid(f_c)     = softplus(-f_c)
    generated image: -log(1 - sigmoid(f_c)) = softplus(f_c)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F

from .datapipe import GENERATED, REAL, ImageBatch
from .errors import ConfigurationError, DataError
from .model import JointModel, batch_to_tensor, pick_class_logit


@dataclass(frozen=True)
class L0Reference:
    """Mean discrimination loss of real images; the anchor for the v2 objective."""

    value: float
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigurationError("L0Reference needs sample_count >= 1")
        if not (self.value >= 0.0):
            raise ConfigurationError("L0Reference value must be a finite nonnegative real")


def ce_loss(logits: torch.Tensor, c) -> torch.Tensor:
    """Per-sample cross-entropy -log softmax(logits)[c], stably via log-softmax."""
    logits = torch.as_tensor(logits)
    log_probs = F.log_softmax(logits, dim=-1)
    return -pick_class_logit(log_probs, c)


def bce_loss(logits: torch.Tensor, c, provenance: str) -> torch.Tensor:
    """Per-sample discrimination loss on the class-c logit.

    ``provenance`` selects the branch: ``"real"`` penalizes low real
    probability, ``"generated"`` penalizes high real probability.
    """
    f_c = pick_class_logit(logits, c)
    if provenance == "real":
        return F.softplus(-f_c)
    if provenance == "generated":
        return F.softplus(f_c)
    raise ConfigurationError(f"provenance must be 'real' or 'generated', got {provenance!r}")


def inference_loss_v1(logits: torch.Tensor, c) -> torch.Tensor:
    """Refinement loss: classification CE minus the generated-branch BCE.

    Inputs are synthesized by definition at refinement time, so the BCE
    term always uses the generated branch. Descending this both aligns the
    image with its class and raises its real probability; the BCE term is
    unanchored and can grow without bound.
    """
    return ce_loss(logits, c) - bce_loss(logits, c, "generated")


def inference_loss_v2(logits: torch.Tensor, c, l0: L0Reference) -> torch.Tensor:
    """Anchored refinement loss value: CE - 0.5 * (BCE_generated - l0)^2.

    As a function of the BCE term this is maximized exactly at the anchor,
    so images whose discrimination loss already sits at the real-image
    level contribute no quadratic gradient.
    """
    quad = 0.5 * (bce_loss(logits, c, "generated") - float(l0.value)) ** 2
    return ce_loss(logits, c) - quad


def inference_v2_objective(logits: torch.Tensor, c, l0: L0Reference) -> torch.Tensor:
    """Descent objective for anchored refinement: CE + 0.5 * (BCE_generated - l0)^2.

    Minimizing must pull the generated-branch BCE toward its real-image
    reference (and hold it there) while reducing CE; the quadratic
    therefore enters with a plus sign here, opposite to the sign in the
    reported ``inference_loss_v2`` value, whose landscape peaks at the
    anchor. Using the reported form as a descent target would push the
    BCE term away from the anchor instead of toward it.
    """
    quad = 0.5 * (bce_loss(logits, c, "generated") - float(l0.value)) ** 2
    return ce_loss(logits, c) + quad


@dataclass
class TrainingLossTerms:
    """The combined loss and its four logged sub-terms (batch means)."""

    total: torch.Tensor
    ce_real: torch.Tensor
    ce_generated: torch.Tensor
    bce_real: torch.Tensor
    bce_generated: torch.Tensor

    def detached(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "ce_real": float(self.ce_real.detach()),
            "ce_generated": float(self.ce_generated.detach()),
            "bce_real": float(self.bce_real.detach()),
            "bce_generated": float(self.bce_generated.detach()),
        }


def _check_side(batch: ImageBatch, flag: int, side: str) -> None:
    if batch.provenance is None:
        raise DataError(f"{side} batch is missing provenance flags")
    if not batch.is_all(flag):
        raise DataError(f"{side} batch carries wrong provenance flags")
    if batch.n < 1:
        raise DataError(f"{side} batch is empty")


def training_loss(
    model: JointModel,
    real_batch: ImageBatch,
    gen_batch: ImageBatch,
    require_attacked: bool = False,
) -> TrainingLossTerms:
    """Combined objective on one real and one generated batch.

    Total = mean CE(real) + mean CE(generated) + mean BCE(real) +
    mean BCE(generated); the four means are returned individually for
    logging. CE on generated images targets their conditional class label.
    With ``require_attacked`` the trainer enforces that only attacked
    batches ever reach the loss.
    """
    _check_side(real_batch, REAL, "real")
    _check_side(gen_batch, GENERATED, "generated")
    if require_attacked and not (real_batch.attacked and gen_batch.attacked):
        raise DataError("training loss received a batch that did not pass the attack stage")

    real_logits = model.logits(batch_to_tensor(real_batch))
    gen_logits = model.logits(batch_to_tensor(gen_batch))
    real_c = torch.from_numpy(real_batch.labels)
    gen_c = torch.from_numpy(gen_batch.labels)

    ce_real = ce_loss(real_logits, real_c).mean()
    ce_gen = ce_loss(gen_logits, gen_c).mean()
    bce_real = bce_loss(real_logits, real_c, "real").mean()
    bce_gen = bce_loss(gen_logits, gen_c, "generated").mean()
    total = ce_real + ce_gen + bce_real + bce_gen
    return TrainingLossTerms(total, ce_real, ce_gen, bce_real, bce_gen)


def estimate_l0(model: JointModel, real_stream: Iterable[ImageBatch]) -> L0Reference:
    """Reference level: mean inference-branch BCE over real images.

    The anchor is the level the refinement objective's own BCE expression
    takes on real data, so it is evaluated with the generated branch (the
    branch used at refinement time) on real images. Real inputs then sit
    at the anchor and receive no quadratic pull, while degraded inputs are
    pulled up to the same level and no further. The estimate streams in
    float64 and is independent of how the pass is split into batches.
    """
    total = 0.0
    count = 0
    with torch.no_grad():
        for batch in real_stream:
            _check_side(batch, REAL, "real")
            logits = model.logits(batch_to_tensor(batch))
            per = bce_loss(logits, torch.from_numpy(batch.labels), "generated")
            total += float(per.double().sum())
            count += batch.n
    if count == 0:
        raise DataError("estimate_l0 needs at least one real sample")
    return L0Reference(value=total / count, sample_count=count)
